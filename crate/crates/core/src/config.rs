//! Experiment configuration (JSON).
//!
//! Every field has a default, so `{}` is a valid config describing the
//! standard setup: 50 clients, 500 rounds, `Q = 10`, a pool of 4096 seeds,
//! batch 8, `η = 5·10⁻⁵`, `μ = 10⁻⁴`, 1000 sweep samples and Dir(1.0) data.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::allocator::{ClientPick, SelectionPolicy, SweepOptions};
use crate::error::{Error, Result};
use crate::federation::{BatchMode, ProtocolConfig, Scheme};
use crate::metrics::BlockActivationMatrix;
use crate::rng::{derive_seed, BlockLayout, PerturbationMode};
use crate::vram::{ArchConfig, VramProfile};
use crate::workloads::{BlockModel, QuadraticModel, TinyTransformerSpec};
use crate::zo::{FdScheme, PerturbationScope};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "snake_case")]
pub enum ModelConfig {
    Quadratic {
        blocks: usize,
        block_dim: usize,
        /// Standard deviation of the per-client targets.
        #[serde(default = "one")]
        target_spread: f64,
        #[serde(default)]
        noise_sigma: f64,
    },
    TinyTransformer(TinyTransformerSpec),
}

fn one() -> f64 {
    1.0
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::TinyTransformer(TinyTransformerSpec::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataConfig {
    /// Token sequences with class marker tokens (transformer only).
    Synthetic { size: usize, holdout: usize },
    Jsonl { path: PathBuf, holdout: usize },
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Synthetic {
            size: 4000,
            holdout: 400,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VramConfig {
    /// Per-client capacity `ψ_max,n`.
    pub psi_max: Option<Vec<f64>>,
    /// Per-client capacity expressed as a number of affordable blocks.
    pub block_capacities: Option<Vec<usize>>,
    /// Model footprint; defaults to the parameter count.
    pub psi_md: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AllocatorConfig {
    pub policy: SelectionPolicy,
    /// Fixed activation matrix as `M` rows of `N` characters `0`/`1`; skips the sweep.
    pub fixed: Option<Vec<String>>,
    pub pick: ClientPick,
    pub per_client_tau: bool,
    pub include_zero: bool,
}

impl Default for AllocatorConfig {
    fn default() -> Self {
        Self {
            policy: SelectionPolicy::default(),
            fixed: None,
            pick: ClientPick::default(),
            per_client_tau: false,
            include_zero: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedConfig {
    pub master: u64,
    pub data: u64,
    pub sweep: u64,
}

impl Default for SeedConfig {
    fn default() -> Self {
        Self {
            master: 0,
            data: 1,
            sweep: 2,
        }
    }
}

impl SeedConfig {
    /// All three seeds derived from one override value.
    pub fn from_override(seed: u64) -> Self {
        Self {
            master: seed,
            data: derive_seed(seed, &[1]),
            sweep: derive_seed(seed, &[2]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scheme: Scheme,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub clients: usize,
    pub rounds: usize,
    pub q: usize,
    pub pool_size: usize,
    pub batch_size: usize,
    pub eta: f64,
    pub mu: f64,
    pub sweep_samples: usize,
    pub concentration: f64,
    pub perturbation: PerturbationMode,
    pub scope: PerturbationScope,
    pub fd: FdScheme,
    pub batch_mode: BatchMode,
    pub fedzo_shared_perturbation: bool,
    /// Standard deviation of the initial weights.
    pub init_scale: f64,
    pub eval_interval: usize,
    /// Evaluation target used for rounds-to-target; recorded only.
    pub target: Option<f64>,
    pub vram: VramConfig,
    pub allocator: AllocatorConfig,
    pub seeds: SeedConfig,
    /// Write `trace.jsonl` next to the metrics.
    pub trace: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::Zorba,
            model: ModelConfig::default(),
            data: DataConfig::default(),
            clients: 50,
            rounds: 500,
            q: 10,
            pool_size: 4096,
            batch_size: 8,
            eta: 5e-5,
            mu: 1e-4,
            sweep_samples: 1000,
            concentration: 1.0,
            perturbation: PerturbationMode::UnitSphere,
            scope: PerturbationScope::Masked,
            fd: FdScheme::Forward,
            batch_mode: BatchMode::PerRound,
            fedzo_shared_perturbation: false,
            init_scale: 0.02,
            eval_interval: 10,
            target: None,
            vram: VramConfig::default(),
            allocator: AllocatorConfig::default(),
            seeds: SeedConfig::default(),
            trace: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn blocks(&self) -> usize {
        match &self.model {
            ModelConfig::Quadratic { blocks, .. } => *blocks,
            ModelConfig::TinyTransformer(s) => s.blocks,
        }
    }

    pub fn protocol(&self) -> ProtocolConfig {
        ProtocolConfig {
            q: self.q,
            eta: self.eta,
            mu: self.mu,
            batch_size: self.batch_size,
            mode: self.perturbation,
            scope: self.scope,
            fd: self.fd,
            batch_mode: self.batch_mode,
            fedzo_shared_perturbation: self.fedzo_shared_perturbation,
        }
    }

    pub fn sweep_options(&self) -> SweepOptions {
        SweepOptions {
            samples: self.sweep_samples,
            seed: self.seeds.sweep,
            include_zero: self.allocator.include_zero,
            per_client_tau: self.allocator.per_client_tau,
            pick: self.allocator.pick,
        }
    }

    pub fn build_model(&self) -> Result<BlockModel> {
        match &self.model {
            ModelConfig::Quadratic {
                blocks,
                block_dim,
                target_spread,
                noise_sigma,
            } => {
                let layout = BlockLayout::uniform(*blocks, *block_dim)?;
                let q = QuadraticModel::random(
                    layout,
                    self.clients,
                    *target_spread,
                    *noise_sigma,
                    derive_seed(self.seeds.data, &[0x0A]),
                )?;
                Ok(BlockModel::quadratic(q))
            }
            ModelConfig::TinyTransformer(spec) => BlockModel::transformer(*spec),
        }
    }

    /// Architecture seen by the VRAM model.
    pub fn arch(&self) -> ArchConfig {
        match &self.model {
            ModelConfig::Quadratic {
                blocks, block_dim, ..
            } => ArchConfig {
                batch: self.batch_size,
                seq_len: 1,
                hidden: *block_dim,
                heads: 1,
                ffn_ratio: 4,
                blocks: *blocks,
            },
            ModelConfig::TinyTransformer(s) => ArchConfig {
                batch: self.batch_size,
                seq_len: s.seq_len,
                hidden: s.hidden,
                heads: s.heads,
                ffn_ratio: s.ffn_ratio,
                blocks: s.blocks,
            },
        }
    }

    pub fn vram_profile(&self, param_count: usize) -> Result<VramProfile> {
        let arch = self.arch();
        let psi_md = self.vram.psi_md.unwrap_or(param_count as f64);
        let profile = match (&self.vram.psi_max, &self.vram.block_capacities) {
            (Some(_), Some(_)) => {
                return Err(Error::invalid(
                    "vram.psi_max and vram.block_capacities are mutually exclusive",
                ))
            }
            (Some(caps), None) => VramProfile {
                psi_md,
                psi_max: caps.clone(),
            },
            (None, Some(blocks)) => VramProfile::from_block_capacities(psi_md, &arch, blocks),
            (None, None) => {
                VramProfile::from_block_capacities(psi_md, &arch, &vec![arch.blocks; self.clients])
            }
        };
        if profile.clients() != self.clients {
            return Err(Error::invalid(format!(
                "VRAM profile lists {} clients, config has {}",
                profile.clients(),
                self.clients
            )));
        }
        profile.validate(&arch)?;
        Ok(profile)
    }

    pub fn fixed_activation(&self) -> Result<Option<BlockActivationMatrix>> {
        let Some(rows) = &self.allocator.fixed else {
            return Ok(None);
        };
        let a = BlockActivationMatrix::parse_rows(rows)?;
        if a.blocks() != self.blocks() || a.clients() != self.clients {
            return Err(Error::invalid(format!(
                "fixed activation is {}×{}, expected {}×{}",
                a.blocks(),
                a.clients(),
                self.blocks(),
                self.clients
            )));
        }
        Ok(Some(a))
    }

    /// Rejects settings that would fail later, before any work starts.
    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 || self.rounds == 0 {
            return Err(Error::invalid("clients and rounds must be positive"));
        }
        if self.pool_size == 0 || self.q > self.pool_size {
            return Err(Error::invalid(format!(
                "Q = {} must lie in 1..={}",
                self.q, self.pool_size
            )));
        }
        self.protocol().validate()?;
        if self.eval_interval == 0 {
            return Err(Error::invalid("eval_interval must be positive"));
        }
        if self.sweep_samples == 0 {
            return Err(Error::invalid("sweep_samples must be positive"));
        }
        if !(self.concentration > 0.0 && self.concentration.is_finite()) {
            return Err(Error::invalid("concentration must be positive"));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(Error::invalid("init_scale must be finite and non-negative"));
        }
        match &self.model {
            ModelConfig::Quadratic {
                blocks,
                block_dim,
                target_spread,
                noise_sigma,
            } => {
                if *blocks == 0 || *block_dim == 0 {
                    return Err(Error::invalid("quadratic blocks and block_dim must be positive"));
                }
                if !(target_spread.is_finite() && *noise_sigma >= 0.0 && noise_sigma.is_finite()) {
                    return Err(Error::invalid("quadratic spread and noise must be finite"));
                }
            }
            ModelConfig::TinyTransformer(spec) => {
                spec.validate()?;
                if self.scheme == Scheme::Fedit {
                    return Err(Error::UnsupportedBackend {
                        backend: "tiny transformer",
                        what: "first-order FedIT rounds".into(),
                    });
                }
                let (size, holdout) = match &self.data {
                    DataConfig::Synthetic { size, holdout } => (Some(*size), *holdout),
                    DataConfig::Jsonl { holdout, .. } => (None, *holdout),
                };
                if holdout == 0 {
                    return Err(Error::invalid("data.holdout must be positive"));
                }
                if let Some(size) = size {
                    if size < holdout + self.clients {
                        return Err(Error::invalid(format!(
                            "data.size {size} leaves fewer than one training example per client"
                        )));
                    }
                }
            }
        }
        let model = self.build_model()?;
        self.vram_profile(model.dim())?;
        self.fixed_activation()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_standard_defaults() {
        let cfg: ExperimentConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg.clients, 50);
        assert_eq!(cfg.rounds, 500);
        assert_eq!(cfg.q, 10);
        assert_eq!(cfg.pool_size, 4096);
        assert_eq!(cfg.batch_size, 8);
        assert_eq!(cfg.eta, 5e-5);
        assert_eq!(cfg.mu, 1e-4);
        assert_eq!(cfg.sweep_samples, 1000);
        assert_eq!(cfg.concentration, 1.0);
        assert_eq!(cfg.arch().ffn_ratio, 4);
        cfg.validate().unwrap();
    }

    #[test]
    fn round_trips_through_json() {
        let cfg = ExperimentConfig {
            model: ModelConfig::Quadratic {
                blocks: 3,
                block_dim: 4,
                target_spread: 1.0,
                noise_sigma: 0.1,
            },
            clients: 3,
            ..Default::default()
        };
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<ExperimentConfig>(&text).unwrap(), cfg);
    }

    #[test]
    fn validation_rejects_bad_settings() {
        let bad = |patch: &str| {
            serde_json::from_str::<ExperimentConfig>(patch)
                .map_err(Error::from)
                .and_then(|c| c.validate())
                .is_err()
        };
        assert!(bad(r#"{"q": 5000}"#));
        assert!(bad(r#"{"eta": 0}"#));
        assert!(bad(r#"{"clients": 2, "vram": {"block_capacities": [1]}}"#));
        assert!(bad(r#"{"clients": 2, "allocator": {"fixed": ["10"]}}"#));
        assert!(bad(r#"{"unknown_field": 1}"#));
        let fedit: ExperimentConfig = serde_json::from_str(r#"{"scheme": "fedit"}"#).unwrap();
        assert_eq!(fedit.validate().unwrap_err().exit_code(), 4);
    }
}
