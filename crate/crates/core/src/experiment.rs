//! End-to-end runs driven by an [`ExperimentConfig`].

use serde::{Deserialize, Serialize};

use crate::allocator::{pareto_sweep, select_allocation, vram_total, ParetoPoint, ParetoSweep};
use crate::config::{DataConfig, ExperimentConfig};
use crate::error::{Error, Result};
use crate::federation::{Federation, RoundRecord, Scheme};
use crate::metrics::{lambda_value, BlockActivationMatrix};
use crate::rng::{derive_seed, SeedPool};
use crate::workloads::{
    dirichlet_partition, load_jsonl, make_synthetic_classification, Backend, BlockModel,
    ClientDataset, Dataset, Example, SyntheticKind,
};

/// One line of `metrics.csv`. Communication columns are cumulative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub round: usize,
    pub scheme: Scheme,
    pub train_loss: f64,
    /// Held-out accuracy (transformer) or `f(w̄) − f*` (quadratic), every `eval_interval` rounds.
    pub eval_metric: Option<f64>,
    pub comm_up_scalars: u64,
    pub comm_down_scalars: u64,
    pub vram_total: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub rows: Vec<MetricsRow>,
    pub trace: Vec<RoundRecord>,
    pub activation: BlockActivationMatrix,
    pub initial_params: Vec<f64>,
    pub final_params: Vec<f64>,
}

/// Allocation search for a config: sweep, then pick one front point.
pub fn allocate(cfg: &ExperimentConfig) -> Result<(ParetoSweep, ParetoPoint)> {
    let model = cfg.build_model()?;
    let profile = cfg.vram_profile(model.dim())?;
    let sweep = pareto_sweep(&profile, &cfg.arch(), &cfg.sweep_options())?;
    let chosen = select_allocation(&sweep.front_points(), cfg.allocator.policy)?.clone();
    Ok((sweep, chosen))
}

/// The matrix a run will use: all ones for baselines; for ZorBA the given
/// matrix, else the configured fixed one, else a fresh allocation.
pub fn resolve_activation(
    cfg: &ExperimentConfig,
    provided: Option<BlockActivationMatrix>,
) -> Result<BlockActivationMatrix> {
    let ones = BlockActivationMatrix::ones(cfg.blocks(), cfg.clients);
    if cfg.scheme != Scheme::Zorba {
        return Ok(ones);
    }
    let a = match (provided, cfg.fixed_activation()?) {
        (Some(a), _) => a,
        (None, Some(a)) => a,
        (None, None) => allocate(cfg)?.1.matrix,
    };
    if a.blocks() != cfg.blocks() || a.clients() != cfg.clients {
        return Err(Error::invalid(format!(
            "activation matrix is {}×{}, config expects {}×{}",
            a.blocks(),
            a.clients(),
            cfg.blocks(),
            cfg.clients
        )));
    }
    a.validate()?;
    Ok(a)
}

fn load_dataset(cfg: &ExperimentConfig, model: &BlockModel) -> Result<(Dataset, usize)> {
    let Backend::TinyTransformer(t) = model.backend() else {
        return Err(Error::Internal("datasets are only built for the transformer".into()));
    };
    let spec = t.spec();
    match &cfg.data {
        DataConfig::Synthetic { size, holdout } => {
            let kind = SyntheticKind::Tokens {
                vocab: spec.vocab,
                seq_len: spec.seq_len,
            };
            Ok((make_synthetic_classification(kind, spec.classes, *size, cfg.seeds.data)?, *holdout))
        }
        DataConfig::Jsonl { path, holdout } => {
            let d = load_jsonl(path, spec.vocab, spec.seq_len)?;
            if d.classes > spec.classes {
                return Err(Error::invalid(format!(
                    "{} has {} classes, model has {}",
                    path.display(),
                    d.classes,
                    spec.classes
                )));
            }
            Ok((d, *holdout))
        }
    }
}

/// Client datasets plus held-out examples (empty for the quadratic backend).
pub fn client_data(
    cfg: &ExperimentConfig,
    model: &BlockModel,
) -> Result<(Vec<ClientDataset>, Vec<Example>)> {
    match model.backend() {
        Backend::Quadratic(_) => Ok((
            (0..cfg.clients)
                .map(|n| ClientDataset::seed_only(n, derive_seed(cfg.seeds.data, &[0xB7, n as u64])))
                .collect(),
            Vec::new(),
        )),
        Backend::TinyTransformer(_) => {
            let (dataset, holdout) = load_dataset(cfg, model)?;
            let (train, test) = dataset.split_holdout(holdout)?;
            let parts = dirichlet_partition(&train, cfg.clients, cfg.concentration, cfg.seeds.data)?;
            Ok((parts, test.examples))
        }
    }
}

/// Evaluation metric of the server model.
pub fn evaluate(model: &BlockModel, params: &[f64], holdout: &[Example]) -> Result<f64> {
    match model.backend() {
        Backend::Quadratic(q) => Ok(q.suboptimality(params)),
        Backend::TinyTransformer(t) => t.accuracy(params, holdout),
    }
}

pub fn build_federation(
    cfg: &ExperimentConfig,
    activation: BlockActivationMatrix,
) -> Result<(Federation, Vec<Example>)> {
    let model = cfg.build_model()?;
    let (data, holdout) = client_data(cfg, &model)?;
    let params = model.initial_params(derive_seed(cfg.seeds.master, &[0x1417]), cfg.init_scale);
    let pool = SeedPool::generate(cfg.pool_size, cfg.seeds.master)?;
    let fed = Federation::new(model, cfg.protocol(), params, activation, pool, data)?;
    Ok((fed, holdout))
}

/// Runs `cfg.rounds` rounds of `cfg.scheme`, calling `on_row` after each.
pub fn run_experiment_with(
    cfg: &ExperimentConfig,
    activation: Option<BlockActivationMatrix>,
    mut on_row: impl FnMut(&MetricsRow),
) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let activation = resolve_activation(cfg, activation)?;
    let (mut fed, holdout) = build_federation(cfg, activation.clone())?;
    let psi_md = cfg.vram.psi_md.unwrap_or(fed.model.dim() as f64);
    let vram = vram_total(&activation, &cfg.arch(), psi_md)?;
    let lambda = lambda_value(&activation)?;
    let initial_params = fed.server.params.clone();

    let mut rows = Vec::with_capacity(cfg.rounds);
    let mut trace = Vec::new();
    for t in 1..=cfg.rounds {
        let record = fed.run_round(cfg.scheme)?;
        let eval_metric = if t % cfg.eval_interval == 0 || t == cfg.rounds {
            Some(evaluate(&fed.model, &fed.server.params, &holdout)?)
        } else {
            None
        };
        let total = fed.server.ledger.total();
        let row = MetricsRow {
            round: t,
            scheme: cfg.scheme,
            train_loss: record.train_loss,
            eval_metric,
            comm_up_scalars: total.up_scalars,
            comm_down_scalars: total.down_scalars,
            vram_total: vram,
            lambda,
        };
        on_row(&row);
        rows.push(row);
        if cfg.trace {
            trace.push(record);
        }
    }
    Ok(ExperimentOutput {
        rows,
        trace,
        activation,
        initial_params,
        final_params: fed.server.params,
    })
}

pub fn run_experiment(
    cfg: &ExperimentConfig,
    activation: Option<BlockActivationMatrix>,
) -> Result<ExperimentOutput> {
    run_experiment_with(cfg, activation, |_| {})
}

/// First round at which `eval_metric` reaches `target`.
pub fn rounds_to_target(rows: &[MetricsRow], target: f64, lower_is_better: bool) -> Option<usize> {
    rows.iter()
        .find(|r| match r.eval_metric {
            Some(v) if lower_is_better => v <= target,
            Some(v) => v >= target,
            None => false,
        })
        .map(|r| r.round)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;

    fn quad_cfg(scheme: Scheme) -> ExperimentConfig {
        ExperimentConfig {
            scheme,
            model: ModelConfig::Quadratic {
                blocks: 2,
                block_dim: 4,
                target_spread: 1.0,
                noise_sigma: 0.0,
            },
            clients: 3,
            rounds: 20,
            q: 2,
            pool_size: 32,
            eta: 0.1,
            sweep_samples: 8,
            eval_interval: 5,
            init_scale: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn quadratic_runs_and_reports() {
        let out = run_experiment(&quad_cfg(Scheme::Zorba), None).unwrap();
        assert_eq!(out.rows.len(), 20);
        assert!(out.rows[4].eval_metric.is_some() && out.rows[3].eval_metric.is_none());
        assert_eq!(out.rows[19].comm_up_scalars, 20 * 3 * 2);
        let first = out.rows[4].eval_metric.unwrap();
        let last = out.rows[19].eval_metric.unwrap();
        assert!(last < first);
    }

    #[test]
    fn baselines_ignore_allocation() {
        let cfg = quad_cfg(Scheme::Decomfl);
        let a = resolve_activation(&cfg, Some(BlockActivationMatrix::parse_rows(&["100", "011"]).unwrap())).unwrap();
        assert_eq!(a, BlockActivationMatrix::ones(2, 3));
    }

    #[test]
    fn rounds_to_target_directions() {
        let row = |round, v| MetricsRow {
            round,
            scheme: Scheme::Zorba,
            train_loss: 0.0,
            eval_metric: v,
            comm_up_scalars: 0,
            comm_down_scalars: 0,
            vram_total: 0.0,
            lambda: 0.0,
        };
        let rows = vec![row(1, Some(0.5)), row(2, None), row(3, Some(0.9))];
        assert_eq!(rounds_to_target(&rows, 0.8, false), Some(3));
        assert_eq!(rounds_to_target(&rows, 0.6, true), Some(1));
        assert_eq!(rounds_to_target(&rows, 0.95, false), None);
    }
}
