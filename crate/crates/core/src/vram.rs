//! Analytic VRAM accounting.
//!
//! All quantities are in abstract parameter-elements. Each activated block
//! stores hidden states (`BLH`), Q/K/V activations (`3KBLH`) and FFN
//! activations (`αBLH`); the model itself costs `psi_md` on every client.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub batch: usize,
    pub seq_len: usize,
    pub hidden: usize,
    /// May be zero only for cost-formula experiments; models need `heads ≥ 1`.
    pub heads: usize,
    pub ffn_ratio: usize,
    pub blocks: usize,
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("batch", self.batch),
            ("seq_len", self.seq_len),
            ("hidden", self.hidden),
            ("ffn_ratio", self.ffn_ratio),
            ("blocks", self.blocks),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::invalid(format!("arch.{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// `ψ_block = (α + 3K + 1)·B·L·H`.
pub fn block_activation_cost(arch: &ArchConfig) -> f64 {
    let per_token = (arch.ffn_ratio + 3 * arch.heads + 1) as f64;
    per_token * (arch.batch * arch.seq_len * arch.hidden) as f64
}

/// `ψ_md + ψ_block · Σ_m a_{m,n}`.
pub fn total_usage(active: &[bool], arch: &ArchConfig, psi_md: f64) -> Result<f64> {
    if active.len() != arch.blocks {
        return Err(Error::invalid(format!(
            "activation vector has {} entries, architecture has {} blocks",
            active.len(),
            arch.blocks
        )));
    }
    let k = active.iter().filter(|&&a| a).count();
    Ok(psi_md + block_activation_cost(arch) * k as f64)
}

/// Real-valued activation budget of one client.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Budget {
    pub value: f64,
    /// False when the reduction leaves no room for even a partial block.
    pub feasible: bool,
}

impl Budget {
    /// `⌊λ⌋`, clamped to `max_blocks`.
    pub fn blocks(&self, max_blocks: usize) -> usize {
        (self.value.floor().max(0.0) as usize).min(max_blocks)
    }
}

/// `λ* = (ψ_max − ψ_md − ε) / ψ_block`, not floored.
pub fn activation_budget(
    psi_max: f64,
    psi_md: f64,
    epsilon: f64,
    arch: &ArchConfig,
) -> Result<Budget> {
    if psi_max < psi_md {
        return Err(Error::invalid(format!(
            "capacity {psi_max} is below the model footprint {psi_md}"
        )));
    }
    if epsilon < 0.0 {
        return Err(Error::invalid("reduction epsilon must be non-negative"));
    }
    let numerator = psi_max - psi_md - epsilon;
    if numerator <= 0.0 {
        return Ok(Budget {
            value: 0.0,
            feasible: false,
        });
    }
    Ok(Budget {
        value: numerator / block_activation_cost(arch),
        feasible: true,
    })
}

/// Per-client VRAM capacities plus the shared model footprint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VramProfile {
    pub psi_md: f64,
    pub psi_max: Vec<f64>,
}

impl VramProfile {
    pub fn validate(&self, arch: &ArchConfig) -> Result<()> {
        if self.psi_max.is_empty() {
            return Err(Error::invalid("VRAM profile lists no clients"));
        }
        let floor = self.psi_md + block_activation_cost(arch);
        for (n, &cap) in self.psi_max.iter().enumerate() {
            if !(cap >= floor) {
                return Err(Error::invalid(format!(
                    "client {n} capacity {cap} cannot hold the model plus one block ({floor})"
                )));
            }
        }
        Ok(())
    }

    pub fn clients(&self) -> usize {
        self.psi_max.len()
    }

    /// Every client can afford exactly `blocks[n]` blocks (plus slack below one block).
    pub fn from_block_capacities(psi_md: f64, arch: &ArchConfig, blocks: &[usize]) -> Self {
        let cost = block_activation_cost(arch);
        Self {
            psi_md,
            psi_max: blocks.iter().map(|&b| psi_md + cost * b as f64).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arch(ffn_ratio: usize, heads: usize, batch: usize, seq_len: usize, hidden: usize) -> ArchConfig {
        ArchConfig {
            batch,
            seq_len,
            hidden,
            heads,
            ffn_ratio,
            blocks: 12,
        }
    }

    #[test]
    fn block_cost_formula() {
        assert_eq!(block_activation_cost(&arch(4, 2, 1, 4, 8)), 352.0);
        assert_eq!(block_activation_cost(&arch(4, 12, 8, 128, 768)), 32_243_712.0);
        assert_eq!(block_activation_cost(&arch(4, 0, 1, 4, 8)), 5.0 * 32.0);
    }

    #[test]
    fn usage_counts_activated_blocks() {
        let a = arch(4, 2, 1, 4, 8);
        assert_eq!(total_usage(&[false; 12], &a, 1000.0).unwrap(), 1000.0);
        assert_eq!(
            total_usage(&[true; 12], &a, 1000.0).unwrap(),
            1000.0 + 12.0 * 352.0
        );
        let mut five = [false; 12];
        five[..5].iter_mut().for_each(|x| *x = true);
        assert_eq!(total_usage(&five, &a, 1000.0).unwrap(), 2760.0);
        assert!(total_usage(&[true; 3], &a, 0.0).is_err());
    }

    #[test]
    fn usage_increment_is_constant() {
        let a = arch(4, 2, 1, 4, 8);
        let mut prev = total_usage(&[false; 12], &a, 10.0).unwrap();
        for k in 1..=12 {
            let v: Vec<bool> = (0..12).map(|i| i < k).collect();
            let u = total_usage(&v, &a, 10.0).unwrap();
            assert_eq!(u - prev, 352.0);
            prev = u;
        }
    }

    #[test]
    fn budgets() {
        // ψ_block = 50 via (4 + 3·0 + 1)·1·1·10
        let a = arch(4, 0, 1, 1, 10);
        assert_eq!(block_activation_cost(&a), 50.0);
        let b = activation_budget(1000.0, 400.0, 100.0, &a).unwrap();
        assert_eq!(b.value, 10.0);
        assert!(b.feasible);
        let b = activation_budget(1000.0, 400.0, 600.0, &a).unwrap();
        assert_eq!(b.value, 0.0);
        assert!(!b.feasible);
        let b = activation_budget(1000.0, 400.0, 75.0, &a).unwrap();
        assert_eq!(b.value, 10.5);
        assert_eq!(b.blocks(12), 10);
        assert_eq!(b.blocks(4), 4);
        assert!(activation_budget(300.0, 400.0, 0.0, &a).is_err());
    }

    #[test]
    fn budget_strictly_decreasing_in_epsilon() {
        let a = arch(4, 2, 1, 4, 8);
        let mut prev = f64::INFINITY;
        for i in 0..20 {
            let b = activation_budget(10_000.0, 1000.0, i as f64 * 100.0, &a).unwrap();
            assert!(b.value < prev);
            prev = b.value;
        }
    }

    #[test]
    fn profile_requires_one_block_of_headroom() {
        let a = arch(4, 2, 1, 4, 8);
        let ok = VramProfile::from_block_capacities(1000.0, &a, &[1, 3]);
        ok.validate(&a).unwrap();
        let bad = VramProfile {
            psi_md: 1000.0,
            psi_max: vec![1100.0],
        };
        assert!(bad.validate(&a).is_err());
    }
}
