//! Per-client quadratic losses with additive gradient noise.
//!
//! `F_n(w; ξ) = ½‖w − w*_n‖² + ⟨σ·g(ξ), w⟩` where `g(ξ)` is a standard normal
//! vector regenerated from the batch seed. The noise is zero-mean, so the
//! expected loss is minimized at `w*_n` and the average loss at the mean target.

use serde::{Deserialize, Serialize};

use super::data::Batch;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, BlockLayout, GaussianStream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticModel {
    layout: BlockLayout,
    targets: Vec<Vec<f64>>,
    noise_sigma: f64,
}

impl QuadraticModel {
    pub fn new(layout: BlockLayout, targets: Vec<Vec<f64>>, noise_sigma: f64) -> Result<Self> {
        if targets.is_empty() {
            return Err(Error::invalid("quadratic model needs at least one client target"));
        }
        if let Some(n) = targets.iter().position(|t| t.len() != layout.dim()) {
            return Err(Error::invalid(format!(
                "target of client {n} has length {}, expected {}",
                targets[n].len(),
                layout.dim()
            )));
        }
        if targets.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::invalid("targets must be finite"));
        }
        if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
            return Err(Error::invalid("noise_sigma must be finite and non-negative"));
        }
        Ok(Self {
            layout,
            targets,
            noise_sigma,
        })
    }

    /// Targets drawn as `spread · N(0, I)` per client.
    pub fn random(
        layout: BlockLayout,
        clients: usize,
        spread: f64,
        noise_sigma: f64,
        seed: u64,
    ) -> Result<Self> {
        let targets = (0..clients)
            .map(|n| {
                let mut s = GaussianStream::new(derive_seed(seed, &[0x7A, n as u64]));
                (0..layout.dim()).map(|_| spread * s.normal()).collect()
            })
            .collect();
        Self::new(layout, targets, noise_sigma)
    }

    pub fn layout(&self) -> &BlockLayout {
        &self.layout
    }

    pub fn targets(&self) -> &[Vec<f64>] {
        &self.targets
    }

    pub fn noise_sigma(&self) -> f64 {
        self.noise_sigma
    }

    /// Minimizer of the client-averaged loss.
    pub fn mean_target(&self) -> Vec<f64> {
        let n = self.targets.len() as f64;
        let mut mean = vec![0.0; self.layout.dim()];
        for t in &self.targets {
            for (m, x) in mean.iter_mut().zip(t) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }

    /// `f(w) − f(w*)` for the noiseless client average, which equals `½‖w − w̄*‖²`.
    pub fn suboptimality(&self, params: &[f64]) -> f64 {
        let mean = self.mean_target();
        0.5 * params
            .iter()
            .zip(&mean)
            .map(|(w, t)| (w - t) * (w - t))
            .sum::<f64>()
    }

    fn target(&self, client: usize) -> Result<&[f64]> {
        self.targets
            .get(client)
            .map(Vec::as_slice)
            .ok_or(Error::Index {
                index: client,
                len: self.targets.len(),
            })
    }

    fn noise(&self, batch: &Batch) -> Option<Vec<f64>> {
        if self.noise_sigma == 0.0 {
            return None;
        }
        let mut s = GaussianStream::new(derive_seed(batch.seed, &[0x401]));
        Some(
            (0..self.layout.dim())
                .map(|_| self.noise_sigma * s.normal())
                .collect(),
        )
    }

    pub fn loss(&self, params: &[f64], batch: &Batch) -> Result<f64> {
        let target = self.target(batch.client)?;
        let mut value = 0.5
            * params
                .iter()
                .zip(target)
                .map(|(w, t)| (w - t) * (w - t))
                .sum::<f64>();
        if let Some(g) = self.noise(batch) {
            value += g.iter().zip(params).map(|(g, w)| g * w).sum::<f64>();
        }
        Ok(value)
    }

    pub fn gradient(&self, params: &[f64], batch: &Batch) -> Result<Vec<f64>> {
        let target = self.target(batch.client)?;
        let mut grad: Vec<f64> = params.iter().zip(target).map(|(w, t)| w - t).collect();
        if let Some(g) = self.noise(batch) {
            grad.iter_mut().zip(g).for_each(|(x, g)| *x += g);
        }
        Ok(grad)
    }
}
