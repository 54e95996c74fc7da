//! Loss backends and data.

pub mod data;
pub mod quadratic;
pub mod transformer;

use serde::{Deserialize, Serialize};

pub use data::{
    dirichlet_partition, load_jsonl, make_synthetic_classification, Batch, ClientDataset, Dataset,
    Example, Features, SyntheticKind,
};
pub use quadratic::QuadraticModel;
pub use transformer::{TinyTransformer, TinyTransformerSpec};

use crate::error::{ensure_finite, Error, Result};
use crate::rng::BlockLayout;

/// Anything the zeroth-order machinery can evaluate.
pub trait Objective: Sync {
    fn layout(&self) -> &BlockLayout;
    fn loss(&self, params: &[f64], batch: &Batch) -> Result<f64>;
}

#[derive(Debug, Clone, PartialEq)]
pub enum Backend {
    Quadratic(QuadraticModel),
    TinyTransformer(TinyTransformer),
}

/// A parameter layout together with the loss that reads it.
///
/// The parameter vector itself lives with whoever owns a copy (server or
/// client); the model is shared read-only.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockModel {
    backend: Backend,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Quadratic,
    TinyTransformer,
}

impl BlockModel {
    pub fn quadratic(model: QuadraticModel) -> Self {
        Self {
            backend: Backend::Quadratic(model),
        }
    }

    pub fn transformer(spec: TinyTransformerSpec) -> Result<Self> {
        Ok(Self {
            backend: Backend::TinyTransformer(TinyTransformer::new(spec)?),
        })
    }

    pub fn backend(&self) -> &Backend {
        &self.backend
    }

    pub fn kind(&self) -> BackendKind {
        match self.backend {
            Backend::Quadratic(_) => BackendKind::Quadratic,
            Backend::TinyTransformer(_) => BackendKind::TinyTransformer,
        }
    }

    pub fn dim(&self) -> usize {
        self.layout().dim()
    }

    /// Starting point: Gaussian entries of standard deviation `scale`
    /// (transformer LayerNorm gains start at one, biases at zero).
    pub fn initial_params(&self, seed: u64, scale: f64) -> Vec<f64> {
        match &self.backend {
            Backend::Quadratic(q) => {
                let mut s = crate::rng::GaussianStream::new(seed);
                (0..q.layout().dim()).map(|_| scale * s.normal()).collect()
            }
            Backend::TinyTransformer(t) => t.initial_params(seed, scale),
        }
    }

    pub fn forward_loss(&self, params: &[f64], batch: &Batch) -> Result<f64> {
        if params.len() != self.dim() {
            return Err(Error::invalid(format!(
                "parameter vector has length {}, model has {}",
                params.len(),
                self.dim()
            )));
        }
        let value = match &self.backend {
            Backend::Quadratic(q) => q.loss(params, batch)?,
            Backend::TinyTransformer(t) => t.loss(params, batch)?,
        };
        ensure_finite(value, || {
            format!("loss of client {} in round {}", batch.client, batch.round)
        })
    }

    pub fn analytic_gradient(&self, params: &[f64], batch: &Batch) -> Result<Vec<f64>> {
        match &self.backend {
            Backend::Quadratic(q) => q.gradient(params, batch),
            Backend::TinyTransformer(_) => Err(Error::UnsupportedBackend {
                backend: "tiny transformer",
                what: "analytic gradients".into(),
            }),
        }
    }
}

impl Objective for BlockModel {
    fn layout(&self) -> &BlockLayout {
        match &self.backend {
            Backend::Quadratic(q) => q.layout(),
            Backend::TinyTransformer(t) => t.layout(),
        }
    }

    fn loss(&self, params: &[f64], batch: &Batch) -> Result<f64> {
        self.forward_loss(params, batch)
    }
}

/// Copy of `v` with every block whose mask entry is false set to zero.
pub fn mask_perturbation(v: &[f64], layout: &BlockLayout, mask: &[bool]) -> Result<Vec<f64>> {
    if v.len() != layout.dim() || mask.len() != layout.num_blocks() {
        return Err(Error::invalid(format!(
            "perturbation of length {} with {} mask entries does not fit layout {:?}",
            v.len(),
            mask.len(),
            layout.block_dims()
        )));
    }
    let mut out = vec![0.0; v.len()];
    for (range, &on) in layout.ranges().zip(mask) {
        if on {
            out[range.clone()].copy_from_slice(&v[range]);
        }
    }
    Ok(out)
}

/// Loss at `params + scale·v` with the touched blocks restored from a snapshot.
pub fn shifted_loss<O: Objective + ?Sized>(
    model: &O,
    params: &mut [f64],
    v: &[f64],
    scale: f64,
    batch: &Batch,
) -> Result<f64> {
    let layout = model.layout();
    if params.len() != layout.dim() || v.len() != layout.dim() {
        return Err(Error::invalid("parameter and perturbation lengths must match the layout"));
    }
    let touched: Vec<_> = layout
        .ranges()
        .filter(|r| v[r.clone()].iter().any(|&x| x != 0.0))
        .collect();
    let snapshot: Vec<Vec<f64>> = touched.iter().map(|r| params[r.clone()].to_vec()).collect();
    for r in &touched {
        for i in r.clone() {
            params[i] += scale * v[i];
        }
    }
    let value = model.loss(params, batch);
    for (r, saved) in touched.iter().zip(&snapshot) {
        params[r.clone()].copy_from_slice(saved);
    }
    value
}

/// `(F(w + μv), F(w))` on the same batch; `params` is bit-identical afterwards.
pub fn perturb_eval_restore<O: Objective + ?Sized>(
    model: &O,
    params: &mut [f64],
    v_masked: &[f64],
    mu: f64,
    batch: &Batch,
) -> Result<(f64, f64)> {
    if !(mu > 0.0) {
        return Err(Error::invalid("mu must be positive"));
    }
    let base = model.loss(params, batch)?;
    let plus = shifted_loss(model, params, v_masked, mu, batch)?;
    Ok((plus, base))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad(target: Vec<f64>, sigma: f64) -> BlockModel {
        let layout = BlockLayout::uniform(target.len(), 1).unwrap();
        BlockModel::quadratic(QuadraticModel::new(layout, vec![target], sigma).unwrap())
    }

    fn batch(seed: u64) -> Batch {
        Batch {
            client: 0,
            round: 0,
            seed,
            examples: vec![],
        }
    }

    #[test]
    fn quadratic_values() {
        let m = quad(vec![0.0, 0.0], 0.0);
        assert_eq!(m.forward_loss(&[0.0, 0.0], &batch(1)).unwrap(), 0.0);
        assert_eq!(m.forward_loss(&[3.0, 4.0], &batch(1)).unwrap(), 12.5);
        assert_eq!(m.analytic_gradient(&[1.0, 0.0], &batch(1)).unwrap(), vec![1.0, 0.0]);
        assert_eq!(m.analytic_gradient(&[0.0, 0.0], &batch(1)).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn perturbation_round_trip() {
        let m = quad(vec![0.0, 0.0], 0.0);
        let mut w = vec![1.0, 0.0];
        let (plus, base) = perturb_eval_restore(&m, &mut w, &[0.0, 1.0], 1e-4, &batch(0)).unwrap();
        assert!((plus - base - 5e-9).abs() < 1e-15);
        assert_eq!(w, vec![1.0, 0.0]);
        let (plus, base) = perturb_eval_restore(&m, &mut w, &[0.0, 0.0], 1e-4, &batch(0)).unwrap();
        assert_eq!(plus, base);
        assert!(perturb_eval_restore(&m, &mut w, &[0.0, 1.0], 0.0, &batch(0)).is_err());
    }

    #[test]
    fn restore_is_bit_exact() {
        let m = quad(vec![0.3; 5], 0.1);
        let mut w: Vec<f64> = (0..5).map(|i| 0.1 * i as f64 + 1e-17).collect();
        let before: Vec<u64> = w.iter().map(|x| x.to_bits()).collect();
        for k in 0..200 {
            let v: Vec<f64> = (0..5).map(|i| ((i * 7 + k) % 11) as f64 / 3.0 - 1.7).collect();
            perturb_eval_restore(&m, &mut w, &v, 1e-3, &batch(k as u64)).unwrap();
        }
        let after: Vec<u64> = w.iter().map(|x| x.to_bits()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn masking_zeroes_frozen_blocks() {
        let layout = BlockLayout::new(vec![2, 1, 2]).unwrap();
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        let out = mask_perturbation(&v, &layout, &[true, false, true]).unwrap();
        assert_eq!(out, vec![1.0, 2.0, 0.0, 4.0, 5.0]);
        assert!(mask_perturbation(&v, &layout, &[true]).is_err());
    }

    #[test]
    fn transformer_gradient_is_unsupported() {
        let m = BlockModel::transformer(TinyTransformerSpec::default()).unwrap();
        let w = vec![0.0; m.dim()];
        assert!(matches!(
            m.analytic_gradient(&w, &batch(0)),
            Err(Error::UnsupportedBackend { .. })
        ));
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let m = quad(vec![0.0], 0.0);
        let err = m.forward_loss(&[f64::INFINITY], &batch(0)).unwrap_err();
        assert!(matches!(err, Error::Numeric { .. }));
    }
}
