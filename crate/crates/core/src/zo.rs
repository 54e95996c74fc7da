//! Zeroth-order finite differences and the block-wise gradient estimate.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::rng::{block_slice, BlockLayout, PerturbationVector};
use crate::workloads::{mask_perturbation, perturb_eval_restore, shifted_loss, Batch, Objective};

/// Difference quotient used for `ρ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FdScheme {
    /// `(F(w + μv) − F(w)) / μ`.
    #[default]
    Forward,
    /// `(F(w + μv) − F(w − μv)) / 2μ`.
    Central,
}

/// Which blocks of `v` a client actually perturbs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationScope {
    /// Only the client's activated blocks.
    #[default]
    Masked,
    /// The whole vector, regardless of the activation column.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FiniteDifference {
    pub round: usize,
    pub client: usize,
    pub seed: u64,
    pub rho: f64,
}

/// Forward difference along `v` restricted to `mask`.
pub fn finite_difference<O: Objective + ?Sized>(
    model: &O,
    params: &mut [f64],
    mask: &[bool],
    v: &PerturbationVector,
    mu: f64,
    batch: &Batch,
) -> Result<FiniteDifference> {
    finite_difference_with(model, params, mask, v, mu, batch, FdScheme::Forward, None)
}

/// Like [`finite_difference`], optionally reusing an already computed `F(w)`
/// (forward scheme only; the base is recomputed when `None`).
#[allow(clippy::too_many_arguments)]
pub fn finite_difference_with<O: Objective + ?Sized>(
    model: &O,
    params: &mut [f64],
    mask: &[bool],
    v: &PerturbationVector,
    mu: f64,
    batch: &Batch,
    scheme: FdScheme,
    base: Option<f64>,
) -> Result<FiniteDifference> {
    if !(mu > 0.0) {
        return Err(Error::invalid("mu must be positive"));
    }
    let layout = model.layout();
    let v_masked = mask_perturbation(&v.values, layout, mask)?;
    let rho = match (scheme, base) {
        (FdScheme::Forward, None) => {
            let (plus, base) = perturb_eval_restore(model, params, &v_masked, mu, batch)?;
            (plus - base) / mu
        }
        (FdScheme::Forward, Some(base)) => {
            let plus = shifted_loss(model, params, &v_masked, mu, batch)?;
            (plus - base) / mu
        }
        (FdScheme::Central, _) => {
            let plus = shifted_loss(model, params, &v_masked, mu, batch)?;
            let minus = shifted_loss(model, params, &v_masked, -mu, batch)?;
            (plus - minus) / (2.0 * mu)
        }
    };
    let rho = ensure_finite(rho, || {
        format!(
            "finite difference of client {} in round {} (seed {})",
            batch.client, batch.round, v.seed
        )
    })?;
    Ok(FiniteDifference {
        round: batch.round,
        client: batch.client,
        seed: v.seed,
        rho,
    })
}

fn check_aligned(diffs: &[FiniteDifference], vs: &[PerturbationVector]) -> Result<()> {
    if diffs.is_empty() {
        return Err(Error::invalid("need at least one finite difference"));
    }
    if diffs.len() != vs.len() {
        return Err(Error::invalid(format!(
            "{} finite differences but {} perturbations",
            diffs.len(),
            vs.len()
        )));
    }
    if let Some(q) = (0..diffs.len()).find(|&q| diffs[q].seed != vs[q].seed) {
        return Err(Error::invalid(format!(
            "entry {q}: difference for seed {} paired with perturbation {}",
            diffs[q].seed, vs[q].seed
        )));
    }
    Ok(())
}

/// `(1/Q) Σ_q ρ_q v_{q,m}` for block `m`.
pub fn estimate_block_gradient(
    diffs: &[FiniteDifference],
    vs: &[PerturbationVector],
    layout: &BlockLayout,
    m: usize,
) -> Result<Vec<f64>> {
    check_aligned(diffs, vs)?;
    let mut out = vec![0.0; layout.range(m)?.len()];
    for (d, v) in diffs.iter().zip(vs) {
        for (o, x) in out.iter_mut().zip(block_slice(v, layout, m)?) {
            *o += d.rho * x;
        }
    }
    let q = diffs.len() as f64;
    out.iter_mut().for_each(|o| *o /= q);
    Ok(out)
}

/// Full-length estimate; blocks with a false mask entry are skipped and stay zero.
pub fn estimate_gradient(
    diffs: &[FiniteDifference],
    vs: &[PerturbationVector],
    layout: &BlockLayout,
    mask: &[bool],
) -> Result<Vec<f64>> {
    if mask.len() != layout.num_blocks() {
        return Err(Error::invalid("mask length differs from the number of blocks"));
    }
    let mut out = vec![0.0; layout.dim()];
    for m in (0..layout.num_blocks()).filter(|&m| mask[m]) {
        let block = estimate_block_gradient(diffs, vs, layout, m)?;
        out[layout.range(m)?].copy_from_slice(&block);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::PerturbationMode;
    use crate::workloads::{BlockModel, QuadraticModel};

    fn quad2() -> BlockModel {
        let layout = BlockLayout::uniform(2, 1).unwrap();
        BlockModel::quadratic(QuadraticModel::new(layout, vec![vec![0.0, 0.0]], 0.0).unwrap())
    }

    fn vec2(seed: u64, values: [f64; 2]) -> PerturbationVector {
        PerturbationVector {
            seed,
            mode: PerturbationMode::UnitSphere,
            values: values.to_vec(),
        }
    }

    fn batch() -> Batch {
        Batch {
            client: 0,
            round: 0,
            seed: 0,
            examples: vec![],
        }
    }

    #[test]
    fn analytic_quadratic_differences() {
        let m = quad2();
        let mut w = vec![1.0, 0.0];
        let full = [true, true];
        let r = finite_difference(&m, &mut w, &full, &vec2(1, [0.0, 1.0]), 1e-4, &batch()).unwrap();
        assert!((r.rho - 5e-5).abs() < 1e-12);
        let r = finite_difference(&m, &mut w, &full, &vec2(1, [1.0, 0.0]), 1e-4, &batch()).unwrap();
        assert!((r.rho - (1.0 + 5e-5)).abs() < 1e-9);
        let r = finite_difference(&m, &mut w, &[true, false], &vec2(1, [0.0, 1.0]), 1e-4, &batch())
            .unwrap();
        assert_eq!(r.rho, 0.0);
    }

    #[test]
    fn central_scheme_removes_curvature_term() {
        let m = quad2();
        let mut w = vec![1.0, 0.0];
        let r = finite_difference_with(
            &m,
            &mut w,
            &[true, true],
            &vec2(1, [0.6, 0.8]),
            1e-3,
            &batch(),
            FdScheme::Central,
            None,
        )
        .unwrap();
        assert!((r.rho - 0.6).abs() < 1e-10);
    }

    #[test]
    fn block_estimates() {
        let layout = BlockLayout::new(vec![2]).unwrap();
        let fd = |seed, rho| FiniteDifference {
            round: 0,
            client: 0,
            seed,
            rho,
        };
        let g = estimate_block_gradient(&[fd(1, 2.0)], &[vec2(1, [0.6, 0.8])], &layout, 0).unwrap();
        assert!((g[0] - 1.2).abs() < 1e-15 && (g[1] - 1.6).abs() < 1e-15);
        let vs = [vec2(1, [0.6, 0.8]), vec2(2, [0.6, 0.8])];
        let g = estimate_block_gradient(&[fd(1, 1.0), fd(2, -1.0)], &vs, &layout, 0).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
        assert!(estimate_block_gradient(&[fd(2, 1.0), fd(1, -1.0)], &vs, &layout, 0).is_err());
        assert!(estimate_block_gradient(&[fd(1, 1.0)], &vs, &layout, 0).is_err());
    }

    #[test]
    fn frozen_blocks_stay_zero() {
        let layout = BlockLayout::uniform(2, 1).unwrap();
        let fd = FiniteDifference {
            round: 0,
            client: 0,
            seed: 3,
            rho: 1.0,
        };
        let g = estimate_gradient(&[fd], &[vec2(3, [0.6, 0.8])], &layout, &[false, true]).unwrap();
        assert_eq!(g, vec![0.0, 0.8]);
    }
}
