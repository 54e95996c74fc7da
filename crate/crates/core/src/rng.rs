//! Shared-seed perturbation generation.
//!
//! Every party in the simulated federation regenerates the same perturbation
//! vector from a 64-bit seed, so only seeds (never vectors) travel over the
//! wire. The generator is pinned:
//!
//! * uniform bits come from ChaCha8 (`rand_chacha`), seeded with
//!   `ChaCha8Rng::seed_from_u64(seed)`;
//! * a uniform double is `(next_u64() >> 11) * 2^-53`;
//! * standard normals use the Marsaglia polar transform, consuming the pair
//!   in order (first `u·f`, then `v·f`).
//!
//! Changing any of these steps changes every trajectory the simulator has
//! ever produced, so they are frozen by the golden-value tests below.

use std::collections::HashSet;
use std::ops::Range;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Partition of a flat parameter vector into `M` contiguous blocks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct BlockLayout {
    block_dims: Vec<usize>,
    offsets: Vec<usize>,
    dim: usize,
}

impl BlockLayout {
    pub fn new(block_dims: Vec<usize>) -> Result<Self> {
        if block_dims.is_empty() {
            return Err(Error::invalid("block layout needs at least one block"));
        }
        if let Some(m) = block_dims.iter().position(|&b| b == 0) {
            return Err(Error::invalid(format!("block {m} has zero parameters")));
        }
        let mut offsets = Vec::with_capacity(block_dims.len());
        let mut dim = 0;
        for &b in &block_dims {
            offsets.push(dim);
            dim += b;
        }
        Ok(Self {
            block_dims,
            offsets,
            dim,
        })
    }

    /// `blocks` blocks of `block_dim` parameters each.
    pub fn uniform(blocks: usize, block_dim: usize) -> Result<Self> {
        Self::new(vec![block_dim; blocks])
    }

    pub fn num_blocks(&self) -> usize {
        self.block_dims.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn block_dims(&self) -> &[usize] {
        &self.block_dims
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    /// Index range of block `m` inside the flat vector.
    pub fn range(&self, m: usize) -> Result<Range<usize>> {
        let len = self.num_blocks();
        if m >= len {
            return Err(Error::Index { index: m, len });
        }
        Ok(self.offsets[m]..self.offsets[m] + self.block_dims[m])
    }

    pub fn ranges(&self) -> impl Iterator<Item = Range<usize>> + '_ {
        self.offsets
            .iter()
            .zip(&self.block_dims)
            .map(|(&o, &b)| o..o + b)
    }
}

impl TryFrom<Vec<usize>> for BlockLayout {
    type Error = Error;
    fn try_from(dims: Vec<usize>) -> Result<Self> {
        Self::new(dims)
    }
}

impl From<BlockLayout> for Vec<usize> {
    fn from(layout: BlockLayout) -> Self {
        layout.block_dims
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationMode {
    /// Standard Gaussian draw divided by its 2-norm (full vector).
    #[default]
    UnitSphere,
    /// Standard Gaussian draw, unnormalized.
    RawGaussian,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationVector {
    pub seed: u64,
    pub mode: PerturbationMode,
    pub values: Vec<f64>,
}

impl PerturbationVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// SplitMix64 finalizer, used to derive sub-seeds.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic sub-seed for a tuple of identifiers.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(mix64(base), |acc, &p| mix64(acc ^ mix64(p)))
}

/// Pinned source of uniform and standard-normal draws.
#[derive(Debug, Clone)]
pub struct GaussianStream {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl GaussianStream {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..bound` by rejection (no modulo bias).
    pub fn index(&mut self, bound: usize) -> usize {
        assert!(bound > 0, "empty range");
        let bound = bound as u64;
        let zone = u64::MAX - (u64::MAX % bound);
        loop {
            let x = self.rng.next_u64();
            if x < zone {
                return (x % bound) as usize;
            }
        }
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        loop {
            let u = 2.0 * self.uniform() - 1.0;
            let v = 2.0 * self.uniform() - 1.0;
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                let f = (-2.0 * s.ln() / s).sqrt();
                self.spare = Some(v * f);
                return u * f;
            }
        }
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for x in out {
            *x = self.normal();
        }
    }
}

/// Regenerates the perturbation vector keyed by `seed`.
pub fn generate_perturbation(
    seed: u64,
    layout: &BlockLayout,
    mode: PerturbationMode,
) -> PerturbationVector {
    let mut values = vec![0.0; layout.dim()];
    GaussianStream::new(seed).fill_normal(&mut values);
    if mode == PerturbationMode::UnitSphere {
        let norm = values.iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in &mut values {
            *x /= norm;
        }
    }
    PerturbationVector { seed, mode, values }
}

/// Contiguous slice of block `m`.
pub fn block_slice<'a>(
    v: &'a PerturbationVector,
    layout: &BlockLayout,
    m: usize,
) -> Result<&'a [f64]> {
    if v.dim() != layout.dim() {
        return Err(Error::invalid(format!(
            "vector has dimension {} but layout has {}",
            v.dim(),
            layout.dim()
        )));
    }
    Ok(&v.values[layout.range(m)?])
}

/// The `P` seeds shared by the server and all clients at start-up.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedPool {
    seeds: Vec<u64>,
    master_seed: u64,
}

impl SeedPool {
    pub fn from_seeds(seeds: Vec<u64>, master_seed: u64) -> Result<Self> {
        if seeds.is_empty() {
            return Err(Error::invalid("seed pool must not be empty"));
        }
        let mut seen = HashSet::with_capacity(seeds.len());
        for &s in &seeds {
            if !seen.insert(s) {
                return Err(Error::invalid(format!("duplicate seed {s} in pool")));
            }
        }
        Ok(Self { seeds, master_seed })
    }

    /// `size` distinct seeds drawn from a stream keyed by `master_seed`.
    pub fn generate(size: usize, master_seed: u64) -> Result<Self> {
        if size == 0 {
            return Err(Error::invalid("seed pool must not be empty"));
        }
        let mut stream = GaussianStream::new(derive_seed(master_seed, &[0x5EED]));
        let mut seen = HashSet::with_capacity(size);
        let mut seeds = Vec::with_capacity(size);
        while seeds.len() < size {
            let s = stream.next_u64();
            if seen.insert(s) {
                seeds.push(s);
            }
        }
        Ok(Self { seeds, master_seed })
    }

    pub fn seeds(&self) -> &[u64] {
        &self.seeds
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn len(&self) -> usize {
        self.seeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seeds.is_empty()
    }

    /// `q` distinct seeds for `round`, by a partial Fisher–Yates shuffle
    /// keyed on `(master_seed, round)`.
    pub fn select_round_seeds(&self, round: usize, q: usize) -> Result<Vec<u64>> {
        let p = self.seeds.len();
        if q == 0 || q > p {
            return Err(Error::invalid(format!(
                "cannot select {q} seeds from a pool of {p}"
            )));
        }
        let mut stream = GaussianStream::new(derive_seed(self.master_seed, &[round as u64]));
        let mut idx: Vec<usize> = (0..p).collect();
        for i in 0..q {
            let j = i + stream.index(p - i);
            idx.swap(i, j);
        }
        Ok(idx[..q].iter().map(|&i| self.seeds[i]).collect())
    }
}
