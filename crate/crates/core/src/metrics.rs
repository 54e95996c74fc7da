//! Quantities the convergence analysis attaches to a block-activation matrix.
//!
//! `A` is an `M × N` binary matrix: rows are blocks, columns are clients.
//! The popularity `c_m` of block `m` counts the clients that activate it, the
//! least popularity `c̲_n` of client `n` is the smallest popularity among the
//! blocks it activates, and
//!
//! ```text
//! Λ(A) = Σ_n 1 / c̲_n²  =  Σ_n max_m (a_{m,n} / Σ_n' a_{m,n'})²
//! ```
//!
//! is the surrogate for the non-vanishing bias of the training bound. The
//! bound evaluators ([`bias_term_t1`], [`bias_term_t2`]) take all analysis
//! constants explicitly through [`BoundConstants`].

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BlockActivationMatrix {
    blocks: usize,
    clients: usize,
    // row-major, blocks × clients
    data: Vec<bool>,
}

impl BlockActivationMatrix {
    /// All-zero matrix; not valid until every row and column has a one.
    pub fn zeros(blocks: usize, clients: usize) -> Self {
        Self {
            blocks,
            clients,
            data: vec![false; blocks * clients],
        }
    }

    pub fn ones(blocks: usize, clients: usize) -> Self {
        Self {
            blocks,
            clients,
            data: vec![true; blocks * clients],
        }
    }

    /// Builds a matrix without checking the row/column constraints.
    pub fn from_rows_unchecked(rows: &[Vec<bool>]) -> Result<Self> {
        let blocks = rows.len();
        if blocks == 0 {
            return Err(Error::InvalidMatrix("matrix has no rows".into()));
        }
        let clients = rows[0].len();
        if clients == 0 {
            return Err(Error::InvalidMatrix("matrix has no columns".into()));
        }
        let mut data = Vec::with_capacity(blocks * clients);
        for (m, row) in rows.iter().enumerate() {
            if row.len() != clients {
                return Err(Error::InvalidMatrix(format!(
                    "row {m} has {} entries, expected {clients}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            blocks,
            clients,
            data,
        })
    }

    pub fn from_rows(rows: &[Vec<bool>]) -> Result<Self> {
        let a = Self::from_rows_unchecked(rows)?;
        a.validate()?;
        Ok(a)
    }

    /// Column `n` of the result is `columns[n]`.
    pub fn from_columns(columns: &[Vec<bool>]) -> Result<Self> {
        let clients = columns.len();
        let blocks = columns.first().map_or(0, Vec::len);
        let rows: Vec<Vec<bool>> = (0..blocks)
            .map(|m| columns.iter().map(|c| c.get(m).copied().unwrap_or(false)).collect())
            .collect();
        if columns.iter().any(|c| c.len() != blocks) || clients == 0 {
            return Err(Error::InvalidMatrix("ragged or empty column list".into()));
        }
        Self::from_rows(&rows)
    }

    /// Parses compact row strings such as `["110", "011"]`.
    pub fn parse_rows<S: AsRef<str>>(rows: &[S]) -> Result<Self> {
        let parsed: Result<Vec<Vec<bool>>> = rows
            .iter()
            .map(|r| {
                r.as_ref()
                    .chars()
                    .map(|c| match c {
                        '0' => Ok(false),
                        '1' => Ok(true),
                        other => Err(Error::InvalidMatrix(format!("unexpected character {other:?}"))),
                    })
                    .collect()
            })
            .collect();
        Self::from_rows(&parsed?)
    }

    pub fn blocks(&self) -> usize {
        self.blocks
    }

    pub fn clients(&self) -> usize {
        self.clients
    }

    pub fn get(&self, m: usize, n: usize) -> bool {
        self.data[m * self.clients + n]
    }

    pub fn set(&mut self, m: usize, n: usize, value: bool) {
        self.data[m * self.clients + n] = value;
    }

    /// Activation vector `a_n` of client `n`.
    pub fn column(&self, n: usize) -> Vec<bool> {
        (0..self.blocks).map(|m| self.get(m, n)).collect()
    }

    pub fn row(&self, m: usize) -> &[bool] {
        &self.data[m * self.clients..(m + 1) * self.clients]
    }

    pub fn rows(&self) -> Vec<Vec<bool>> {
        (0..self.blocks).map(|m| self.row(m).to_vec()).collect()
    }

    pub fn row_sums(&self) -> Vec<usize> {
        (0..self.blocks)
            .map(|m| self.row(m).iter().filter(|&&a| a).count())
            .collect()
    }

    pub fn column_sums(&self) -> Vec<usize> {
        (0..self.clients)
            .map(|n| (0..self.blocks).filter(|&m| self.get(m, n)).count())
            .collect()
    }

    pub fn total_active(&self) -> usize {
        self.data.iter().filter(|&&a| a).count()
    }

    /// Every client activates a block and every block is activated by a client.
    pub fn validate(&self) -> Result<()> {
        if let Some(n) = self.column_sums().iter().position(|&s| s == 0) {
            return Err(Error::InvalidMatrix(format!("client {n} activates no block")));
        }
        if let Some(m) = self.row_sums().iter().position(|&s| s == 0) {
            return Err(Error::InvalidMatrix(format!("block {m} is activated by no client")));
        }
        Ok(())
    }

    pub fn to_row_strings(&self) -> Vec<String> {
        (0..self.blocks)
            .map(|m| self.row(m).iter().map(|&a| if a { '1' } else { '0' }).collect())
            .collect()
    }
}

impl fmt::Debug for BlockActivationMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.to_row_strings()).finish()
    }
}

impl Serialize for BlockActivationMatrix {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<u8>> = (0..self.blocks)
            .map(|m| self.row(m).iter().map(|&a| a as u8).collect())
            .collect();
        rows.serialize(s)
    }
}

impl<'de> Deserialize<'de> for BlockActivationMatrix {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Numeric(Vec<Vec<u8>>),
            Strings(Vec<String>),
        }
        let parsed = match Repr::deserialize(d)? {
            Repr::Strings(rows) => BlockActivationMatrix::parse_rows(&rows),
            Repr::Numeric(rows) => {
                let rows: std::result::Result<Vec<Vec<bool>>, String> = rows
                    .into_iter()
                    .map(|r| {
                        r.into_iter()
                            .map(|x| match x {
                                0 => Ok(false),
                                1 => Ok(true),
                                v => Err(format!("entry {v} is not binary")),
                            })
                            .collect()
                    })
                    .collect();
                rows.map_err(Error::InvalidMatrix)
                    .and_then(|r| BlockActivationMatrix::from_rows(&r))
            }
        };
        parsed.map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PopularityProfile {
    /// `c_m` for every block.
    pub block: Vec<usize>,
    /// `c̲_n` for every client.
    pub least: Vec<usize>,
    /// `c̲` sorted in descending order.
    pub sorted_desc: Vec<usize>,
}

pub fn popularity(a: &BlockActivationMatrix) -> Result<PopularityProfile> {
    a.validate()?;
    let block = a.row_sums();
    let least: Vec<usize> = (0..a.clients())
        .map(|n| {
            (0..a.blocks())
                .filter(|&m| a.get(m, n))
                .map(|m| block[m])
                .min()
                .expect("validated column has an active block")
        })
        .collect();
    let mut sorted_desc = least.clone();
    sorted_desc.sort_unstable_by(|x, y| y.cmp(x));
    Ok(PopularityProfile {
        block,
        least,
        sorted_desc,
    })
}

/// `Σ 1/c̲_n²` for a least-popularity vector.
pub fn lambda_from_least(least: &[usize]) -> f64 {
    least.iter().map(|&c| 1.0 / (c as f64 * c as f64)).sum()
}

pub fn lambda_value(a: &BlockActivationMatrix) -> Result<f64> {
    Ok(lambda_from_least(&popularity(a)?.least))
}

/// `Σ_n max_m (a_{m,n} / Σ_n' a_{m,n'})²`, evaluated directly from the matrix.
pub fn lambda_max_form(a: &BlockActivationMatrix) -> Result<f64> {
    a.validate()?;
    let rows = a.row_sums();
    Ok((0..a.clients())
        .map(|n| {
            (0..a.blocks())
                .map(|m| {
                    let w = if a.get(m, n) { 1.0 / rows[m] as f64 } else { 0.0 };
                    w * w
                })
                .fold(0.0, f64::max)
        })
        .sum())
}

/// True iff `x ≺ y`: descending prefix sums of `x` never exceed those of `y`
/// and the totals are equal.
pub fn majorizes(x: &[usize], y: &[usize]) -> Result<bool> {
    if x.len() != y.len() {
        return Err(Error::invalid(format!(
            "majorization needs equal lengths, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let desc = |v: &[usize]| {
        let mut v = v.to_vec();
        v.sort_unstable_by(|a, b| b.cmp(a));
        v
    };
    let (xs, ys) = (desc(x), desc(y));
    let (mut px, mut py) = (0usize, 0usize);
    for (a, b) in xs.iter().zip(&ys) {
        px += a;
        py += b;
        if px > py {
            return Ok(false);
        }
    }
    Ok(px == py)
}

/// Constants of the convergence bounds. None of them is estimated from data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundConstants {
    pub eta: f64,
    pub d: usize,
    pub n: usize,
    pub q: usize,
    /// Smoothness constant `L`.
    pub l_smooth: f64,
    /// Effective-rank bound `κ`.
    pub kappa: f64,
    pub mu: f64,
    pub sigma: f64,
    pub sigma_g: f64,
}

impl BoundConstants {
    fn check_positive(&self) -> Result<()> {
        let reals = [
            ("eta", self.eta),
            ("l_smooth", self.l_smooth),
            ("kappa", self.kappa),
            ("mu", self.mu),
            ("sigma", self.sigma),
            ("sigma_g", self.sigma_g),
        ];
        for (name, v) in reals {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive and finite")));
            }
        }
        if self.d == 0 || self.n == 0 || self.q == 0 {
            return Err(Error::invalid("d, n and q must be positive"));
        }
        Ok(())
    }

    fn zo_error(&self) -> f64 {
        0.25 * self.mu * self.mu * self.l_smooth * self.l_smooth * ((self.d + 3) as f64).powi(3)
    }

    /// `3Lη²(d+Q−1)N / (2Q)`.
    fn variance_factor(&self) -> f64 {
        3.0 * self.l_smooth * self.eta * self.eta * (self.d + self.q - 1) as f64 * self.n as f64
            / (2.0 * self.q as f64)
    }

    /// `dη²L(κ+2) / (2(d+2))`.
    fn curvature_factor(&self) -> f64 {
        let d = self.d as f64;
        d * self.eta * self.eta * self.l_smooth * (self.kappa + 2.0) / (2.0 * (d + 2.0))
    }

    /// Largest step size admitted by the dimension-free bound.
    pub fn max_eta_t2(&self) -> f64 {
        let (d, n) = (self.d as f64, self.n as f64);
        (d + 2.0) / (2.0 * self.l_smooth * d * n * n * (self.kappa + 2.0))
    }

    /// Largest step size admitted by the standard bound.
    pub fn max_eta_t1(&self) -> f64 {
        let (d, n) = (self.d as f64, self.n as f64);
        1.0 / (2.0 * self.l_smooth * d * n * n)
    }

    /// `Ω(Λ) = η/2 − 3Lη²(d+Q−1)NΛ / (2Q)`.
    pub fn omega(&self, lambda: f64) -> f64 {
        self.eta / 2.0 - self.variance_factor() * lambda
    }

    /// `Θ₁ = ¼μ²L²η(d+3)³N + (ηN + 3Lη²(d+Q−1)N/(2Q))σ_G² + 3Lη²(d+Q−1)N/(2Q)·σ²`.
    pub fn theta1(&self) -> f64 {
        let n = self.n as f64;
        let v = self.variance_factor();
        self.zo_error() * self.eta * n
            + (self.eta * n + v) * self.sigma_g * self.sigma_g
            + v * self.sigma * self.sigma
    }

    /// `Φ(Λ) = η/2 − dη²NL(κ+2)Λ / (2(d+2))`.
    pub fn phi(&self, lambda: f64) -> f64 {
        self.eta / 2.0 - self.curvature_factor() * self.n as f64 * lambda
    }

    /// `Θ₂ = ηN(σ_G² + ¼μ²L²(d+3)³) + dη²L(κ+2)σ² / (2(d+2))`.
    pub fn theta2(&self) -> f64 {
        self.eta * self.n as f64 * (self.sigma_g * self.sigma_g + self.zo_error())
            + self.curvature_factor() * self.sigma * self.sigma
    }
}

fn check_lambda(lambda: f64, n: usize) -> Result<()> {
    if !(0.0..=n as f64).contains(&lambda) {
        return Err(Error::invalid(format!("Λ = {lambda} outside [0, {n}]")));
    }
    Ok(())
}

/// Bias term of the dimension-free bound, `Θ₂·Λ / Φ(Λ)`.
pub fn bias_term_t2(lambda: f64, k: &BoundConstants) -> Result<f64> {
    k.check_positive()?;
    check_lambda(lambda, k.n)?;
    if k.eta > k.max_eta_t2() {
        return Err(Error::invalid(format!(
            "step size {} exceeds the admissible {}",
            k.eta,
            k.max_eta_t2()
        )));
    }
    Ok(k.theta2() * lambda / k.phi(lambda))
}

/// Bias term of the standard bound, `Θ₁·Λ / Ω(Λ)`.
///
/// The step-size condition alone does not keep `Ω` positive for every `Λ ≤ N`
/// when `Q` is small, so a non-positive `Ω(Λ)` is reported as an error too.
pub fn bias_term_t1(lambda: f64, k: &BoundConstants) -> Result<f64> {
    k.check_positive()?;
    check_lambda(lambda, k.n)?;
    if k.eta > k.max_eta_t1() {
        return Err(Error::invalid(format!(
            "step size {} exceeds the admissible {}",
            k.eta,
            k.max_eta_t1()
        )));
    }
    let omega = k.omega(lambda);
    if omega <= 0.0 {
        return Err(Error::invalid(format!("Ω(Λ = {lambda}) = {omega} is not positive")));
    }
    Ok(k.theta1() * lambda / omega)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&str]) -> BlockActivationMatrix {
        BlockActivationMatrix::parse_rows(rows).unwrap()
    }

    #[test]
    fn popularity_examples() {
        let p = popularity(&m(&["111", "111", "111"])).unwrap();
        assert_eq!(p.block, vec![3, 3, 3]);
        assert_eq!(p.least, vec![3, 3, 3]);

        let p = popularity(&m(&["100", "010", "001"])).unwrap();
        assert_eq!(p.block, vec![1, 1, 1]);
        assert_eq!(p.least, vec![1, 1, 1]);

        // client columns (1,1,1), (1,1,0), (0,0,1)
        let a = BlockActivationMatrix::from_columns(&[
            vec![true, true, true],
            vec![true, true, false],
            vec![false, false, true],
        ])
        .unwrap();
        let p = popularity(&a).unwrap();
        assert_eq!(p.block, vec![2, 2, 2]);
        assert_eq!(p.least, vec![2, 2, 2]);
    }

    #[test]
    fn invalid_matrices_name_the_offender() {
        let a = BlockActivationMatrix::from_rows_unchecked(&[vec![true, false], vec![true, false]]).unwrap();
        let err = popularity(&a).unwrap_err().to_string();
        assert!(err.contains("client 1"), "{err}");
        let a = BlockActivationMatrix::from_rows_unchecked(&[vec![true, true], vec![false, false]]).unwrap();
        let err = lambda_value(&a).unwrap_err().to_string();
        assert!(err.contains("block 1"), "{err}");
    }

    #[test]
    fn lambda_examples() {
        assert!((lambda_value(&m(&["111", "111", "111"])).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(lambda_value(&m(&["100", "010", "001"])).unwrap(), 3.0);
        assert_eq!(lambda_from_least(&[2, 2, 1]), 1.5);
    }

    #[test]
    fn majorization_examples() {
        assert!(majorizes(&[2, 2, 2], &[3, 2, 1]).unwrap());
        assert!(!majorizes(&[3, 2, 1], &[2, 2, 2]).unwrap());
        assert!(majorizes(&[2, 2, 1], &[3, 1, 1]).unwrap());
        assert!(!majorizes(&[1, 1], &[1, 2]).unwrap());
        assert!(majorizes(&[1, 2], &[1]).is_err());
    }

    #[test]
    fn serde_accepts_both_encodings() {
        let a: BlockActivationMatrix = serde_json::from_str(r#"[[1,0],[0,1]]"#).unwrap();
        let b: BlockActivationMatrix = serde_json::from_str(r#"["10","01"]"#).unwrap();
        assert_eq!(a, b);
        assert_eq!(serde_json::to_string(&a).unwrap(), "[[1,0],[0,1]]");
        assert!(serde_json::from_str::<BlockActivationMatrix>(r#"[[1,2]]"#).is_err());
        assert!(serde_json::from_str::<BlockActivationMatrix>(r#"["10","00"]"#).is_err());
    }

    fn constants() -> BoundConstants {
        let mut k = BoundConstants {
            eta: 0.0,
            d: 100,
            n: 3,
            q: 4,
            l_smooth: 2.0,
            kappa: 5.0,
            mu: 1e-3,
            sigma: 0.5,
            sigma_g: 0.3,
        };
        k.eta = k.max_eta_t2();
        k
    }

    #[test]
    fn bias_t2_examples() {
        let k = constants();
        assert_eq!(bias_term_t2(0.0, &k).unwrap(), 0.0);
        assert!(bias_term_t2(1.0 / 3.0, &k).unwrap() < bias_term_t2(3.0, &k).unwrap());
        let h = 1e-6;
        let slope = (bias_term_t2(1.0 + h, &k).unwrap() - bias_term_t2(1.0 - h, &k).unwrap()) / (2.0 * h);
        // closed-form derivative: (Θ₂Φ + c·Θ₂Λ) / Φ² with c = dη²NL(κ+2)/(2(d+2))
        let c = k.curvature_factor() * k.n as f64;
        let phi = k.phi(1.0);
        let exact = (k.theta2() * phi + c * k.theta2()) / (phi * phi);
        assert!(slope > 0.0);
        assert!((slope - exact).abs() / exact < 1e-6);
    }

    #[test]
    fn bias_rejects_large_step() {
        let mut k = constants();
        k.eta *= 1.01;
        assert!(bias_term_t2(1.0, &k).is_err());
    }

    #[test]
    fn bias_t1_is_increasing_where_defined() {
        let mut k = constants();
        k.eta = k.max_eta_t1() / 4.0;
        let a = bias_term_t1(0.5, &k).unwrap();
        let b = bias_term_t1(1.0, &k).unwrap();
        assert!(a < b);
        assert!(bias_term_t1(4.0, &k).is_err());
    }
}
