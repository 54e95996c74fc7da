//! A small pre-LayerNorm transformer classifier, forward pass only.
//!
//! Block 0 additionally owns the token and position embeddings; the last
//! block owns the final LayerNorm and the linear classifier. Sequences are
//! mean-pooled after the final LayerNorm. Attention is bidirectional.

use serde::{Deserialize, Serialize};

use super::data::{Batch, Example, Features};
use crate::error::{Error, Result};
use crate::rng::{BlockLayout, GaussianStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TinyTransformerSpec {
    pub vocab: usize,
    pub hidden: usize,
    pub heads: usize,
    pub blocks: usize,
    pub ffn_ratio: usize,
    pub seq_len: usize,
    pub classes: usize,
}

impl Default for TinyTransformerSpec {
    fn default() -> Self {
        Self {
            vocab: 256,
            hidden: 32,
            heads: 2,
            blocks: 4,
            ffn_ratio: 4,
            seq_len: 16,
            classes: 4,
        }
    }
}

impl TinyTransformerSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("vocab", self.vocab),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("blocks", self.blocks),
            ("ffn_ratio", self.ffn_ratio),
            ("seq_len", self.seq_len),
            ("classes", self.classes),
        ] {
            if v == 0 {
                return Err(Error::invalid(format!("transformer {name} must be positive")));
            }
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!(
                "hidden {} is not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        Ok(())
    }

    /// Parameters of one transformer layer.
    pub fn layer_params(&self) -> usize {
        let h = self.hidden;
        let f = self.ffn_ratio * h;
        4 * h + 4 * (h * h + h) + (h * f + f) + (f * h + h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Layer {
    ln1: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    ln2: usize,
    w1: usize,
    w2: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TinyTransformer {
    spec: TinyTransformerSpec,
    layout: BlockLayout,
    tok_emb: usize,
    pos_emb: usize,
    layers: Vec<Layer>,
    ln_final: usize,
    classifier: usize,
}

impl TinyTransformer {
    pub fn new(spec: TinyTransformerSpec) -> Result<Self> {
        spec.validate()?;
        let h = spec.hidden;
        let f = spec.ffn_ratio * h;
        let mut cursor = 0usize;
        let mut take = |n: usize| {
            let at = cursor;
            cursor += n;
            at
        };
        let tok_emb = take(spec.vocab * h);
        let pos_emb = take(spec.seq_len * h);
        let mut layers = Vec::with_capacity(spec.blocks);
        let mut block_dims = Vec::with_capacity(spec.blocks);
        let mut block_start = 0;
        let mut ln_final = 0;
        let mut classifier = 0;
        for m in 0..spec.blocks {
            layers.push(Layer {
                ln1: take(2 * h),
                wq: take(h * h + h),
                wk: take(h * h + h),
                wv: take(h * h + h),
                wo: take(h * h + h),
                ln2: take(2 * h),
                w1: take(h * f + f),
                w2: take(f * h + h),
            });
            if m + 1 == spec.blocks {
                ln_final = take(2 * h);
                classifier = take(h * spec.classes + spec.classes);
            }
            let end = take(0);
            block_dims.push(end - block_start);
            block_start = end;
        }
        Ok(Self {
            spec,
            layout: BlockLayout::new(block_dims)?,
            tok_emb,
            pos_emb,
            layers,
            ln_final,
            classifier,
        })
    }

    pub fn spec(&self) -> &TinyTransformerSpec {
        &self.spec
    }

    pub fn layout(&self) -> &BlockLayout {
        &self.layout
    }

    /// Gaussian weights with standard deviation `scale`, unit LayerNorm gains, zero biases.
    pub fn initial_params(&self, seed: u64, scale: f64) -> Vec<f64> {
        let h = self.spec.hidden;
        let f = self.spec.ffn_ratio * h;
        let mut p = vec![0.0; self.layout.dim()];
        let mut s = GaussianStream::new(seed);
        let mut fill = |p: &mut [f64], at: usize, n: usize| {
            for x in &mut p[at..at + n] {
                *x = scale * s.normal();
            }
        };
        fill(&mut p, self.tok_emb, self.spec.vocab * h);
        fill(&mut p, self.pos_emb, self.spec.seq_len * h);
        for l in &self.layers {
            p[l.ln1..l.ln1 + h].fill(1.0);
            p[l.ln2..l.ln2 + h].fill(1.0);
            for at in [l.wq, l.wk, l.wv, l.wo] {
                fill(&mut p, at, h * h);
            }
            fill(&mut p, l.w1, h * f);
            fill(&mut p, l.w2, f * h);
        }
        p[self.ln_final..self.ln_final + h].fill(1.0);
        fill(&mut p, self.classifier, h * self.spec.classes);
        p
    }

    fn tokens<'a>(&self, example: &'a Example) -> Result<&'a [u32]> {
        match &example.features {
            Features::Tokens(t) if !t.is_empty() => {
                if let Some(&bad) = t.iter().find(|&&x| x as usize >= self.spec.vocab) {
                    return Err(Error::invalid(format!(
                        "token {bad} outside vocabulary of {}",
                        self.spec.vocab
                    )));
                }
                Ok(&t[..t.len().min(self.spec.seq_len)])
            }
            Features::Tokens(_) => Err(Error::invalid("empty token sequence")),
            Features::Dense(_) => Err(Error::UnsupportedBackend {
                backend: "tiny transformer",
                what: "dense feature vectors".into(),
            }),
        }
    }

    /// Class logits for one token sequence.
    pub fn logits(&self, params: &[f64], example: &Example) -> Result<Vec<f64>> {
        let tokens = self.tokens(example)?;
        let h = self.spec.hidden;
        let t = tokens.len();
        let mut x = vec![0.0; t * h];
        for (i, &tok) in tokens.iter().enumerate() {
            let e = &params[self.tok_emb + tok as usize * h..][..h];
            let pe = &params[self.pos_emb + i * h..][..h];
            for j in 0..h {
                x[i * h + j] = e[j] + pe[j];
            }
        }
        let mut scratch = Scratch::new(t, h, self.spec.ffn_ratio * h);
        for layer in &self.layers {
            self.layer_forward(params, layer, &mut x, t, &mut scratch);
        }
        let mut normed = vec![0.0; h];
        let mut pooled = vec![0.0; h];
        for i in 0..t {
            layer_norm(&x[i * h..(i + 1) * h], &params[self.ln_final..], &mut normed);
            for j in 0..h {
                pooled[j] += normed[j];
            }
        }
        pooled.iter_mut().for_each(|p| *p /= t as f64);
        let mut logits = vec![0.0; self.spec.classes];
        linear(&pooled, &params[self.classifier..], h, self.spec.classes, &mut logits);
        Ok(logits)
    }

    fn layer_forward(&self, params: &[f64], l: &Layer, x: &mut [f64], t: usize, s: &mut Scratch) {
        let h = self.spec.hidden;
        let f = self.spec.ffn_ratio * h;
        let heads = self.spec.heads;
        let dh = h / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        for i in 0..t {
            layer_norm(&x[i * h..(i + 1) * h], &params[l.ln1..], &mut s.normed[i * h..(i + 1) * h]);
        }
        for i in 0..t {
            let row = &s.normed[i * h..(i + 1) * h];
            linear(row, &params[l.wq..], h, h, &mut s.q[i * h..(i + 1) * h]);
            linear(row, &params[l.wk..], h, h, &mut s.k[i * h..(i + 1) * h]);
            linear(row, &params[l.wv..], h, h, &mut s.v[i * h..(i + 1) * h]);
        }
        s.ctx.fill(0.0);
        for head in 0..heads {
            let off = head * dh;
            for i in 0..t {
                let qi = &s.q[i * h + off..i * h + off + dh];
                let mut max = f64::NEG_INFINITY;
                for j in 0..t {
                    let kj = &s.k[j * h + off..j * h + off + dh];
                    let score = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
                    s.scores[j] = score;
                    max = max.max(score);
                }
                let mut z = 0.0;
                for score in &mut s.scores[..t] {
                    *score = (*score - max).exp();
                    z += *score;
                }
                for j in 0..t {
                    let w = s.scores[j] / z;
                    let vj = &s.v[j * h + off..j * h + off + dh];
                    for (c, v) in s.ctx[i * h + off..i * h + off + dh].iter_mut().zip(vj) {
                        *c += w * v;
                    }
                }
            }
        }
        for i in 0..t {
            linear(&s.ctx[i * h..(i + 1) * h], &params[l.wo..], h, h, &mut s.proj);
            for j in 0..h {
                x[i * h + j] += s.proj[j];
            }
        }
        for i in 0..t {
            layer_norm(&x[i * h..(i + 1) * h], &params[l.ln2..], &mut s.proj);
            linear(&s.proj, &params[l.w1..], h, f, &mut s.hidden);
            s.hidden.iter_mut().for_each(|u| *u = gelu(*u));
            linear(&s.hidden, &params[l.w2..], f, h, &mut s.proj);
            for j in 0..h {
                x[i * h + j] += s.proj[j];
            }
        }
    }

    /// Mean cross-entropy over the batch.
    pub fn loss(&self, params: &[f64], batch: &Batch) -> Result<f64> {
        if batch.examples.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let mut total = 0.0;
        for ex in &batch.examples {
            if ex.label >= self.spec.classes {
                return Err(Error::invalid(format!(
                    "label {} outside {} classes",
                    ex.label, self.spec.classes
                )));
            }
            let logits = self.logits(params, ex)?;
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            total += lse - logits[ex.label];
        }
        Ok(total / batch.examples.len() as f64)
    }

    /// Fraction of examples whose arg-max logit equals the label.
    pub fn accuracy(&self, params: &[f64], examples: &[Example]) -> Result<f64> {
        if examples.is_empty() {
            return Err(Error::invalid("no examples to evaluate"));
        }
        let mut correct = 0usize;
        for ex in examples {
            let logits = self.logits(params, ex)?;
            let pred = (0..logits.len())
                .fold(0, |best, c| if logits[c] > logits[best] { c } else { best });
            correct += usize::from(pred == ex.label);
        }
        Ok(correct as f64 / examples.len() as f64)
    }
}

struct Scratch {
    normed: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    ctx: Vec<f64>,
    scores: Vec<f64>,
    proj: Vec<f64>,
    hidden: Vec<f64>,
}

impl Scratch {
    fn new(t: usize, h: usize, f: usize) -> Self {
        Self {
            normed: vec![0.0; t * h],
            q: vec![0.0; t * h],
            k: vec![0.0; t * h],
            v: vec![0.0; t * h],
            ctx: vec![0.0; t * h],
            scores: vec![0.0; t],
            proj: vec![0.0; h],
            hidden: vec![0.0; f],
        }
    }
}

/// `out = x·W + b` with `W` stored row-major as `[input][output]`, bias after it.
fn linear(x: &[f64], wb: &[f64], inputs: usize, outputs: usize, out: &mut [f64]) {
    let (w, rest) = wb.split_at(inputs * outputs);
    out[..outputs].copy_from_slice(&rest[..outputs]);
    for (i, &xi) in x[..inputs].iter().enumerate() {
        let row = &w[i * outputs..(i + 1) * outputs];
        for (o, &wij) in out[..outputs].iter_mut().zip(row) {
            *o += xi * wij;
        }
    }
}

/// Gain then bias, each `x.len()` long, read from the front of `gb`.
fn layer_norm(x: &[f64], gb: &[f64], out: &mut [f64]) {
    let h = x.len();
    let mean = x.iter().sum::<f64>() / h as f64;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / h as f64;
    let inv = 1.0 / (var + 1e-5).sqrt();
    for j in 0..h {
        out[j] = (x[j] - mean) * inv * gb[j] + gb[h + j];
    }
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_scale_and_layout() {
        let tf = TinyTransformer::new(TinyTransformerSpec::default()).unwrap();
        let d = tf.layout().dim();
        assert!((40_000..70_000).contains(&d), "d = {d}");
        let s = tf.spec();
        let dims = tf.layout().block_dims();
        assert_eq!(dims[1], s.layer_params());
        assert_eq!(dims[0], s.layer_params() + (s.vocab + s.seq_len) * s.hidden);
        assert_eq!(dims[3], s.layer_params() + 2 * s.hidden + s.hidden * s.classes + s.classes);
    }

    #[test]
    fn single_block_owns_everything() {
        let spec = TinyTransformerSpec {
            blocks: 1,
            ..TinyTransformerSpec::default()
        };
        let tf = TinyTransformer::new(spec).unwrap();
        assert_eq!(tf.layout().num_blocks(), 1);
        assert_eq!(tf.layout().dim(), tf.initial_params(0, 0.02).len());
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(TinyTransformer::new(TinyTransformerSpec {
            heads: 3,
            ..Default::default()
        })
        .is_err());
        let tf = TinyTransformer::new(TinyTransformerSpec::default()).unwrap();
        let p = tf.initial_params(0, 0.02);
        let dense = Example {
            features: Features::Dense(vec![1.0]),
            label: 0,
        };
        assert!(matches!(tf.logits(&p, &dense), Err(Error::UnsupportedBackend { .. })));
        let oov = Example {
            features: Features::Tokens(vec![999]),
            label: 0,
        };
        assert!(tf.logits(&p, &oov).is_err());
    }

    #[test]
    fn long_sequences_are_truncated() {
        let tf = TinyTransformer::new(TinyTransformerSpec::default()).unwrap();
        let p = tf.initial_params(1, 0.02);
        let short = Example {
            features: Features::Tokens((0..16).collect()),
            label: 0,
        };
        let long = Example {
            features: Features::Tokens((0..40).collect()),
            label: 0,
        };
        assert_eq!(tf.logits(&p, &short).unwrap(), tf.logits(&p, &long).unwrap());
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.841_191_990_944_2).abs() < 1e-9);
        assert!((gelu(-1.0) + 0.158_808_009_055_8).abs() < 1e-9);
    }
}
