//! Datasets: synthesis, JSON-lines loading and non-IID partitioning.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, GaussianStream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Features {
    Tokens(Vec<u32>),
    Dense(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub features: Features,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for e in &self.examples {
            counts[e.label] += 1;
        }
        counts
    }

    /// Splits off the last `holdout` examples as a held-out set.
    pub fn split_holdout(mut self, holdout: usize) -> Result<(Dataset, Dataset)> {
        if holdout >= self.len() {
            return Err(Error::invalid("held-out split would leave no training data"));
        }
        let tail = self.examples.split_off(self.len() - holdout);
        let classes = self.classes;
        Ok((
            self,
            Dataset {
                examples: tail,
                classes,
            },
        ))
    }
}

/// One mini-batch `ξ_n`. The quadratic backend ignores `examples` and draws
/// its noise from `seed`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub client: usize,
    pub round: usize,
    pub seed: u64,
    pub examples: Vec<Example>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub client: usize,
    pub examples: Vec<Example>,
    pub sampling_seed: u64,
}

impl ClientDataset {
    /// A client without examples; batches carry only a noise seed.
    pub fn seed_only(client: usize, sampling_seed: u64) -> Self {
        Self {
            client,
            examples: Vec::new(),
            sampling_seed,
        }
    }

    /// `size` examples drawn with replacement, keyed on `(round, client, draw)`.
    pub fn batch(&self, round: usize, draw: usize, size: usize) -> Batch {
        let seed = derive_seed(self.sampling_seed, &[round as u64, self.client as u64, draw as u64]);
        let mut stream = GaussianStream::new(seed);
        let examples = if self.examples.is_empty() {
            Vec::new()
        } else {
            (0..size)
                .map(|_| self.examples[stream.index(self.examples.len())].clone())
                .collect()
        };
        Batch {
            client: self.client,
            round,
            seed,
            examples,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SyntheticKind {
    /// Gaussian blobs around random class centres scaled by `separation`.
    Blobs { features: usize, separation: f64 },
    /// Random token sequences with class-specific marker tokens mixed in.
    Tokens { vocab: usize, seq_len: usize },
}

/// Balanced synthetic classification data, deterministic from `seed`.
pub fn make_synthetic_classification(
    kind: SyntheticKind,
    classes: usize,
    size: usize,
    seed: u64,
) -> Result<Dataset> {
    if classes == 0 || size == 0 {
        return Err(Error::invalid("classes and size must be positive"));
    }
    let mut stream = GaussianStream::new(derive_seed(seed, &[0xDA7A]));
    let examples = match kind {
        SyntheticKind::Blobs {
            features,
            separation,
        } => {
            if features == 0 {
                return Err(Error::invalid("blobs need at least one feature"));
            }
            let centres: Vec<Vec<f64>> = (0..classes)
                .map(|_| (0..features).map(|_| separation * stream.normal()).collect())
                .collect();
            (0..size)
                .map(|i| {
                    let label = i % classes;
                    let x = centres[label].iter().map(|c| c + stream.normal()).collect();
                    Example {
                        features: Features::Dense(x),
                        label,
                    }
                })
                .collect()
        }
        SyntheticKind::Tokens { vocab, seq_len } => {
            const MARKERS: usize = 4;
            let noise_vocab = vocab / 2;
            if seq_len < 2 || noise_vocab == 0 || noise_vocab + classes * MARKERS > vocab {
                return Err(Error::invalid(format!(
                    "vocab {vocab} too small for {classes} classes with {MARKERS} markers each"
                )));
            }
            let marked = (seq_len / 4).max(1);
            (0..size)
                .map(|i| {
                    let label = i % classes;
                    let mut tokens: Vec<u32> =
                        (0..seq_len).map(|_| stream.index(noise_vocab) as u32).collect();
                    for _ in 0..marked {
                        let pos = stream.index(seq_len);
                        let marker = noise_vocab + label * MARKERS + stream.index(MARKERS);
                        tokens[pos] = marker as u32;
                    }
                    Example {
                        features: Features::Tokens(tokens),
                        label,
                    }
                })
                .collect()
        }
    };
    Ok(Dataset { examples, classes })
}

/// FNV-1a hash of a lower-cased word, reduced to `vocab`.
pub fn hash_token(word: &str, vocab: usize) -> u32 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in word.to_lowercase().bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    (h % vocab as u64) as u32
}

#[derive(Deserialize)]
struct JsonRecord {
    text: Option<String>,
    x: Option<Vec<f64>>,
    label: usize,
}

/// Loads `{"text": …, "label": k}` or `{"x": [...], "label": k}` lines.
/// Text is split on whitespace, hashed into `vocab` ids and truncated to `seq_len`.
pub fn load_jsonl(path: &Path, vocab: usize, seq_len: usize) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut examples = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonRecord = serde_json::from_str(&line)?;
        let features = match (rec.text, rec.x) {
            (Some(text), None) => {
                let mut tokens: Vec<u32> =
                    text.split_whitespace().map(|w| hash_token(w, vocab)).collect();
                tokens.truncate(seq_len);
                if tokens.is_empty() {
                    return Err(Error::invalid(format!("line {}: empty text", lineno + 1)));
                }
                Features::Tokens(tokens)
            }
            (None, Some(x)) => Features::Dense(x),
            _ => {
                return Err(Error::invalid(format!(
                    "line {}: expected exactly one of \"text\" or \"x\"",
                    lineno + 1
                )))
            }
        };
        examples.push(Example {
            features,
            label: rec.label,
        });
    }
    if examples.is_empty() {
        return Err(Error::invalid(format!("{} contains no examples", path.display())));
    }
    let classes = examples.iter().map(|e| e.label).max().unwrap_or(0) + 1;
    Ok(Dataset { examples, classes })
}

/// Splits `dataset` over `clients` with per-class Dirichlet proportions.
///
/// Partitions are disjoint and cover the dataset. A client left empty takes
/// one example from the currently largest client.
pub fn dirichlet_partition(
    dataset: &Dataset,
    clients: usize,
    concentration: f64,
    seed: u64,
) -> Result<Vec<ClientDataset>> {
    if clients == 0 {
        return Err(Error::invalid("need at least one client"));
    }
    if !(concentration > 0.0 && concentration.is_finite()) {
        return Err(Error::invalid("concentration must be positive"));
    }
    if dataset.len() < clients {
        return Err(Error::invalid(format!(
            "{} examples cannot be split over {clients} clients",
            dataset.len()
        )));
    }
    let gamma = Gamma::new(concentration, 1.0).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xD1]));
    let mut shuffle = GaussianStream::new(derive_seed(seed, &[0xD2]));

    let mut parts: Vec<Vec<usize>> = vec![Vec::new(); clients];
    for class in 0..dataset.classes {
        let mut idx: Vec<usize> = (0..dataset.len())
            .filter(|&i| dataset.examples[i].label == class)
            .collect();
        if idx.is_empty() {
            continue;
        }
        for i in (1..idx.len()).rev() {
            idx.swap(i, shuffle.index(i + 1));
        }
        let draws: Vec<f64> = (0..clients).map(|_| gamma.sample(&mut rng)).collect();
        let total: f64 = draws.iter().sum();
        let mut start = 0usize;
        let mut acc = 0.0;
        for (n, w) in draws.iter().enumerate() {
            acc += w;
            let end = if n + 1 == clients {
                idx.len()
            } else {
                ((acc / total) * idx.len() as f64).round() as usize
            }
            .clamp(start, idx.len());
            parts[n].extend_from_slice(&idx[start..end]);
            start = end;
        }
    }
    while let Some(empty) = parts.iter().position(Vec::is_empty) {
        let donor = (0..clients)
            .max_by_key(|&n| (parts[n].len(), std::cmp::Reverse(n)))
            .expect("clients > 0");
        let moved = parts[donor].pop().expect("donor has at least two examples");
        parts[empty].push(moved);
    }

    Ok(parts
        .into_iter()
        .enumerate()
        .map(|(client, mut idx)| {
            idx.sort_unstable();
            ClientDataset {
                client,
                examples: idx.iter().map(|&i| dataset.examples[i].clone()).collect(),
                sampling_seed: derive_seed(seed, &[0xB7, client as u64]),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn blobs(classes: usize, size: usize) -> Dataset {
        make_synthetic_classification(
            SyntheticKind::Blobs {
                features: 4,
                separation: 3.0,
            },
            classes,
            size,
            1,
        )
        .unwrap()
    }

    #[test]
    fn synthetic_is_balanced_and_deterministic() {
        let d = blobs(4, 400);
        assert_eq!(d.class_counts(), vec![100; 4]);
        assert_eq!(d, blobs(4, 400));
        let t = make_synthetic_classification(SyntheticKind::Tokens { vocab: 64, seq_len: 8 }, 4, 40, 2).unwrap();
        assert!(t.examples.iter().all(|e| matches!(&e.features, Features::Tokens(v) if v.len() == 8 && v.iter().all(|&x| x < 64))));
        assert!(make_synthetic_classification(SyntheticKind::Tokens { vocab: 64, seq_len: 8 }, 4, 0, 2).is_err());
        assert!(make_synthetic_classification(SyntheticKind::Tokens { vocab: 16, seq_len: 8 }, 4, 10, 2).is_err());
    }

    #[test]
    fn partition_is_disjoint_and_complete() {
        let d = blobs(4, 1000);
        for seed in 0..20 {
            let parts = dirichlet_partition(&d, 50, 1.0, seed).unwrap();
            assert_eq!(parts.len(), 50);
            assert!(parts.iter().all(|p| !p.examples.is_empty()));
            assert_eq!(parts.iter().map(|p| p.examples.len()).sum::<usize>(), 1000);
            let mut all: Vec<Example> = parts.iter().flat_map(|p| p.examples.clone()).collect();
            all.sort_by(|a, b| format!("{a:?}").cmp(&format!("{b:?}")));
            let mut orig = d.examples.clone();
            orig.sort_by(|a, b| format!("{a:?}").cmp(&format!("{b:?}")));
            assert_eq!(all, orig);
        }
    }

    #[test]
    fn single_client_gets_everything() {
        let d = blobs(3, 30);
        let parts = dirichlet_partition(&d, 1, 1.0, 0).unwrap();
        assert_eq!(parts[0].examples, d.examples);
    }

    #[test]
    fn large_concentration_matches_global_proportions() {
        let d = blobs(4, 8000);
        let parts = dirichlet_partition(&d, 10, 1e6, 3).unwrap();
        for p in &parts {
            let mut counts = [0usize; 4];
            p.examples.iter().for_each(|e| counts[e.label] += 1);
            for c in counts {
                let share = c as f64 / p.examples.len() as f64;
                assert!((share - 0.25).abs() < 0.05, "share {share}");
            }
        }
    }

    #[test]
    fn partition_errors() {
        let d = blobs(2, 4);
        assert!(dirichlet_partition(&d, 5, 1.0, 0).is_err());
        assert!(dirichlet_partition(&d, 2, 0.0, 0).is_err());
    }

    #[test]
    fn jsonl_loading() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, r#"{{"text": "good movie", "label": 1}}"#).unwrap();
        writeln!(f, r#"{{"text": "bad", "label": 0}}"#).unwrap();
        let d = load_jsonl(f.path(), 256, 16).unwrap();
        assert_eq!(d.classes, 2);
        assert_eq!(
            d.examples[0].features,
            Features::Tokens(vec![hash_token("good", 256), hash_token("movie", 256)])
        );

        let mut g = tempfile::NamedTempFile::new().unwrap();
        writeln!(g, r#"{{"x": [0.5, 1.0], "label": 2}}"#).unwrap();
        let d = load_jsonl(g.path(), 256, 16).unwrap();
        assert_eq!(d.examples[0].features, Features::Dense(vec![0.5, 1.0]));
        assert_eq!(d.classes, 3);

        let mut bad = tempfile::NamedTempFile::new().unwrap();
        writeln!(bad, r#"{{"label": 0}}"#).unwrap();
        assert!(load_jsonl(bad.path(), 256, 16).is_err());
    }

    #[test]
    fn batches_are_keyed_by_round() {
        let d = blobs(2, 20);
        let parts = dirichlet_partition(&d, 2, 1.0, 0).unwrap();
        let a = parts[0].batch(3, 0, 8);
        assert_eq!(a, parts[0].batch(3, 0, 8));
        assert_ne!(a.seed, parts[0].batch(4, 0, 8).seed);
        assert_eq!(a.examples.len(), 8);
    }
}
