//! Synthetic two-domain sequence data.
//!
//! Each label symbol owns a feature template. An utterance holds every
//! symbol's template for a random 2 to 4 frames, plus Gaussian noise.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::{Distribution, Normal, StandardNormal};
use thiserror::Error;

use crate::config::{ConfigError, KvConfig};
use crate::model::{Batch, ModelError};

pub const MIN_REPEAT: usize = 2;
pub const MAX_REPEAT: usize = 4;
/// Templates must be at least this many noise deviations apart.
pub const SEPARATION: f32 = 4.0;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("domain `{id}`: {reason}")]
    Spec { id: String, reason: String },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Generator parameters of one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainSpec {
    pub id: String,
    pub vocab_size: usize,
    pub feat_dim: usize,
    /// `[vocab_size × feat_dim]`; row 0 belongs to the blank and is unused.
    pub templates: Vec<f32>,
    pub noise_std: f32,
    pub min_label_len: usize,
    pub max_label_len: usize,
    /// Unnormalized sampling weights of symbols `1..vocab_size`.
    pub label_weights: Vec<f64>,
}

impl DomainSpec {
    /// Standard-normal templates and uniform labels. Templates are redrawn
    /// (up to 64 times) until they are distinguishable at `noise_std`.
    pub fn random(id: &str, vocab_size: usize, feat_dim: usize, noise_std: f32, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut spec = Self {
            id: id.to_string(),
            vocab_size,
            feat_dim,
            templates: vec![0.0f32; vocab_size * feat_dim],
            noise_std,
            min_label_len: 2,
            max_label_len: 6,
            label_weights: vec![1.0; vocab_size.saturating_sub(1)],
        };
        for _ in 0..64 {
            for v in &mut spec.templates[feat_dim..] {
                *v = rng.sample(StandardNormal);
            }
            if spec.min_template_distance() >= SEPARATION * noise_std {
                break;
            }
        }
        spec
    }

    /// The same symbols seen through a different channel: every template is
    /// offset by `shift`, and labels follow `label_weights`.
    pub fn shifted(&self, id: &str, shift: &[f32], label_weights: Vec<f64>) -> Self {
        let mut out = self.clone();
        out.id = id.to_string();
        for row in out.templates.chunks_exact_mut(self.feat_dim).skip(1) {
            for (v, s) in row.iter_mut().zip(shift) {
                *v += s;
            }
        }
        out.label_weights = label_weights;
        out
    }

    /// The same symbols with every template moved by its own seeded
    /// Gaussian offset of std `scale`, and labels following `label_weights`.
    pub fn perturbed(&self, id: &str, scale: f32, seed: u64, label_weights: Vec<f64>) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = self.clone();
        out.id = id.to_string();
        for v in &mut out.templates[self.feat_dim..] {
            *v += scale * rng.sample::<f32, _>(StandardNormal);
        }
        out.label_weights = label_weights;
        out
    }

    pub fn template(&self, symbol: usize) -> &[f32] {
        &self.templates[symbol * self.feat_dim..(symbol + 1) * self.feat_dim]
    }

    /// Smallest L2 distance between two label templates.
    pub fn min_template_distance(&self) -> f32 {
        let mut best = f32::INFINITY;
        for a in 1..self.vocab_size {
            for b in a + 1..self.vocab_size {
                let d: f32 = self
                    .template(a)
                    .iter()
                    .zip(self.template(b))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f32>()
                    .sqrt();
                best = best.min(d);
            }
        }
        best
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let fail = |reason: String| {
            Err(DataError::Spec {
                id: self.id.clone(),
                reason,
            })
        };
        if self.vocab_size < 2 || self.feat_dim == 0 {
            return fail("need at least one label symbol and a positive feature width".into());
        }
        if self.templates.len() != self.vocab_size * self.feat_dim {
            return fail(format!(
                "{} template values for {} symbols of width {}",
                self.templates.len(),
                self.vocab_size,
                self.feat_dim
            ));
        }
        if self.label_weights.len() != self.vocab_size - 1
            || self.label_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0))
            || self.label_weights.iter().all(|&w| w == 0.0)
        {
            return fail("label weights must be one non-negative value per symbol, not all zero".into());
        }
        if self.min_label_len == 0 || self.min_label_len > self.max_label_len {
            return fail(format!(
                "label length bounds {}..={} are invalid",
                self.min_label_len, self.max_label_len
            ));
        }
        if self.label_weights.iter().filter(|&&w| w > 0.0).count() < 2 && self.max_label_len > 1 {
            return fail("labels longer than one symbol need two symbols with positive weight".into());
        }
        if !(self.noise_std >= 0.0) {
            return fail(format!("noise std {} is negative", self.noise_std));
        }
        let d = self.min_template_distance();
        if self.vocab_size > 2 && d < SEPARATION * self.noise_std {
            return fail(format!(
                "templates only {d:.3} apart, below {SEPARATION} x noise std {}",
                self.noise_std
            ));
        }
        Ok(())
    }

    /// Longest utterance in frames.
    pub fn max_frames(&self) -> usize {
        self.max_label_len * MAX_REPEAT
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("id", &self.id);
        kv.set("vocab_size", self.vocab_size);
        kv.set("feat_dim", self.feat_dim);
        kv.set("noise_std", self.noise_std);
        kv.set("min_label_len", self.min_label_len);
        kv.set("max_label_len", self.max_label_len);
        kv.set("label_weights", join(&self.label_weights));
        for s in 1..self.vocab_size {
            kv.set(format!("template.{s}"), join(self.template(s)));
        }
        kv
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self, DataError> {
        let vocab_size: usize = kv.require("vocab_size")?;
        let feat_dim: usize = kv.require("feat_dim")?;
        let mut allowed: Vec<String> = [
            "id",
            "vocab_size",
            "feat_dim",
            "noise_std",
            "min_label_len",
            "max_label_len",
            "label_weights",
        ]
        .map(String::from)
        .to_vec();
        allowed.extend((1..vocab_size).map(|s| format!("template.{s}")));
        let allowed: Vec<&str> = allowed.iter().map(String::as_str).collect();
        kv.check_keys(&allowed)?;
        let mut templates = vec![0.0f32; vocab_size * feat_dim];
        for s in 1..vocab_size {
            let key = format!("template.{s}");
            let row: Vec<f32> = split_list(kv, &key)?;
            if row.len() != feat_dim {
                return Err(ConfigError::Value {
                    key,
                    value: format!("{} values, expected {feat_dim}", row.len()),
                }
                .into());
            }
            templates[s * feat_dim..(s + 1) * feat_dim].copy_from_slice(&row);
        }
        let spec = Self {
            id: kv.require("id")?,
            vocab_size,
            feat_dim,
            templates,
            noise_std: kv.require("noise_std")?,
            min_label_len: kv.require("min_label_len")?,
            max_label_len: kv.require("max_label_len")?,
            label_weights: split_list(kv, "label_weights")?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

fn join<T: std::fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn split_list<T: std::str::FromStr>(kv: &KvConfig, key: &str) -> Result<Vec<T>, ConfigError> {
    let raw = kv
        .get_str(key)
        .ok_or_else(|| ConfigError::Missing(key.to_string()))?;
    raw.split(',')
        .map(|s| {
            s.trim().parse().map_err(|_| ConfigError::Value {
                key: key.to_string(),
                value: raw.to_string(),
            })
        })
        .collect()
}

/// One utterance: `frames × feat_dim` row-major features and its label.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub features: Vec<f32>,
    pub label: Vec<usize>,
}

impl Example {
    pub fn frames(&self, feat_dim: usize) -> usize {
        self.features.len() / feat_dim
    }
}

/// An ordered list of examples from one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub feat_dim: usize,
    pub examples: Vec<Example>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Consecutive batches in stored order; the last may be short.
    pub fn batches(&self, batch_size: usize) -> Vec<Batch> {
        self.examples
            .chunks(batch_size.max(1))
            .map(|c| self.batch_of(c.iter()))
            .collect()
    }

    pub fn batch_of<'a>(&self, examples: impl Iterator<Item = &'a Example>) -> Batch {
        let seqs: Vec<(&[f32], &[usize])> = examples
            .map(|e| (e.features.as_slice(), e.label.as_slice()))
            .collect();
        Batch::from_sequences(&seqs, self.feat_dim).expect("generated examples are well formed")
    }

    /// Concatenation of two splits in alternating order.
    pub fn interleave(&self, other: &Split) -> Split {
        let mut examples = Vec::with_capacity(self.len() + other.len());
        let (mut a, mut b) = (self.examples.iter(), other.examples.iter());
        loop {
            match (a.next(), b.next()) {
                (None, None) => break,
                (x, y) => examples.extend(x.into_iter().chain(y).cloned()),
            }
        }
        Split {
            feat_dim: self.feat_dim,
            examples,
        }
    }
}

/// Example counts per split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSizes {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub domain: String,
    pub train: Split,
    pub valid: Split,
    pub test: Split,
}

fn sample_example(spec: &DomainSpec, rng: &mut ChaCha8Rng, labels: &WeightedIndex<f64>) -> Example {
    let len = rng.random_range(spec.min_label_len..=spec.max_label_len);
    let mut label = Vec::with_capacity(len);
    while label.len() < len {
        let s = labels.sample(rng) + 1;
        // Adjacent repeats would be indistinguishable from a longer segment.
        if label.last() != Some(&s) {
            label.push(s);
        }
    }
    let noise = Normal::new(0.0f32, spec.noise_std).expect("validated std");
    let mut features = Vec::with_capacity(len * MAX_REPEAT * spec.feat_dim);
    for &s in &label {
        for _ in 0..rng.random_range(MIN_REPEAT..=MAX_REPEAT) {
            for &v in spec.template(s) {
                let n = if spec.noise_std > 0.0 { noise.sample(rng) } else { 0.0 };
                features.push(v + n);
            }
        }
    }
    Example { features, label }
}

/// Draws `sizes` examples per split. Each split has its own stream derived
/// from `seed`, so resizing one split leaves the others unchanged.
pub fn gen_dataset(spec: &DomainSpec, sizes: SplitSizes, seed: u64) -> Result<Dataset, DataError> {
    spec.validate()?;
    let labels = WeightedIndex::new(&spec.label_weights).map_err(|e| DataError::Spec {
        id: spec.id.clone(),
        reason: e.to_string(),
    })?;
    let split = |stream: u64, n: usize| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Split {
            feat_dim: spec.feat_dim,
            examples: (0..n).map(|_| sample_example(spec, &mut rng, &labels)).collect(),
        }
    };
    Ok(Dataset {
        domain: spec.id.clone(),
        train: split(1, sizes.train),
        valid: split(2, sizes.valid),
        test: split(3, sizes.test),
    })
}

/// Deterministic per-epoch example order.
pub fn shuffled_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1000 + epoch);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

pub const DOMAIN_FILE: &str = "domain.conf";

/// On-disk description of a dataset: the domain spec plus split sizes and
/// seed. Examples are regenerated on load.
#[derive(Debug, Clone, PartialEq)]
pub struct DataDir {
    pub spec: DomainSpec,
    pub sizes: SplitSizes,
    pub seed: u64,
}

impl DataDir {
    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("seed", self.seed);
        kv.set("train", self.sizes.train);
        kv.set("valid", self.sizes.valid);
        kv.set("test", self.sizes.test);
        kv.extend_prefixed("domain", &self.spec.to_kv());
        kv
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self, DataError> {
        for k in kv.keys() {
            if !(k.starts_with("domain.") || ["seed", "train", "valid", "test"].contains(&k)) {
                return Err(ConfigError::Unknown(k.to_string()).into());
            }
        }
        Ok(Self {
            spec: DomainSpec::from_kv(&kv.section("domain"))?,
            sizes: SplitSizes {
                train: kv.require("train")?,
                valid: kv.require("valid")?,
                test: kv.require("test")?,
            },
            seed: kv.require("seed")?,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<(), DataError> {
        let io = |source| ConfigError::Io {
            path: dir.display().to_string(),
            source,
        };
        std::fs::create_dir_all(dir).map_err(io)?;
        let path = dir.join(DOMAIN_FILE);
        std::fs::write(&path, self.to_kv().to_text()).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, DataError> {
        Self::from_kv(&KvConfig::load(&dir.join(DOMAIN_FILE))?)
    }

    pub fn generate(&self) -> Result<Dataset, DataError> {
        gen_dataset(&self.spec, self.sizes, self.seed)
    }
}
