//! The encoder: frame down-sampling, pre-norm attention/FFN blocks and a
//! token-classification head emitting CTC logits.
//!
//! The same [`Model`] type carries both the dense network and its upcycled
//! MoE counterpart; the two differ only in how each block's feed-forward
//! unit is parameterized.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::graph::{Graph, Var};
use crate::moe::{self, MoeConfig, MoeLayerVars, Routing};
use crate::tensor::{Element, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub feat_dim: usize,
    pub d_model: usize,
    pub n_blocks: usize,
    pub ffn_hidden: usize,
    pub n_heads: usize,
    /// Output classes including the CTC blank at index 0.
    pub vocab_size: usize,
    pub downsample_rate: usize,
    /// Longest accepted input, in frames before down-sampling.
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feat_dim: 16,
            d_model: 64,
            n_blocks: 4,
            ffn_hidden: 128,
            n_heads: 4,
            vocab_size: 12,
            downsample_rate: 2,
            max_len: 128,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.feat_dim == 0 || self.d_model == 0 || self.ffn_hidden == 0 || self.n_blocks == 0 {
            return fail("feature, model, hidden widths and block count must be positive".into());
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return fail(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.downsample_rate == 0 {
            return fail("downsample_rate must be >= 1".into());
        }
        if self.vocab_size < 2 {
            return fail("vocab_size must be >= 2 (blank plus one label)".into());
        }
        if self.max_len == 0 {
            return fail("max_len must be positive".into());
        }
        Ok(())
    }

    /// Number of encoder frames produced from `frames` input frames.
    pub fn output_len(&self, frames: usize) -> usize {
        frames.div_ceil(self.downsample_rate)
    }

    /// Parameters of one dense FFN: two weight matrices and two biases.
    pub fn ffn_param_count(&self) -> usize {
        2 * self.d_model * self.ffn_hidden + self.ffn_hidden + self.d_model
    }
}

/// Ordered named parameter table.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Params {
    table: IndexMap<String, Tensor<f32>>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<f32>) -> Result<()> {
        let name = name.into();
        if self.table.contains_key(&name) {
            return Err(ModelError::Config(format!("duplicate parameter `{name}`")));
        }
        self.table.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f32>> {
        self.table
            .get(name)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<f32>> {
        self.table
            .get_mut(name)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.table.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.table.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.table.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<f32>)> {
        self.table.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.table.values().map(Tensor::numel).sum()
    }

    pub fn clear_grads(&mut self) {
        self.table.values_mut().for_each(Tensor::clear_grad);
    }
}

/// Which parameters get gradient tracking during a forward pass.
#[derive(Debug, Clone, Copy)]
pub enum GradMode<'a> {
    None,
    All,
    Only(&'a crate::upcycle::FreezeMask),
}

impl GradMode<'_> {
    fn tracks(&self, name: &str) -> bool {
        match self {
            GradMode::None => false,
            GradMode::All => true,
            GradMode::Only(mask) => mask.contains(name),
        }
    }
}

/// A padded mini-batch of feature sequences and their label sequences.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `[B × T_in × feat_dim]`, zero padded past each row's length.
    pub features: Tensor<f32>,
    pub feature_lengths: Vec<usize>,
    /// Label sequences over `1..vocab_size`; blank never appears.
    pub labels: Vec<Vec<usize>>,
}

impl Batch {
    /// Pads `(frames × feat_dim row-major features, label)` pairs into one batch.
    pub fn from_sequences(seqs: &[(&[f32], &[usize])], feat_dim: usize) -> Result<Self> {
        if seqs.is_empty() {
            return Err(ModelError::Input("empty batch".into()));
        }
        let mut lengths = Vec::with_capacity(seqs.len());
        for (f, _) in seqs {
            if f.len() % feat_dim != 0 {
                return Err(ModelError::Input(format!(
                    "feature buffer of {} values is not a multiple of {feat_dim}",
                    f.len()
                )));
            }
            lengths.push(f.len() / feat_dim);
        }
        let t_max = lengths.iter().copied().max().unwrap_or(0);
        let mut data = vec![0.0f32; seqs.len() * t_max * feat_dim];
        for (b, (f, _)) in seqs.iter().enumerate() {
            let off = b * t_max * feat_dim;
            data[off..off + f.len()].copy_from_slice(f);
        }
        Ok(Self {
            features: Tensor::new([seqs.len(), t_max, feat_dim], data)?,
            feature_lengths: lengths,
            labels: seqs.iter().map(|(_, l)| l.to_vec()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.feature_lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.feature_lengths.is_empty()
    }

    pub fn padded_len(&self) -> usize {
        self.features.shape().get(1).copied().unwrap_or(0)
    }

    pub fn feat_dim(&self) -> usize {
        self.features.shape().get(2).copied().unwrap_or(0)
    }

    /// Features of row `b` without padding.
    pub fn row_features(&self, b: usize) -> &[f32] {
        let (t, f) = (self.padded_len(), self.feat_dim());
        let off = b * t * f;
        &self.features.data()[off..off + self.feature_lengths[b] * f]
    }
}

/// Graph handles of one dense feed-forward unit.
#[derive(Debug, Clone, Copy)]
pub struct FfnVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// `W2·relu(W1·h + b1) + b2`, applied to every row of `h`.
pub fn ffn_forward<T: Element>(g: &mut Graph<T>, h: Var, ffn: &FfnVars) -> Result<Var> {
    let a = g.matmul(h, ffn.w1)?;
    let a = g.add(a, ffn.b1)?;
    let a = g.relu(a);
    let o = g.matmul(a, ffn.w2)?;
    Ok(g.add(o, ffn.b2)?)
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub q: (Var, Var),
    pub k: (Var, Var),
    pub v: (Var, Var),
    pub o: (Var, Var),
}

fn linear<T: Element>(g: &mut Graph<T>, x: Var, (w, b): (Var, Var)) -> Result<Var> {
    let y = g.matmul(x, w)?;
    Ok(g.add(y, b)?)
}

/// Multi-head self-attention where each `(start, len)` segment of rows is
/// one sequence.
pub fn attention_forward<T: Element>(
    g: &mut Graph<T>,
    h: Var,
    params: &AttentionVars,
    segments: Vec<(usize, usize)>,
    n_heads: usize,
) -> Result<Var> {
    let q = linear(g, h, params.q)?;
    let k = linear(g, h, params.k)?;
    let v = linear(g, h, params.v)?;
    let ctx = g.attention(q, k, v, segments, n_heads)?;
    linear(g, ctx, params.o)
}

/// Sinusoidal absolute position table, `[len × d]`.
pub fn sinusoidal_positions(len: usize, d: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; len * d];
    for pos in 0..len {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
            out[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() } as f32;
        }
    }
    out
}

/// Stacks `rate` consecutive frames of every sequence into one row,
/// zero-padding the tail. Returns `[Σ ceil(T_b/rate) × rate·feat_dim]` and
/// the per-row output lengths.
pub fn stack_frames(batch: &Batch, rate: usize) -> Result<(Tensor<f32>, Vec<usize>)> {
    if rate == 0 {
        return Err(ModelError::Config("downsample rate must be >= 1".into()));
    }
    let f = batch.feat_dim();
    let mut lengths = Vec::with_capacity(batch.len());
    let mut data = Vec::new();
    for b in 0..batch.len() {
        let frames = batch.feature_lengths[b];
        if frames == 0 {
            return Err(ModelError::Input(format!("sequence {b} is empty")));
        }
        let out_len = frames.div_ceil(rate);
        let src = batch.row_features(b);
        data.extend_from_slice(src);
        data.resize(data.len() + (out_len * rate - frames) * f, 0.0);
        lengths.push(out_len);
    }
    let rows: usize = lengths.iter().sum();
    Ok((Tensor::new([rows, rate * f], data)?, lengths))
}

/// Graph handles produced by one forward pass.
#[derive(Debug)]
pub struct Forward {
    /// Packed logits `[Σ T'_b × vocab_size]`.
    pub logits: Var,
    pub lengths: Vec<usize>,
    pub offsets: Vec<usize>,
    /// One entry per MoE block, in block order.
    pub routing: Vec<Routing>,
    pub expert_evals: usize,
    pub params: IndexMap<String, Var>,
}

/// Padded logits `[B × T' × vocab_size]` plus the valid length of each row.
#[derive(Debug, Clone)]
pub struct Logits {
    pub values: Tensor<f32>,
    pub lengths: Vec<usize>,
}

impl Logits {
    /// Valid `[len × vocab]` slice of row `b`.
    pub fn row(&self, b: usize) -> &[f32] {
        let s = self.values.shape();
        let (t, v) = (s[1], s[2]);
        &self.values.data()[b * t * v..(b * t + self.lengths[b]) * v]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub moe: Option<MoeConfig>,
    pub params: Params,
}

pub fn block_prefix(i: usize) -> String {
    format!("blocks.{i}")
}

pub fn expert_prefix(block: usize, expert: usize) -> String {
    format!("blocks.{block}.moe.experts.{expert}")
}

pub fn router_name(block: usize) -> String {
    format!("blocks.{block}.moe.router")
}

pub const FFN_PARTS: [&str; 4] = ["w1", "b1", "w2", "b2"];

impl Model {
    /// Freshly initialized dense model. Weights are uniform in
    /// `±1/sqrt(fan_in)`, biases zero, normalization gains one.
    pub fn dense(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        let (d, f, c) = (config.d_model, config.ffn_hidden, config.feat_dim);
        let r = config.downsample_rate;
        let weight = |rng: &mut ChaCha8Rng, rows: usize, cols: usize| {
            let bound = 1.0 / (rows as f32).sqrt();
            let data = (0..rows * cols)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            Tensor::new([rows, cols], data).expect("sized")
        };
        params.insert("downsample.weight", weight(&mut rng, r * c, d))?;
        params.insert("downsample.bias", Tensor::zeros([d]))?;
        for i in 0..config.n_blocks {
            let p = block_prefix(i);
            params.insert(format!("{p}.attn_norm.gain"), Tensor::full([d], 1.0))?;
            params.insert(format!("{p}.attn_norm.bias"), Tensor::zeros([d]))?;
            for proj in ["q", "k", "v", "o"] {
                params.insert(format!("{p}.attn.{proj}.weight"), weight(&mut rng, d, d))?;
                params.insert(format!("{p}.attn.{proj}.bias"), Tensor::zeros([d]))?;
            }
            params.insert(format!("{p}.ffn_norm.gain"), Tensor::full([d], 1.0))?;
            params.insert(format!("{p}.ffn_norm.bias"), Tensor::zeros([d]))?;
            params.insert(format!("{p}.ffn.w1"), weight(&mut rng, d, f))?;
            params.insert(format!("{p}.ffn.b1"), Tensor::zeros([f]))?;
            params.insert(format!("{p}.ffn.w2"), weight(&mut rng, f, d))?;
            params.insert(format!("{p}.ffn.b2"), Tensor::zeros([d]))?;
        }
        params.insert("final_norm.gain", Tensor::full([d], 1.0))?;
        params.insert("final_norm.bias", Tensor::zeros([d]))?;
        params.insert("head.weight", weight(&mut rng, d, config.vocab_size))?;
        params.insert("head.bias", Tensor::zeros([config.vocab_size]))?;
        Ok(Self {
            config,
            moe: None,
            params,
        })
    }

    pub fn is_moe(&self) -> bool {
        self.moe.is_some()
    }

    /// Parameter names implied by the architecture, in canonical order.
    pub fn expected_param_names(config: &ModelConfig, moe: Option<&MoeConfig>) -> Vec<String> {
        let mut names = vec!["downsample.weight".to_string(), "downsample.bias".to_string()];
        for i in 0..config.n_blocks {
            let p = block_prefix(i);
            names.push(format!("{p}.attn_norm.gain"));
            names.push(format!("{p}.attn_norm.bias"));
            for proj in ["q", "k", "v", "o"] {
                names.push(format!("{p}.attn.{proj}.weight"));
                names.push(format!("{p}.attn.{proj}.bias"));
            }
            names.push(format!("{p}.ffn_norm.gain"));
            names.push(format!("{p}.ffn_norm.bias"));
            match moe {
                None => names.extend(FFN_PARTS.iter().map(|s| format!("{p}.ffn.{s}"))),
                Some(m) => {
                    names.push(router_name(i));
                    for e in 0..m.n_experts {
                        let ep = expert_prefix(i, e);
                        names.extend(FFN_PARTS.iter().map(|s| format!("{ep}.{s}")));
                    }
                }
            }
        }
        names.extend(
            ["final_norm.gain", "final_norm.bias", "head.weight", "head.bias"]
                .iter()
                .map(|s| s.to_string()),
        );
        names
    }

    /// Checks that the parameter table enumerates exactly the architecture.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if let Some(m) = &self.moe {
            m.validate().map_err(|e| ModelError::Config(e.to_string()))?;
        }
        let expected = Self::expected_param_names(&self.config, self.moe.as_ref());
        if expected.len() != self.params.len() {
            return Err(ModelError::Config(format!(
                "expected {} parameters, found {}",
                expected.len(),
                self.params.len()
            )));
        }
        for name in &expected {
            self.params.get(name)?;
        }
        Ok(())
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.is_empty() {
            return Err(ModelError::Input("empty batch".into()));
        }
        if batch.feat_dim() != self.config.feat_dim {
            return Err(ModelError::Input(format!(
                "feature width {} does not match model feat_dim {}",
                batch.feat_dim(),
                self.config.feat_dim
            )));
        }
        for (b, &len) in batch.feature_lengths.iter().enumerate() {
            if len == 0 {
                return Err(ModelError::Input(format!("sequence {b} is empty")));
            }
            if len > self.config.max_len {
                return Err(ModelError::Input(format!(
                    "sequence {b} has {len} frames, longer than max_len {}",
                    self.config.max_len
                )));
            }
        }
        Ok(())
    }

    /// Records the whole encoder on `g` and returns packed logits.
    pub fn forward<T: Element>(
        &self,
        g: &mut Graph<T>,
        batch: &Batch,
        mode: GradMode<'_>,
    ) -> Result<Forward> {
        self.check_batch(batch)?;
        let cfg = &self.config;
        let d = cfg.d_model;
        let mut bound = IndexMap::with_capacity(self.params.len());
        for (name, t) in self.params.iter() {
            let v = g.input_f32(t, mode.tracks(name));
            bound.insert(name.to_string(), v);
        }
        let p = |name: &str| -> Result<Var> {
            bound
                .get(name)
                .copied()
                .ok_or_else(|| ModelError::MissingParam(name.to_string()))
        };

        let (stacked, lengths) = stack_frames(batch, cfg.downsample_rate)?;
        let mut offsets = Vec::with_capacity(lengths.len());
        let mut acc = 0;
        for &l in &lengths {
            offsets.push(acc);
            acc += l;
        }
        let n_tok = acc;
        let input = g.input_f32(&stacked, false);
        let mut x = linear(g, input, (p("downsample.weight")?, p("downsample.bias")?))?;

        let max_t = lengths.iter().copied().max().unwrap_or(0);
        let table = sinusoidal_positions(max_t, d);
        let mut pe = Vec::with_capacity(n_tok * d);
        for &l in &lengths {
            pe.extend_from_slice(&table[..l * d]);
        }
        let pe = g.input_f32(&Tensor::new([n_tok, d], pe)?, false);
        x = g.add(x, pe)?;

        let segments: Vec<(usize, usize)> = offsets.iter().copied().zip(lengths.iter().copied()).collect();
        let mut routing = Vec::new();
        let mut expert_evals = 0;
        for i in 0..cfg.n_blocks {
            let bp = block_prefix(i);
            let ln = g.layer_norm(
                x,
                p(&format!("{bp}.attn_norm.gain"))?,
                p(&format!("{bp}.attn_norm.bias"))?,
            )?;
            let proj = |s: &str| -> Result<(Var, Var)> {
                Ok((
                    p(&format!("{bp}.attn.{s}.weight"))?,
                    p(&format!("{bp}.attn.{s}.bias"))?,
                ))
            };
            let attn = AttentionVars {
                q: proj("q")?,
                k: proj("k")?,
                v: proj("v")?,
                o: proj("o")?,
            };
            let a = attention_forward(g, ln, &attn, segments.clone(), cfg.n_heads)?;
            x = g.add(x, a)?;

            let ln = g.layer_norm(
                x,
                p(&format!("{bp}.ffn_norm.gain"))?,
                p(&format!("{bp}.ffn_norm.bias"))?,
            )?;
            let y = match &self.moe {
                None => {
                    let ffn = FfnVars {
                        w1: p(&format!("{bp}.ffn.w1"))?,
                        b1: p(&format!("{bp}.ffn.b1"))?,
                        w2: p(&format!("{bp}.ffn.w2"))?,
                        b2: p(&format!("{bp}.ffn.b2"))?,
                    };
                    expert_evals += n_tok;
                    ffn_forward(g, ln, &ffn)?
                }
                Some(m) => {
                    let mut experts = Vec::with_capacity(m.n_experts);
                    for e in 0..m.n_experts {
                        let ep = expert_prefix(i, e);
                        experts.push(FfnVars {
                            w1: p(&format!("{ep}.w1"))?,
                            b1: p(&format!("{ep}.b1"))?,
                            w2: p(&format!("{ep}.w2"))?,
                            b2: p(&format!("{ep}.b2"))?,
                        });
                    }
                    let layer = MoeLayerVars {
                        experts,
                        router: p(&router_name(i))?,
                    };
                    let out = moe::moe_forward(g, &layer, ln, m.top_k)?;
                    expert_evals += out.expert_evals;
                    routing.push(out.routing);
                    out.output
                }
            };
            x = g.add(x, y)?;
        }
        let x = g.layer_norm(x, p("final_norm.gain")?, p("final_norm.bias")?)?;
        let logits = linear(g, x, (p("head.weight")?, p("head.bias")?))?;
        Ok(Forward {
            logits,
            lengths,
            offsets,
            routing,
            expert_evals,
            params: bound,
        })
    }

    /// Inference-only forward producing padded `[B × ceil(T_in/rate) × vocab]` logits.
    pub fn logits(&self, batch: &Batch) -> Result<Logits> {
        let mut g = Graph::<f32>::new();
        let fwd = self.forward(&mut g, batch, GradMode::None)?;
        Ok(self.pad_logits(&g, &fwd, batch))
    }

    pub fn pad_logits(&self, g: &Graph<f32>, fwd: &Forward, batch: &Batch) -> Logits {
        let v = self.config.vocab_size;
        let t = self.config.output_len(batch.padded_len());
        let packed = g.value(fwd.logits).data();
        let mut out = vec![0.0f32; batch.len() * t * v];
        for (b, (&off, &len)) in fwd.offsets.iter().zip(&fwd.lengths).enumerate() {
            out[b * t * v..(b * t + len) * v].copy_from_slice(&packed[off * v..(off + len) * v]);
        }
        Logits {
            values: Tensor::new([batch.len(), t, v], out).expect("sized"),
            lengths: fwd.lengths.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            feat_dim: 3,
            d_model: 8,
            n_blocks: 2,
            ffn_hidden: 16,
            n_heads: 2,
            vocab_size: 5,
            downsample_rate: 2,
            max_len: 32,
        }
    }

    fn random_batch(b: usize, t: usize, feat: usize, seed: u64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f32>> = (0..b)
            .map(|_| (0..t * feat).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let labels = vec![vec![1usize]; b];
        let seqs: Vec<(&[f32], &[usize])> = rows
            .iter()
            .zip(&labels)
            .map(|(f, l)| (f.as_slice(), l.as_slice()))
            .collect();
        Batch::from_sequences(&seqs, feat).unwrap()
    }

    #[test]
    fn config_rejects_bad_heads_and_vocab() {
        let mut c = tiny();
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.vocab_size = 1;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.downsample_rate = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn downsample_lengths() {
        let b = random_batch(1, 8, 3, 1);
        let (t, l) = stack_frames(&b, 2).unwrap();
        assert_eq!(l, vec![4]);
        assert_eq!(t.shape(), &[4, 6]);
        let (t, l) = stack_frames(&b, 1).unwrap();
        assert_eq!(l, vec![8]);
        assert_eq!(t.shape(), &[8, 3]);
        let b = random_batch(1, 7, 3, 1);
        let (t, l) = stack_frames(&b, 2).unwrap();
        assert_eq!(l, vec![4]);
        assert_eq!(&t.data()[21..], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn downsample_of_zero_frames_is_bias() {
        let model = Model::dense(tiny(), 3).unwrap();
        let mut params = model.params.clone();
        let bias: Vec<f32> = (0..8).map(|i| i as f32 * 0.5).collect();
        *params.get_mut("downsample.bias").unwrap() = Tensor::new([8], bias.clone()).unwrap();
        let batch = Batch::from_sequences(&[(&[0.0f32; 12][..], &[1usize][..])], 3).unwrap();
        let mut g = Graph::<f32>::new();
        let (stacked, _) = stack_frames(&batch, 2).unwrap();
        let x = g.input_f32(&stacked, false);
        let w = g.input_f32(params.get("downsample.weight").unwrap(), false);
        let bv = g.input_f32(params.get("downsample.bias").unwrap(), false);
        let y = linear(&mut g, x, (w, bv)).unwrap();
        for r in 0..2 {
            assert_eq!(g.value(y).row(r), bias.as_slice());
        }
    }

    #[test]
    fn empty_and_overlong_sequences_are_input_errors() {
        let model = Model::dense(tiny(), 3).unwrap();
        let empty: &[f32] = &[];
        let b = Batch::from_sequences(&[(empty, &[][..]), (&[0.0; 6][..], &[1][..])], 3).unwrap();
        assert!(matches!(model.logits(&b), Err(ModelError::Input(_))));
        let long = random_batch(1, 33, 3, 0);
        assert!(matches!(model.logits(&long), Err(ModelError::Input(_))));
    }

    #[test]
    fn ffn_zero_weights_give_bias() {
        let mut g = Graph::<f32>::new();
        let h = g.constant(Tensor::full([3, 4], 0.7));
        let w1 = g.constant(Tensor::zeros([4, 6]));
        let b1 = g.constant(Tensor::zeros([6]));
        let w2 = g.constant(Tensor::zeros([6, 4]));
        let b2 = g.constant(Tensor::new([4], vec![1.0, -2.0, 3.0, 0.5]).unwrap());
        let y = ffn_forward(&mut g, h, &FfnVars { w1, b1, w2, b2 }).unwrap();
        for r in 0..3 {
            assert_eq!(g.value(y).row(r), &[1.0, -2.0, 3.0, 0.5]);
        }
    }

    #[test]
    fn ffn_constructed_relu_identity() {
        // W1 = I, W2 = I, zero biases: FFN(h) = relu(h).
        let d = 3;
        let eye: Vec<f32> = (0..d * d).map(|i| if i % (d + 1) == 0 { 1.0 } else { 0.0 }).collect();
        let mut g = Graph::<f32>::new();
        let h = g.constant(Tensor::new([2, 3], vec![-1.0, 0.5, 2.0, 3.0, -0.25, 0.0]).unwrap());
        let w1 = g.constant(Tensor::new([d, d], eye.clone()).unwrap());
        let w2 = g.constant(Tensor::new([d, d], eye).unwrap());
        let b1 = g.constant(Tensor::zeros([d]));
        let b2 = g.constant(Tensor::zeros([d]));
        let y = ffn_forward(&mut g, h, &FfnVars { w1, b1, w2, b2 }).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.5, 2.0, 3.0, 0.0, 0.0]);
    }

    #[test]
    fn uniform_keys_average_values() {
        // Zero Q/K weights give uniform attention; output = mean(V)·O.
        let mut g = Graph::<f64>::new();
        let h = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, -1.0], vec![0.0, 4.0]]));
        let zero = g.constant(Tensor::zeros([2, 2]));
        let zb = g.constant(Tensor::zeros([2]));
        let eye = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let o_w = g.constant(Tensor::from_rows(&[vec![2.0, 0.0], vec![1.0, 1.0]]));
        let params = AttentionVars {
            q: (zero, zb),
            k: (zero, zb),
            v: (eye, zb),
            o: (o_w, zb),
        };
        let y = attention_forward(&mut g, h, &params, vec![(0, 3)], 1).unwrap();
        // mean(V) = [4/3, 5/3]; ·O = [8/3 + 5/3, 5/3]
        for r in 0..3 {
            let row = g.value(y).row(r);
            assert!((row[0] - 13.0 / 3.0).abs() < 1e-12);
            assert!((row[1] - 5.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn logits_shape_contract() {
        let mut cfg = tiny();
        cfg.feat_dim = 4;
        let model = Model::dense(cfg, 0).unwrap();
        let b = random_batch(2, 16, 4, 9);
        let out = model.logits(&b).unwrap();
        assert_eq!(out.values.shape(), &[2, 8, 5]);
    }

    #[test]
    fn identical_rows_identical_logits() {
        let model = Model::dense(tiny(), 0).unwrap();
        let one = random_batch(1, 10, 3, 4);
        let f = one.row_features(0).to_vec();
        let b = Batch::from_sequences(&[(&f[..], &[1][..]), (&f[..], &[1][..])], 3).unwrap();
        let out = model.logits(&b).unwrap();
        assert_eq!(out.row(0), out.row(1));
    }

    #[test]
    fn rows_are_independent() {
        let model = Model::dense(tiny(), 5).unwrap();
        let b = random_batch(3, 12, 3, 8);
        let base = model.logits(&b).unwrap();
        let mut perturbed = b.clone();
        let (t, f) = (b.padded_len(), b.feat_dim());
        for v in &mut perturbed.features.data_mut()[t * f..2 * t * f] {
            *v += 0.5;
        }
        let out = model.logits(&perturbed).unwrap();
        assert_eq!(base.row(0), out.row(0));
        assert_eq!(base.row(2), out.row(2));
        assert_ne!(base.row(1), out.row(1));
    }

    #[test]
    fn parameter_names_match_architecture() {
        let model = Model::dense(tiny(), 0).unwrap();
        model.validate().unwrap();
        let names: Vec<&str> = model.params.names().collect();
        let expected = Model::expected_param_names(&model.config, None);
        assert_eq!(names, expected.iter().map(String::as_str).collect::<Vec<_>>());
    }

    #[test]
    fn init_is_seeded() {
        let a = Model::dense(tiny(), 11).unwrap();
        let b = Model::dense(tiny(), 11).unwrap();
        let c = Model::dense(tiny(), 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
