//! Sparsely-gated mixture-of-experts layer.
//!
//! The router is a bias-free linear map to `N` logits. The full softmax
//! `W_N` feeds the balancing loss; the top-k logits are softmaxed again on
//! their own to give renormalized mixing weights `W_k`, which sum to one per
//! token. With identical experts the layer therefore reproduces the single
//! FFN it was copied from, whatever the router says.

use std::fmt::Write as _;

use thiserror::Error;

use crate::graph::{Graph, Var};
use crate::model::{ffn_forward, FfnVars, ModelError};
use crate::tensor::{Element, Tensor, TensorError};

pub const DEFAULT_ALPHA: f32 = 0.01;

#[derive(Debug, Error, PartialEq)]
pub enum MoeError {
    #[error("invalid MoE configuration: {0}")]
    Config(String),
    #[error("usage statistics requested from an empty routing stream")]
    EmptyStream,
    #[error("layer {layer} has {found} experts, expected {expected}")]
    ExpertCount {
        layer: usize,
        found: usize,
        expected: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoeConfig {
    pub n_experts: usize,
    pub top_k: usize,
    /// Weight of the balancing loss in the total objective.
    pub alpha: f32,
    /// Std of the Gaussian noise added to the zero-initialized routers.
    pub router_noise_std: f32,
}

impl MoeConfig {
    pub fn new(n_experts: usize, top_k: usize) -> Result<Self, MoeError> {
        let cfg = Self {
            n_experts,
            top_k,
            alpha: DEFAULT_ALPHA,
            router_noise_std: 0.0,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), MoeError> {
        if self.top_k == 0 || self.top_k > self.n_experts {
            return Err(MoeError::Config(format!(
                "top_k {} must lie in 1..={}",
                self.top_k, self.n_experts
            )));
        }
        if !(self.alpha >= 0.0) {
            return Err(MoeError::Config(format!("alpha {} must be >= 0", self.alpha)));
        }
        if !(self.router_noise_std >= 0.0) {
            return Err(MoeError::Config(format!(
                "router_noise_std {} must be >= 0",
                self.router_noise_std
            )));
        }
        Ok(())
    }
}

/// Graph handles of one MoE layer: the expert bank and the `[d × N]` router.
#[derive(Debug, Clone)]
pub struct MoeLayerVars {
    pub experts: Vec<FfnVars>,
    pub router: Var,
}

/// Routing decision recorded on a graph.
#[derive(Debug, Clone)]
pub struct Routing {
    pub logits: Var,
    /// `W_N`, `[T × N]`.
    pub full_dist: Var,
    /// Renormalized `W_k`, `[T × k]`, aligned with `indices`.
    pub weights: Var,
    /// Selected experts, `k` per token in descending logit order.
    pub indices: Vec<usize>,
    pub top_k: usize,
}

impl Routing {
    pub fn to_output<T: Element>(&self, g: &Graph<T>) -> RouterOutput {
        RouterOutput {
            full_dist: g.value(self.full_dist).cast(),
            indices: self.indices.clone(),
            weights: g.value(self.weights).cast(),
            top_k: self.top_k,
        }
    }
}

/// Materialized routing decision for one layer over `T` tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterOutput {
    pub full_dist: Tensor<f32>,
    pub indices: Vec<usize>,
    pub weights: Tensor<f32>,
    pub top_k: usize,
}

impl RouterOutput {
    pub fn tokens(&self) -> usize {
        self.full_dist.rows()
    }

    pub fn n_experts(&self) -> usize {
        self.full_dist.last_dim()
    }

    pub fn selected(&self, token: usize) -> &[usize] {
        &self.indices[token * self.top_k..(token + 1) * self.top_k]
    }
}

pub fn route<T: Element>(
    g: &mut Graph<T>,
    layer: &MoeLayerVars,
    h: Var,
    top_k: usize,
) -> Result<Routing, ModelError> {
    let logits = g.matmul(h, layer.router)?;
    let full_dist = g.softmax(logits, 1)?;
    let (top, indices) = g.topk(logits, top_k)?;
    let weights = g.softmax(top, 1)?;
    Ok(Routing {
        logits,
        full_dist,
        weights,
        indices,
        top_k,
    })
}

#[derive(Debug, Clone)]
pub struct MoeOutput {
    pub output: Var,
    pub routing: Routing,
    /// Expert-FFN row evaluations performed, `T·k`.
    pub expert_evals: usize,
}

/// `h_o[t] = Σ_j W_k[t,j] · FFN_{idx[t,j]}(h[t])`, evaluating each expert
/// only on the tokens routed to it.
pub fn moe_forward<T: Element>(
    g: &mut Graph<T>,
    layer: &MoeLayerVars,
    h: Var,
    top_k: usize,
) -> Result<MoeOutput, ModelError> {
    let shape = g.shape(h).to_vec();
    let [tokens, d] = shape[..] else {
        return Err(TensorError::Param {
            op: "moe_forward",
            detail: format!("expected [T × d] input, got {shape:?}"),
        }
        .into());
    };
    let n = layer.experts.len();
    if g.shape(layer.router) != [d, n] {
        return Err(TensorError::Shape {
            op: "moe_forward",
            left: vec![d, n],
            right: g.shape(layer.router).to_vec(),
        }
        .into());
    }
    let routing = route(g, layer, h, top_k)?;
    let mut rows: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut slots: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (flat, &e) in routing.indices.iter().enumerate() {
        rows[e].push(flat / top_k);
        slots[e].push(flat);
    }
    let mut parts = Vec::new();
    let mut evals = 0;
    for (e, ffn) in layer.experts.iter().enumerate() {
        if rows[e].is_empty() {
            continue;
        }
        evals += rows[e].len();
        let x = g.gather_rows(h, rows[e].clone())?;
        let y = ffn_forward(g, x, ffn)?;
        let w = g.pick(routing.weights, std::mem::take(&mut slots[e]))?;
        let y = g.scale_rows(y, w)?;
        parts.push((y, std::mem::take(&mut rows[e])));
    }
    let output = g.scatter_rows(parts, tokens, d)?;
    Ok(MoeOutput {
        output,
        routing,
        expert_evals: evals,
    })
}

/// Index of the row maximum, lowest index on ties.
pub fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Dispatch fractions `F_i`: share of rows whose argmax is expert `i`.
pub fn dispatch_fractions<T: Element>(full_dist: &Tensor<T>) -> Vec<f64> {
    let n = full_dist.last_dim();
    let rows = full_dist.rows();
    let mut f = vec![0.0f64; n];
    for t in 0..rows {
        f[argmax(full_dist.row(t))] += 1.0;
    }
    f.iter_mut().for_each(|v| *v /= rows.max(1) as f64);
    f
}

/// `N · Σ_i F_i · G_i` over the rows of `W_N`. `F` is a constant of the
/// graph; gradients flow through the mean routing probabilities `G`.
pub fn balance_loss<T: Element>(g: &mut Graph<T>, full_dist: Var) -> Result<Var, ModelError> {
    let n = g.value(full_dist).last_dim();
    let f: Vec<T> = dispatch_fractions(g.value(full_dist))
        .into_iter()
        .map(T::from_f64)
        .collect();
    let f = g.constant(Tensor::new([n], f)?);
    let mean_prob = g.mean_rows(full_dist)?;
    let prod = g.mul(mean_prob, f)?;
    let s = g.sum(prod);
    Ok(g.scale(s, T::from_f64(n as f64)))
}

/// Per-expert routing statistics of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerUsage {
    pub tokens: usize,
    /// `F_i`, argmax dispatch fractions; sums to one.
    pub dispatch: Vec<f64>,
    /// `G_i`, mean routing probabilities; sums to one.
    pub mean_prob: Vec<f64>,
    /// Fraction of tokens with expert `i` among their top-k; sums to `k`.
    pub topk_fraction: Vec<f64>,
    pub top_k: usize,
}

impl LayerUsage {
    /// Share of all top-k activations taken by each expert; sums to one.
    pub fn activation_share(&self) -> Vec<f64> {
        self.topk_fraction
            .iter()
            .map(|f| f / self.top_k as f64)
            .collect()
    }

    pub fn engaged_experts(&self, min_share: f64) -> usize {
        self.activation_share()
            .iter()
            .filter(|&&s| s >= min_share)
            .count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UsageStats {
    pub layers: Vec<LayerUsage>,
}

impl UsageStats {
    pub const CSV_HEADER: &'static str = "layer_index,expert_index,F_i,G_i,topk_fraction";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for (l, layer) in self.layers.iter().enumerate() {
            for e in 0..layer.dispatch.len() {
                let _ = writeln!(
                    out,
                    "{l},{e},{},{},{}",
                    layer.dispatch[e], layer.mean_prob[e], layer.topk_fraction[e]
                );
            }
        }
        out
    }

    /// Experts with at least `min_share` of their layer's activations, summed over layers.
    pub fn engaged_experts(&self, min_share: f64) -> usize {
        self.layers.iter().map(|l| l.engaged_experts(min_share)).sum()
    }
}

#[derive(Debug, Clone, Default)]
struct LayerAccumulator {
    tokens: usize,
    dispatch: Vec<u64>,
    prob_sum: Vec<f64>,
    topk: Vec<u64>,
    top_k: usize,
}

/// Ordered reducer of routing decisions into [`UsageStats`].
#[derive(Debug, Clone, Default)]
pub struct UsageCollector {
    layers: Vec<LayerAccumulator>,
}

impl UsageCollector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, layer: usize, out: &RouterOutput) -> Result<(), MoeError> {
        if self.layers.len() <= layer {
            self.layers.resize_with(layer + 1, LayerAccumulator::default);
        }
        let n = out.n_experts();
        let acc = &mut self.layers[layer];
        if acc.dispatch.is_empty() {
            acc.dispatch = vec![0; n];
            acc.prob_sum = vec![0.0; n];
            acc.topk = vec![0; n];
            acc.top_k = out.top_k;
        } else if acc.dispatch.len() != n {
            return Err(MoeError::ExpertCount {
                layer,
                found: n,
                expected: acc.dispatch.len(),
            });
        }
        for t in 0..out.tokens() {
            let row = out.full_dist.row(t);
            acc.dispatch[argmax(row)] += 1;
            for (s, &p) in acc.prob_sum.iter_mut().zip(row) {
                *s += p as f64;
            }
            for &e in out.selected(t) {
                acc.topk[e] += 1;
            }
        }
        acc.tokens += out.tokens();
        Ok(())
    }

    pub fn finish(self) -> Result<UsageStats, MoeError> {
        if self.layers.is_empty() || self.layers.iter().all(|l| l.tokens == 0) {
            return Err(MoeError::EmptyStream);
        }
        let layers = self
            .layers
            .into_iter()
            .map(|acc| {
                let t = acc.tokens.max(1) as f64;
                LayerUsage {
                    tokens: acc.tokens,
                    dispatch: acc.dispatch.iter().map(|&c| c as f64 / t).collect(),
                    mean_prob: acc.prob_sum.iter().map(|&s| s / t).collect(),
                    topk_fraction: acc.topk.iter().map(|&c| c as f64 / t).collect(),
                    top_k: acc.top_k,
                }
            })
            .collect();
        Ok(UsageStats { layers })
    }
}

/// Collects usage over `(layer, output)` pairs in stream order.
pub fn collect_usage<'a>(
    stream: impl IntoIterator<Item = (usize, &'a RouterOutput)>,
) -> Result<UsageStats, MoeError> {
    let mut c = UsageCollector::new();
    for (layer, out) in stream {
        c.push(layer, out)?;
    }
    c.finish()
}
