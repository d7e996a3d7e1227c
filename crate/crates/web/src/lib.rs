//! Browser bindings: each exported function takes a JSON query and returns a
//! JSON answer, so the page needs no generated glue beyond `wasm-bindgen`.

use moe_upcycle::ctc::greedy_decode;
use moe_upcycle::moe::{balance_loss, dispatch_fractions};
use moe_upcycle::{flop_proxy, upcycle, Batch, Graph, Model, ModelConfig, MoeConfig, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

#[derive(Debug, Clone, Deserialize)]
#[serde(default)]
pub struct RouterQuery {
    pub n_experts: usize,
    pub top_k: usize,
    pub tokens: usize,
    pub d_model: usize,
    /// Std of the random router weights; larger means sharper routing.
    pub router_std: f32,
    /// Logit bonus given to expert 0 on every token.
    pub skew: f32,
    pub seed: u64,
}

impl Default for RouterQuery {
    fn default() -> Self {
        Self {
            n_experts: 8,
            top_k: 2,
            tokens: 256,
            d_model: 16,
            router_std: 0.5,
            skew: 0.0,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RouterAnswer {
    /// Argmax dispatch fraction per expert.
    pub dispatch: Vec<f64>,
    /// Mean routing probability per expert.
    pub mean_prob: Vec<f64>,
    /// Share of top-k activations per expert.
    pub topk_share: Vec<f64>,
    pub balance_loss: f64,
    /// Experts with at least 5% of the activations.
    pub engaged: usize,
}

fn normal_tensor(rng: &mut ChaCha8Rng, shape: [usize; 2], std: f32) -> Tensor<f32> {
    let n = shape[0] * shape[1];
    let data = (0..n).map(|_| std * rng.sample::<f32, _>(StandardNormal)).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

/// Routes random tokens through a random router and reports the balance statistics.
pub fn explore_router(q: &RouterQuery) -> Result<RouterAnswer, String> {
    MoeConfig::new(q.n_experts, q.top_k).map_err(|e| e.to_string())?;
    if q.tokens == 0 || q.d_model == 0 {
        return Err("tokens and d_model must be positive".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(q.seed);
    let h = normal_tensor(&mut rng, [q.tokens, q.d_model], 1.0);
    let w = normal_tensor(&mut rng, [q.d_model, q.n_experts], q.router_std);
    let mut bonus = vec![0.0f32; q.n_experts];
    bonus[0] = q.skew;

    let mut g = Graph::<f32>::new();
    let hv = g.constant(h);
    let wv = g.constant(w);
    let bv = g.constant(Tensor::new([q.n_experts], bonus).map_err(|e| e.to_string())?);
    let raw = g.matmul(hv, wv).map_err(|e| e.to_string())?;
    let logits = g.add(raw, bv).map_err(|e| e.to_string())?;
    let dist = g.softmax(logits, 1).map_err(|e| e.to_string())?;
    let (_, idx) = g.topk(logits, q.top_k).map_err(|e| e.to_string())?;
    let lb = balance_loss(&mut g, dist).map_err(|e| e.to_string())?;

    let full = g.value(dist);
    let mut mean_prob = vec![0.0; q.n_experts];
    for t in 0..q.tokens {
        for (m, &p) in mean_prob.iter_mut().zip(full.row(t)) {
            *m += p as f64 / q.tokens as f64;
        }
    }
    let mut topk_share = vec![0.0; q.n_experts];
    for &e in &idx {
        topk_share[e] += 1.0 / idx.len() as f64;
    }
    Ok(RouterAnswer {
        dispatch: dispatch_fractions(full),
        mean_prob,
        engaged: topk_share.iter().filter(|&&s| s >= 0.05).count(),
        topk_share,
        balance_loss: g.value(lb).item() as f64,
    })
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default)]
pub struct UpcycleQuery {
    pub n_experts: usize,
    pub top_k: usize,
    pub noise_std: f32,
    pub batches: usize,
    pub seed: u64,
}

impl Default for UpcycleQuery {
    fn default() -> Self {
        Self {
            n_experts: 8,
            top_k: 2,
            noise_std: 1.0,
            batches: 10,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct UpcycleAnswer {
    /// Largest logit difference between the dense and upcycled models.
    pub max_abs_diff: f64,
    pub sequences: usize,
    pub decode_mismatches: usize,
    pub dense_params: usize,
    pub moe_params: usize,
    /// Share of routing slots going to each expert in the first layer.
    pub first_layer_share: Vec<f64>,
}

pub fn demo_model_config() -> ModelConfig {
    ModelConfig {
        feat_dim: 8,
        d_model: 16,
        n_blocks: 2,
        ffn_hidden: 32,
        n_heads: 2,
        vocab_size: 6,
        downsample_rate: 2,
        max_len: 32,
    }
}

/// Upcycles a random dense model and measures how far its outputs move.
pub fn upcycle_gap(q: &UpcycleQuery) -> Result<UpcycleAnswer, String> {
    let cfg = demo_model_config();
    let mut moe = MoeConfig::new(q.n_experts, q.top_k).map_err(|e| e.to_string())?;
    moe.router_noise_std = q.noise_std;
    moe.validate().map_err(|e| e.to_string())?;
    let dense = Model::dense(cfg.clone(), q.seed).map_err(|e| e.to_string())?;
    let up = upcycle(&dense, moe, q.seed.wrapping_add(1)).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(q.seed.wrapping_add(2));
    let mut ans = UpcycleAnswer {
        max_abs_diff: 0.0,
        sequences: 0,
        decode_mismatches: 0,
        dense_params: dense.params.numel(),
        moe_params: up.params.numel(),
        first_layer_share: vec![0.0; q.n_experts],
    };
    let mut slots = 0usize;
    for _ in 0..q.batches.max(1) {
        let rows: Vec<Vec<f32>> = (0..3)
            .map(|_| {
                let frames = rng.random_range(4..=cfg.max_len);
                (0..frames * cfg.feat_dim).map(|_| rng.random_range(-1.0..1.0)).collect()
            })
            .collect();
        let seqs: Vec<(&[f32], &[usize])> = rows.iter().map(|r| (r.as_slice(), &[][..])).collect();
        let batch = Batch::from_sequences(&seqs, cfg.feat_dim).map_err(|e| e.to_string())?;
        let ld = dense.logits(&batch).map_err(|e| e.to_string())?;
        let mut g = Graph::<f32>::new();
        let fwd = up
            .forward(&mut g, &batch, moe_upcycle::GradMode::None)
            .map_err(|e| e.to_string())?;
        let lm = up.pad_logits(&g, &fwd, &batch);
        ans.max_abs_diff = ans
            .max_abs_diff
            .max(ld.values.max_abs_diff(&lm.values).map_err(|e| e.to_string())? as f64);
        for b in 0..batch.len() {
            ans.sequences += 1;
            if greedy_decode(ld.row(b), cfg.vocab_size) != greedy_decode(lm.row(b), cfg.vocab_size) {
                ans.decode_mismatches += 1;
            }
        }
        if let Some(r) = fwd.routing.first() {
            for &e in &r.indices {
                ans.first_layer_share[e] += 1.0;
            }
            slots += r.indices.len();
        }
    }
    for s in &mut ans.first_layer_share {
        *s /= slots.max(1) as f64;
    }
    Ok(ans)
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default)]
pub struct FlopQuery {
    pub d_model: usize,
    pub ffn_hidden: usize,
    pub n_blocks: usize,
    pub context: usize,
    pub max_experts: usize,
    pub top_k: Vec<usize>,
}

impl Default for FlopQuery {
    fn default() -> Self {
        Self {
            d_model: 32,
            ffn_hidden: 64,
            n_blocks: 2,
            context: 24,
            max_experts: 16,
            top_k: vec![1, 2, 4],
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FlopSeries {
    pub top_k: usize,
    /// `(experts, total)` for every expert count with `experts >= top_k`.
    pub points: Vec<(usize, u64)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct FlopAnswer {
    pub dense_total: u64,
    pub series: Vec<FlopSeries>,
}

/// Activated MACs per frame as the expert count grows, one series per `k`.
pub fn flop_curve(q: &FlopQuery) -> Result<FlopAnswer, String> {
    let cfg = ModelConfig {
        d_model: q.d_model,
        ffn_hidden: q.ffn_hidden,
        n_blocks: q.n_blocks,
        ..demo_model_config()
    };
    if q.d_model % cfg.n_heads != 0 || q.ffn_hidden == 0 || q.n_blocks == 0 {
        return Err("d_model must be even and ffn_hidden, n_blocks positive".into());
    }
    let series = q
        .top_k
        .iter()
        .filter(|&&k| k >= 1 && k <= q.max_experts)
        .map(|&k| FlopSeries {
            top_k: k,
            points: (k..=q.max_experts)
                .map(|n| {
                    let moe = MoeConfig::new(n, k).expect("k <= n");
                    (n, flop_proxy(&cfg, Some(&moe), q.context).total)
                })
                .collect(),
        })
        .collect();
    Ok(FlopAnswer {
        dense_total: flop_proxy(&cfg, None, q.context).total,
        series,
    })
}

fn answer<Q, A>(query: &str, f: impl Fn(&Q) -> Result<A, String>) -> Result<String, JsError>
where
    Q: for<'de> Deserialize<'de>,
    A: Serialize,
{
    let q: Q = serde_json::from_str(query).map_err(|e| JsError::new(&format!("bad query: {e}")))?;
    let a = f(&q).map_err(|e| JsError::new(&e))?;
    serde_json::to_string(&a).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = exploreRouter)]
pub fn explore_router_json(query: &str) -> Result<String, JsError> {
    answer(query, explore_router)
}

#[wasm_bindgen(js_name = upcycleGap)]
pub fn upcycle_gap_json(query: &str) -> Result<String, JsError> {
    answer(query, upcycle_gap)
}

#[wasm_bindgen(js_name = flopCurve)]
pub fn flop_curve_json(query: &str) -> Result<String, JsError> {
    answer(query, flop_curve)
}
