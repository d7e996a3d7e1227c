//! Independent oracles shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use moe_upcycle::graph::{Graph, Var};
use moe_upcycle::model::{Batch, GradMode, Model, ModelConfig};
use moe_upcycle::train::total_loss;
use moe_upcycle::upcycle::FreezeMask;
use moe_upcycle::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-3;
pub const FD_TOL: f64 = 1e-4;
/// Gradients smaller than this are compared in absolute terms.
pub const FD_FLOOR: f64 = 1e-2;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Compares reverse-mode gradients of a scalar function of `inputs` with
/// central differences. `f` must rebuild the whole computation from leaves.
pub fn check_grad<F>(inputs: &[Tensor<f64>], f: F) -> GradReport
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let run = |vals: &[Tensor<f64>], rg: bool| {
        let mut g = Graph::<f64>::new();
        let vars: Vec<Var> = vals
            .iter()
            .map(|t| g.leaf(t.clone().with_requires_grad(rg)))
            .collect();
        let out = f(&mut g, &vars);
        (g, vars, out)
    };
    let (mut g, vars, out) = run(inputs, true);
    g.backward(out).unwrap();
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| g.grad(v).unwrap().to_vec()).collect();

    let mut report = GradReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    for (i, t) in inputs.iter().enumerate() {
        for j in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            let (gp, _, op) = run(&plus, false);
            let (gm, _, om) = run(&minus, false);
            let numeric = (gp.value(op).item() - gm.value(om).item()) / (2.0 * FD_STEP);
            let e = rel_err(analytic[i][j], numeric);
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = (i, j);
            }
            report.checked += 1;
        }
    }
    report
}

/// Model training objective evaluated in f64.
pub fn model_loss(model: &Model, batch: &Batch, alpha: f64) -> (f64, Vec<Vec<usize>>) {
    let mut g = Graph::<f64>::new();
    let fwd = model.forward(&mut g, batch, GradMode::None).unwrap();
    let parts = total_loss(&mut g, &fwd, batch, alpha).unwrap();
    let routes = fwd.routing.iter().map(|r| r.indices.clone()).collect();
    (g.value(parts.total).item(), routes)
}

#[derive(Debug, Clone)]
pub struct ModelGradReport {
    pub max_rel_err: f64,
    pub worst: String,
    pub checked: usize,
    /// Perturbations that changed a top-k selection and were skipped.
    pub selection_changes: usize,
}

/// Finite-difference check of every parameter of `model` (or of `mask`).
/// Stored parameters are `f32`, so the realized perturbation is measured
/// after rounding and used as the divisor.
pub fn check_model_grad(model: &Model, batch: &Batch, alpha: f64, mask: Option<&FreezeMask>) -> ModelGradReport {
    let mut g = Graph::<f64>::new();
    let mode = mask.map_or(GradMode::All, GradMode::Only);
    let fwd = model.forward(&mut g, batch, mode).unwrap();
    let parts = total_loss(&mut g, &fwd, batch, alpha).unwrap();
    g.backward(parts.total).unwrap();
    let (_, base_routes) = model_loss(model, batch, alpha);

    let mut report = ModelGradReport {
        max_rel_err: 0.0,
        worst: String::new(),
        checked: 0,
        selection_changes: 0,
    };
    for (name, &var) in &fwd.params {
        if mask.is_some_and(|m| !m.contains(name)) {
            continue;
        }
        // Unreached parameters (an expert no frame selected) have zero gradient.
        let numel = model.params.get(name).unwrap().numel();
        let analytic = g.grad(var).map_or_else(|| vec![0.0; numel], <[f64]>::to_vec);
        for j in 0..analytic.len() {
            let orig = model.params.get(name).unwrap().data()[j];
            let up = (orig as f64 + FD_STEP) as f32;
            let down = (orig as f64 - FD_STEP) as f32;
            let mut mp = model.clone();
            mp.params.get_mut(name).unwrap().data_mut()[j] = up;
            let mut mm = model.clone();
            mm.params.get_mut(name).unwrap().data_mut()[j] = down;
            let (lp, rp) = model_loss(&mp, batch, alpha);
            let (lm, rm) = model_loss(&mm, batch, alpha);
            if rp != base_routes || rm != base_routes {
                report.selection_changes += 1;
                continue;
            }
            let numeric = (lp - lm) / (up as f64 - down as f64);
            let e = rel_err(analytic[j], numeric);
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = format!("{name}[{j}] analytic {} numeric {numeric}", analytic[j]);
            }
            report.checked += 1;
        }
    }
    report
}

pub fn toy_config(n_blocks: usize) -> ModelConfig {
    ModelConfig {
        feat_dim: 3,
        d_model: 4,
        n_blocks,
        ffn_hidden: 6,
        n_heads: 2,
        vocab_size: 4,
        downsample_rate: 2,
        max_len: 16,
    }
}

/// Random features with labels short enough to be CTC-feasible.
pub fn random_batch(rng: &mut ChaCha8Rng, cfg: &ModelConfig, sizes: &[(usize, usize)]) -> Batch {
    let rows: Vec<(Vec<f32>, Vec<usize>)> = sizes
        .iter()
        .map(|&(frames, label_len)| {
            let f = (0..frames * cfg.feat_dim)
                .map(|_| rng.random_range(-1.0f32..1.0))
                .collect();
            let mut l: Vec<usize> = Vec::new();
            while l.len() < label_len {
                let s = rng.random_range(1..cfg.vocab_size);
                if l.last() != Some(&s) {
                    l.push(s);
                }
            }
            (f, l)
        })
        .collect();
    let seqs: Vec<(&[f32], &[usize])> = rows.iter().map(|(f, l)| (f.as_slice(), l.as_slice())).collect();
    Batch::from_sequences(&seqs, cfg.feat_dim).unwrap()
}

/// Collapses a CTC path: merge repeats, then drop blanks.
pub fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &p in path {
        if Some(p) != prev && p != 0 {
            out.push(p);
        }
        prev = Some(p);
    }
    out
}

/// `-ln Σ_{paths collapsing to label} Π_t p_t(path_t)` by enumerating all
/// `vocab^frames` paths.
pub fn brute_force_ctc(log_probs: &[f64], frames: usize, vocab: usize, label: &[usize]) -> f64 {
    let mut total = 0.0f64;
    let mut path = vec![0usize; frames];
    loop {
        if collapse(&path) == label {
            let lp: f64 = path
                .iter()
                .enumerate()
                .map(|(t, &c)| log_probs[t * vocab + c])
                .sum();
            total += lp.exp();
        }
        // Odometer increment.
        let mut i = 0;
        loop {
            if i == frames {
                return -total.ln();
            }
            path[i] += 1;
            if path[i] < vocab {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

/// Every label over `1..vocab` of length `0..=max_len`.
pub fn all_labels(vocab: usize, max_len: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    let mut frontier = vec![vec![]];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for l in &frontier {
            for s in 1..vocab {
                let mut m: Vec<usize> = l.clone();
                m.push(s);
                next.push(m);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// Row-wise log-softmax of random logits in f64.
pub fn random_log_probs(rng: &mut ChaCha8Rng, frames: usize, vocab: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(frames * vocab);
    for _ in 0..frames {
        let row: Vec<f64> = (0..vocab).map(|_| rng.random_range(-2.0..2.0)).collect();
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|x| x - lse));
    }
    out
}

/// `N · Σ F_i G_i` computed from scratch in f64.
pub fn balance_oracle(w: &[Vec<f64>]) -> f64 {
    let n = w[0].len();
    let t = w.len() as f64;
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; n];
    for row in w {
        let mut best = 0;
        for i in 1..n {
            if row[i] > row[best] {
                best = i;
            }
        }
        f[best] += 1.0 / t;
        for i in 0..n {
            g[i] += row[i] / t;
        }
    }
    n as f64 * f.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>()
}

/// Random probability rows.
pub fn random_dist(rng: &mut ChaCha8Rng, rows: usize, n: usize) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| {
            let r: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
            let s: f64 = r.iter().sum();
            r.into_iter().map(|x| x / s).collect()
        })
        .collect()
}

/// `Σ out ⊙ W` with a fixed random `W`, turning any output into a scalar.
pub fn weighted_sum(g: &mut Graph<f64>, x: Var, seed: u64) -> Var {
    let shape = g.shape(x).to_vec();
    let w = uniform(&mut rng(seed), &shape, 1.0);
    let w = g.constant(w);
    let p = g.mul(x, w).unwrap();
    g.sum(p)
}

/// Values away from zero so ReLU kinks are never crossed by a step.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Distinct values with every pairwise gap at least 0.05, in random order.
fn well_separated(rng: &mut ChaCha8Rng, rows: usize, n: usize) -> Tensor<f64> {
    use rand::seq::SliceRandom;
    let mut data = Vec::with_capacity(rows * n);
    for _ in 0..rows {
        let mut row: Vec<f64> = (0..n).map(|i| i as f64 * 0.3 + rng.random_range(0.0..0.05)).collect();
        row.shuffle(rng);
        data.extend(row);
    }
    Tensor::new([rows, n], data).unwrap()
}

/// Finite-difference checks of every differentiable primitive.
pub fn primitive_grad_suite() -> Vec<(&'static str, GradReport)> {
    let mut r = rng(2024);
    let mut out = Vec::new();
    let a = uniform(&mut r, &[3, 4], 1.0);
    let b = uniform(&mut r, &[4, 2], 1.0);
    out.push(("matmul", check_grad(&[a.clone(), b], |g, v| {
        let y = g.matmul(v[0], v[1]).unwrap();
        weighted_sum(g, y, 1)
    })));
    let bias = uniform(&mut r, &[4], 1.0);
    out.push(("add (broadcast)", check_grad(&[a.clone(), bias.clone()], |g, v| {
        let y = g.add(v[0], v[1]).unwrap();
        weighted_sum(g, y, 2)
    })));
    let c = uniform(&mut r, &[3, 4], 1.0);
    out.push(("mul", check_grad(&[a.clone(), c], |g, v| {
        let y = g.mul(v[0], v[1]).unwrap();
        weighted_sum(g, y, 3)
    })));
    out.push(("mul (broadcast)", check_grad(&[a.clone(), bias], |g, v| {
        let y = g.mul(v[0], v[1]).unwrap();
        weighted_sum(g, y, 4)
    })));
    out.push(("scale", check_grad(&[a.clone()], |g, v| {
        let y = g.scale(v[0], -1.7);
        weighted_sum(g, y, 5)
    })));
    out.push(("relu", check_grad(&[off_kink(&mut r, &[3, 4])], |g, v| {
        let y = g.relu(v[0]);
        weighted_sum(g, y, 6)
    })));
    let x5 = uniform(&mut r, &[5], 2.0);
    out.push(("softmax (vector)", check_grad(&[x5], |g, v| {
        let y = g.softmax(v[0], 0).unwrap();
        weighted_sum(g, y, 7)
    })));
    let x3 = uniform(&mut r, &[2, 3, 4], 2.0);
    for axis in 0..3 {
        out.push((
            ["softmax (axis 0)", "softmax (axis 1)", "softmax (axis 2)"][axis],
            check_grad(&[x3.clone()], |g, v| {
                let y = g.softmax(v[0], axis).unwrap();
                weighted_sum(g, y, 8)
            }),
        ));
        out.push((
            ["log_softmax (axis 0)", "log_softmax (axis 1)", "log_softmax (axis 2)"][axis],
            check_grad(&[x3.clone()], |g, v| {
                let y = g.log_softmax(v[0], axis).unwrap();
                weighted_sum(g, y, 9)
            }),
        ));
    }
    let gain = uniform(&mut r, &[4], 1.5);
    let beta = uniform(&mut r, &[4], 1.0);
    out.push(("layer_norm", check_grad(&[a.clone(), gain, beta], |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2]).unwrap();
        weighted_sum(g, y, 10)
    })));
    out.push(("topk", check_grad(&[well_separated(&mut r, 3, 6)], |g, v| {
        let (y, _) = g.topk(v[0], 3).unwrap();
        weighted_sum(g, y, 11)
    })));
    out.push(("topk then softmax", check_grad(&[well_separated(&mut r, 4, 5)], |g, v| {
        let (y, _) = g.topk(v[0], 2).unwrap();
        let s = g.softmax(y, 1).unwrap();
        weighted_sum(g, s, 12)
    })));
    out.push(("gather_rows", check_grad(&[a.clone()], |g, v| {
        let y = g.gather_rows(v[0], vec![2, 0, 2, 1]).unwrap();
        weighted_sum(g, y, 13)
    })));
    out.push(("slice_rows", check_grad(&[a.clone()], |g, v| {
        let y = g.slice_rows(v[0], 1, 2).unwrap();
        weighted_sum(g, y, 14)
    })));
    let p1 = uniform(&mut r, &[2, 4], 1.0);
    let p2 = uniform(&mut r, &[3, 4], 1.0);
    out.push(("scatter_rows", check_grad(&[p1, p2], |g, v| {
        let y = g.scatter_rows(vec![(v[0], vec![0, 3]), (v[1], vec![3, 1, 0])], 4, 4).unwrap();
        weighted_sum(g, y, 15)
    })));
    let w3 = uniform(&mut r, &[3], 1.0);
    out.push(("scale_rows", check_grad(&[a.clone(), w3], |g, v| {
        let y = g.scale_rows(v[0], v[1]).unwrap();
        weighted_sum(g, y, 16)
    })));
    out.push(("pick", check_grad(&[a.clone()], |g, v| {
        let y = g.pick(v[0], vec![0, 5, 5, 11]).unwrap();
        weighted_sum(g, y, 17)
    })));
    out.push(("sum", check_grad(&[a.clone()], |g, v| {
        let s = g.sum(v[0]);
        g.scale(s, 0.5)
    })));
    out.push(("mean_rows", check_grad(&[a.clone()], |g, v| {
        let y = g.mean_rows(v[0]).unwrap();
        weighted_sum(g, y, 18)
    })));
    let q = uniform(&mut r, &[7, 4], 1.0);
    let k = uniform(&mut r, &[7, 4], 1.0);
    let vv = uniform(&mut r, &[7, 4], 1.0);
    out.push(("attention (2 segments, 2 heads)", check_grad(&[q, k, vv], |g, v| {
        let y = g.attention(v[0], v[1], v[2], vec![(0, 3), (3, 4)], 2).unwrap();
        weighted_sum(g, y, 19)
    })));
    let logits = uniform(&mut r, &[5, 4], 1.5);
    out.push(("ctc (custom scalar)", check_grad(&[logits], |g, v| {
        let lp = g.log_softmax(v[0], 1).unwrap();
        moe_upcycle::ctc::ctc_loss_var(g, lp, &[1, 3, 3]).unwrap().unwrap().0
    })));
    let m = uniform(&mut r, &[6, 4], 1.0);
    out.push(("balance loss", check_grad(&[m], |g, v| {
        let p = g.softmax(v[0], 1).unwrap();
        moe_upcycle::moe::balance_loss(g, p).unwrap()
    })));
    out
}

/// Dense and MoE two-block models, every parameter.
pub fn model_grad_suite() -> Vec<(&'static str, ModelGradReport)> {
    use moe_upcycle::{upcycle, MoeConfig};
    let cfg = toy_config(2);
    let mut r = rng(77);
    let batch = random_batch(&mut r, &cfg, &[(6, 2), (5, 1)]);
    let dense = Model::dense(cfg, 5).unwrap();
    let mut moe_cfg = MoeConfig::new(3, 2).unwrap();
    moe_cfg.router_noise_std = 0.5;
    let mut moe = upcycle(&dense, moe_cfg, 9).unwrap();
    // Break expert symmetry so router and expert gradients are non-trivial.
    let mut pr = rng(78);
    for (name, t) in moe.params.iter_mut() {
        if name.contains(".moe.experts.") {
            for v in t.data_mut() {
                *v += pr.random_range(-0.2..0.2);
            }
        }
    }
    vec![
        ("dense 2-block model", check_model_grad(&dense, &batch, 0.0, None)),
        ("MoE 2-block model (alpha 0.01)", check_model_grad(&moe, &batch, 0.01, None)),
    ]
}

#[derive(Debug, Clone)]
pub struct EquivalenceReport {
    pub max_abs_diff: f64,
    pub decode_mismatches: usize,
    pub batches: usize,
}

pub fn equivalence_config() -> ModelConfig {
    ModelConfig {
        feat_dim: 6,
        d_model: 16,
        n_blocks: 2,
        ffn_hidden: 24,
        n_heads: 2,
        vocab_size: 6,
        downsample_rate: 2,
        max_len: 32,
    }
}

/// Dense and freshly upcycled logits over `batches` random batches.
pub fn equivalence_check(n_experts: usize, top_k: usize, batches: usize, seed: u64) -> EquivalenceReport {
    use moe_upcycle::ctc::greedy_decode;
    use moe_upcycle::{upcycle, MoeConfig};
    let cfg = equivalence_config();
    let dense = Model::dense(cfg.clone(), seed).unwrap();
    let mut moe_cfg = MoeConfig::new(n_experts, top_k).unwrap();
    moe_cfg.router_noise_std = 1.0;
    let moe = upcycle(&dense, moe_cfg, seed + 1).unwrap();
    let mut r = rng(seed + 2);
    let mut report = EquivalenceReport {
        max_abs_diff: 0.0,
        decode_mismatches: 0,
        batches,
    };
    for _ in 0..batches {
        let b = r.random_range(1..=4);
        let sizes: Vec<(usize, usize)> = (0..b).map(|_| (r.random_range(2..=30), 1)).collect();
        let batch = random_batch(&mut r, &cfg, &sizes);
        let ld = dense.logits(&batch).unwrap();
        let lm = moe.logits(&batch).unwrap();
        let diff = ld.values.max_abs_diff(&lm.values).unwrap() as f64;
        report.max_abs_diff = report.max_abs_diff.max(diff);
        for i in 0..batch.len() {
            if greedy_decode(ld.row(i), cfg.vocab_size) != greedy_decode(lm.row(i), cfg.vocab_size) {
                report.decode_mismatches += 1;
            }
        }
    }
    report
}

#[derive(Debug, Clone, Default)]
pub struct CtcOracleReport {
    /// Largest |DP − enumeration| over feasible cases.
    pub max_path_diff: f64,
    pub cases: usize,
    /// Cases where exactly one of DP and enumeration found no alignment.
    pub feasibility_mismatches: usize,
    /// Largest |Σ_labels p(label) − 1|.
    pub max_norm_err: f64,
}

/// DP loss against path enumeration for every `T' ≤ 6`, `vocab ≤ 3`,
/// `U ≤ 3`, and probability mass over all labels for each `(T', vocab)`.
pub fn ctc_oracle_suite() -> CtcOracleReport {
    use moe_upcycle::ctc::ctc_loss;
    let mut r = rng(31);
    let mut rep = CtcOracleReport::default();
    for frames in 1..=6 {
        for vocab in 1..=3 {
            let lp = random_log_probs(&mut r, frames, vocab);
            for label in all_labels(vocab, 3) {
                let dp = ctc_loss(&lp, frames, vocab, &label).unwrap();
                let bf = brute_force_ctc(&lp, frames, vocab, &label);
                rep.cases += 1;
                match (dp.feasible, bf.is_finite()) {
                    (true, true) => rep.max_path_diff = rep.max_path_diff.max((dp.loss - bf).abs()),
                    (false, false) => {}
                    _ => rep.feasibility_mismatches += 1,
                }
            }
            let mass: f64 = all_labels(vocab, frames)
                .iter()
                .map(|l| (-ctc_loss(&lp, frames, vocab, l).unwrap().loss).exp())
                .sum();
            rep.max_norm_err = rep.max_norm_err.max((mass - 1.0).abs());
        }
    }
    rep
}

/// The two-frame example: uniform over {blank, a}, label "a".
pub fn ctc_worked_example_error() -> f64 {
    let lp = vec![0.5f64.ln(); 4];
    let r = moe_upcycle::ctc::ctc_loss(&lp, 2, 2, &[1]).unwrap();
    (r.loss - (-(0.75f64).ln())).abs()
}

pub fn balance_loss_value(rows: &[Vec<f64>]) -> f64 {
    let mut g = Graph::<f64>::new();
    let w = g.constant(Tensor::from_rows(rows));
    let l = moe_upcycle::moe::balance_loss(&mut g, w).unwrap();
    g.value(l).item()
}

#[derive(Debug, Clone, Default)]
pub struct BalanceReport {
    pub uniform_err: f64,
    pub concentrated_err: f64,
    pub random_err: f64,
}

pub fn balance_suite() -> BalanceReport {
    let mut rep = BalanceReport::default();
    for n in [1usize, 2, 4, 8, 16] {
        for t in [1usize, 5, 64] {
            let uniform = vec![vec![1.0 / n as f64; n]; t];
            rep.uniform_err = rep.uniform_err.max((balance_loss_value(&uniform) - 1.0).abs());
            for hot in [0, n - 1] {
                let mut row = vec![0.0; n];
                row[hot] = 1.0;
                let conc = vec![row; t];
                rep.concentrated_err = rep.concentrated_err.max((balance_loss_value(&conc) - n as f64).abs());
            }
        }
    }
    let mut r = rng(41);
    for _ in 0..200 {
        let n = r.random_range(1..=12);
        let t = r.random_range(1..=40);
        let w = random_dist(&mut r, t, n);
        rep.random_err = rep.random_err.max((balance_loss_value(&w) - balance_oracle(&w)).abs());
    }
    rep
}

/// A small synthetic task and a one-block model sized for it.
pub fn small_task(noise: f32, seed: u64) -> (moe_upcycle::Dataset, ModelConfig) {
    sized_task(noise, seed, 192)
}

pub fn sized_task(noise: f32, seed: u64, train: usize) -> (moe_upcycle::Dataset, ModelConfig) {
    use moe_upcycle::{gen_dataset, DomainSpec, SplitSizes};
    let spec = DomainSpec::random("small", 5, 6, noise, seed);
    let sizes = SplitSizes {
        train,
        valid: 32,
        test: 64,
    };
    let data = gen_dataset(&spec, sizes, seed + 1).unwrap();
    let cfg = ModelConfig {
        feat_dim: 6,
        d_model: 16,
        n_blocks: 1,
        ffn_hidden: 32,
        n_heads: 2,
        vocab_size: 5,
        downsample_rate: 2,
        max_len: spec.max_frames(),
    };
    (data, cfg)
}

pub fn fast_train_config(max_steps: usize, seed: u64) -> moe_upcycle::TrainConfig {
    moe_upcycle::TrainConfig {
        peak_lr: 3e-3,
        warmup_steps: 50,
        max_steps,
        patience: 300,
        seed,
        ..Default::default()
    }
}

/// Whether `name` is an expert FFN tensor or a router, judged by name alone.
pub fn is_expert_or_router(name: &str) -> bool {
    let parts: Vec<&str> = name.split('.').collect();
    match parts.as_slice() {
        ["blocks", b, "moe", "router"] => b.parse::<usize>().is_ok(),
        ["blocks", b, "moe", "experts", e, w] => {
            b.parse::<usize>().is_ok() && e.parse::<usize>().is_ok() && ["w1", "b1", "w2", "b2"].contains(w)
        }
        _ => false,
    }
}

#[derive(Debug, Clone)]
pub struct FreezeReport {
    pub steps_run: usize,
    /// Non-mask tensors whose bytes changed.
    pub changed_frozen: Vec<String>,
    /// Mask tensors whose bytes changed.
    pub changed_trainable: usize,
    pub mask_matches_names: bool,
}

/// Upcycles a briefly trained dense model, trains it under the freeze mask
/// for `steps` steps and compares every tensor bitwise.
pub fn freeze_check(steps: usize) -> FreezeReport {
    use moe_upcycle::{build_freeze_mask, train, upcycle, MoeConfig};
    let (data, cfg) = small_task(0.2, 3);
    let dense = Model::dense(cfg, 4).unwrap();
    let mut moe_cfg = MoeConfig::new(4, 2).unwrap();
    moe_cfg.router_noise_std = 0.5;
    let up = upcycle(&dense, moe_cfg, 5).unwrap();
    let mask = build_freeze_mask(&up).unwrap();
    let mut tc = fast_train_config(steps, 6);
    tc.patience = steps + 1;
    tc.eval_interval = steps;
    let out = train(&up, &data.train, &data.valid, &tc, Some(&mask)).unwrap();
    // The last step is always current, but the returned model is the best one;
    // the freeze holds for every intermediate parameter set so either works.
    let mut changed_frozen = Vec::new();
    let mut changed_trainable = 0;
    for (name, t) in up.params.iter() {
        let after = out.model.params.get(name).unwrap();
        let same = t.data().iter().zip(after.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        if mask.contains(name) {
            changed_trainable += usize::from(!same);
        } else if !same {
            changed_frozen.push(name.to_string());
        }
    }
    let expected: std::collections::BTreeSet<&str> = up.params.names().filter(|n| is_expert_or_router(n)).collect();
    let actual: std::collections::BTreeSet<&str> = mask.iter().collect();
    FreezeReport {
        steps_run: out.steps_run,
        changed_frozen,
        changed_trainable,
        mask_matches_names: expected == actual && !expected.is_empty(),
    }
}

/// Every file under `root`, keyed by relative path.
pub fn snapshot(root: &std::path::Path) -> std::collections::BTreeMap<String, Vec<u8>> {
    fn walk(root: &std::path::Path, dir: &std::path::Path, out: &mut std::collections::BTreeMap<String, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    let mut out = std::collections::BTreeMap::new();
    walk(root, root, &mut out);
    out
}

/// Paths that differ between two snapshots, including files present in one only.
pub fn snapshot_diff(
    a: &std::collections::BTreeMap<String, Vec<u8>>,
    b: &std::collections::BTreeMap<String, Vec<u8>>,
) -> Vec<String> {
    let keys: std::collections::BTreeSet<&String> = a.keys().chain(b.keys()).collect();
    keys.into_iter().filter(|k| a.get(*k) != b.get(*k)).cloned().collect()
}

/// Runs the whole pipeline for `cfg` in a fresh directory.
pub fn run_in_tempdir(
    cfg: &moe_upcycle::experiment::ExperimentConfig,
) -> (tempfile::TempDir, Vec<moe_upcycle::experiment::ProtocolResult>) {
    use moe_upcycle::experiment::{run_pipeline, Workdir};
    let dir = tempfile::tempdir().unwrap();
    let wd = Workdir::new(dir.path());
    wd.init(cfg).unwrap();
    let results = run_pipeline(&wd).unwrap();
    (dir, results)
}

/// Splits checkpoint bytes into header text (through `end\n`) and payload.
pub fn split_checkpoint(bytes: &[u8]) -> (String, Vec<u8>) {
    let marker = b"\nend\n";
    let at = bytes.windows(marker.len()).position(|w| w == marker).unwrap() + marker.len();
    (String::from_utf8(bytes[..at].to_vec()).unwrap(), bytes[at..].to_vec())
}

pub fn join_checkpoint(header: &str, payload: &[u8]) -> Vec<u8> {
    let mut out = header.as_bytes().to_vec();
    out.extend_from_slice(payload);
    out
}

#[derive(Debug)]
pub struct CheckpointReport {
    /// save → load → save produced identical files, per model kind.
    pub round_trips: Vec<(&'static str, bool)>,
    /// Corruption case and whether the expected error variant came back.
    pub corruptions: Vec<(&'static str, bool, String)>,
}

pub fn checkpoint_suite() -> CheckpointReport {
    use moe_upcycle::{build_freeze_mask, upcycle, Checkpoint, CheckpointError, MoeConfig};
    let dir = tempfile::tempdir().unwrap();
    let dense = Model::dense(toy_config(2), 1).unwrap();
    let mut mc = MoeConfig::new(4, 2).unwrap();
    mc.router_noise_std = 0.3;
    let moe = upcycle(&dense, mc, 2).unwrap();
    let mask = build_freeze_mask(&moe).unwrap();
    let mut round_trips = Vec::new();
    for (kind, ck) in [("dense", Checkpoint::dense(dense.clone())), ("moe", Checkpoint::new(moe, mask))] {
        let a = dir.path().join(format!("{kind}.a"));
        let b = dir.path().join(format!("{kind}.b"));
        ck.save(&a).unwrap();
        let loaded = Checkpoint::load(&a).unwrap();
        loaded.save(&b).unwrap();
        let same = std::fs::read(&a).unwrap() == std::fs::read(&b).unwrap() && loaded == ck;
        round_trips.push((kind, same));
    }

    let bytes = Checkpoint::dense(dense).to_bytes();
    let (header, payload) = split_checkpoint(&bytes);
    let mut cases: Vec<(&'static str, Vec<u8>)> = Vec::new();
    let mut bad_magic = bytes.clone();
    bad_magic[..4].copy_from_slice(b"NOPE");
    cases.push(("bad magic", bad_magic));
    cases.push(("future version", join_checkpoint(&header.replacen("version = 1\n", "version = 9\n", 1), &payload)));
    cases.push(("truncated payload", bytes[..bytes.len() - 3].to_vec()));
    cases.push(("shape and byte length disagree", {
        let line = header.lines().find(|l| l.starts_with("tensor = head.weight ")).unwrap();
        let parts: Vec<&str> = line.split_whitespace().collect();
        let bad = format!("tensor = head.weight 3x4 {} {}", parts[4], parts[5]);
        join_checkpoint(&header.replacen(line, &bad, 1), &payload)
    }));
    cases.push(("unparsable header line", join_checkpoint(&header.replacen("version = 1\n", "version = 1\n%%%\n", 1), &payload)));
    cases.push(("empty file", Vec::new()));

    let mut corruptions = Vec::new();
    for (name, data) in cases {
        let path = dir.path().join("corrupt.ckpt");
        std::fs::write(&path, &data).unwrap();
        let res = Checkpoint::load(&path);
        let ok = match (name, &res) {
            ("bad magic" | "empty file", Err(CheckpointError::BadMagic)) => true,
            ("future version", Err(CheckpointError::UnsupportedVersion(9))) => true,
            ("truncated payload", Err(CheckpointError::Truncated { tensor })) => tensor == "head.bias",
            ("shape and byte length disagree", Err(CheckpointError::Inconsistent { tensor, .. })) => tensor == "head.weight",
            ("unparsable header line", Err(CheckpointError::CorruptHeader { .. })) => true,
            _ => false,
        };
        let detail = match res {
            Ok(_) => "loaded without error".to_string(),
            Err(e) => e.to_string(),
        };
        corruptions.push((name, ok, detail));
    }
    CheckpointReport { round_trips, corruptions }
}
