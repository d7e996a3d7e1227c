//! Optimizer, schedule, loss assembly, training loop and evaluation.

use std::fmt::Write as _;

use indexmap::IndexMap;
use thiserror::Error;

use crate::config::{ConfigError, KvConfig};
use crate::ctc::{self, CtcError};
use crate::data::{shuffled_order, Split};
use crate::graph::{Graph, Var};
use crate::model::{Batch, Forward, GradMode, Model, ModelConfig, ModelError, Params};
use crate::moe::{self, MoeConfig, MoeError, UsageCollector, UsageStats};
use crate::tensor::{Element, TensorError};
use crate::upcycle::FreezeMask;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("no feasible CTC instance in batch of {0}")]
    AllInfeasible(usize),
    #[error("training diverged at step {step}: loss is {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("empty {0} split")]
    EmptySplit(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Ctc(#[from] CtcError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Moe(#[from] MoeError),
    #[error(transparent)]
    Kv(#[from] ConfigError),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub peak_lr: f32,
    pub warmup_steps: usize,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub batch_size: usize,
    pub max_steps: usize,
    /// Stop once validation loss has not improved for this many steps.
    pub patience: usize,
    pub eval_interval: usize,
    /// Weight of the balance loss; ignored for dense models.
    pub alpha: f32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            peak_lr: 2e-4,
            warmup_steps: 200,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            batch_size: 16,
            max_steps: 2000,
            patience: 300,
            eval_interval: 50,
            alpha: moe::DEFAULT_ALPHA,
            seed: 0,
        }
    }
}

const TRAIN_KEYS: [&str; 11] = [
    "peak_lr",
    "warmup_steps",
    "beta1",
    "beta2",
    "eps",
    "batch_size",
    "max_steps",
    "patience",
    "eval_interval",
    "alpha",
    "seed",
];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.warmup_steps == 0 {
            return fail("warmup_steps must be >= 1");
        }
        if self.patience == 0 {
            return fail("patience must be >= 1");
        }
        if self.batch_size == 0 || self.eval_interval == 0 {
            return fail("batch_size and eval_interval must be >= 1");
        }
        if !(self.peak_lr >= 0.0 && self.peak_lr.is_finite()) {
            return fail("peak_lr must be a finite non-negative number");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return fail("Adam betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return fail("eps must be positive");
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return fail("alpha must be a finite non-negative number");
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("peak_lr", self.peak_lr);
        kv.set("warmup_steps", self.warmup_steps);
        kv.set("beta1", self.beta1);
        kv.set("beta2", self.beta2);
        kv.set("eps", self.eps);
        kv.set("batch_size", self.batch_size);
        kv.set("max_steps", self.max_steps);
        kv.set("patience", self.patience);
        kv.set("eval_interval", self.eval_interval);
        kv.set("alpha", self.alpha);
        kv.set("seed", self.seed);
        kv
    }

    pub fn from_kv(kv: &KvConfig, base: &TrainConfig) -> Result<Self> {
        kv.check_keys(&TRAIN_KEYS)?;
        Ok(Self {
            peak_lr: kv.get_or("peak_lr", base.peak_lr)?,
            warmup_steps: kv.get_or("warmup_steps", base.warmup_steps)?,
            beta1: kv.get_or("beta1", base.beta1)?,
            beta2: kv.get_or("beta2", base.beta2)?,
            eps: kv.get_or("eps", base.eps)?,
            batch_size: kv.get_or("batch_size", base.batch_size)?,
            max_steps: kv.get_or("max_steps", base.max_steps)?,
            patience: kv.get_or("patience", base.patience)?,
            eval_interval: kv.get_or("eval_interval", base.eval_interval)?,
            alpha: kv.get_or("alpha", base.alpha)?,
            seed: kv.get_or("seed", base.seed)?,
        })
    }
}

/// Linear warmup from 0 to `peak_lr`, constant afterwards.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f32 {
    let w = cfg.warmup_steps.max(1);
    (cfg.peak_lr as f64 * step.min(w) as f64 / w as f64) as f32
}

/// Adam with bias correction. Moments are kept per parameter name.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: i32,
    m: IndexMap<String, Vec<f32>>,
    v: IndexMap<String, Vec<f32>>,
}

impl Adam {
    pub fn new(beta1: f32, beta2: f32, eps: f32) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self::new(cfg.beta1, cfg.beta2, cfg.eps)
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// Applies one update to every parameter that has a gradient and, when
    /// `mask` is given, belongs to it.
    pub fn step(
        &mut self,
        params: &mut Params,
        grads: &IndexMap<String, Vec<f32>>,
        lr: f32,
        mask: Option<&FreezeMask>,
    ) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for (name, g) in grads {
            if mask.is_some_and(|m| !m.contains(name)) {
                continue;
            }
            let p = params.get_mut(name)?;
            if p.numel() != g.len() {
                return Err(TensorError::Shape {
                    op: "adam",
                    left: p.shape().to_vec(),
                    right: vec![g.len()],
                }
                .into());
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// The recorded training objective of one batch and its logged parts.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: Var,
    /// Mean CTC loss over feasible sequences.
    pub l_asr: f64,
    /// Mean balance loss over MoE layers; zero for dense models.
    pub l_b: f64,
    pub alpha: f64,
    pub feasible: usize,
    pub skipped: usize,
}

/// `mean feasible CTC + alpha · mean per-layer balance loss`.
///
/// Infeasible sequences are skipped and counted. Dense models and
/// `alpha = 0` record the CTC term alone.
pub fn total_loss<T: Element>(
    g: &mut Graph<T>,
    fwd: &Forward,
    batch: &Batch,
    alpha: f64,
) -> Result<LossParts> {
    let lp = g.log_softmax(fwd.logits, 1)?;
    let mut terms = Vec::with_capacity(batch.len());
    let mut skipped = 0;
    for (b, label) in batch.labels.iter().enumerate() {
        let seg = g.slice_rows(lp, fwd.offsets[b], fwd.lengths[b])?;
        match ctc::ctc_loss_var(g, seg, label)? {
            Some((v, _)) => terms.push(v),
            None => skipped += 1,
        }
    }
    if terms.is_empty() {
        return Err(TrainError::AllInfeasible(batch.len()));
    }
    let feasible = terms.len();
    let asr = sum_scalars(g, &terms)?;
    let asr = g.scale(asr, T::from_f64(1.0 / feasible as f64));
    let l_asr = g.value(asr).item().as_f64();

    if fwd.routing.is_empty() {
        return Ok(LossParts {
            total: asr,
            l_asr,
            l_b: 0.0,
            alpha,
            feasible,
            skipped,
        });
    }
    let mut layers = Vec::with_capacity(fwd.routing.len());
    for r in &fwd.routing {
        layers.push(moe::balance_loss(g, r.full_dist)?);
    }
    let lb = sum_scalars(g, &layers)?;
    let lb = g.scale(lb, T::from_f64(1.0 / layers.len() as f64));
    let l_b = g.value(lb).item().as_f64();
    let total = if alpha == 0.0 {
        asr
    } else {
        let weighted = g.scale(lb, T::from_f64(alpha));
        g.add(asr, weighted)?
    };
    Ok(LossParts {
        total,
        l_asr,
        l_b,
        alpha,
        feasible,
        skipped,
    })
}

fn sum_scalars<T: Element>(g: &mut Graph<T>, xs: &[Var]) -> Result<Var> {
    let mut acc = xs[0];
    for &x in &xs[1..] {
        acc = g.add(acc, x)?;
    }
    Ok(acc)
}

/// One forward/backward pass. Returns the loss parts and the gradients of
/// every tracked parameter.
pub fn loss_and_grads(
    model: &Model,
    batch: &Batch,
    alpha: f64,
    mask: Option<&FreezeMask>,
) -> Result<(LossParts, f64, IndexMap<String, Vec<f32>>)> {
    let mut g = Graph::<f32>::new();
    let mode = match mask {
        Some(m) => GradMode::Only(m),
        None => GradMode::All,
    };
    let fwd = model.forward(&mut g, batch, mode)?;
    let parts = total_loss(&mut g, &fwd, batch, alpha)?;
    let loss = g.value(parts.total).item() as f64;
    g.backward(parts.total)?;
    let mut grads = IndexMap::new();
    for (name, &v) in &fwd.params {
        if let Some(gr) = g.grad(v) {
            grads.insert(name.clone(), gr.to_vec());
        }
    }
    Ok((parts, loss, grads))
}

/// One row of the training log, written at every validation point.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub step: usize,
    pub lr: f32,
    /// Mean training objective since the previous row.
    pub train_loss: f64,
    pub val_loss: f64,
    pub l_asr: f64,
    pub l_b: f64,
}

pub const HISTORY_HEADER: &str = "step,lr,train_loss,val_loss,l_asr,l_b";

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut out = format!("{HISTORY_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.step, r.lr, r.train_loss, r.val_loss, r.l_asr, r.l_b
        );
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters at the best validation point (the input if none improved).
    pub model: Model,
    pub history: Vec<HistoryRow>,
    pub best_step: usize,
    pub best_val_loss: f64,
    pub steps_run: usize,
    pub stopped_early: bool,
    /// Training sequences dropped because no CTC alignment existed.
    pub skipped: usize,
}

fn effective_alpha(model: &Model, cfg: &TrainConfig) -> f64 {
    if model.is_moe() {
        cfg.alpha as f64
    } else {
        0.0
    }
}

/// Validation objective: mean CTC loss plus `alpha` times the mean balance loss.
pub fn validation_loss(model: &Model, split: &Split, cfg: &TrainConfig) -> Result<f64> {
    let r = evaluate(model, split, "valid", cfg.batch_size)?;
    Ok(r.mean_ctc_loss + effective_alpha(model, cfg) * r.mean_balance_loss)
}

/// Trains with warmup, Adam and early stopping on validation loss.
/// Parameters outside `mask` are never touched.
pub fn train(
    model: &Model,
    train_split: &Split,
    valid: &Split,
    cfg: &TrainConfig,
    mask: Option<&FreezeMask>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.validate()?;
    let mut outcome = TrainOutcome {
        model: model.clone(),
        history: Vec::new(),
        best_step: 0,
        best_val_loss: f64::INFINITY,
        steps_run: 0,
        stopped_early: false,
        skipped: 0,
    };
    if cfg.max_steps == 0 {
        return Ok(outcome);
    }
    if train_split.is_empty() {
        return Err(TrainError::EmptySplit("training"));
    }
    if valid.is_empty() {
        return Err(TrainError::EmptySplit("validation"));
    }
    let alpha = effective_alpha(model, cfg);
    let mut current = model.clone();
    let mut opt = Adam::from_config(cfg);
    outcome.best_val_loss = validation_loss(&current, valid, cfg)?;

    let n = train_split.len();
    let mut epoch = 0u64;
    let mut order = shuffled_order(n, cfg.seed, epoch);
    let mut cursor = 0;
    let (mut sum_loss, mut sum_asr, mut sum_lb, mut count) = (0.0, 0.0, 0.0, 0usize);

    for step in 1..=cfg.max_steps {
        let mut picked = Vec::with_capacity(cfg.batch_size);
        while picked.len() < cfg.batch_size.min(n) {
            if cursor == n {
                epoch += 1;
                order = shuffled_order(n, cfg.seed, epoch);
                cursor = 0;
            }
            picked.push(&train_split.examples[order[cursor]]);
            cursor += 1;
        }
        let batch = train_split.batch_of(picked.into_iter());
        let (parts, loss, grads) = match loss_and_grads(&current, &batch, alpha, mask) {
            Ok(r) => r,
            Err(TrainError::AllInfeasible(k)) => {
                outcome.skipped += k;
                continue;
            }
            Err(e) => return Err(e),
        };
        if !loss.is_finite() {
            return Err(TrainError::Diverged { step, loss });
        }
        outcome.skipped += parts.skipped;
        let lr = lr_at(step, cfg);
        opt.step(&mut current.params, &grads, lr, mask)?;
        outcome.steps_run = step;
        sum_loss += loss;
        sum_asr += parts.l_asr;
        sum_lb += parts.l_b;
        count += 1;

        if step % cfg.eval_interval == 0 || step == cfg.max_steps {
            let val = validation_loss(&current, valid, cfg)?;
            if !val.is_finite() {
                return Err(TrainError::Diverged { step, loss: val });
            }
            let c = count.max(1) as f64;
            outcome.history.push(HistoryRow {
                step,
                lr,
                train_loss: sum_loss / c,
                val_loss: val,
                l_asr: sum_asr / c,
                l_b: sum_lb / c,
            });
            (sum_loss, sum_asr, sum_lb, count) = (0.0, 0.0, 0.0, 0);
            if val < outcome.best_val_loss {
                outcome.best_val_loss = val;
                outcome.best_step = step;
                outcome.model = current.clone();
            } else if step - outcome.best_step >= cfg.patience {
                outcome.stopped_early = true;
                break;
            }
        }
    }
    Ok(outcome)
}

/// Metrics of one model on one split.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub dataset: String,
    /// Total edit distance over total reference length.
    pub token_error_rate: f64,
    pub mean_ctc_loss: f64,
    /// Mean over batches of the per-layer mean balance loss; zero for dense.
    pub mean_balance_loss: f64,
    pub flops_per_token: u64,
    pub sequences: usize,
    pub infeasible: usize,
    pub usage: Option<UsageStats>,
}

pub const EVAL_HEADER: &str =
    "dataset,token_error_rate,mean_ctc_loss,mean_balance_loss,flops_per_token,sequences,infeasible";

impl EvalReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.dataset,
            self.token_error_rate,
            self.mean_ctc_loss,
            self.mean_balance_loss,
            self.flops_per_token,
            self.sequences,
            self.infeasible
        )
    }
}

pub fn reports_csv(reports: &[EvalReport]) -> String {
    let mut out = format!("{EVAL_HEADER}\n");
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Greedy-decodes every sequence of `split` and accumulates loss and
/// routing statistics in split order.
pub fn evaluate(model: &Model, split: &Split, dataset: &str, batch_size: usize) -> Result<EvalReport> {
    if split.is_empty() {
        return Err(TrainError::EmptySplit("evaluation"));
    }
    let (mut errors, mut ref_len) = (0usize, 0usize);
    let (mut ctc_sum, mut feasible, mut infeasible) = (0.0f64, 0usize, 0usize);
    let (mut lb_sum, mut batches) = (0.0f64, 0usize);
    let mut usage = UsageCollector::new();
    let v = model.config.vocab_size;
    for batch in split.batches(batch_size) {
        let mut g = Graph::<f32>::new();
        let fwd = model.forward(&mut g, &batch, GradMode::None)?;
        let logits = model.pad_logits(&g, &fwd, &batch);
        let t_pad = logits.values.shape()[1];
        let lp = g.log_softmax(fwd.logits, 1)?;
        let lp_data = g.value(lp).data();
        for (b, label) in batch.labels.iter().enumerate() {
            let len = logits.lengths[b];
            let row = &logits.values.data()[b * t_pad * v..(b * t_pad + len) * v];
            let hyp = ctc::greedy_decode(row, v);
            errors += ctc::edit_distance(&hyp, label).0;
            ref_len += label.len();
            let seg: Vec<f64> = lp_data[fwd.offsets[b] * v..(fwd.offsets[b] + len) * v]
                .iter()
                .map(|&x| x as f64)
                .collect();
            let r = ctc::ctc_loss(&seg, len, v, label)?;
            if r.feasible {
                ctc_sum += r.loss;
                feasible += 1;
            } else {
                infeasible += 1;
            }
        }
        if !fwd.routing.is_empty() {
            let mut lb = 0.0;
            for (layer, r) in fwd.routing.iter().enumerate() {
                let out = r.to_output(&g);
                usage.push(layer, &out)?;
                let d = moe::dispatch_fractions(&out.full_dist);
                let n = d.len() as f64;
                let mut mean = vec![0.0f64; d.len()];
                for t in 0..out.tokens() {
                    for (m, &p) in mean.iter_mut().zip(out.full_dist.row(t)) {
                        *m += p as f64;
                    }
                }
                let tok = out.tokens().max(1) as f64;
                lb += n * d.iter().zip(&mean).map(|(f, g)| f * g / tok).sum::<f64>();
            }
            lb_sum += lb / fwd.routing.len() as f64;
            batches += 1;
        }
    }
    Ok(EvalReport {
        dataset: dataset.to_string(),
        token_error_rate: errors as f64 / ref_len.max(1) as f64,
        mean_ctc_loss: if feasible > 0 { ctc_sum / feasible as f64 } else { f64::INFINITY },
        mean_balance_loss: if batches > 0 { lb_sum / batches as f64 } else { 0.0 },
        flops_per_token: flop_proxy(&model.config, model.moe.as_ref(), model.config.max_len).total,
        sequences: split.len(),
        infeasible,
        usage: if model.is_moe() { Some(usage.finish()?) } else { None },
    })
}

/// Multiply-accumulates per encoder frame on the activated path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlopCount {
    /// Q, K, V, O projections plus score and mixing products over `context` frames.
    pub attention: u64,
    /// Activated experts times one FFN (one FFN for dense).
    pub ffn: u64,
    /// `d · N` for MoE, zero for dense.
    pub router: u64,
    /// Down-sampling projection and output head, counted once.
    pub frontend_head: u64,
    pub per_block: u64,
    pub total: u64,
}

/// Activated FLOP proxy per down-sampled frame at attention context `context`.
pub fn flop_proxy(cfg: &ModelConfig, moe: Option<&MoeConfig>, context: usize) -> FlopCount {
    let d = cfg.d_model as u64;
    let f = cfg.ffn_hidden as u64;
    let attention = 4 * d * d + 2 * context as u64 * d;
    let dense_ffn = 2 * d * f;
    let (ffn, router) = match moe {
        None => (dense_ffn, 0),
        Some(m) => (m.top_k as u64 * dense_ffn, d * m.n_experts as u64),
    };
    let per_block = attention + ffn + router;
    let frontend_head =
        (cfg.downsample_rate * cfg.feat_dim) as u64 * d + d * cfg.vocab_size as u64;
    FlopCount {
        attention,
        ffn,
        router,
        frontend_head,
        per_block,
        total: cfg.n_blocks as u64 * per_block + frontend_head,
    }
}
