//! Connectionist temporal classification: loss, greedy decoding and token
//! error rate. Label 0 is the blank.

use thiserror::Error;

use crate::graph::{Graph, Var};
use crate::tensor::{Element, TensorError};

pub const BLANK: usize = 0;

#[derive(Debug, Error, PartialEq)]
pub enum CtcError {
    #[error("log-prob buffer of {len} values is not {frames} frames of {vocab} classes")]
    Shape {
        len: usize,
        frames: usize,
        vocab: usize,
    },
    #[error("label symbol {symbol} at position {pos} outside 1..{vocab}")]
    Label {
        symbol: usize,
        pos: usize,
        vocab: usize,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Negative log-likelihood of one label sequence and its gradient with
/// respect to the input log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct CtcLoss {
    /// `+inf` when no alignment exists.
    pub loss: f64,
    /// `[frames × vocab]`; empty when infeasible.
    pub grad: Vec<f64>,
    pub feasible: bool,
}

/// Fewest frames that can emit `label`: one per symbol plus a separating
/// blank between adjacent repeats.
pub fn min_frames(label: &[usize]) -> usize {
    label.len() + label.windows(2).filter(|w| w[0] == w[1]).count()
}

fn lse2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn lse3(a: f64, b: f64, c: f64) -> f64 {
    lse2(lse2(a, b), c)
}

/// Forward–backward in log space over the blank-augmented label.
///
/// `log_probs` is `[frames × vocab]` row-major, each row a log-softmax.
pub fn ctc_loss(
    log_probs: &[f64],
    frames: usize,
    vocab: usize,
    label: &[usize],
) -> Result<CtcLoss, CtcError> {
    if log_probs.len() != frames * vocab || vocab == 0 {
        return Err(CtcError::Shape {
            len: log_probs.len(),
            frames,
            vocab,
        });
    }
    if let Some((pos, &symbol)) = label
        .iter()
        .enumerate()
        .find(|(_, s)| **s == BLANK || **s >= vocab)
    {
        return Err(CtcError::Label { symbol, pos, vocab });
    }
    let infeasible = CtcLoss {
        loss: f64::INFINITY,
        grad: Vec::new(),
        feasible: false,
    };
    if frames == 0 || min_frames(label) > frames {
        return Ok(infeasible);
    }

    let s_len = 2 * label.len() + 1;
    let ext = |s: usize| if s % 2 == 0 { BLANK } else { label[s / 2] };
    // Skip transition s-2 -> s allowed onto a non-blank that differs from s-2.
    let can_skip = |s: usize| s >= 2 && ext(s) != BLANK && ext(s) != ext(s - 2);
    let lp = |t: usize, c: usize| log_probs[t * vocab + c];
    let ninf = f64::NEG_INFINITY;

    let mut alpha = vec![ninf; frames * s_len];
    alpha[0] = lp(0, BLANK);
    if s_len > 1 {
        alpha[1] = lp(0, ext(1));
    }
    for t in 1..frames {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let a = prev[s];
            let b = if s >= 1 { prev[s - 1] } else { ninf };
            let c = if can_skip(s) { prev[s - 2] } else { ninf };
            let sum = lse3(a, b, c);
            alpha[t * s_len + s] = if sum == ninf { ninf } else { sum + lp(t, ext(s)) };
        }
    }
    let last = (frames - 1) * s_len;
    let log_p = if s_len > 1 {
        lse2(alpha[last + s_len - 1], alpha[last + s_len - 2])
    } else {
        alpha[last]
    };
    if log_p == ninf {
        return Ok(infeasible);
    }

    // beta[t][s]: log-prob of completing the label from state s after frame t,
    // excluding frame t's own emission.
    let mut beta = vec![ninf; frames * s_len];
    beta[last + s_len - 1] = 0.0;
    if s_len > 1 {
        beta[last + s_len - 2] = 0.0;
    }
    for t in (0..frames - 1).rev() {
        for s in 0..s_len {
            let next = |s2: usize| beta[(t + 1) * s_len + s2] + lp(t + 1, ext(s2));
            let a = next(s);
            let b = if s + 1 < s_len { next(s + 1) } else { ninf };
            let c = if s + 2 < s_len && can_skip(s + 2) {
                next(s + 2)
            } else {
                ninf
            };
            beta[t * s_len + s] = lse3(a, b, c);
        }
    }

    let mut grad = vec![0.0f64; frames * vocab];
    for t in 0..frames {
        for s in 0..s_len {
            let occ = alpha[t * s_len + s] + beta[t * s_len + s];
            if occ == ninf {
                continue;
            }
            grad[t * vocab + ext(s)] -= (occ - log_p).exp();
        }
    }
    Ok(CtcLoss {
        loss: -log_p,
        grad,
        feasible: true,
    })
}

/// Records the CTC loss of one sequence whose `[frames × vocab]`
/// log-probabilities are `log_probs`. Returns `None` when infeasible.
pub fn ctc_loss_var<T: Element>(
    g: &mut Graph<T>,
    log_probs: Var,
    label: &[usize],
) -> Result<Option<(Var, f64)>, CtcError> {
    let v = g.value(log_probs);
    let (frames, vocab) = match v.shape() {
        [t, c] => (*t, *c),
        s => {
            return Err(CtcError::Shape {
                len: v.numel(),
                frames: s.first().copied().unwrap_or(0),
                vocab: v.last_dim(),
            })
        }
    };
    let lp: Vec<f64> = v.data().iter().map(|x| x.as_f64()).collect();
    let res = ctc_loss(&lp, frames, vocab, label)?;
    if !res.feasible {
        return Ok(None);
    }
    let local: Vec<T> = res.grad.iter().map(|&x| T::from_f64(x)).collect();
    let var = g.custom_scalar(log_probs, T::from_f64(res.loss), local)?;
    Ok(Some((var, res.loss)))
}

/// Per-frame argmax (lowest index on ties), repeats collapsed, blanks removed.
pub fn greedy_decode<T: PartialOrd + Copy>(scores: &[T], vocab: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for row in scores.chunks_exact(vocab) {
        let best = crate::moe::argmax(row);
        if Some(best) != prev && best != BLANK {
            out.push(best);
        }
        prev = Some(best);
    }
    out
}

/// Levenshtein distance and the error rate `distance / max(1, |reference|)`.
pub fn edit_distance<S: PartialEq>(hyp: &[S], reference: &[S]) -> (usize, f64) {
    let mut prev: Vec<usize> = (0..=reference.len()).collect();
    let mut cur = vec![0; reference.len() + 1];
    for (i, h) in hyp.iter().enumerate() {
        cur[0] = i + 1;
        for (j, r) in reference.iter().enumerate() {
            let sub = prev[j] + usize::from(h != r);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    let d = prev[reference.len()];
    (d, d as f64 / reference.len().max(1) as f64)
}
