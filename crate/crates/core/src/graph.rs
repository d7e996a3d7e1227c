//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only tape. Every primitive evaluates eagerly,
//! stores its output and whatever it needs for the backward pass, and
//! returns a [`Var`] handle. Inputs are always recorded before their
//! consumers, so [`Graph::backward`] is a single reverse sweep.

use crate::tensor::{Element, Tensor, TensorError};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LogSoftmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    TopK {
        x: Var,
        k: usize,
        indices: Vec<usize>,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    ScatterRows {
        parts: Vec<(Var, Vec<usize>)>,
    },
    ScaleRows {
        x: Var,
        w: Var,
    },
    Pick {
        x: Var,
        flat: Vec<usize>,
    },
    Sum(Var),
    MeanRows(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        segments: Vec<(usize, usize)>,
        heads: usize,
        probs: Vec<T>,
    },
    Custom {
        x: Var,
        local_grad: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Tape of executed primitives.
#[derive(Debug)]
pub struct Graph<T = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

fn broadcast_ok(a: &[usize], b: &[usize]) -> bool {
    a == b || (b.len() == 1 && a.last() == b.first())
}

/// Accumulation buffer for `v`, or `None` when `v` is not tracked.
fn grad_slot<'g, T: Element>(
    nodes: &[Node<T>],
    grads: &'g mut [Option<Vec<T>>],
    v: Var,
) -> Option<&'g mut Vec<T>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

/// `out[m×n] += a[m×p] · b[p×n]`
fn matmul_acc<T: Element>(a: &[T], b: &[T], out: &mut [T], m: usize, p: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for k in 0..p {
            let aik = a[i * p + k];
            if aik == T::zero() {
                continue;
            }
            let brow = &b[k * n..(k + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + aik * bv;
            }
        }
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf. Gradients are tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, mut tensor: Tensor<T>) -> Var {
        let rg = tensor.requires_grad();
        tensor.clear_grad();
        self.push(tensor, rg, Op::Leaf)
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    /// Records an `f32` tensor (typically a model parameter) converted to the graph precision.
    pub fn input_f32(&mut self, tensor: &Tensor<f32>, requires_grad: bool) -> Var {
        let t: Tensor<T> = tensor.cast();
        self.leaf(t.with_requires_grad(requires_grad))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last [`Graph::backward`] call with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// The node's value paired with its gradient slot.
    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let mut t = self.nodes[v.0].value.clone();
        t.set_requires_grad(self.rg(v));
        if let Some(g) = self.grad(v) {
            t.set_grad(g.to_vec()).expect("grad shape");
        }
        t
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, p, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, p, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new([m, n], out)?, rg, Op::MatMul(a, b)))
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<(Vec<usize>, Vec<T>), TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !broadcast_ok(sa, sb) {
            return Err(shape_err(op, sa, sb));
        }
        let bd = self.value(b).data();
        let nb = bd.len();
        let out = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[i % nb]))
            .collect();
        Ok((sa.to_vec(), out))
    }

    /// Elementwise sum. `b` may also be a vector broadcast along the last axis of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (shape, out) = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::Add(a, b)))
    }

    /// Elementwise product with the same broadcasting rule as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (shape, out) = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let xv = self.value(x);
        let out = xv.data().iter().map(|&v| v * factor).collect();
        let t = Tensor::new(xv.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(x);
        self.push(t, rg, Op::Scale(x, factor))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = xv.data().iter().map(|&v| v.max(T::zero())).collect();
        let t = Tensor::new(xv.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(x);
        self.push(t, rg, Op::Relu(x))
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<(), TensorError> {
        let nd = self.shape(x).len();
        if axis >= nd {
            return Err(TensorError::Param {
                op,
                detail: format!("axis {axis} out of range for rank {nd}"),
            });
        }
        Ok(())
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        self.check_axis("softmax", x, axis)?;
        let xv = self.value(x);
        let (outer, len, inner) = axis_split(xv.shape(), axis);
        let src = xv.data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| o * len * inner + j * inner + i;
                let m = (0..len).map(|j| src[idx(j)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for j in 0..len {
                    let e = (src[idx(j)] - m).exp();
                    out[idx(j)] = e;
                    z = z + e;
                }
                for j in 0..len {
                    out[idx(j)] = out[idx(j)] / z;
                }
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(
            t,
            rg,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
        ))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        self.check_axis("log_softmax", x, axis)?;
        let xv = self.value(x);
        let (outer, len, inner) = axis_split(xv.shape(), axis);
        let src = xv.data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| o * len * inner + j * inner + i;
                let m = (0..len).map(|j| src[idx(j)]).fold(T::neg_infinity(), T::max);
                let z: T = (0..len).map(|j| (src[idx(j)] - m).exp()).sum();
                let lse = m + z.ln();
                for j in 0..len {
                    out[idx(j)] = src[idx(j)] - lse;
                }
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(
            t,
            rg,
            Op::LogSoftmax {
                x,
                outer,
                len,
                inner,
            },
        ))
    }

    /// Layer normalization over the last axis with `eps = 1e-5`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, TensorError> {
        let d = self.value(x).last_dim();
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(shape_err("layer_norm", self.shape(x), self.shape(p)));
            }
        }
        let xv = self.value(x);
        let rows = xv.rows();
        let eps = T::from_f64(LAYER_NORM_EPS);
        let dn = T::from_f64(d as f64);
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![T::zero(); xv.numel()];
        let mut out = vec![T::zero(); xv.numel()];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = h * g[c] + b[c];
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            t,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// Largest `k` entries along the last axis, sorted descending with ties
    /// broken by ascending index. Returns values and the selected indices
    /// (row-major, `k` per row).
    pub fn topk(&mut self, x: Var, k: usize) -> Result<(Var, Vec<usize>), TensorError> {
        let xv = self.value(x);
        let n = xv.last_dim();
        if k == 0 || k > n {
            return Err(TensorError::Param {
                op: "topk",
                detail: format!("k = {k} outside 1..={n}"),
            });
        }
        let rows = xv.rows();
        let mut indices = Vec::with_capacity(rows * k);
        let mut values = Vec::with_capacity(rows * k);
        let mut order: Vec<usize> = Vec::with_capacity(n);
        for r in 0..rows {
            let row = xv.row(r);
            order.clear();
            order.extend(0..n);
            order.sort_by(|&i, &j| {
                row[j]
                    .partial_cmp(&row[i])
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(i.cmp(&j))
            });
            for &i in &order[..k] {
                indices.push(i);
                values.push(row[i]);
            }
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = k;
        let t = Tensor::new(shape, values)?;
        let rg = self.rg(x);
        let v = self.push(
            t,
            rg,
            Op::TopK {
                x,
                k,
                indices: indices.clone(),
            },
        );
        Ok((v, indices))
    }

    fn check_2d(&self, op: &'static str, x: Var) -> Result<(usize, usize), TensorError> {
        match self.shape(x) {
            [r, c] => Ok((*r, *c)),
            s => Err(TensorError::Param {
                op,
                detail: format!("expected a 2-D tensor, got shape {s:?}"),
            }),
        }
    }

    pub fn gather_rows(&mut self, x: Var, rows: Vec<usize>) -> Result<Var, TensorError> {
        let (r, c) = self.check_2d("gather_rows", x)?;
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(TensorError::Param {
                op: "gather_rows",
                detail: format!("row {bad} out of range for {r} rows"),
            });
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in &rows {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let t = Tensor::new([rows.len(), c], out)?;
        let rg = self.rg(x);
        Ok(self.push(t, rg, Op::GatherRows { x, rows }))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let (r, c) = self.check_2d("slice_rows", x)?;
        if start + len > r {
            return Err(TensorError::Param {
                op: "slice_rows",
                detail: format!("rows {start}..{} out of range for {r}", start + len),
            });
        }
        let out = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let t = Tensor::new([len, c], out)?;
        let rg = self.rg(x);
        Ok(self.push(t, rg, Op::SliceRows { x, start }))
    }

    /// `out[n_rows × d]` where each part's row `i` is added into row `targets[i]`.
    pub fn scatter_rows(
        &mut self,
        parts: Vec<(Var, Vec<usize>)>,
        n_rows: usize,
        width: usize,
    ) -> Result<Var, TensorError> {
        let mut out = vec![T::zero(); n_rows * width];
        let mut rg = false;
        for (v, targets) in &parts {
            let (r, c) = self.check_2d("scatter_rows", *v)?;
            if c != width || r != targets.len() {
                return Err(shape_err("scatter_rows", self.shape(*v), &[targets.len(), width]));
            }
            if let Some(&bad) = targets.iter().find(|&&t| t >= n_rows) {
                return Err(TensorError::Param {
                    op: "scatter_rows",
                    detail: format!("target row {bad} out of range for {n_rows}"),
                });
            }
            let src = self.value(*v).data();
            for (i, &t) in targets.iter().enumerate() {
                for j in 0..width {
                    out[t * width + j] = out[t * width + j] + src[i * width + j];
                }
            }
            rg |= self.rg(*v);
        }
        let t = Tensor::new([n_rows, width], out)?;
        Ok(self.push(t, rg, Op::ScatterRows { parts }))
    }

    /// Multiplies row `i` of `x[r × d]` by `w[i]`.
    pub fn scale_rows(&mut self, x: Var, w: Var) -> Result<Var, TensorError> {
        let (r, c) = self.check_2d("scale_rows", x)?;
        if self.value(w).numel() != r {
            return Err(shape_err("scale_rows", self.shape(x), self.shape(w)));
        }
        let (xd, wd) = (self.value(x).data(), self.value(w).data());
        let out = (0..r * c).map(|i| xd[i] * wd[i / c]).collect();
        let t = Tensor::new([r, c], out)?;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(t, rg, Op::ScaleRows { x, w }))
    }

    /// Flat-index gather producing a 1-D tensor.
    pub fn pick(&mut self, x: Var, flat: Vec<usize>) -> Result<Var, TensorError> {
        let n = self.value(x).numel();
        if let Some(&bad) = flat.iter().find(|&&i| i >= n) {
            return Err(TensorError::Param {
                op: "pick",
                detail: format!("index {bad} out of range for {n} elements"),
            });
        }
        let src = self.value(x).data();
        let out: Vec<T> = flat.iter().map(|&i| src[i]).collect();
        let t = Tensor::new([out.len()], out)?;
        let rg = self.rg(x);
        Ok(self.push(t, rg, Op::Pick { x, flat }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), rg, Op::Sum(x))
    }

    /// Column means of a 2-D tensor.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        let (r, c) = self.check_2d("mean_rows", x)?;
        if r == 0 {
            return Err(TensorError::Param {
                op: "mean_rows",
                detail: "no rows".into(),
            });
        }
        let src = self.value(x).data();
        let mut out = vec![T::zero(); c];
        for i in 0..r {
            for j in 0..c {
                out[j] = out[j] + src[i * c + j];
            }
        }
        let n = T::from_f64(r as f64);
        out.iter_mut().for_each(|v| *v = *v / n);
        let t = Tensor::new([c], out)?;
        let rg = self.rg(x);
        Ok(self.push(t, rg, Op::MeanRows(x)))
    }

    /// Bidirectional scaled dot-product attention over independent row segments.
    ///
    /// `q`, `k`, `v` are `[T × d]`; every `(start, len)` segment attends only
    /// within itself. The heads' outputs are laid side by side in the result.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segments: Vec<(usize, usize)>,
        heads: usize,
    ) -> Result<Var, TensorError> {
        let (t, d) = self.check_2d("attention", q)?;
        for other in [k, v] {
            if self.shape(other) != [t, d] {
                return Err(shape_err("attention", self.shape(q), self.shape(other)));
            }
        }
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::Param {
                op: "attention",
                detail: format!("width {d} not divisible by {heads} heads"),
            });
        }
        if let Some(&(s, l)) = segments.iter().find(|&&(s, l)| s + l > t) {
            return Err(TensorError::Param {
                op: "attention",
                detail: format!("segment {s}+{l} exceeds {t} rows"),
            });
        }
        let dh = d / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut out = vec![T::zero(); t * d];
        let mut probs = Vec::new();
        let mut scores = Vec::new();
        for &(s, len) in &segments {
            for h in 0..heads {
                let c0 = h * dh;
                for i in 0..len {
                    let qi = &qd[(s + i) * d + c0..(s + i) * d + c0 + dh];
                    scores.clear();
                    for j in 0..len {
                        let kj = &kd[(s + j) * d + c0..(s + j) * d + c0 + dh];
                        let dot: T = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum();
                        scores.push(dot * scale);
                    }
                    let m = scores.iter().copied().fold(T::neg_infinity(), T::max);
                    let mut z = T::zero();
                    for sc in scores.iter_mut() {
                        *sc = (*sc - m).exp();
                        z = z + *sc;
                    }
                    let orow = &mut out[(s + i) * d + c0..(s + i) * d + c0 + dh];
                    for (j, sc) in scores.iter().enumerate() {
                        let p = *sc / z;
                        probs.push(p);
                        let vj = &vd[(s + j) * d + c0..(s + j) * d + c0 + dh];
                        for (o, &vv) in orow.iter_mut().zip(vj) {
                            *o = *o + p * vv;
                        }
                    }
                }
            }
        }
        let out = Tensor::new([t, d], out)?;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            out,
            rg,
            Op::Attention {
                q,
                k,
                v,
                segments,
                heads,
                probs,
            },
        ))
    }

    /// Records a scalar function of `x` whose value and gradient were
    /// computed outside the tape.
    pub fn custom_scalar(
        &mut self,
        x: Var,
        value: T,
        local_grad: Vec<T>,
    ) -> Result<Var, TensorError> {
        if local_grad.len() != self.value(x).numel() {
            return Err(shape_err("custom_scalar", self.shape(x), &[local_grad.len()]));
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(value), rg, Op::Custom { x, local_grad }))
    }

    /// Reverse sweep from a scalar `loss`. Gradients from any previous call
    /// are discarded, so repeated calls yield identical results.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if !self.rg(loss) {
            self.grads = grads;
            return Ok(());
        }
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, gout: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        macro_rules! with_grad {
            ($v:expr, |$g:ident| $body:block) => {
                if let Some($g) = grad_slot(nodes, grads, $v) $body
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, p, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                with_grad!(*a, |ga| {
                    let bd = bv.data();
                    for r in 0..m {
                        let grow = &gout[r * n..(r + 1) * n];
                        for k in 0..p {
                            let brow = &bd[k * n..(k + 1) * n];
                            let dot: T = grow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
                            ga[r * p + k] = ga[r * p + k] + dot;
                        }
                    }
                });
                with_grad!(*b, |gb| {
                    let ad = av.data();
                    for r in 0..m {
                        let grow = &gout[r * n..(r + 1) * n];
                        for k in 0..p {
                            let a_rk = ad[r * p + k];
                            if a_rk == T::zero() {
                                continue;
                            }
                            for (o, &g) in gb[k * n..(k + 1) * n].iter_mut().zip(grow) {
                                *o = *o + a_rk * g;
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                with_grad!(*a, |ga| {
                    for (o, &g) in ga.iter_mut().zip(gout) {
                        *o = *o + g;
                    }
                });
                with_grad!(*b, |gb| {
                    let nb = gb.len();
                    for (j, &g) in gout.iter().enumerate() {
                        gb[j % nb] = gb[j % nb] + g;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                let nb = bd.len();
                with_grad!(*a, |ga| {
                    for (j, &g) in gout.iter().enumerate() {
                        ga[j] = ga[j] + g * bd[j % nb];
                    }
                });
                with_grad!(*b, |gb| {
                    for (j, &g) in gout.iter().enumerate() {
                        gb[j % nb] = gb[j % nb] + g * ad[j];
                    }
                });
            }
            Op::Scale(x, f) => {
                with_grad!(*x, |gx| {
                    for (o, &g) in gx.iter_mut().zip(gout) {
                        *o = *o + g * *f;
                    }
                });
            }
            Op::Relu(x) => {
                let xd = nodes[x.0].value.data();
                with_grad!(*x, |gx| {
                    for j in 0..gout.len() {
                        if xd[j] > T::zero() {
                            gx[j] = gx[j] + gout[j];
                        }
                    }
                });
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let y = node.value.data();
                with_grad!(*x, |gx| {
                    for o in 0..*outer {
                        for c in 0..*inner {
                            let idx = |j: usize| o * len * inner + j * inner + c;
                            let dot: T = (0..*len).map(|j| gout[idx(j)] * y[idx(j)]).sum();
                            for j in 0..*len {
                                gx[idx(j)] = gx[idx(j)] + y[idx(j)] * (gout[idx(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax {
                x,
                outer,
                len,
                inner,
            } => {
                let y = node.value.data();
                with_grad!(*x, |gx| {
                    for o in 0..*outer {
                        for c in 0..*inner {
                            let idx = |j: usize| o * len * inner + j * inner + c;
                            let total: T = (0..*len).map(|j| gout[idx(j)]).sum();
                            for j in 0..*len {
                                gx[idx(j)] = gx[idx(j)] + gout[idx(j)] - y[idx(j)].exp() * total;
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = node.value.last_dim();
                let rows = rstd.len();
                let g = nodes[gain.0].value.data();
                with_grad!(*gain, |gg| {
                    for r in 0..rows {
                        for c in 0..d {
                            gg[c] = gg[c] + gout[r * d + c] * xhat[r * d + c];
                        }
                    }
                });
                with_grad!(*bias, |gb| {
                    for r in 0..rows {
                        for c in 0..d {
                            gb[c] = gb[c] + gout[r * d + c];
                        }
                    }
                });
                with_grad!(*x, |gx| {
                    let dn = T::from_f64(d as f64);
                    for r in 0..rows {
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for c in 0..d {
                            let dh = gout[r * d + c] * g[c];
                            mean_dh = mean_dh + dh;
                            mean_dh_h = mean_dh_h + dh * xhat[r * d + c];
                        }
                        mean_dh = mean_dh / dn;
                        mean_dh_h = mean_dh_h / dn;
                        for c in 0..d {
                            let dh = gout[r * d + c] * g[c];
                            gx[r * d + c] = gx[r * d + c]
                                + rstd[r] * (dh - mean_dh - xhat[r * d + c] * mean_dh_h);
                        }
                    }
                });
            }
            Op::TopK { x, k, indices } => {
                let n = nodes[x.0].value.last_dim();
                with_grad!(*x, |gx| {
                    for (j, &idx) in indices.iter().enumerate() {
                        let r = j / k;
                        gx[r * n + idx] = gx[r * n + idx] + gout[j];
                    }
                });
            }
            Op::GatherRows { x, rows } => {
                let c = node.value.last_dim();
                with_grad!(*x, |gx| {
                    for (i, &r) in rows.iter().enumerate() {
                        for j in 0..c {
                            gx[r * c + j] = gx[r * c + j] + gout[i * c + j];
                        }
                    }
                });
            }
            Op::SliceRows { x, start } => {
                let c = node.value.last_dim();
                with_grad!(*x, |gx| {
                    let off = start * c;
                    for (j, &g) in gout.iter().enumerate() {
                        gx[off + j] = gx[off + j] + g;
                    }
                });
            }
            Op::ScatterRows { parts } => {
                let c = node.value.last_dim();
                for (v, targets) in parts {
                    with_grad!(*v, |gv| {
                        for (i, &t) in targets.iter().enumerate() {
                            for j in 0..c {
                                gv[i * c + j] = gv[i * c + j] + gout[t * c + j];
                            }
                        }
                    });
                }
            }
            Op::ScaleRows { x, w } => {
                let c = node.value.last_dim();
                let (xd, wd) = (nodes[x.0].value.data(), nodes[w.0].value.data());
                with_grad!(*x, |gx| {
                    for j in 0..gout.len() {
                        gx[j] = gx[j] + gout[j] * wd[j / c];
                    }
                });
                with_grad!(*w, |gw| {
                    for j in 0..gout.len() {
                        gw[j / c] = gw[j / c] + gout[j] * xd[j];
                    }
                });
            }
            Op::Pick { x, flat } => {
                with_grad!(*x, |gx| {
                    for (j, &i) in flat.iter().enumerate() {
                        gx[i] = gx[i] + gout[j];
                    }
                });
            }
            Op::Sum(x) => {
                with_grad!(*x, |gx| {
                    for o in gx.iter_mut() {
                        *o = *o + gout[0];
                    }
                });
            }
            Op::MeanRows(x) => {
                let c = node.value.numel();
                let r = nodes[x.0].value.numel() / c.max(1);
                let inv = T::one() / T::from_f64(r as f64);
                with_grad!(*x, |gx| {
                    for (j, o) in gx.iter_mut().enumerate() {
                        *o = *o + gout[j % c] * inv;
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                segments,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, segments, *heads, probs, gout, grads),
            Op::Custom { x, local_grad } => {
                with_grad!(*x, |gx| {
                    for (o, &l) in gx.iter_mut().zip(local_grad) {
                        *o = *o + gout[0] * l;
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        segments: &[(usize, usize)],
        heads: usize,
        probs: &[T],
        gout: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let t = self.value(q).shape()[0];
        let d = self.value(q).shape()[1];
        let dh = d / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let mut dq = vec![T::zero(); t * d];
        let mut dk = vec![T::zero(); t * d];
        let mut dv = vec![T::zero(); t * d];
        let mut off = 0;
        let mut dp = Vec::new();
        for &(s, len) in segments {
            for h in 0..heads {
                let c0 = h * dh;
                let p = &probs[off..off + len * len];
                off += len * len;
                for i in 0..len {
                    let go = &gout[(s + i) * d + c0..(s + i) * d + c0 + dh];
                    dp.clear();
                    for j in 0..len {
                        let vj = &vd[(s + j) * d + c0..(s + j) * d + c0 + dh];
                        dp.push(go.iter().zip(vj).map(|(&a, &b)| a * b).sum::<T>());
                        let pij = p[i * len + j];
                        for c in 0..dh {
                            let idx = (s + j) * d + c0 + c;
                            dv[idx] = dv[idx] + pij * go[c];
                        }
                    }
                    let dot: T = (0..len).map(|j| p[i * len + j] * dp[j]).sum();
                    for j in 0..len {
                        let ds = p[i * len + j] * (dp[j] - dot) * scale;
                        if ds == T::zero() {
                            continue;
                        }
                        for c in 0..dh {
                            let qi = (s + i) * d + c0 + c;
                            let kj = (s + j) * d + c0 + c;
                            dq[qi] = dq[qi] + ds * kd[kj];
                            dk[kj] = dk[kj] + ds * qd[qi];
                        }
                    }
                }
            }
        }
        for (var, local) in [(q, dq), (k, dk), (v, dv)] {
            if !self.rg(var) {
                continue;
            }
            let n = local.len();
            let g = grads[var.0].get_or_insert_with(|| vec![T::zero(); n]);
            for (o, l) in g.iter_mut().zip(local) {
                *o = *o + l;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[Vec<f32>]) -> Tensor<f32> {
        Tensor::from_rows(rows)
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(t2(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let i = g.constant(t2(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let ai = g.matmul(a, i).unwrap();
        assert_eq!(g.value(ai).data(), &[1.0, 2.0, 3.0, 4.0]);
        let ones = g.constant(t2(&[vec![1.0], vec![1.0]]));
        let c = g.matmul(a, ones).unwrap();
        assert_eq!(g.value(c).shape(), &[2, 1]);
        assert_eq!(g.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros([2, 3]));
        let b = g.constant(Tensor::zeros([2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        match err {
            TensorError::Shape { left, right, .. } => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(err_msg_has_shapes(&g.matmul(a, b).unwrap_err()));
    }

    fn err_msg_has_shapes(e: &TensorError) -> bool {
        let s = e.to_string();
        s.contains("[2, 3]")
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::new([2], vec![0.0, 0.0]).unwrap());
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
        let x = g.constant(Tensor::new([2], vec![1000.0, 0.0]).unwrap());
        let y = g.softmax(x, 0).unwrap();
        let d = g.value(y).data();
        assert!((d[0] - 1.0).abs() <= 1e-6 && d[1].abs() <= 1e-6);
        assert!(d.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_rejects_bad_axis() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros([2, 2]));
        assert!(matches!(g.softmax(x, 2), Err(TensorError::Param { .. })));
    }

    #[test]
    fn softmax_along_first_axis() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_rows(&[vec![1.0, 5.0], vec![1.0, 3.0]]));
        let y = g.softmax(x, 0).unwrap();
        let d = g.value(y).data();
        assert!((d[0] - 0.5).abs() < 1e-12);
        assert!((d[1] + d[3] - 1.0).abs() < 1e-12);
        assert!(d[1] > d[3]);
    }

    #[test]
    fn topk_ties_and_order() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::new([4], vec![0.0; 4]).unwrap());
        let (v, idx) = g.topk(x, 2).unwrap();
        assert_eq!(g.value(v).data(), &[0.0, 0.0]);
        assert_eq!(idx, vec![0, 1]);
        let x = g.constant(Tensor::new([3], vec![1.0, 3.0, 2.0]).unwrap());
        let (v, idx) = g.topk(x, 2).unwrap();
        assert_eq!(g.value(v).data(), &[3.0, 2.0]);
        assert_eq!(idx, vec![1, 2]);
        assert!(matches!(g.topk(x, 0), Err(TensorError::Param { .. })));
        assert!(matches!(g.topk(x, 4), Err(TensorError::Param { .. })));
    }

    #[test]
    fn relu_and_constant_layernorm() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::new([2], vec![-1.0, 2.0]).unwrap());
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 2.0]);

        let x = g.constant(Tensor::full([1, 4], 3.0));
        let gain = g.constant(Tensor::new([4], vec![2.0, 2.0, 2.0, 2.0]).unwrap());
        let bias = g.constant(Tensor::new([4], vec![0.5, -0.5, 0.0, 1.0]).unwrap());
        let y = g.layer_norm(x, gain, bias).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, -0.5, 0.0, 1.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::zeros([3]).with_requires_grad(true));
        let y = g.relu(x);
        assert!(matches!(g.backward(y), Err(TensorError::Contract(_))));
    }

    #[test]
    fn backward_is_idempotent_and_populates_leaves() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::new([3], vec![1.0, -2.0, 3.0]).unwrap().with_requires_grad(true));
        let unused = g.leaf(Tensor::zeros([2]).with_requires_grad(true));
        let y = g.mul(x, x).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        let first = g.grad(x).unwrap().to_vec();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), first.as_slice());
        assert_eq!(first, vec![2.0, -4.0, 6.0]);
        assert!(g.grad(unused).is_none());
        assert_eq!(g.tensor(x).grad().unwrap(), first.as_slice());
    }

    #[test]
    fn broadcast_add_reduces_bias_grad() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros([3, 2]));
        let b = g.leaf(Tensor::new([2], vec![1.0, 2.0]).unwrap().with_requires_grad(true));
        let y = g.add(x, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(b).unwrap(), &[3.0, 3.0]);
        let bad = g.constant(Tensor::zeros([3]));
        assert!(g.add(x, bad).is_err());
    }

    #[test]
    fn single_token_attention_copies_value() {
        let mut g = Graph::<f32>::new();
        let q = g.constant(Tensor::new([1, 4], vec![0.3, -1.0, 2.0, 0.1]).unwrap());
        let k = g.constant(Tensor::new([1, 4], vec![1.0, 1.0, -1.0, 0.5]).unwrap());
        let v = g.constant(Tensor::new([1, 4], vec![5.0, 6.0, 7.0, 8.0]).unwrap());
        let o = g.attention(q, k, v, vec![(0, 1)], 2).unwrap();
        assert_eq!(g.value(o).data(), &[5.0, 6.0, 7.0, 8.0]);
    }
}
