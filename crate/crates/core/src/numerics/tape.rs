//! Reverse-mode differentiation over a linear tape of coarse tensor ops.
//!
//! Every op computes its value eagerly when recorded. `backward` walks the
//! tape in reverse and returns gradients for the trainable parameters that
//! the loss depends on.

use rand::Rng;

use super::ops::{self, gemm, gemm_into, MatRef, LAYER_NORM_EPS};
use super::{Gradients, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Additive logit applied to disallowed attention entries.
pub const MASKED_LOGIT: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Input,
    Param(ParamId),
    Affine {
        x: Var,
        w: Var,
        b: Option<Var>,
        transposed: bool,
    },
    Add(Var, Var),
    Scale(Var, f64),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    StackRows(Vec<(Var, usize)>),
    Dropout {
        x: Var,
        keep: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    Sum(Var),
    HalfSquaredNorm(Var),
}

struct Node {
    value: Option<Tensor>,
    op: Op,
    needs_grad: bool,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => &self.params.get(*id).value,
            _ => unreachable!("non-parameter node without a value"),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, false)
    }

    /// The tape node for a parameter; repeated calls return the same node,
    /// so a tied weight accumulates gradient from every use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let trainable = self.params.get(id).trainable;
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: trainable,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// `x * w + b`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        self.affine_impl(x, w, b, false)
    }

    /// `x * w^T + b`.
    pub fn affine_transposed(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        self.affine_impl(x, w, b, true)
    }

    fn affine_impl(&mut self, x: Var, w: Var, b: Option<Var>, transposed: bool) -> Result<Var> {
        let wt = self.value(w);
        let width = if transposed { wt.shape()[0] } else { wt.cols() };
        let bias = match b {
            Some(b) => self.value(b).clone(),
            None => Tensor::zeros(&[width]),
        };
        let out = if transposed {
            ops::affine_transposed(self.value(x), wt, &bias)?
        } else {
            ops::affine(self.value(x), wt, &bias)?
        };
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(
            out,
            Op::Affine {
                x,
                w,
                b,
                transposed,
            },
            needs,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!(
                "add of {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), needs))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * factor).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let needs = self.needs(x);
        self.push(out, Op::Scale(x, factor), needs)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let out = ops::layer_norm(
            self.value(x),
            self.value(gain),
            self.value(bias),
            LAYER_NORM_EPS,
        )?;
        let (xhat, inv_std) = ops::normalize_rows(self.value(x), LAYER_NORM_EPS);
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            needs,
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = ops::gelu(self.value(x));
        let needs = self.needs(x);
        self.push(out, Op::Gelu(x), needs)
    }

    /// Masked multi-head scaled dot-product attention.
    ///
    /// `q` is `sq x d`, `k` and `v` are `sk x d`, `allow` is a row-major
    /// `sq x sk` boolean matrix. Heads split `d` into equal column blocks.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        allow: &[bool],
        heads: usize,
    ) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (sq, d) = (tq.rows(), tq.cols());
        let sk = tk.rows();
        if tk.cols() != d || tv.cols() != d || tv.rows() != sk {
            return Err(Error::Shape(format!(
                "attention q {:?}, k {:?}, v {:?}",
                tq.shape(),
                tk.shape(),
                tv.shape()
            )));
        }
        if allow.len() != sq * sk {
            return Err(Error::Shape(format!(
                "attention mask has {} entries, expected {sq}x{sk}",
                allow.len()
            )));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Shape(format!(
                "{d} columns do not split into {heads} heads"
            )));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; heads * sq * sk];
        let mut out = vec![0.0; sq * d];
        for h in 0..heads {
            let qh = MatRef::block(tq.data(), sq, d, h * dh, dh);
            let kh = MatRef::block(tk.data(), sk, d, h * dh, dh);
            let vh = MatRef::block(tv.data(), sk, d, h * dh, dh);
            let p = &mut probs[h * sq * sk..(h + 1) * sq * sk];
            gemm_into(qh, kh.t(), 0.0, p, sk);
            for (i, row) in p.chunks_mut(sk).enumerate() {
                for (j, s) in row.iter_mut().enumerate() {
                    *s *= scale;
                    if !allow[i * sk + j] {
                        *s += MASKED_LOGIT;
                    }
                }
                ops::softmax_in_place(row);
            }
            gemm_into(MatRef::new(p, sq, sk), vh, 0.0, &mut out[h * dh..], d);
        }
        let value = Tensor::new(vec![sq, d], out)?;
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            needs,
        ))
    }

    /// Attention probabilities recorded by an attention node, laid out as
    /// `heads x sq x sk`, together with `(heads, sq, sk)`.
    pub fn attention_probs(&self, v: Var) -> Option<(&[f64], usize, usize, usize)> {
        match &self.nodes[v.0].op {
            Op::Attention {
                q, k, heads, probs, ..
            } => Some((probs, *heads, self.value(*q).rows(), self.value(*k).rows())),
            _ => None,
        }
    }

    /// Rows `ids` of a 2-D table, stacked.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (n, d) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= n {
                return Err(Error::Shape(format!("row {i} of a {n}-row table")));
            }
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        let needs = self.needs(table);
        Ok(self.push(
            out,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            needs,
        ))
    }

    /// A new matrix whose row `i` is row `parts[i].1` of `parts[i].0`.
    pub fn stack_rows(&mut self, parts: &[(Var, usize)]) -> Result<Var> {
        let d = match parts.first() {
            Some((v, _)) => self.value(*v).cols(),
            None => return Err(Error::Shape("stack of zero rows".into())),
        };
        let mut data = Vec::with_capacity(parts.len() * d);
        for &(v, r) in parts {
            let t = self.value(v);
            if t.cols() != d || r >= t.rows() {
                return Err(Error::Shape(format!(
                    "row {r} of {:?} in a stack of width {d}",
                    t.shape()
                )));
            }
            data.extend_from_slice(t.row(r));
        }
        let out = Tensor::new(vec![parts.len(), d], data)?;
        let needs = parts.iter().any(|(v, _)| self.needs(*v));
        Ok(self.push(out, Op::StackRows(parts.to_vec()), needs))
    }

    /// Inverted dropout. A zero rate records nothing and returns `x`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let keep_scale = 1.0 / (1.0 - rate);
        let t = self.value(x);
        let keep: Vec<f64> = (0..t.len())
            .map(|_| {
                if rng.gen::<f64>() < rate {
                    0.0
                } else {
                    keep_scale
                }
            })
            .collect();
        let data = t.data().iter().zip(&keep).map(|(a, k)| a * k).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let needs = self.needs(x);
        self.push(out, Op::Dropout { x, keep }, needs)
    }

    /// Mean cross-entropy over rows whose target is not `ignore_id`; a scalar node.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32], ignore_id: u32) -> Result<Var> {
        let lt = self.value(logits);
        let loss = ops::cross_entropy(lt, targets, ignore_id)?;
        let probs = ops::softmax_rows(lt).into_data();
        let targets: Vec<Option<usize>> = targets
            .iter()
            .map(|&t| (t != ignore_id).then_some(t as usize))
            .collect();
        let count = targets.iter().flatten().count();
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            },
            needs,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), needs)
    }

    /// `0.5 * |x|^2`.
    pub fn half_squared_norm(&mut self, x: Var) -> Var {
        let s = 0.5 * self.value(x).data().iter().map(|v| v * v).sum::<f64>();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::HalfSquaredNorm(x), needs)
    }

    /// Gradients of the scalar `loss` with respect to every trainable
    /// parameter recorded on this tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::State(
                "backward called on a node that was never recorded".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut per_param: Vec<Option<Tensor>> = vec![None; self.params.len()];
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Param(id) => {
                    let shape = self.params.get(*id).value.shape().to_vec();
                    per_param[id.0] = Some(Tensor::new(shape, g)?);
                }
                Op::Affine {
                    x,
                    w,
                    b,
                    transposed,
                } => {
                    let xt = self.value(*x);
                    let wt = self.value(*w);
                    let (n, p) = (xt.rows(), xt.cols());
                    let q = self.value(Var(i)).cols();
                    let gy = MatRef::new(&g, n, q);
                    if self.needs(*x) {
                        // dx = gy * w^T (or gy * w when w is stored transposed)
                        let wm = if *transposed {
                            MatRef::new(wt.data(), q, p)
                        } else {
                            MatRef::new(wt.data(), p, q).t()
                        };
                        let buf = self.grad_buf(&mut grads, *x);
                        gemm_into(gy, wm, 1.0, buf, p);
                    }
                    if self.needs(*w) {
                        let xm = MatRef::new(xt.data(), n, p);
                        let buf = self.grad_buf(&mut grads, *w);
                        if *transposed {
                            gemm_into(gy.t(), xm, 1.0, buf, p);
                        } else {
                            gemm_into(xm.t(), gy, 1.0, buf, q);
                        }
                    }
                    if let Some(b) = b.filter(|b| self.needs(*b)) {
                        let buf = self.grad_buf(&mut grads, b);
                        for row in g.chunks(q) {
                            for (a, v) in buf.iter_mut().zip(row) {
                                *a += v;
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        if self.needs(v) {
                            add_into(self.grad_buf(&mut grads, v), &g, 1.0);
                        }
                    }
                }
                Op::Scale(x, f) => {
                    if self.needs(*x) {
                        add_into(self.grad_buf(&mut grads, *x), &g, *f);
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let d = self.value(*x).cols();
                    let gain_v = self.value(*gain).data().to_vec();
                    if self.needs(*gain) {
                        let buf = self.grad_buf(&mut grads, *gain);
                        for (gr, xr) in g.chunks(d).zip(xhat.chunks(d)) {
                            for j in 0..d {
                                buf[j] += gr[j] * xr[j];
                            }
                        }
                    }
                    if self.needs(*bias) {
                        let buf = self.grad_buf(&mut grads, *bias);
                        for gr in g.chunks(d) {
                            add_into(buf, gr, 1.0);
                        }
                    }
                    if self.needs(*x) {
                        let buf = self.grad_buf(&mut grads, *x);
                        let mut dxhat = vec![0.0; d];
                        for (r, (gr, xr)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                            for j in 0..d {
                                dxhat[j] = gr[j] * gain_v[j];
                            }
                            let sum_d: f64 = dxhat.iter().sum();
                            let sum_dx: f64 = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum();
                            let scale = inv_std[r] / d as f64;
                            let out = &mut buf[r * d..(r + 1) * d];
                            for j in 0..d {
                                out[j] += scale * (d as f64 * dxhat[j] - sum_d - xr[j] * sum_dx);
                            }
                        }
                    }
                }
                Op::Gelu(x) => {
                    if self.needs(*x) {
                        let xv = self.value(*x).data().to_vec();
                        let buf = self.grad_buf(&mut grads, *x);
                        for ((a, gv), xi) in buf.iter_mut().zip(&g).zip(&xv) {
                            *a += gv * ops::gelu_derivative(*xi);
                        }
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    probs,
                } => {
                    self.attention_backward(&mut grads, &g, *q, *k, *v, *heads, probs);
                }
                Op::GatherRows { table, ids } => {
                    if self.needs(*table) {
                        let d = self.value(*table).cols();
                        let buf = self.grad_buf(&mut grads, *table);
                        for (r, &id) in ids.iter().enumerate() {
                            add_into(&mut buf[id * d..(id + 1) * d], &g[r * d..(r + 1) * d], 1.0);
                        }
                    }
                }
                Op::StackRows(parts) => {
                    let d = self.value(Var(i)).cols();
                    for (r, &(v, src)) in parts.iter().enumerate() {
                        if self.needs(v) {
                            let buf = self.grad_buf(&mut grads, v);
                            add_into(
                                &mut buf[src * d..(src + 1) * d],
                                &g[r * d..(r + 1) * d],
                                1.0,
                            );
                        }
                    }
                }
                Op::Dropout { x, keep } => {
                    if self.needs(*x) {
                        let buf = self.grad_buf(&mut grads, *x);
                        for ((a, gv), k) in buf.iter_mut().zip(&g).zip(keep) {
                            *a += gv * k;
                        }
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                    count,
                } => {
                    if self.needs(*logits) {
                        let vsz = self.value(*logits).cols();
                        let scale = g[0] / *count as f64;
                        let buf = self.grad_buf(&mut grads, *logits);
                        for (r, t) in targets.iter().enumerate() {
                            let Some(t) = t else { continue };
                            let row = &mut buf[r * vsz..(r + 1) * vsz];
                            for (j, a) in row.iter_mut().enumerate() {
                                *a += scale * probs[r * vsz + j];
                            }
                            row[*t] -= scale;
                        }
                    }
                }
                Op::Sum(x) => {
                    if self.needs(*x) {
                        for a in self.grad_buf(&mut grads, *x).iter_mut() {
                            *a += g[0];
                        }
                    }
                }
                Op::HalfSquaredNorm(x) => {
                    if self.needs(*x) {
                        let xv = self.value(*x).data().to_vec();
                        add_into(self.grad_buf(&mut grads, *x), &xv, g[0]);
                    }
                }
            }
        }
        Ok(Gradients { per_param })
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        grads: &mut [Option<Vec<f64>>],
        g: &[f64],
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[f64],
    ) {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (sq, d, sk) = (tq.rows(), tq.cols(), tk.rows());
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        for h in 0..heads {
            let p = &probs[h * sq * sk..(h + 1) * sq * sk];
            let pm = MatRef::new(p, sq, sk);
            let gout = MatRef::block(g, sq, d, h * dh, dh);
            if self.needs(v) {
                let buf = self.grad_buf(grads, v);
                gemm_into(pm.t(), gout, 1.0, &mut buf[h * dh..], d);
            }
            if !(self.needs(q) || self.needs(k)) {
                continue;
            }
            let vh = MatRef::block(tv.data(), sk, d, h * dh, dh);
            let mut ds = gemm(gout, vh.t());
            for (drow, prow) in ds.chunks_mut(sk).zip(p.chunks(sk)) {
                let dot: f64 = drow.iter().zip(prow).map(|(a, b)| a * b).sum();
                for (a, pv) in drow.iter_mut().zip(prow) {
                    *a = pv * (*a - dot) * scale;
                }
            }
            let dsm = MatRef::new(&ds, sq, sk);
            if self.needs(q) {
                let kh = MatRef::block(tk.data(), sk, d, h * dh, dh);
                let buf = self.grad_buf(grads, q);
                gemm_into(dsm, kh, 1.0, &mut buf[h * dh..], d);
            }
            if self.needs(k) {
                let qh = MatRef::block(tq.data(), sq, d, h * dh, dh);
                let buf = self.grad_buf(grads, k);
                gemm_into(dsm.t(), qh, 1.0, &mut buf[h * dh..], d);
            }
        }
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut Vec<f64> {
        let n = self.value(v).len();
        grads[v.0].get_or_insert_with(|| vec![0.0; n])
    }
}

fn add_into(dst: &mut [f64], src: &[f64], factor: f64) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += factor * b;
    }
}
