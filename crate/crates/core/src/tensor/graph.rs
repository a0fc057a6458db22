//! Reverse-mode differentiation tape.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s together with
//! the forward value, then [`Graph::backward`] walks the record in reverse to
//! produce gradients for every node. Sequences are batched as stacked rows:
//! a batch of `B` sequences of length `L` with `D` features is one
//! `[B*L x D]` value, and the ops that mix positions (`causal_conv`,
//! `selective_scan`, `batched_matmul`) take the segment length explicitly.

use std::collections::HashMap;

use super::ops::{
    gelu_grad, gelu_scalar, gemm, layernorm_rows, sigmoid, silu_grad, silu_scalar, softmax_rows_inplace,
    softplus_scalar,
};
use super::{Scalar, Tensor};
use crate::error::{MlsaError, Result};
use crate::params::ParameterStore;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Param(usize),
    MatMul { a: Var, b: Var, batch: usize, ta: bool, tb: bool, m: usize, n: usize, k: usize },
    Add(Var, Var),
    Mul(Var, Var),
    AddRow { x: Var, bias: Var },
    Scale(Var, T),
    Neg(Var),
    Exp(Var),
    Gelu(Var),
    Silu(Var),
    Softplus(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Mask { x: Var, mask: Vec<T> },
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
    Gather { table: Var, ids: Vec<usize> },
    Conv { x: Var, kernel: Var, bias: Var, seq_len: usize },
    Scan { inputs: ScanInputs, seq_len: usize, states: Vec<T> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    Sum(Var),
}

/// Operands of [`Graph::selective_scan`].
#[derive(Clone, Copy, Debug)]
pub struct ScanInputs {
    /// `[B*L x E]` scan input.
    pub u: Var,
    /// `[B*L x E]` positive step sizes.
    pub delta: Var,
    /// `[E x N]` diagonal state matrix entries.
    pub a: Var,
    /// `[B*L x N]` input matrix per position.
    pub b: Var,
    /// `[B*L x N]` readout per position.
    pub c: Var,
    /// `[E]` direct feed-through, if enabled.
    pub skip: Option<Var>,
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    params: HashMap<usize, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Zero-order-hold discretization of one diagonal entry: returns
/// `(exp(dt*a), (exp(dt*a) - 1) / a)`, the latter with the `a -> 0` limit `dt`.
#[inline]
pub(crate) fn zoh<T: Scalar>(dt: T, a: T) -> (T, T) {
    let em1 = (dt * a).expm1_fast();
    let phi = if a.abs() < T::of(1e-8) { dt } else { em1 / a };
    (em1 + T::one(), phi)
}

/// Derivative of the ZOH input factor `phi = (exp(dt*a) - 1) / a` w.r.t. `a`.
#[inline]
fn zoh_dphi_da<T: Scalar>(dt: T, a: T, abar: T, phi: T) -> T {
    let z = dt * a;
    if z.abs() < T::of(1e-2) {
        let third = T::of(1.0 / 3.0);
        let eighth = T::of(0.125);
        let thirtieth = T::of(1.0 / 30.0);
        let p = T::of(1.0 / 144.0);
        dt * dt * (T::of(0.5) + z * (third + z * (eighth + z * (thirtieth + z * p))))
    } else {
        (dt * abar - phi) / a
    }
}

impl<T: Scalar> Graph<T> {
    /// A graph that records what `backward` needs.
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grad_enabled: true, params: HashMap::new() }
    }

    /// A forward-only graph: fused ops skip their backward caches.
    pub fn inference() -> Self {
        Graph { grad_enabled: false, ..Self::new() }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Bytes held by node values and backward caches.
    pub fn bytes(&self) -> usize {
        let elem = std::mem::size_of::<T>();
        self.nodes
            .iter()
            .map(|n| {
                let cache = match &n.op {
                    Op::LayerNorm { xhat, rstd, .. } => xhat.len() + rstd.len(),
                    Op::Mask { mask, .. } => mask.len(),
                    Op::Scan { states, .. } => states.len(),
                    Op::CrossEntropy { probs, .. } => probs.len(),
                    _ => 0,
                };
                (n.value.len() + cache) * elem
            })
            .sum()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Leaf bound to the named entry of `store`; repeated lookups share a node.
    pub fn param(&mut self, store: &ParameterStore<T>, name: &str) -> Result<Var> {
        let idx = store.index_of(name).ok_or_else(|| MlsaError::config(format!("unknown parameter {name:?}")))?;
        if let Some(&v) = self.params.get(&idx) {
            return Ok(v);
        }
        let v = self.push(store.value_at(idx).clone(), Op::Param(idx));
        self.params.insert(idx, v);
        Ok(v)
    }

    fn same_dims(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).dims() != self.value(b).dims() {
            return Err(MlsaError::shape(format!("{what}: {:?} vs {:?}", self.value(a).dims(), self.value(b).dims())));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.batched_matmul(a, b, 1, false, false)
    }

    /// Per-block product `op(a_i) * op(b_i)` over `batch` row blocks.
    ///
    /// `a` is `[batch*r x c]`; each block is `op(a_i)` = itself, or its
    /// transpose when `ta`. Likewise for `b`. Blocks are stacked in the output.
    pub fn batched_matmul(&mut self, a: Var, b: Var, batch: usize, ta: bool, tb: bool) -> Result<Var> {
        let (ad, bd) = (self.value(a).dims(), self.value(b).dims());
        if ad.len() != 2 || bd.len() != 2 || batch == 0 || ad[0] % batch != 0 || bd[0] % batch != 0 {
            return Err(MlsaError::shape(format!("batched_matmul({batch}) on {ad:?} x {bd:?}")));
        }
        let (ar, ac) = (ad[0] / batch, ad[1]);
        let (br, bc) = (bd[0] / batch, bd[1]);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(MlsaError::shape(format!(
                "batched_matmul inner dims disagree: {ad:?}{} x {bd:?}{}",
                if ta { "^T" } else { "" },
                if tb { "^T" } else { "" }
            )));
        }
        let mut out = Tensor::zeros(&[batch * m, n]);
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for (i, c) in out.data_mut().chunks_exact_mut(m * n).enumerate() {
                let ai = &av[i * m * k..(i + 1) * m * k];
                let bi = &bv[i * k * n..(i + 1) * k * n];
                gemm(ta, tb, m, n, k, T::one(), ai, bi, T::zero(), c);
            }
        }
        Ok(self.push(out, Op::MatMul { a, b, batch, ta, tb, m, n, k }))
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.dims(), data).expect("dims checked")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims(a, b, "add")?;
        let v = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims(a, b, "mul")?;
        let v = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    /// Adds a `[C]` vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = self.value(x).cols();
        if self.value(bias).len() != c {
            return Err(MlsaError::shape(format!(
                "row bias of {:?} for {:?}",
                self.value(bias).dims(),
                self.value(x).dims()
            )));
        }
        let mut v = self.value(x).clone();
        let bv = self.value(bias).data();
        for row in v.data_mut().chunks_exact_mut(c) {
            row.iter_mut().zip(bv).for_each(|(r, &b)| *r += b);
        }
        Ok(self.push(v, Op::AddRow { x, bias }))
    }

    /// `x * w + b` for a `[in x out]` weight and optional `[out]` bias.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let v = self.value(x).map(|e| e * s);
        self.push(v, Op::Scale(x, s))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| -e);
        self.push(v, Op::Neg(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).map(T::exp);
        self.push(v, Op::Exp(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(gelu_scalar);
        self.push(v, Op::Gelu(x))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(silu_scalar);
        self.push(v, Op::Silu(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let v = self.value(x).map(softplus_scalar);
        self.push(v, Op::Softplus(x))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let mut v = self.value(x).clone();
        let c = v.cols();
        softmax_rows_inplace(v.data_mut(), c);
        self.push(v, Op::Softmax(x))
    }

    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(MlsaError::shape(format!(
                "layernorm over {d} features got gain {:?} and bias {:?}",
                self.value(gain).dims(),
                self.value(bias).dims()
            )));
        }
        let mut out = Tensor::zeros(xv.dims());
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); xv.rows()];
        layernorm_rows(
            xv.data(),
            d,
            self.value(gain).data(),
            self.value(bias).data(),
            eps,
            out.data_mut(),
            &mut xhat,
            &mut rstd,
        );
        if !self.grad_enabled {
            xhat = Vec::new();
            rstd = Vec::new();
        }
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, xhat, rstd }))
    }

    /// Elementwise product with a constant mask (dropout).
    pub fn mask(&mut self, x: Var, mask: Vec<T>) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(MlsaError::shape("mask length differs from operand"));
        }
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let v = Tensor::new(xv.dims(), data)?;
        Ok(self.push(v, Op::Mask { x, mask }))
    }

    /// Concatenation along the last axis of operands with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(MlsaError::shape("concat operands differ in row count"));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(&[rows, total]);
        let mut offset = 0;
        for &p in parts {
            let pv = self.value(p);
            let w = pv.cols();
            for r in 0..rows {
                out.row_mut(r)[offset..offset + w].copy_from_slice(pv.row(r));
            }
            offset += w;
        }
        Ok(self.push(out, Op::Concat(parts.to_vec())))
    }

    /// Columns `start..start + width` of a rank-2 value.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let xv = self.value(x);
        if width == 0 || start + width > xv.cols() {
            return Err(MlsaError::shape(format!("column slice {start}..{} of {:?}", start + width, xv.dims())));
        }
        let rows = xv.rows();
        let mut out = Tensor::zeros(&[rows, width]);
        for r in 0..rows {
            out.row_mut(r).copy_from_slice(&xv.row(r)[start..start + width]);
        }
        Ok(self.push(out, Op::Slice { x, start }))
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: Vec<usize>) -> Result<Var> {
        let tv = self.value(table);
        let rows = tv.rows();
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(MlsaError::Data(format!("row index {bad} out of range for {rows} rows")));
        }
        if ids.is_empty() {
            return Err(MlsaError::shape("gather of zero rows"));
        }
        let c = tv.cols();
        let mut out = Tensor::zeros(&[ids.len(), c]);
        for (r, &i) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(tv.row(i));
        }
        Ok(self.push(out, Op::Gather { table, ids }))
    }

    /// Depthwise causal convolution within each length-`seq_len` segment.
    /// Tap `K-1` of `kernel` `[E x K]` multiplies the current position.
    pub fn causal_conv(&mut self, x: Var, kernel: Var, bias: Var, seq_len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (rows, e) = (xv.rows(), xv.cols());
        let kv = self.value(kernel);
        if kv.rank() != 2 || kv.dims()[0] != e || self.value(bias).len() != e {
            return Err(MlsaError::shape(format!(
                "conv kernel {:?} / bias {:?} for {e} channels",
                kv.dims(),
                self.value(bias).dims()
            )));
        }
        if seq_len == 0 || rows % seq_len != 0 {
            return Err(MlsaError::shape(format!("{rows} rows are not whole segments of {seq_len}")));
        }
        let k = kv.dims()[1];
        let mut out = Tensor::zeros(&[rows, e]);
        {
            let (xd, kd, bd) = (xv.data(), kv.data(), self.value(bias).data());
            let od = out.data_mut();
            for row in 0..rows {
                let t = row % seq_len;
                let o = &mut od[row * e..(row + 1) * e];
                o.copy_from_slice(bd);
                for j in 0..k {
                    let back = k - 1 - j;
                    if back > t {
                        continue;
                    }
                    let src = &xd[(row - back) * e..(row - back + 1) * e];
                    for c in 0..e {
                        o[c] += kd[c * k + j] * src[c];
                    }
                }
            }
        }
        Ok(self.push(out, Op::Conv { x, kernel, bias, seq_len }))
    }

    /// Diagonal selective state-space recurrence with exact zero-order hold,
    /// run independently over each length-`seq_len` segment from a zero state:
    ///
    /// `h_t = exp(dt*a) h_{t-1} + ((exp(dt*a) - 1)/a) b_t u_t`,
    /// `y_t = c_t . h_t + skip * u_t`.
    pub fn selective_scan(&mut self, inputs: ScanInputs, seq_len: usize) -> Result<Var> {
        let uv = self.value(inputs.u);
        let (rows, e) = (uv.rows(), uv.cols());
        let av = self.value(inputs.a);
        if av.rank() != 2 || av.dims()[0] != e {
            return Err(MlsaError::shape(format!("state matrix {:?} for {e} channels", av.dims())));
        }
        let n = av.dims()[1];
        let ok = self.value(inputs.delta).dims() == uv.dims()
            && self.value(inputs.b).dims() == [rows, n]
            && self.value(inputs.c).dims() == [rows, n]
            && inputs.skip.is_none_or(|s| self.value(s).len() == e);
        if !ok {
            return Err(MlsaError::shape("selective_scan operand shapes disagree"));
        }
        if seq_len == 0 || rows % seq_len != 0 {
            return Err(MlsaError::shape(format!("{rows} rows are not whole segments of {seq_len}")));
        }
        let keep = self.grad_enabled;
        let mut states = if keep { vec![T::zero(); rows * e * n] } else { Vec::new() };
        let mut out = Tensor::zeros(&[rows, e]);
        {
            let u = uv.data();
            let dl = self.value(inputs.delta).data();
            let a = av.data();
            let b = self.value(inputs.b).data();
            let c = self.value(inputs.c).data();
            let skip = inputs.skip.map(|s| self.value(s).data());
            let y = out.data_mut();
            let mut h = vec![T::zero(); e * n];
            for row in 0..rows {
                if row % seq_len == 0 {
                    h.iter_mut().for_each(|v| *v = T::zero());
                }
                let bt = &b[row * n..(row + 1) * n];
                let ct = &c[row * n..(row + 1) * n];
                for ch in 0..e {
                    let dt = dl[row * e + ch];
                    let x = u[row * e + ch];
                    let hs = &mut h[ch * n..(ch + 1) * n];
                    let ar = &a[ch * n..(ch + 1) * n];
                    for s in 0..n {
                        let (abar, phi) = zoh(dt, ar[s]);
                        hs[s] = abar * hs[s] + phi * bt[s] * x;
                    }
                    let mut acc = T::zero();
                    for s in 0..n {
                        acc += ct[s] * hs[s];
                    }
                    if keep {
                        states[(row * e + ch) * n..(row * e + ch + 1) * n].copy_from_slice(hs);
                    }
                    y[row * e + ch] = acc + skip.map_or(T::zero(), |d| d[ch] * x);
                }
            }
        }
        Ok(self.push(out, Op::Scan { inputs, seq_len, states }))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<usize>) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, v) = (lv.rows(), lv.cols());
        if targets.len() != rows {
            return Err(MlsaError::shape(format!("{} targets for {rows} logit rows", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(MlsaError::Data(format!("target {bad} outside vocabulary {v}")));
        }
        let mut probs = lv.data().to_vec();
        let mut total = T::zero();
        for (r, row) in probs.chunks_exact_mut(v).enumerate() {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<T>().ln();
            total += lse - row[targets[r]];
            row.iter_mut().for_each(|z| *z = (*z - lse).exp());
        }
        let loss = Tensor::vector(vec![total / T::of(rows as f64)])?;
        if !self.grad_enabled {
            probs = Vec::new();
        }
        Ok(self.push(loss, Op::CrossEntropy { logits, targets, probs }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::vector(vec![self.value(x).sum()]).expect("one element");
        self.push(v, Op::Sum(x))
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if !self.grad_enabled {
            return Err(MlsaError::config("backward on an inference graph"));
        }
        if self.value(loss).len() != 1 {
            return Err(MlsaError::shape("backward needs a scalar loss"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).dims(), T::one()));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, id: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[id];
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul { a, b, batch, ta, tb, m, n, k } => {
                let (m, n, k, ta, tb) = (*m, *n, *k, *ta, *tb);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                {
                    let ga = slot(grads, *a, self.value(*a).dims());
                    for i in 0..*batch {
                        let gc = &gd[i * m * n..(i + 1) * m * n];
                        let bi = &bv[i * k * n..(i + 1) * k * n];
                        let gai = &mut ga.data_mut()[i * m * k..(i + 1) * m * k];
                        if ta {
                            gemm(tb, true, k, m, n, T::one(), bi, gc, T::one(), gai);
                        } else {
                            gemm(false, !tb, m, k, n, T::one(), gc, bi, T::one(), gai);
                        }
                    }
                }
                let gb = slot(grads, *b, self.value(*b).dims());
                for i in 0..*batch {
                    let gc = &gd[i * m * n..(i + 1) * m * n];
                    let ai = &av[i * m * k..(i + 1) * m * k];
                    let gbi = &mut gb.data_mut()[i * k * n..(i + 1) * k * n];
                    if tb {
                        gemm(true, ta, n, k, m, T::one(), gc, ai, T::one(), gbi);
                    } else {
                        gemm(!ta, false, k, n, m, T::one(), ai, gc, T::one(), gbi);
                    }
                }
            }
            Op::Add(a, b) => {
                accumulate(slot(grads, *a, g.dims()), gd);
                accumulate(slot(grads, *b, g.dims()), gd);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let ga = slot(grads, *a, g.dims()).data_mut();
                for i in 0..gd.len() {
                    ga[i] += gd[i] * bv[i];
                }
                let gb = slot(grads, *b, g.dims()).data_mut();
                for i in 0..gd.len() {
                    gb[i] += gd[i] * av[i];
                }
            }
            Op::AddRow { x, bias } => {
                accumulate(slot(grads, *x, g.dims()), gd);
                let gb = slot(grads, *bias, self.value(*bias).dims()).data_mut();
                for row in gd.chunks_exact(gb.len()) {
                    gb.iter_mut().zip(row).for_each(|(b, &r)| *b += r);
                }
            }
            Op::Scale(x, s) => {
                let gx = slot(grads, *x, g.dims()).data_mut();
                gx.iter_mut().zip(gd).for_each(|(a, &b)| *a += b * *s);
            }
            Op::Neg(x) => {
                let gx = slot(grads, *x, g.dims()).data_mut();
                gx.iter_mut().zip(gd).for_each(|(a, &b)| *a -= b);
            }
            Op::Exp(x) => {
                let y = node.value.data();
                let gx = slot(grads, *x, g.dims()).data_mut();
                for i in 0..gd.len() {
                    gx[i] += gd[i] * y[i];
                }
            }
            Op::Gelu(x) | Op::Silu(x) | Op::Softplus(x) => {
                let xv = self.value(*x).data();
                let deriv: fn(T) -> T = match &node.op {
                    Op::Gelu(_) => gelu_grad,
                    Op::Silu(_) => silu_grad,
                    _ => sigmoid,
                };
                let gx = slot(grads, *x, g.dims()).data_mut();
                for i in 0..gd.len() {
                    gx[i] += gd[i] * deriv(xv[i]);
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let c = node.value.cols();
                let gx = slot(grads, *x, g.dims()).data_mut();
                for r in 0..y.len() / c {
                    let (yr, gr) = (&y[r * c..(r + 1) * c], &gd[r * c..(r + 1) * c]);
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        gx[r * c + j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let d = node.value.cols();
                let gain_v = self.value(*gain).data();
                {
                    let gg = slot(grads, *gain, self.value(*gain).dims()).data_mut();
                    for (gr, hr) in gd.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                }
                {
                    let gb = slot(grads, *bias, self.value(*bias).dims()).data_mut();
                    for gr in gd.chunks_exact(d) {
                        gb.iter_mut().zip(gr).for_each(|(b, &v)| *b += v);
                    }
                }
                let gx = slot(grads, *x, g.dims()).data_mut();
                let inv_d = T::of(1.0 / d as f64);
                for r in 0..rstd.len() {
                    let gr = &gd[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut sum_g = T::zero();
                    let mut sum_gh = T::zero();
                    for j in 0..d {
                        let dh = gr[j] * gain_v[j];
                        sum_g += dh;
                        sum_gh += dh * hr[j];
                    }
                    for j in 0..d {
                        let dh = gr[j] * gain_v[j];
                        gx[r * d + j] += rstd[r] * (dh - inv_d * (sum_g + hr[j] * sum_gh));
                    }
                }
            }
            Op::Mask { x, mask } => {
                let gx = slot(grads, *x, g.dims()).data_mut();
                for i in 0..gd.len() {
                    gx[i] += gd[i] * mask[i];
                }
            }
            Op::Concat(parts) => {
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let dims = self.value(p).dims().to_vec();
                    let w = *dims.last().expect("rank >= 1");
                    let gp = slot(grads, p, &dims).data_mut();
                    for (r, grow) in gd.chunks_exact(total).enumerate() {
                        let dst = &mut gp[r * w..(r + 1) * w];
                        dst.iter_mut().zip(&grow[offset..offset + w]).for_each(|(a, &b)| *a += b);
                    }
                    offset += w;
                }
            }
            Op::Slice { x, start } => {
                let dims = self.value(*x).dims().to_vec();
                let c = *dims.last().expect("rank >= 1");
                let w = g.cols();
                let gx = slot(grads, *x, &dims).data_mut();
                for (r, grow) in gd.chunks_exact(w).enumerate() {
                    let dst = &mut gx[r * c + start..r * c + start + w];
                    dst.iter_mut().zip(grow).for_each(|(a, &b)| *a += b);
                }
            }
            Op::Gather { table, ids } => {
                let dims = self.value(*table).dims().to_vec();
                let c = g.cols();
                let gt = slot(grads, *table, &dims).data_mut();
                for (r, &i) in ids.iter().enumerate() {
                    let dst = &mut gt[i * c..(i + 1) * c];
                    dst.iter_mut().zip(&gd[r * c..(r + 1) * c]).for_each(|(a, &b)| *a += b);
                }
            }
            Op::Conv { x, kernel, bias, seq_len } => self.conv_backward(gd, *x, *kernel, *bias, *seq_len, grads),
            Op::Scan { inputs, seq_len, states } => self.scan_backward(gd, inputs, *seq_len, states, grads),
            Op::CrossEntropy { logits, targets, probs } => {
                let dims = self.value(*logits).dims().to_vec();
                let v = *dims.last().expect("rank >= 1");
                let scale = gd[0] / T::of(targets.len() as f64);
                let gl = slot(grads, *logits, &dims).data_mut();
                for (r, &t) in targets.iter().enumerate() {
                    for j in 0..v {
                        gl[r * v + j] += probs[r * v + j] * scale;
                    }
                    gl[r * v + t] -= scale;
                }
            }
            Op::Sum(x) => {
                let dims = self.value(*x).dims().to_vec();
                let gx = slot(grads, *x, &dims).data_mut();
                gx.iter_mut().for_each(|a| *a += gd[0]);
            }
        }
    }

    fn conv_backward(&self, gd: &[T], x: Var, kernel: Var, bias: Var, seq_len: usize, grads: &mut [Option<Tensor<T>>]) {
        let xv = self.value(x);
        let (rows, e) = (xv.rows(), xv.cols());
        let kv = self.value(kernel);
        let k = kv.dims()[1];
        let (xd, kd) = (xv.data(), kv.data());
        {
            let gb = slot(grads, bias, self.value(bias).dims()).data_mut();
            for grow in gd.chunks_exact(e) {
                gb.iter_mut().zip(grow).for_each(|(a, &b)| *a += b);
            }
        }
        {
            let gk = slot(grads, kernel, kv.dims()).data_mut();
            for row in 0..rows {
                let t = row % seq_len;
                for j in 0..k {
                    let back = k - 1 - j;
                    if back > t {
                        continue;
                    }
                    let src = (row - back) * e;
                    for c in 0..e {
                        gk[c * k + j] += gd[row * e + c] * xd[src + c];
                    }
                }
            }
        }
        let gx = slot(grads, x, xv.dims()).data_mut();
        for row in 0..rows {
            let t = row % seq_len;
            for j in 0..k {
                let back = k - 1 - j;
                if back > t {
                    continue;
                }
                let dst = (row - back) * e;
                for c in 0..e {
                    gx[dst + c] += gd[row * e + c] * kd[c * k + j];
                }
            }
        }
    }

    fn scan_backward(
        &self,
        gy: &[T],
        inputs: &ScanInputs,
        seq_len: usize,
        states: &[T],
        grads: &mut [Option<Tensor<T>>],
    ) {
        let uv = self.value(inputs.u);
        let (rows, e) = (uv.rows(), uv.cols());
        let n = self.value(inputs.a).dims()[1];
        let u = uv.data();
        let dl = self.value(inputs.delta).data();
        let a = self.value(inputs.a).data();
        let b = self.value(inputs.b).data();
        let c = self.value(inputs.c).data();

        let mut gu = vec![T::zero(); rows * e];
        let mut gdelta = vec![T::zero(); rows * e];
        let mut ga = vec![T::zero(); e * n];
        let mut gb = vec![T::zero(); rows * n];
        let mut gc = vec![T::zero(); rows * n];
        let mut carry = vec![T::zero(); e * n];
        let zeros = vec![T::zero(); n];
        let mut part_dt = vec![T::zero(); n];
        let mut part_u = vec![T::zero(); n];

        for row in (0..rows).rev() {
            let t = row % seq_len;
            if t == seq_len - 1 {
                carry.iter_mut().for_each(|v| *v = T::zero());
            }
            let bt = &b[row * n..(row + 1) * n];
            let ct = &c[row * n..(row + 1) * n];
            for ch in 0..e {
                let gyv = gy[row * e + ch];
                let dt = dl[row * e + ch];
                let x = u[row * e + ch];
                let base = (row * e + ch) * n;
                let h = &states[base..base + n];
                let h_prev = if t == 0 { &zeros[..] } else { &states[base - e * n..base - e * n + n] };
                let ar = &a[ch * n..(ch + 1) * n];
                let ga_ch = &mut ga[ch * n..(ch + 1) * n];
                let carry_ch = &mut carry[ch * n..(ch + 1) * n];
                let gb_row = &mut gb[row * n..(row + 1) * n];
                let gc_row = &mut gc[row * n..(row + 1) * n];
                for s in 0..n {
                    let (av, bv) = (ar[s], bt[s]);
                    gc_row[s] += gyv * h[s];
                    let gh = gyv * ct[s] + carry_ch[s];
                    let (abar, phi) = zoh(dt, av);
                    part_dt[s] = gh * abar * (av * h_prev[s] + x * bv);
                    ga_ch[s] += gh * (h_prev[s] * dt * abar + x * bv * zoh_dphi_da(dt, av, abar, phi));
                    part_u[s] = gh * phi * bv;
                    gb_row[s] += gh * phi * x;
                    carry_ch[s] = gh * abar;
                }
                let mut g_dt = T::zero();
                let mut g_u = T::zero();
                for s in 0..n {
                    g_dt += part_dt[s];
                    g_u += part_u[s];
                }
                gdelta[row * e + ch] += g_dt;
                gu[row * e + ch] += g_u;
            }
        }

        if let Some(skip) = inputs.skip {
            let sv = self.value(skip).data();
            let mut gs = vec![T::zero(); e];
            for row in 0..rows {
                for ch in 0..e {
                    gu[row * e + ch] += gy[row * e + ch] * sv[ch];
                    gs[ch] += gy[row * e + ch] * u[row * e + ch];
                }
            }
            accumulate(slot(grads, skip, self.value(skip).dims()), &gs);
        }
        accumulate(slot(grads, inputs.u, uv.dims()), &gu);
        accumulate(slot(grads, inputs.delta, uv.dims()), &gdelta);
        accumulate(slot(grads, inputs.a, self.value(inputs.a).dims()), &ga);
        accumulate(slot(grads, inputs.b, self.value(inputs.b).dims()), &gb);
        accumulate(slot(grads, inputs.c, self.value(inputs.c).dims()), &gc);
    }
}

fn slot<'a, T: Scalar>(grads: &'a mut [Option<Tensor<T>>], v: Var, dims: &[usize]) -> &'a mut Tensor<T> {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(dims))
}

fn accumulate<T: Scalar>(dst: &mut Tensor<T>, src: &[T]) {
    dst.data_mut().iter_mut().zip(src).for_each(|(a, &b)| *a += b);
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of `v`; `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Adds the gradient of every parameter leaf of `graph` into `store`.
    pub fn accumulate_into(&self, graph: &Graph<T>, store: &mut ParameterStore<T>) {
        for (id, node) in graph.nodes.iter().enumerate() {
            if let (Op::Param(idx), Some(g)) = (&node.op, self.get(Var(id))) {
                store.add_grad_at(*idx, g.data());
            }
        }
    }
}
