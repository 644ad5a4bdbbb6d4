//! Dense row-major `f64` tensors and a tape-based reverse-mode differentiator.
//!
//! A [`Tape`] records every primitive applied to its [`Var`] handles. Leaves
//! created with `requires_grad = true` receive accumulated gradients on each
//! call to [`Tape::backward`]; constant leaves never allocate a gradient buffer.
//! Broadcasting is limited to scalar (single-element) operands.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} holds {numel} values but {} were supplied",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Size of the last dimension (1 for a rank-0 shape).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Product of all leading dimensions.
    pub fn rows(&self) -> usize {
        let c = self.cols();
        if c == 0 {
            0
        } else {
            self.numel() / c
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::Usage(format!(
                "item() on a tensor with {} elements",
                self.data.len()
            )));
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn squared_distance(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// `c[m,n] = a[m,k] · b[k,n]`, accumulating each output over `k` in ascending order.
pub(crate) fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
    c
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise `softmax(x / tau)` with max subtraction.
pub fn softmax_row(row: &[f64], tau: f64, out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = ((x - max) / tau).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq)]
enum Unary {
    Silu,
    Square,
    Sigmoid,
    Ln,
    Powf(f64),
    ClampMin(f64),
    Scale(f64),
    AddConst(f64),
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Silu => x * sigmoid(x),
            Unary::Square => x * x,
            Unary::Sigmoid => sigmoid(x),
            Unary::Ln => x.ln(),
            Unary::Powf(e) => x.powf(e),
            Unary::ClampMin(lo) => x.max(lo),
            Unary::Scale(c) => c * x,
            Unary::AddConst(c) => x + c,
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Unary::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Unary::Square => 2.0 * x,
            Unary::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            Unary::Ln => 1.0 / x,
            Unary::Powf(e) => e * x.powf(e - 1.0),
            // zero slope on the clamped side, including the kink itself
            Unary::ClampMin(lo) => {
                if x > lo {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Scale(c) => c,
            Unary::AddConst(_) => 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    Sum(Var),
    Mean(Var),
    SoftmaxRows {
        x: Var,
        tau: f64,
    },
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<f64>,
    },
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        seq_len: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    WeightedSum {
        coeffs: Var,
        row: usize,
        terms: Vec<Var>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    External {
        input: Var,
        grad: Vec<f64>,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Ordered record of primitive operations with their local backward rules.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if it requires one and backward has run.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            if let Some(g) = n.grad.as_mut() {
                g.iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }

    /// Number of leaves currently holding a gradient buffer.
    pub fn gradient_buffer_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::Leaf) && n.grad.is_some())
            .count()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 {
            return Err(Error::Dimension(format!(
                "matmul expects rank-2 operands, got {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let (m, k, k2, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0], tb.shape()[1]);
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner dimensions differ: {:?} x {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = matmul_kernel(ta.data(), tb.data(), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::MatMul(a, b), rg))
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let out = if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(ta.shape().to_vec(), data)?
        } else if tb.numel() == 1 {
            let y = tb.data()[0];
            let data = ta.data().iter().map(|&x| f(x, y)).collect();
            Tensor::new(ta.shape().to_vec(), data)?
        } else if ta.numel() == 1 {
            let x = ta.data()[0];
            let data = tb.data().iter().map(|&y| f(x, y)).collect();
            Tensor::new(tb.shape().to_vec(), data)?
        } else {
            return Err(Error::Dimension(format!(
                "elementwise operands {:?} and {:?} differ",
                ta.shape(),
                tb.shape()
            )));
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Binary(kind, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    fn unary(&mut self, kind: Unary, x: Var) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| kind.apply(v)).collect();
        let out = Tensor {
            shape: tx.shape().to_vec(),
            data,
        };
        let rg = self.rg(&[x]);
        self.push(out, Op::Unary(kind, x), rg)
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(Unary::Silu, x)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(Unary::Square, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(Unary::Ln, x)
    }

    pub fn powf(&mut self, x: Var, exponent: f64) -> Var {
        self.unary(Unary::Powf(exponent), x)
    }

    /// `max(x, lo)`; the gradient is zero wherever the floor is active.
    pub fn clamp_min(&mut self, x: Var, lo: f64) -> Var {
        self.unary(Unary::ClampMin(lo), x)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(Unary::Scale(c), x)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(Unary::AddConst(c), x)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Softmax over the last dimension of `x / tau`.
    pub fn softmax_rows(&mut self, x: Var, tau: f64) -> Result<Var> {
        if !(tau > 0.0) {
            return Err(Error::Parameter(format!("temperature must be positive, got {tau}")));
        }
        let tx = self.value(x);
        let cols = tx.cols();
        let mut out = vec![0.0; tx.numel()];
        for (src, dst) in tx.data().chunks(cols).zip(out.chunks_mut(cols)) {
            softmax_row(src, tau, dst);
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SoftmaxRows { x, tau }, rg))
    }

    /// `x / sqrt(mean(x²) + eps) · gain`, row by row.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::Parameter(format!("rms_norm eps must be positive, got {eps}")));
        }
        let (tx, tg) = (self.value(x), self.value(gain));
        let cols = tx.cols();
        if tg.numel() != cols {
            return Err(Error::Dimension(format!(
                "rms_norm gain has {} entries, last dimension is {cols}",
                tg.numel()
            )));
        }
        let mut out = vec![0.0; tx.numel()];
        let mut inv_rms = Vec::with_capacity(tx.rows());
        for (src, dst) in tx.data().chunks(cols).zip(out.chunks_mut(cols)) {
            let ms = src.iter().map(|v| v * v).sum::<f64>() / cols as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            for ((d, &s), &g) in dst.iter_mut().zip(src).zip(tg.data()) {
                *d = s * inv * g;
            }
            inv_rms.push(inv);
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gain]);
        Ok(self.push(out, Op::RmsNorm { x, gain, inv_rms }, rg))
    }

    /// Multi-head causal self-attention over rows grouped into sequences of
    /// `seq_len`. `q`, `k`, `v` are `[num_seq·seq_len, d]` with `d % heads == 0`.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        seq_len: usize,
        heads: usize,
    ) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        if tq.shape() != tk.shape() || tq.shape() != tv.shape() || tq.shape().len() != 2 {
            return Err(Error::Dimension("attention operands must share a rank-2 shape".into()));
        }
        let (rows, d) = (tq.shape()[0], tq.shape()[1]);
        if heads == 0 || d % heads != 0 || seq_len == 0 || rows % seq_len != 0 {
            return Err(Error::Dimension(format!(
                "attention layout invalid: rows {rows}, d {d}, heads {heads}, seq_len {seq_len}"
            )));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let nseq = rows / seq_len;
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let mut out = vec![0.0; rows * d];
        let mut probs = vec![0.0; nseq * heads * seq_len * seq_len];
        let mut scores = vec![0.0; seq_len];
        for s in 0..nseq {
            for h in 0..heads {
                let off = h * dh;
                for t in 0..seq_len {
                    let qi = (s * seq_len + t) * d + off;
                    let qrow = &qd[qi..qi + dh];
                    let mut max = f64::NEG_INFINITY;
                    for u in 0..=t {
                        let ki = (s * seq_len + u) * d + off;
                        let dot: f64 = qrow.iter().zip(&kd[ki..ki + dh]).map(|(a, b)| a * b).sum();
                        scores[u] = dot * scale;
                        max = max.max(scores[u]);
                    }
                    let mut total = 0.0;
                    for sc in scores.iter_mut().take(t + 1) {
                        *sc = (*sc - max).exp();
                        total += *sc;
                    }
                    let pbase = ((s * heads + h) * seq_len + t) * seq_len;
                    let orow = (s * seq_len + t) * d + off;
                    for u in 0..=t {
                        let p = scores[u] / total;
                        probs[pbase + u] = p;
                        let vi = (s * seq_len + u) * d + off;
                        for (o, &vv) in out[orow..orow + dh].iter_mut().zip(&vd[vi..vi + dh]) {
                            *o += p * vv;
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![rows, d], out)?;
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            out,
            Op::CausalAttention {
                q,
                k,
                v,
                seq_len,
                heads,
                probs,
            },
            rg,
        ))
    }

    /// `Σ_b coeffs[row, b] · terms[b]`. `coeffs` is either a vector of length
    /// `terms.len()` (use `row = 0`) or a matrix with that many columns.
    pub fn weighted_sum(&mut self, coeffs: Var, row: usize, terms: &[Var]) -> Result<Var> {
        let tc = self.value(coeffs);
        let nb = tc.cols();
        if nb != terms.len() || row >= tc.rows() {
            return Err(Error::Configuration(format!(
                "mixing coefficients have {nb} columns and {} rows; {} candidates, row {row}",
                tc.rows(),
                terms.len()
            )));
        }
        let c = tc.row(row).to_vec();
        let first = self.value(terms[0]).shape().to_vec();
        if terms.iter().any(|t| self.value(*t).shape() != first.as_slice()) {
            return Err(Error::Dimension("weighted_sum terms differ in shape".into()));
        }
        let mut out = vec![0.0; first.iter().product()];
        for (cb, t) in c.iter().zip(terms) {
            for (o, &x) in out.iter_mut().zip(self.value(*t).data()) {
                *o += cb * x;
            }
        }
        let mut deps = vec![coeffs];
        deps.extend_from_slice(terms);
        let rg = self.rg(&deps);
        Ok(self.push(
            Tensor::new(first, out)?,
            Op::WeightedSum {
                coeffs,
                row,
                terms: terms.to_vec(),
            },
            rg,
        ))
    }

    /// Mean next-token cross-entropy of `logits[n, V]` against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let (n, vocab) = (tl.rows(), tl.cols());
        if targets.len() != n {
            return Err(Error::Dimension(format!(
                "{} targets for {n} logit rows",
                targets.len()
            )));
        }
        if let Some(t) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Error::Input(format!("target {t} outside vocabulary {vocab}")));
        }
        let mut probs = vec![0.0; tl.numel()];
        let mut loss = 0.0;
        for (r, (src, dst)) in tl.data().chunks(vocab).zip(probs.chunks_mut(vocab)).enumerate() {
            softmax_row(src, 1.0, dst);
            let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + src.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - src[targets[r]];
        }
        loss /= n as f64;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Gathers `rows` of a matrix into a new `[rows.len(), cols]` matrix.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let (n, c) = (tx.rows(), tx.cols());
        if let Some(r) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::Dimension(format!("row {r} outside a {n}-row matrix")));
        }
        let data = rows.iter().flat_map(|&r| tx.row(r).iter().copied()).collect();
        let value = Tensor::new(vec![rows.len(), c], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            value,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// A scalar computed elsewhere whose gradient with respect to `input` is known.
    pub fn external(&mut self, input: Var, value: f64, grad: Vec<f64>) -> Result<Var> {
        if grad.len() != self.value(input).numel() {
            return Err(Error::Dimension(format!(
                "external gradient has {} entries for an input of {}",
                grad.len(),
                self.value(input).numel()
            )));
        }
        let rg = self.rg(&[input]);
        Ok(self.push(Tensor::scalar(value), Op::External { input, grad }, rg))
    }

    /// Reverse sweep from a scalar `loss`, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g, &mut grads)?;
        }
        for (idx, g) in grads.into_iter().enumerate() {
            let node = &mut self.nodes[idx];
            if let (Op::Leaf, true, Some(g)) = (&node.op, node.requires_grad, g) {
                match node.grad.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(g),
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match grads[v.0].as_mut() {
                Some(a) => a.iter_mut().zip(&contrib).for_each(|(x, y)| *x += y),
                None => grads[v.0] = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.requires_grad(*a) {
                    let bt = transpose(tb.data(), k, n);
                    acc(*a, matmul_kernel(g, &bt, m, n, k));
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = ta.data()[i * k + p];
                            for (d, &gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *d += aip * gv;
                            }
                        }
                    }
                    acc(*b, db);
                }
            }
            Op::Binary(kind, a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let out_len = g.len();
                let expand = |t: &Tensor| -> Vec<f64> {
                    if t.numel() == out_len {
                        t.data().to_vec()
                    } else {
                        vec![t.data()[0]; out_len]
                    }
                };
                let reduce = |t: &Tensor, full: Vec<f64>| -> Vec<f64> {
                    if t.numel() == full.len() {
                        full
                    } else {
                        vec![full.iter().sum()]
                    }
                };
                let (ga, gb): (Vec<f64>, Vec<f64>) = match kind {
                    Binary::Add => (g.to_vec(), g.to_vec()),
                    Binary::Sub => (g.to_vec(), g.iter().map(|x| -x).collect()),
                    Binary::Mul => {
                        let (ea, eb) = (expand(ta), expand(tb));
                        (
                            g.iter().zip(&eb).map(|(x, y)| x * y).collect(),
                            g.iter().zip(&ea).map(|(x, y)| x * y).collect(),
                        )
                    }
                };
                acc(*a, reduce(ta, ga));
                acc(*b, reduce(tb, gb));
            }
            Op::Unary(kind, x) => {
                let tx = self.value(*x);
                let gx = g
                    .iter()
                    .zip(tx.data())
                    .map(|(gv, &xv)| gv * kind.derivative(xv))
                    .collect();
                acc(*x, gx);
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                acc(*x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                acc(*x, vec![g[0] / n as f64; n]);
            }
            Op::SoftmaxRows { x, tau } => {
                let y = node.value.data();
                let cols = node.value.cols();
                let mut gx = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.chunks(cols).zip(g.chunks(cols)).zip(gx.chunks_mut(cols)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot) / tau;
                    }
                }
                acc(*x, gx);
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (tx, tg) = (self.value(*x), self.value(*gain));
                let cols = tx.cols();
                let gd = tg.data();
                if self.requires_grad(*x) {
                    let mut gx = vec![0.0; tx.numel()];
                    for (r, ((xr, gr), dr)) in tx
                        .data()
                        .chunks(cols)
                        .zip(g.chunks(cols))
                        .zip(gx.chunks_mut(cols))
                        .enumerate()
                    {
                        let inv = inv_rms[r];
                        let dot: f64 = xr.iter().zip(gr).zip(gd).map(|((xv, gv), w)| xv * gv * w).sum();
                        let coef = inv * inv * inv * dot / cols as f64;
                        for (((d, &xv), &gv), &w) in dr.iter_mut().zip(xr).zip(gr).zip(gd) {
                            *d = inv * gv * w - xv * coef;
                        }
                    }
                    acc(*x, gx);
                }
                if self.requires_grad(*gain) {
                    let mut gg = vec![0.0; cols];
                    for (r, (xr, gr)) in tx.data().chunks(cols).zip(g.chunks(cols)).enumerate() {
                        for ((d, &xv), &gv) in gg.iter_mut().zip(xr).zip(gr) {
                            *d += gv * xv * inv_rms[r];
                        }
                    }
                    acc(*gain, gg);
                }
            }
            Op::CausalAttention {
                q,
                k,
                v,
                seq_len,
                heads,
                probs,
            } => {
                let (tq, tk, tv) = (self.value(*q), self.value(*k), self.value(*v));
                let (rows, d) = (tq.shape()[0], tq.shape()[1]);
                let (seq_len, heads) = (*seq_len, *heads);
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let nseq = rows / seq_len;
                let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
                let mut gq = vec![0.0; rows * d];
                let mut gk = vec![0.0; rows * d];
                let mut gv = vec![0.0; rows * d];
                let mut dp = vec![0.0; seq_len];
                for s in 0..nseq {
                    for h in 0..heads {
                        let off = h * dh;
                        for t in 0..seq_len {
                            let pbase = ((s * heads + h) * seq_len + t) * seq_len;
                            let gi = (s * seq_len + t) * d + off;
                            let grow = &g[gi..gi + dh];
                            let mut weighted = 0.0;
                            for u in 0..=t {
                                let vi = (s * seq_len + u) * d + off;
                                let p = probs[pbase + u];
                                dp[u] = grow.iter().zip(&vd[vi..vi + dh]).map(|(a, b)| a * b).sum();
                                weighted += p * dp[u];
                                for (dv, &go) in gv[vi..vi + dh].iter_mut().zip(grow) {
                                    *dv += p * go;
                                }
                            }
                            let qi = gi;
                            for u in 0..=t {
                                let ds = probs[pbase + u] * (dp[u] - weighted) * scale;
                                let ki = (s * seq_len + u) * d + off;
                                for j in 0..dh {
                                    gq[qi + j] += ds * kd[ki + j];
                                    gk[ki + j] += ds * qd[qi + j];
                                }
                            }
                        }
                    }
                }
                acc(*q, gq);
                acc(*k, gk);
                acc(*v, gv);
            }
            Op::WeightedSum { coeffs, row, terms } => {
                let tc = self.value(*coeffs);
                if self.requires_grad(*coeffs) {
                    let nb = tc.cols();
                    let mut gc = vec![0.0; tc.numel()];
                    for (b, t) in terms.iter().enumerate() {
                        gc[row * nb + b] = g.iter().zip(self.value(*t).data()).map(|(x, y)| x * y).sum();
                    }
                    acc(*coeffs, gc);
                }
                for (b, t) in terms.iter().enumerate() {
                    if self.requires_grad(*t) {
                        let c = tc.row(*row)[b];
                        acc(*t, g.iter().map(|x| c * x).collect());
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let vocab = self.value(*logits).cols();
                let n = targets.len() as f64;
                let mut gl = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    gl[r * vocab + t] -= 1.0;
                }
                gl.iter_mut().for_each(|x| *x *= g[0] / n);
                acc(*logits, gl);
            }
            Op::External { input, grad } => {
                acc(*input, grad.iter().map(|x| x * g[0]).collect());
            }
            Op::SelectRows { x, rows } => {
                let tx = self.value(*x);
                let c = tx.cols();
                let mut gx = vec![0.0; tx.numel()];
                for (i, &r) in rows.iter().enumerate() {
                    for (d, s) in gx[r * c..(r + 1) * c].iter_mut().zip(&g[i * c..(i + 1) * c]) {
                        *d += s;
                    }
                }
                acc(*x, gx);
            }
        }
        Ok(())
    }
}
