use std::sync::atomic::{AtomicU64, Ordering};

use super::{DiffError, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Denominator guard for cosine similarity.
pub const COSINE_EPS: f64 = 1e-8;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    id: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.id
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    MinElem(usize, usize),
    MaxElem(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    AddBias(usize, usize),
    Relu(usize),
    Tanh(usize),
    Abs(usize),
    Exp(usize),
    Log(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Conv1d { input: usize, weight: usize, stride: usize },
    MeanAxis(usize, usize),
    SumAxis(usize, usize),
    SumAll(usize),
    MeanAll(usize),
    ArgReduce(usize, usize),
    Cumsum(usize),
    CosineRows(usize, usize),
    CosineMatrix(usize, usize),
    SoftmaxCe { logits: usize, targets: Vec<usize> },
    StopGradient,
    Shift(usize, isize),
    Pad(usize, usize),
    Narrow { input: usize, start: usize },
    Concat(Vec<usize>),
    Gather(usize, Vec<usize>),
    SubOuter(usize),
    DivCols(usize, usize),
    Broadcast(usize),
    Reshape(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations supporting one reverse sweep.
///
/// Every op validates shapes eagerly and returns a [`DiffError`] naming the
/// offending shapes. Gradient conventions at kinks: `relu'(0) = 0`,
/// `abs'(0) = 0`, and ties in `min`/`max` route the gradient to the first
/// argument.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    /// Gradient for `v`, or an all-zero vector of length `n` when no path reached it.
    pub fn get_or_zeros(&self, v: Var, n: usize) -> Vec<f64> {
        self.get(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; n])
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), DiffError> {
    if a.shape() != b.shape() {
        return Err(DiffError::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn want_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<(), DiffError> {
    if t.ndim() != rank {
        return Err(DiffError::InvalidShape {
            op,
            shape: t.shape().to_vec(),
            expected: format!("rank {rank}"),
        });
    }
    Ok(())
}

/// 2-D view of a rank-1 or rank-2 tensor as (rows, cols).
fn as_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize), DiffError> {
    match t.shape() {
        [n] => Ok((1, *n)),
        [r, c] => Ok((*r, *c)),
        s => Err(DiffError::InvalidShape { op, shape: s.to_vec(), expected: "rank 1 or 2".into() }),
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut lanes = [0.0; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            lanes[i] += x[i] * y[i];
        }
    }
    lanes.iter().sum::<f64>() + tail
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av != 0.0 {
                axpy(av, &b[p * m..(p + 1) * m], orow);
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new(), backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<usize, DiffError> {
        if v.tape != self.id || v.id >= self.nodes.len() {
            return Err(DiffError::Detached);
        }
        Ok(v.id)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node { value, op, requires_grad });
        Var { tape: self.id, id }
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Trainable leaf; receives a gradient on backward.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.id].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.id].requires_grad
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        mk: impl Fn(usize, usize) -> Op,
    ) -> Result<Var, DiffError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        same_shape(op, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[ia, ib]);
        Ok(self.push(t, mk(ia, ib), rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var, DiffError> {
        let ia = self.check(a)?;
        let ta = &self.nodes[ia].value;
        let data = ta.data().iter().map(|&x| f(x)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[ia]);
        Ok(self.push(t, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    /// Elementwise minimum.
    pub fn min_elem(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary("min_elem", a, b, |x, y| if x <= y { x } else { y }, Op::MinElem)
    }

    /// Elementwise maximum.
    pub fn max_elem(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary("max_elem", a, b, |x, y| if x >= y { x } else { y }, Op::MaxElem)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var, DiffError> {
        let ia = self.check(a)?;
        self.unary(a, |x| k * x, Op::Scale(ia, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Result<Var, DiffError> {
        let ia = self.check(a)?;
        self.unary(a, |x| x + k, Op::AddScalar(ia))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, DiffError> {
        let ia = self.check(a)?;
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(ia))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, DiffError> {
        let ia = self.check(a)?;
        self.unary(a, f64::tanh, Op::Tanh(ia))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var, DiffError> {
        let ia = self.check(a)?;
        self.unary(a, f64::abs, Op::Abs(ia))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, DiffError> {
        let ia = self.check(a)?;
        self.unary(a, f64::exp, Op::Exp(ia))
    }

    pub fn log(&mut self, a: Var) -> Result<Var, DiffError> {
        let ia = self.check(a)?;
        if let Some(pos) = self.nodes[ia].value.data().iter().position(|&x| x <= 0.0) {
            return Err(DiffError::Domain { op: "log", index: pos });
        }
        self.unary(a, f64::ln, Op::Log(ia))
    }

    /// Returns the value unchanged and blocks all gradient flow through it.
    pub fn stop_gradient(&mut self, a: Var) -> Result<Var, DiffError> {
        let ia = self.check(a)?;
        let t = self.nodes[ia].value.clone();
        Ok(self.push(t, Op::StopGradient, false))
    }

    /// Adds a per-column bias `[c]` to every row of `x` (`[n, c]`).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, DiffError> {
        let (ix, ib) = (self.check(x)?, self.check(bias)?);
        let (tx, tb) = (&self.nodes[ix].value, &self.nodes[ib].value);
        let (r, c) = as_matrix("add_bias", tx)?;
        if tb.shape() != [c] {
            return Err(DiffError::ShapeMismatch {
                op: "add_bias",
                left: tx.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let mut data = tx.data().to_vec();
        for i in 0..r {
            for (v, b) in data[i * c..(i + 1) * c].iter_mut().zip(tb.data()) {
                *v += b;
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[ix, ib]);
        Ok(self.push(t, Op::AddBias(ix, ib), rg))
    }

    /// Matrix product `[n, k] x [k, m] -> [n, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        want_rank("matmul", ta, 2)?;
        want_rank("matmul", tb, 2)?;
        let (n, k, k2, m) = (ta.shape()[0], ta.shape()[1], tb.shape()[0], tb.shape()[1]);
        if k != k2 {
            return Err(DiffError::ShapeMismatch {
                op: "matmul",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let data = matmul_raw(ta.data(), tb.data(), n, k, m);
        let rg = self.rg(&[ia, ib]);
        Ok(self.push(Tensor::new(vec![n, m], data)?, Op::MatMul(ia, ib), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, DiffError> {
        let ia = self.check(a)?;
        let ta = &self.nodes[ia].value;
        want_rank("transpose", ta, 2)?;
        let (r, c) = (ta.shape()[0], ta.shape()[1]);
        let data = transpose_raw(ta.data(), r, c);
        let rg = self.rg(&[ia]);
        Ok(self.push(Tensor::new(vec![c, r], data)?, Op::Transpose(ia), rg))
    }

    /// Strided valid 1-D convolution in channels-last layout.
    ///
    /// `signal` is `[t, c_in]`, `kernels` is `[c_out, k, c_in]`; the result
    /// is `[(t - k) / stride + 1, c_out]`.
    pub fn conv1d(&mut self, signal: Var, kernels: Var, stride: usize) -> Result<Var, DiffError> {
        let (ix, iw) = (self.check(signal)?, self.check(kernels)?);
        let (tx, tw) = (&self.nodes[ix].value, &self.nodes[iw].value);
        want_rank("conv1d", tx, 2)?;
        want_rank("conv1d", tw, 3)?;
        let (t_in, c_in) = (tx.shape()[0], tx.shape()[1]);
        let (c_out, k) = (tw.shape()[0], tw.shape()[1]);
        if tw.shape()[2] != c_in || stride == 0 {
            return Err(DiffError::ShapeMismatch {
                op: "conv1d",
                left: tx.shape().to_vec(),
                right: tw.shape().to_vec(),
            });
        }
        if t_in < k {
            return Err(DiffError::InvalidShape {
                op: "conv1d",
                shape: tx.shape().to_vec(),
                expected: format!("at least {k} time steps"),
            });
        }
        let t_out = (t_in - k) / stride + 1;
        let span = k * c_in;
        let (x, w) = (tx.data(), tw.data());
        let mut out = vec![0.0; t_out * c_out];
        for t in 0..t_out {
            let patch = &x[t * stride * c_in..t * stride * c_in + span];
            let orow = &mut out[t * c_out..(t + 1) * c_out];
            for (o, ov) in orow.iter_mut().enumerate() {
                *ov = dot(patch, &w[o * span..(o + 1) * span]);
            }
        }
        let rg = self.rg(&[ix, iw]);
        Ok(self.push(
            Tensor::new(vec![t_out, c_out], out)?,
            Op::Conv1d { input: ix, weight: iw, stride },
            rg,
        ))
    }

    fn reduce_axis(&mut self, a: Var, axis: usize, mean: bool) -> Result<Var, DiffError> {
        let ia = self.check(a)?;
        let ta = &self.nodes[ia].value;
        let name = if mean { "mean_axis" } else { "sum_axis" };
        want_rank(name, ta, 2)?;
        if axis > 1 {
            return Err(DiffError::InvalidShape { op: name, shape: ta.shape().to_vec(), expected: "axis 0 or 1".into() });
        }
        let (r, c) = (ta.shape()[0], ta.shape()[1]);
        let d = ta.data();
        let (out, count) = if axis == 0 {
            let mut o = vec![0.0; c];
            for i in 0..r {
                for j in 0..c {
                    o[j] += d[i * c + j];
                }
            }
            (o, r)
        } else {
            ((0..r).map(|i| d[i * c..(i + 1) * c].iter().sum()).collect::<Vec<f64>>(), c)
        };
        let out = if mean { out.into_iter().map(|v| v / count as f64).collect() } else { out };
        let op = if mean { Op::MeanAxis(ia, axis) } else { Op::SumAxis(ia, axis) };
        let rg = self.rg(&[ia]);
        Ok(self.push(Tensor::vector(out), op, rg))
    }

    /// Mean of a 2-D tensor along `axis`, producing a 1-D tensor.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var, DiffError> {
        self.reduce_axis(a, axis, true)
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var, DiffError> {
        self.reduce_axis(a, axis, false)
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var, DiffError> {
        let ia = self.check(a)?;
        let s = self.nodes[ia].value.data().iter().sum();
        let rg = self.rg(&[ia]);
        Ok(self.push(Tensor::scalar(s), Op::SumAll(ia), rg))
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var, DiffError> {
        let ia = self.check(a)?;
        let ta = &self.nodes[ia].value;
        if ta.numel() == 0 {
            return Err(DiffError::InvalidShape { op: "mean_all", shape: ta.shape().to_vec(), expected: "non-empty".into() });
        }
        let s = ta.data().iter().sum::<f64>() / ta.numel() as f64;
        let rg = self.rg(&[ia]);
        Ok(self.push(Tensor::scalar(s), Op::MeanAll(ia), rg))
    }

    fn arg_reduce(&mut self, a: Var, want_min: bool) -> Result<Var, DiffError> {
        let ia = self.check(a)?;
        let ta = &self.nodes[ia].value;
        if ta.numel() == 0 {
            let op = if want_min { "min_all" } else { "max_all" };
            return Err(DiffError::InvalidShape { op, shape: ta.shape().to_vec(), expected: "non-empty".into() });
        }
        let mut best = 0;
        for (i, &v) in ta.data().iter().enumerate() {
            let b = ta.data()[best];
            if (want_min && v < b) || (!want_min && v > b) {
                best = i;
            }
        }
        let v = ta.data()[best];
        let rg = self.rg(&[ia]);
        Ok(self.push(Tensor::scalar(v), Op::ArgReduce(ia, best), rg))
    }

    /// Smallest element; the gradient goes to its first occurrence.
    pub fn min_all(&mut self, a: Var) -> Result<Var, DiffError> {
        self.arg_reduce(a, true)
    }

    /// Largest element; the gradient goes to its first occurrence.
    pub fn max_all(&mut self, a: Var) -> Result<Var, DiffError> {
        self.arg_reduce(a, false)
    }

    /// Inclusive running sum of a 1-D tensor.
    pub fn cumsum(&mut self, a: Var) -> Result<Var, DiffError> {
        let ia = self.check(a)?;
        let ta = &self.nodes[ia].value;
        want_rank("cumsum", ta, 1)?;
        let mut acc = 0.0;
        let data = ta
            .data()
            .iter()
            .map(|&x| {
                acc += x;
                acc
            })
            .collect();
        let rg = self.rg(&[ia]);
        Ok(self.push(Tensor::vector(data), Op::Cumsum(ia), rg))
    }

    /// Row-paired cosine similarity `a_i . b_i / (|a_i| |b_i| + eps)`.
    ///
    /// Two 1-D inputs give a scalar; two `[n, p]` inputs give `[n]`.
    /// An exactly-zero row is rejected.
    pub fn cosine_sim(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        same_shape("cosine_sim", ta, tb)?;
        let (r, _) = as_matrix("cosine_sim", ta)?;
        let mut out = Vec::with_capacity(r);
        for i in 0..r {
            let (x, y) = (ta.row(i), tb.row(i));
            let (nx, ny) = (norm(x), norm(y));
            if nx == 0.0 || ny == 0.0 {
                return Err(DiffError::ZeroNorm { op: "cosine_sim", row: i });
            }
            out.push(dot(x, y) / (nx * ny + COSINE_EPS));
        }
        let t = if ta.ndim() == 1 { Tensor::scalar(out[0]) } else { Tensor::vector(out) };
        let rg = self.rg(&[ia, ib]);
        Ok(self.push(t, Op::CosineRows(ia, ib), rg))
    }

    /// All-pairs cosine similarity of rows: `[n, p] x [m, p] -> [n, m]`.
    pub fn cosine_matrix(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        want_rank("cosine_matrix", ta, 2)?;
        want_rank("cosine_matrix", tb, 2)?;
        if ta.shape()[1] != tb.shape()[1] {
            return Err(DiffError::ShapeMismatch {
                op: "cosine_matrix",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let (n, m) = (ta.shape()[0], tb.shape()[0]);
        let na: Vec<f64> = (0..n).map(|i| norm(ta.row(i))).collect();
        let nb: Vec<f64> = (0..m).map(|j| norm(tb.row(j))).collect();
        if let Some(i) = na.iter().position(|&v| v == 0.0) {
            return Err(DiffError::ZeroNorm { op: "cosine_matrix", row: i });
        }
        if let Some(j) = nb.iter().position(|&v| v == 0.0) {
            return Err(DiffError::ZeroNorm { op: "cosine_matrix", row: j });
        }
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[i * m + j] = dot(ta.row(i), tb.row(j)) / (na[i] * nb[j] + COSINE_EPS);
            }
        }
        let rg = self.rg(&[ia, ib]);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::CosineMatrix(ia, ib), rg))
    }

    /// Per-row softmax cross-entropy of `logits` (`[n, c]`) against class
    /// indices, returning the `n` row losses.
    pub fn softmax_cross_entropy_with_index(&mut self, logits: Var, targets: &[usize]) -> Result<Var, DiffError> {
        let il = self.check(logits)?;
        let tl = &self.nodes[il].value;
        want_rank("softmax_cross_entropy_with_index", tl, 2)?;
        let (n, c) = (tl.shape()[0], tl.shape()[1]);
        if targets.len() != n || targets.iter().any(|&t| t >= c) {
            return Err(DiffError::ShapeMismatch {
                op: "softmax_cross_entropy_with_index",
                left: tl.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let out = (0..n)
            .map(|i| {
                let row = tl.row(i);
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
                lse - row[targets[i]]
            })
            .collect();
        let rg = self.rg(&[il]);
        Ok(self.push(Tensor::vector(out), Op::SoftmaxCe { logits: il, targets: targets.to_vec() }, rg))
    }

    /// `y[t] = x[t + k]` for a 1-D tensor, reading out-of-range entries as 0.
    pub fn shift(&mut self, a: Var, k: isize) -> Result<Var, DiffError> {
        let ia = self.check(a)?;
        let ta = &self.nodes[ia].value;
        want_rank("shift", ta, 1)?;
        let n = ta.numel() as isize;
        let data = (0..n)
            .map(|t| {
                let s = t + k;
                if (0..n).contains(&s) {
                    ta.data()[s as usize]
                } else {
                    0.0
                }
            })
            .collect();
        let rg = self.rg(&[ia]);
        Ok(self.push(Tensor::vector(data), Op::Shift(ia, k), rg))
    }

    /// Zero-pads a 1-D tensor with `front` leading and `back` trailing entries.
    pub fn pad(&mut self, a: Var, front: usize, back: usize) -> Result<Var, DiffError> {
        let ia = self.check(a)?;
        let ta = &self.nodes[ia].value;
        want_rank("pad", ta, 1)?;
        let mut data = vec![0.0; front];
        data.extend_from_slice(ta.data());
        data.resize(data.len() + back, 0.0);
        let rg = self.rg(&[ia]);
        Ok(self.push(Tensor::vector(data), Op::Pad(ia, front), rg))
    }

    /// Slice `len` entries along the leading axis starting at `start`.
    pub fn narrow(&mut self, a: Var, start: usize, len: usize) -> Result<Var, DiffError> {
        let ia = self.check(a)?;
        let ta = &self.nodes[ia].value;
        if ta.ndim() == 0 || start + len > ta.shape()[0] {
            return Err(DiffError::InvalidShape {
                op: "narrow",
                shape: ta.shape().to_vec(),
                expected: format!("leading axis >= {}", start + len),
            });
        }
        let inner: usize = ta.shape()[1..].iter().product();
        let data = ta.data()[start * inner..(start + len) * inner].to_vec();
        let mut shape = ta.shape().to_vec();
        shape[0] = len;
        let rg = self.rg(&[ia]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Narrow { input: ia, start }, rg))
    }

    /// Concatenates 2-D tensors with equal column counts along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        let ids = parts.iter().map(|&v| self.check(v)).collect::<Result<Vec<_>, _>>()?;
        let first = ids.first().ok_or(DiffError::InvalidShape {
            op: "concat_rows",
            shape: vec![],
            expected: "at least one part".into(),
        })?;
        let cols = self.nodes[*first].value.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &i in &ids {
            let t = &self.nodes[i].value;
            let (r, c) = as_matrix("concat_rows", t)?;
            if c != cols {
                return Err(DiffError::ShapeMismatch {
                    op: "concat_rows",
                    left: self.nodes[*first].value.shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            rows += r;
            data.extend_from_slice(t.data());
        }
        let rg = self.rg(&ids);
        Ok(self.push(Tensor::new(vec![rows, cols], data)?, Op::Concat(ids), rg))
    }

    /// Picks elements by flat index into a tensor of shape `shape`.
    pub fn gather(&mut self, a: Var, flat: &[usize], shape: &[usize]) -> Result<Var, DiffError> {
        let ia = self.check(a)?;
        let ta = &self.nodes[ia].value;
        if let Some(&bad) = flat.iter().find(|&&i| i >= ta.numel()) {
            return Err(DiffError::IndexOutOfRange { op: "gather", index: bad, len: ta.numel() });
        }
        let data = flat.iter().map(|&i| ta.data()[i]).collect();
        let t = Tensor::new(shape.to_vec(), data)?;
        let rg = self.rg(&[ia]);
        Ok(self.push(t, Op::Gather(ia, flat.to_vec()), rg))
    }

    /// `y[t, j] = x[t] - consts[j]` for a 1-D `x`.
    pub fn sub_outer(&mut self, a: Var, consts: &[f64]) -> Result<Var, DiffError> {
        let ia = self.check(a)?;
        let ta = &self.nodes[ia].value;
        want_rank("sub_outer", ta, 1)?;
        let (n, m) = (ta.numel(), consts.len());
        let mut data = Vec::with_capacity(n * m);
        for &x in ta.data() {
            data.extend(consts.iter().map(|c| x - c));
        }
        let rg = self.rg(&[ia]);
        Ok(self.push(Tensor::new(vec![n, m], data)?, Op::SubOuter(ia), rg))
    }

    /// Divides column `j` of `x` (`[n, m]`) by `s[j]`.
    pub fn div_cols(&mut self, x: Var, s: Var) -> Result<Var, DiffError> {
        let (ix, is) = (self.check(x)?, self.check(s)?);
        let (tx, ts) = (&self.nodes[ix].value, &self.nodes[is].value);
        want_rank("div_cols", tx, 2)?;
        let (n, m) = (tx.shape()[0], tx.shape()[1]);
        if ts.shape() != [m] {
            return Err(DiffError::ShapeMismatch { op: "div_cols", left: tx.shape().to_vec(), right: ts.shape().to_vec() });
        }
        let mut data = tx.data().to_vec();
        for i in 0..n {
            for j in 0..m {
                data[i * m + j] /= ts.data()[j];
            }
        }
        let rg = self.rg(&[ix, is]);
        Ok(self.push(Tensor::new(vec![n, m], data)?, Op::DivCols(ix, is), rg))
    }

    /// Repeats a single-element tensor into `shape`.
    pub fn broadcast(&mut self, s: Var, shape: &[usize]) -> Result<Var, DiffError> {
        let is = self.check(s)?;
        let ts = &self.nodes[is].value;
        if ts.numel() != 1 {
            return Err(DiffError::InvalidShape { op: "broadcast", shape: ts.shape().to_vec(), expected: "single element".into() });
        }
        let n = shape.iter().product();
        let t = Tensor::new(shape.to_vec(), vec![ts.item(); n])?;
        let rg = self.rg(&[is]);
        Ok(self.push(t, Op::Broadcast(is), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, DiffError> {
        let ia = self.check(a)?;
        let ta = &self.nodes[ia].value;
        if shape.iter().product::<usize>() != ta.numel() {
            return Err(DiffError::ShapeMismatch { op: "reshape", left: ta.shape().to_vec(), right: shape.to_vec() });
        }
        let t = Tensor::new(shape.to_vec(), ta.data().to_vec())?;
        let rg = self.rg(&[ia]);
        Ok(self.push(t, Op::Reshape(ia), rg))
    }

    /// Reverse sweep from a scalar `loss`. A tape supports one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients, DiffError> {
        let il = self.check(loss)?;
        if self.backward_done {
            return Err(DiffError::BackwardTwice);
        }
        let lt = &self.nodes[il].value;
        if lt.numel() != 1 {
            return Err(DiffError::NonScalarLoss(lt.shape().to_vec()));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[il] = Some(vec![1.0]);
        for id in (0..=il).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { tape: self.id, grads })
    }

    fn backprop_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let y = node.value.data();
        let val = |i: usize| self.nodes[i].value.data();
        let mut acc = |i: usize, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[i].requires_grad {
                return;
            }
            let slot = grads[i].get_or_insert_with(|| vec![0.0; self.nodes[i].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| axpy(1.0, g, s));
                acc(*b, &mut |s| axpy(1.0, g, s));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| axpy(1.0, g, s));
                acc(*b, &mut |s| axpy(-1.0, g, s));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |s| s.iter_mut().enumerate().for_each(|(i, v)| *v += g[i] * vb[i]));
                acc(*b, &mut |s| s.iter_mut().enumerate().for_each(|(i, v)| *v += g[i] * va[i]));
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |s| s.iter_mut().enumerate().for_each(|(i, v)| *v += g[i] / vb[i]));
                acc(*b, &mut |s| {
                    s.iter_mut().enumerate().for_each(|(i, v)| *v -= g[i] * va[i] / (vb[i] * vb[i]))
                });
            }
            Op::MinElem(a, b) | Op::MaxElem(a, b) => {
                let is_min = matches!(node.op, Op::MinElem(..));
                let (va, vb) = (val(*a), val(*b));
                let first: Vec<bool> =
                    va.iter().zip(vb).map(|(x, y)| if is_min { x <= y } else { x >= y }).collect();
                acc(*a, &mut |s| {
                    s.iter_mut().enumerate().filter(|(i, _)| first[*i]).for_each(|(i, v)| *v += g[i])
                });
                acc(*b, &mut |s| {
                    s.iter_mut().enumerate().filter(|(i, _)| !first[*i]).for_each(|(i, v)| *v += g[i])
                });
            }
            Op::Scale(a, k) => acc(*a, &mut |s| axpy(*k, g, s)),
            Op::AddScalar(a) | Op::Reshape(a) => acc(*a, &mut |s| axpy(1.0, g, s)),
            Op::AddBias(x, b) => {
                acc(*x, &mut |s| axpy(1.0, g, s));
                let c = self.nodes[*b].value.numel();
                acc(*b, &mut |s| {
                    for row in g.chunks(c) {
                        axpy(1.0, row, s);
                    }
                });
            }
            Op::Relu(a) => {
                let va = val(*a);
                acc(*a, &mut |s| s.iter_mut().enumerate().filter(|(i, _)| va[*i] > 0.0).for_each(|(i, v)| *v += g[i]));
            }
            Op::Tanh(a) => acc(*a, &mut |s| s.iter_mut().enumerate().for_each(|(i, v)| *v += g[i] * (1.0 - y[i] * y[i]))),
            Op::Abs(a) => {
                let va = val(*a);
                acc(*a, &mut |s| {
                    s.iter_mut().enumerate().for_each(|(i, v)| {
                        if va[i] > 0.0 {
                            *v += g[i]
                        } else if va[i] < 0.0 {
                            *v -= g[i]
                        }
                    })
                });
            }
            Op::Exp(a) => acc(*a, &mut |s| s.iter_mut().enumerate().for_each(|(i, v)| *v += g[i] * y[i])),
            Op::Log(a) => {
                let va = val(*a);
                acc(*a, &mut |s| s.iter_mut().enumerate().for_each(|(i, v)| *v += g[i] / va[i]));
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (n, k, m) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                acc(*a, &mut |s| {
                    // dA = G B^T
                    for i in 0..n {
                        let grow = &g[i * m..(i + 1) * m];
                        for p in 0..k {
                            s[i * k + p] += dot(grow, &tb.data()[p * m..(p + 1) * m]);
                        }
                    }
                });
                acc(*b, &mut |s| {
                    // dB = A^T G
                    for i in 0..n {
                        let grow = &g[i * m..(i + 1) * m];
                        for p in 0..k {
                            let av = ta.data()[i * k + p];
                            if av != 0.0 {
                                axpy(av, grow, &mut s[p * m..(p + 1) * m]);
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (r, c) = (self.nodes[*a].value.shape()[0], self.nodes[*a].value.shape()[1]);
                let gt = transpose_raw(g, c, r);
                acc(*a, &mut |s| axpy(1.0, &gt, s));
            }
            Op::Conv1d { input, weight, stride } => {
                let (tx, tw) = (&self.nodes[*input].value, &self.nodes[*weight].value);
                let c_in = tx.shape()[1];
                let (c_out, k) = (tw.shape()[0], tw.shape()[1]);
                let span = k * c_in;
                let t_out = node.value.shape()[0];
                let (x, w) = (tx.data(), tw.data());
                acc(*input, &mut |s| {
                    for t in 0..t_out {
                        let off = t * stride * c_in;
                        let patch = &mut s[off..off + span];
                        for o in 0..c_out {
                            let go = g[t * c_out + o];
                            if go != 0.0 {
                                axpy(go, &w[o * span..(o + 1) * span], patch);
                            }
                        }
                    }
                });
                acc(*weight, &mut |s| {
                    for t in 0..t_out {
                        let off = t * stride * c_in;
                        let patch = &x[off..off + span];
                        for o in 0..c_out {
                            let go = g[t * c_out + o];
                            if go != 0.0 {
                                axpy(go, patch, &mut s[o * span..(o + 1) * span]);
                            }
                        }
                    }
                });
            }
            Op::MeanAxis(a, axis) | Op::SumAxis(a, axis) => {
                let ta = &self.nodes[*a].value;
                let (r, c) = (ta.shape()[0], ta.shape()[1]);
                let mean = matches!(node.op, Op::MeanAxis(..));
                let div = if !mean {
                    1.0
                } else if *axis == 0 {
                    r as f64
                } else {
                    c as f64
                };
                acc(*a, &mut |s| {
                    for i in 0..r {
                        for j in 0..c {
                            s[i * c + j] += if *axis == 0 { g[j] } else { g[i] } / div;
                        }
                    }
                });
            }
            Op::SumAll(a) => acc(*a, &mut |s| s.iter_mut().for_each(|v| *v += g[0])),
            Op::MeanAll(a) => {
                let n = self.nodes[*a].value.numel() as f64;
                acc(*a, &mut |s| s.iter_mut().for_each(|v| *v += g[0] / n));
            }
            Op::ArgReduce(a, idx) => acc(*a, &mut |s| s[*idx] += g[0]),
            Op::Cumsum(a) => {
                acc(*a, &mut |s| {
                    let mut run = 0.0;
                    for i in (0..s.len()).rev() {
                        run += g[i];
                        s[i] += run;
                    }
                });
            }
            Op::CosineRows(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let r = ta.rows();
                let mut ga = vec![0.0; ta.numel()];
                let mut gb = vec![0.0; tb.numel()];
                let c = ta.cols();
                for i in 0..r {
                    cosine_pair_grad(ta.row(i), tb.row(i), g[i], &mut ga[i * c..(i + 1) * c], &mut gb[i * c..(i + 1) * c]);
                }
                acc(*a, &mut |s| axpy(1.0, &ga, s));
                acc(*b, &mut |s| axpy(1.0, &gb, s));
            }
            Op::CosineMatrix(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (n, m, p) = (ta.rows(), tb.rows(), ta.cols());
                let mut ga = vec![0.0; ta.numel()];
                let mut gb = vec![0.0; tb.numel()];
                for i in 0..n {
                    for j in 0..m {
                        let gij = g[i * m + j];
                        if gij != 0.0 {
                            let (lo, hi) = (&mut ga[i * p..(i + 1) * p], &mut gb[j * p..(j + 1) * p]);
                            cosine_pair_grad(ta.row(i), tb.row(j), gij, lo, hi);
                        }
                    }
                }
                acc(*a, &mut |s| axpy(1.0, &ga, s));
                acc(*b, &mut |s| axpy(1.0, &gb, s));
            }
            Op::SoftmaxCe { logits, targets } => {
                let tl = &self.nodes[*logits].value;
                let c = tl.cols();
                acc(*logits, &mut |s| {
                    for (i, &t) in targets.iter().enumerate() {
                        let row = tl.row(i);
                        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
                        for j in 0..c {
                            let pj = (row[j] - mx).exp() / z;
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            s[i * c + j] += g[i] * (pj - onehot);
                        }
                    }
                });
            }
            Op::Shift(a, k) => {
                let n = g.len() as isize;
                acc(*a, &mut |s| {
                    for t in 0..n {
                        let src = t + k;
                        if (0..n).contains(&src) {
                            s[src as usize] += g[t as usize];
                        }
                    }
                });
            }
            Op::Pad(a, front) => {
                let n = self.nodes[*a].value.numel();
                acc(*a, &mut |s| axpy(1.0, &g[*front..*front + n], s));
            }
            Op::Narrow { input, start } => {
                let inner: usize = self.nodes[*input].value.shape()[1..].iter().product();
                let off = start * inner;
                acc(*input, &mut |s| axpy(1.0, g, &mut s[off..off + g.len()]));
            }
            Op::Concat(ids) => {
                let mut off = 0;
                for &i in ids {
                    let n = self.nodes[i].value.numel();
                    acc(i, &mut |s| axpy(1.0, &g[off..off + n], s));
                    off += n;
                }
            }
            Op::Gather(a, flat) => {
                acc(*a, &mut |s| {
                    for (k, &i) in flat.iter().enumerate() {
                        s[i] += g[k];
                    }
                });
            }
            Op::SubOuter(a) => {
                let m = node.value.shape()[1];
                acc(*a, &mut |s| {
                    for (t, v) in s.iter_mut().enumerate() {
                        *v += g[t * m..(t + 1) * m].iter().sum::<f64>();
                    }
                });
            }
            Op::DivCols(x, sv) => {
                let (tx, ts) = (&self.nodes[*x].value, &self.nodes[*sv].value);
                let (n, m) = (tx.shape()[0], tx.shape()[1]);
                let (xd, sd) = (tx.data(), ts.data());
                acc(*x, &mut |s| {
                    for i in 0..n {
                        for j in 0..m {
                            s[i * m + j] += g[i * m + j] / sd[j];
                        }
                    }
                });
                acc(*sv, &mut |s| {
                    for i in 0..n {
                        for j in 0..m {
                            s[j] -= g[i * m + j] * xd[i * m + j] / (sd[j] * sd[j]);
                        }
                    }
                });
            }
            Op::Broadcast(a) => acc(*a, &mut |s| s[0] += g.iter().sum::<f64>()),
        }
    }
}

/// Accumulates `g * d sim(x, y) / dx` and `/ dy` for the eps-guarded cosine.
fn cosine_pair_grad(x: &[f64], y: &[f64], g: f64, gx: &mut [f64], gy: &mut [f64]) {
    let (nx, ny) = (norm(x), norm(y));
    let xy = dot(x, y);
    let den = nx * ny + COSINE_EPS;
    // sim = xy / den; d den/dx = ny * x / nx
    let a = g / den;
    let bx = g * xy * ny / (nx * den * den);
    let by = g * xy * nx / (ny * den * den);
    for i in 0..x.len() {
        gx[i] += a * y[i] - bx * x[i];
        gy[i] += a * x[i] - by * y[i];
    }
}
