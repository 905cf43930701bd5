//! Wengert tape: every op appends a node, `backward` walks the nodes in
//! reverse creation order, which is a valid reverse topological order.

use std::collections::HashMap;

use crate::{GradMap, ParamStore, Real, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    Softplus(Var),
    Softmax(Var),
    MaskFill(Var, Vec<bool>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    Transpose(Var),
    MeanLastDim(Var),
    MeanRows(Var),
    Sum(Var),
    RepeatRows(Var),
    Reshape(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<T>,
        count: usize,
    },
    Mse(Var, Var),
    GatedScan {
        forget: Var,
        input: Var,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a computation for reverse-mode differentiation.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    params: HashMap<String, Var>,
    param_order: Vec<(String, Var)>,
    grad_enabled: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

const LN_EPS: f64 = 1e-5;

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (x, y) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = T::zero();
    for i in chunks * 8..a.len() {
        s += a[i] * b[i];
    }
    (acc[0] + acc[4]) + (acc[1] + acc[5]) + (acc[2] + acc[6]) + (acc[3] + acc[7]) + s
}

#[inline]
fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn gelu_parts<T: Real>(x: T) -> (T, T) {
    // tanh approximation
    let s = T::of((2.0 / std::f64::consts::PI).sqrt());
    let c = T::of(0.044715);
    let half = T::of(0.5);
    let inner = s * (x + c * x * x * x);
    let t = inner.tanh();
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t)
        + half * x * (T::one() - t * t) * s * (T::one() + T::of(3.0) * c * x * x);
    (y, dy)
}

fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            param_order: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that never records gradient requirements; used for inference.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad =
            self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    /// Differentiable input not owned by a store.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true)
    }

    /// Binds the store entry `name`. Repeated calls return the same handle.
    /// The leaf requires a gradient only if the store marks it trainable.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store.get(name)?.clone();
        let v = self.push_leaf(value, store.is_trainable(name));
        self.params.insert(name.to_string(), v);
        self.param_order.push((name.to_string(), v));
        Ok(v)
    }

    fn two_d(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(TensorError::Contract(format!(
                "{op} expects a matrix, got shape {s:?}"
            )));
        }
        Ok((s[0], s[1]))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.two_d(a, "matmul")?;
        let (k2, n) = self.two_d(b, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                axpy(ad[i * k + p], &bd[p * n..(p + 1) * n], orow);
            }
        }
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.two_d(a, "matmul_t")?;
        let (n, k2) = self.two_d(b, "matmul_t")?;
        if k != k2 {
            return Err(shape_err("matmul_t", self.shape(a), self.shape(b)));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let arow = &ad[i * k..(i + 1) * k];
            for j in 0..n {
                out[i * n + j] = dot(arow, &bd[j * k..(j + 1) * k]);
            }
        }
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMulT(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.two_d(x, "transpose")?;
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xd[i * c + j];
            }
        }
        Ok(self.push(Tensor::new([c, r], out)?, Op::Transpose(x), &[x]))
    }

    // ---- elementwise ----

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds `bias` (shape `[c]`) to every row of `x` (trailing dim `c`).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = self.value(x).cols();
        if self.shape(bias) != [c] {
            return Err(shape_err("add_bias", self.shape(x), self.shape(bias)));
        }
        let bd = self.value(bias).data();
        let xv = self.value(x);
        let mut data = xv.data().to_vec();
        for row in data.chunks_exact_mut(c) {
            for (o, &b) in row.iter_mut().zip(bd) {
                *o += b;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(value, Op::AddBias(x, bias), &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let s = T::of(s);
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v * s).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Scale(x, s), &[x]))
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(value, op, &[x]))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Tanh(x), |v| v.tanh())
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Gelu(x), |v| gelu_parts(v).0)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Softplus(x), softplus)
    }

    /// Row-wise softmax over the trailing dimension, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if !xv.is_finite() {
            return Err(TensorError::Numeric { op: "softmax" });
        }
        let c = xv.cols();
        let mut data = xv.data().to_vec();
        for row in data.chunks_exact_mut(c) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Softmax(x), &[x]))
    }

    /// Replaces entries where `mask` is true with `fill`; those entries pass no gradient.
    pub fn mask_fill(&mut self, x: Var, mask: Vec<bool>, fill: f64) -> Result<Var> {
        let xv = self.value(x);
        if mask.len() != xv.numel() {
            return Err(shape_err("mask_fill", xv.shape(), &[mask.len()]));
        }
        let fill = T::of(fill);
        let data = xv
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| if m { fill } else { v })
            .collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(value, Op::MaskFill(x, mask), &[x]))
    }

    /// Additive causal mask for a `[rows × cols]` score matrix whose row `i`
    /// corresponds to key position `i + cols - rows`.
    pub fn causal_mask(&mut self, scores: Var) -> Result<Var> {
        let (r, c) = self.two_d(scores, "causal_mask")?;
        let offset = c - r.min(c);
        let mask = (0..r * c).map(|k| (k % c) > (k / c) + offset).collect();
        self.mask_fill(scores, mask, -1e9)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let c = self.value(x).cols();
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            return Err(shape_err("layer_norm", self.shape(x), self.shape(gain)));
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = xv.rows();
        let mut xhat = vec![T::zero(); xv.numel()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.numel()];
        let n = T::of(c as f64);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + T::of(LN_EPS)).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    // ---- indexing and layout ----

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.two_d(table, "embedding")?;
        if ids.is_empty() {
            return Err(TensorError::Contract("embedding of zero ids".into()));
        }
        let td = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::Index {
                    op: "embedding",
                    index: id,
                    size: v,
                });
            }
            out.extend_from_slice(&td[id * d..(id + 1) * d]);
        }
        let value = Tensor::new([ids.len(), d], out)?;
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Stacks matrices along the first dimension.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat of nothing".into()))?;
        let (_, c) = self.two_d(first, "concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c2) = self.two_d(p, "concat_rows")?;
            if c2 != c {
                return Err(shape_err("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new([rows, c], data)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Joins matrices along the trailing dimension.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat of nothing".into()))?;
        let (r, _) = self.two_d(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r2, c) = self.two_d(p, "concat_cols")?;
            if r2 != r {
                return Err(shape_err("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let value = Tensor::new([r, total], data)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.two_d(x, "slice_rows")?;
        if len == 0 || start + len > r {
            return Err(TensorError::Index {
                op: "slice_rows",
                index: start + len,
                size: r,
            });
        }
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let value = Tensor::new([len, c], data)?;
        Ok(self.push(value, Op::SliceRows { x, start }, &[x]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.two_d(x, "slice_cols")?;
        if len == 0 || start + len > c {
            return Err(TensorError::Index {
                op: "slice_cols",
                index: start + len,
                size: c,
            });
        }
        let xd = self.value(x).data();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&xd[i * c + start..i * c + start + len]);
        }
        let value = Tensor::new([r, len], data)?;
        Ok(self.push(value, Op::SliceCols { x, start }, &[x]))
    }

    /// Tiles a `[c]` or `[1×c]` value into `[n×c]`.
    pub fn repeat_rows(&mut self, x: Var, n: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rows() != 1 || n == 0 {
            return Err(TensorError::Contract(format!(
                "repeat_rows expects a single row, got {:?}",
                xv.shape()
            )));
        }
        let c = xv.cols();
        let data = xv.data().repeat(n);
        let value = Tensor::new([n, c], data)?;
        Ok(self.push(value, Op::RepeatRows(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    // ---- reductions ----

    /// Mean over the trailing dimension: `[.., c] -> [..]` (`[r]` for matrices).
    pub fn mean_lastdim(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = T::of(xv.cols() as f64);
        let data: Vec<T> = (0..xv.rows())
            .map(|r| xv.row(r).iter().copied().sum::<T>() / c)
            .collect();
        let shape = if xv.shape().len() > 1 {
            xv.shape()[..xv.shape().len() - 1].to_vec()
        } else {
            Vec::new()
        };
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::MeanLastDim(x), &[x]))
    }

    /// Mean over rows: `[r×c] -> [1×c]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.two_d(x, "mean_rows")?;
        let xv = self.value(x);
        let mut data = vec![T::zero(); c];
        for i in 0..r {
            for (o, &v) in data.iter_mut().zip(xv.row(i)) {
                *o += v;
            }
        }
        let inv = T::one() / T::of(r as f64);
        data.iter_mut().for_each(|v| *v *= inv);
        let value = Tensor::new([1, c], data)?;
        Ok(self.push(value, Op::MeanRows(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum::<T>();
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), &[x]))
    }

    // ---- losses ----

    /// Mean token negative log-likelihood over rows where `mask` is true.
    /// Returns zero when every row is masked out.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (l, v) = self.two_d(logits, "cross_entropy")?;
        if targets.len() != l || mask.len() != l {
            return Err(shape_err(
                "cross_entropy",
                &[l, v],
                &[targets.len(), mask.len()],
            ));
        }
        let lv = self.value(logits);
        let mut probs = vec![T::zero(); l * v];
        let mut total = T::zero();
        let mut count = 0;
        for i in 0..l {
            if !mask[i] {
                continue;
            }
            if targets[i] >= v {
                return Err(TensorError::Index {
                    op: "cross_entropy",
                    index: targets[i],
                    size: v,
                });
            }
            let row = lv.row(i);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            if !max.is_finite() {
                return Err(TensorError::Numeric { op: "cross_entropy" });
            }
            let mut sum = T::zero();
            for j in 0..v {
                let e = (row[j] - max).exp();
                probs[i * v + j] = e;
                sum += e;
            }
            for j in 0..v {
                probs[i * v + j] /= sum;
            }
            total += sum.ln() + max - row[targets[i]];
            count += 1;
        }
        let loss = if count == 0 {
            T::zero()
        } else {
            total / T::of(count as f64)
        };
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            mask: mask.to_vec(),
            probs,
            count,
        };
        Ok(self.push(Tensor::scalar(loss), op, &[logits]))
    }

    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape(pred, target, "mse")?;
        let (p, t) = (self.value(pred).data(), self.value(target).data());
        let n = T::of(p.len() as f64);
        let s = p.iter().zip(t).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>() / n;
        Ok(self.push(Tensor::scalar(s), Op::Mse(pred, target), &[pred, target]))
    }

    // ---- recurrences ----

    /// Elementwise gated scan over rows: `h_t = forget_t ⊙ h_{t-1} + input_t`, `h_{-1} = 0`.
    pub fn gated_scan(&mut self, forget: Var, input: Var) -> Result<Var> {
        self.same_shape(forget, input, "gated_scan")?;
        let (t_len, d) = self.two_d(forget, "gated_scan")?;
        let (f, u) = (self.value(forget).data(), self.value(input).data());
        let mut h = vec![T::zero(); t_len * d];
        for t in 0..t_len {
            for j in 0..d {
                let prev = if t == 0 { T::zero() } else { h[(t - 1) * d + j] };
                h[t * d + j] = f[t * d + j] * prev + u[t * d + j];
            }
        }
        let value = Tensor::new([t_len, d], h)?;
        Ok(self.push(value, Op::GatedScan { forget, input }, &[forget, input]))
    }

    // ---- backward ----

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward on non-scalar of shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            params: self.param_order.clone(),
        })
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        // Accumulates into the gradient buffer of `v` when it needs one.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            let n = &self.nodes[v.0];
            if !n.requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); n.value.numel()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                acc(*a, &mut |ga| {
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            ga[r * k + p] += dot(grow, &bd[p * n..(p + 1) * n]);
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            axpy(ad[r * k + p], grow, &mut gb[p * n..(p + 1) * n]);
                        }
                    }
                });
            }
            Op::MatMulT(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                acc(*a, &mut |ga| {
                    for r in 0..m {
                        for j in 0..n {
                            axpy(g[r * n + j], &bd[j * k..(j + 1) * k], &mut ga[r * k..(r + 1) * k]);
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for r in 0..m {
                        for j in 0..n {
                            axpy(g[r * n + j], &ad[r * k..(r + 1) * k], &mut gb[j * k..(j + 1) * k]);
                        }
                    }
                });
            }
            Op::Transpose(x) => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                acc(*x, &mut |gx| {
                    for a in 0..r {
                        for b in 0..c {
                            gx[a * c + b] += g[b * r + a];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| axpy(T::one(), g, ga));
                acc(*b, &mut |gb| axpy(T::one(), g, gb));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| axpy(T::one(), g, ga));
                acc(*b, &mut |gb| axpy(-T::one(), g, gb));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |ga| {
                    for k in 0..g.len() {
                        ga[k] += g[k] * bd[k];
                    }
                });
                acc(*b, &mut |gb| {
                    for k in 0..g.len() {
                        gb[k] += g[k] * ad[k];
                    }
                });
            }
            Op::AddBias(x, b) => {
                acc(*x, &mut |gx| axpy(T::one(), g, gx));
                let c = self.value(*b).numel();
                acc(*b, &mut |gb| {
                    for row in g.chunks_exact(c) {
                        axpy(T::one(), row, gb);
                    }
                });
            }
            Op::Scale(x, s) => acc(*x, &mut |gx| axpy(*s, g, gx)),
            Op::Sigmoid(x) => acc(*x, &mut |gx| {
                for k in 0..g.len() {
                    gx[k] += g[k] * out[k] * (T::one() - out[k]);
                }
            }),
            Op::Tanh(x) => acc(*x, &mut |gx| {
                for k in 0..g.len() {
                    gx[k] += g[k] * (T::one() - out[k] * out[k]);
                }
            }),
            Op::Gelu(x) => {
                let xd = self.value(*x).data();
                acc(*x, &mut |gx| {
                    for k in 0..g.len() {
                        gx[k] += g[k] * gelu_parts(xd[k]).1;
                    }
                });
            }
            Op::Softplus(x) => {
                let xd = self.value(*x).data();
                acc(*x, &mut |gx| {
                    for k in 0..g.len() {
                        gx[k] += g[k] * sigmoid(xd[k]);
                    }
                });
            }
            Op::Softmax(x) => {
                let c = node.value.cols();
                acc(*x, &mut |gx| {
                    for (r, (grow, yrow)) in g.chunks_exact(c).zip(out.chunks_exact(c)).enumerate() {
                        let s = dot(grow, yrow);
                        for j in 0..c {
                            gx[r * c + j] += yrow[j] * (grow[j] - s);
                        }
                    }
                });
            }
            Op::MaskFill(x, mask) => acc(*x, &mut |gx| {
                for k in 0..g.len() {
                    if !mask[k] {
                        gx[k] += g[k];
                    }
                }
            }),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let c = node.value.cols();
                let gd = self.value(*gain).data();
                let n = T::of(c as f64);
                acc(*x, &mut |gx| {
                    for r in 0..rstd.len() {
                        let (grow, hrow) = (&g[r * c..(r + 1) * c], &xhat[r * c..(r + 1) * c]);
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..c {
                            let dh = grow[j] * gd[j];
                            m1 += dh;
                            m2 += dh * hrow[j];
                        }
                        m1 /= n;
                        m2 /= n;
                        for j in 0..c {
                            let dh = grow[j] * gd[j];
                            gx[r * c + j] += rstd[r] * (dh - m1 - hrow[j] * m2);
                        }
                    }
                });
                acc(*gain, &mut |gg| {
                    for (grow, hrow) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for j in 0..c {
                            gg[j] += grow[j] * hrow[j];
                        }
                    }
                });
                acc(*bias, &mut |gb| {
                    for grow in g.chunks_exact(c) {
                        axpy(T::one(), grow, gb);
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = node.value.cols();
                acc(*table, &mut |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(T::one(), &g[r * d..(r + 1) * d], &mut gt[id * d..(id + 1) * d]);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    acc(p, &mut |gp| axpy(T::one(), &g[offset..offset + n], gp));
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut col = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    acc(p, &mut |gp| {
                        for (r, grow) in g.chunks_exact(total).enumerate() {
                            axpy(T::one(), &grow[col..col + w], &mut gp[r * w..(r + 1) * w]);
                        }
                    });
                    col += w;
                }
            }
            Op::SliceRows { x, start } => {
                let c = node.value.cols();
                acc(*x, &mut |gx| axpy(T::one(), g, &mut gx[start * c..start * c + g.len()]));
            }
            Op::SliceCols { x, start } => {
                let w = node.value.cols();
                let c = self.value(*x).cols();
                acc(*x, &mut |gx| {
                    for (r, grow) in g.chunks_exact(w).enumerate() {
                        axpy(T::one(), grow, &mut gx[r * c + start..r * c + start + w]);
                    }
                });
            }
            Op::RepeatRows(x) => {
                let c = node.value.cols();
                acc(*x, &mut |gx| {
                    for grow in g.chunks_exact(c) {
                        axpy(T::one(), grow, gx);
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |gx| axpy(T::one(), g, gx)),
            Op::MeanLastDim(x) => {
                let c = self.value(*x).cols();
                let inv = T::one() / T::of(c as f64);
                acc(*x, &mut |gx| {
                    for (r, &gr) in g.iter().enumerate() {
                        for v in &mut gx[r * c..(r + 1) * c] {
                            *v += gr * inv;
                        }
                    }
                });
            }
            Op::MeanRows(x) => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let inv = T::one() / T::of(r as f64);
                acc(*x, &mut |gx| {
                    for row in gx.chunks_exact_mut(c) {
                        axpy(inv, g, row);
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |gx| gx.iter_mut().for_each(|v| *v += g[0])),
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let v = node_cols(&self.nodes[logits.0].value);
                let scale = g[0] / T::of(*count as f64);
                acc(*logits, &mut |gl| {
                    for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                        if !m {
                            continue;
                        }
                        axpy(scale, &probs[r * v..(r + 1) * v], &mut gl[r * v..(r + 1) * v]);
                        gl[r * v + t] -= scale;
                    }
                });
            }
            Op::Mse(p, t) => {
                let (pd, td) = (self.value(*p).data(), self.value(*t).data());
                let s = T::of(2.0) * g[0] / T::of(pd.len() as f64);
                acc(*p, &mut |gp| {
                    for k in 0..pd.len() {
                        gp[k] += s * (pd[k] - td[k]);
                    }
                });
                acc(*t, &mut |gt| {
                    for k in 0..pd.len() {
                        gt[k] -= s * (pd[k] - td[k]);
                    }
                });
            }
            Op::GatedScan { forget, input } => {
                let d = node.value.cols();
                let t_len = node.value.rows();
                let f = self.value(*forget).data();
                // carry_t = dL/dh_t including the path through h_{t+1}
                let mut carry = vec![T::zero(); t_len * d];
                for t in (0..t_len).rev() {
                    for j in 0..d {
                        let mut c = g[t * d + j];
                        if t + 1 < t_len {
                            c += f[(t + 1) * d + j] * carry[(t + 1) * d + j];
                        }
                        carry[t * d + j] = c;
                    }
                }
                acc(*forget, &mut |gf| {
                    for t in 1..t_len {
                        for j in 0..d {
                            gf[t * d + j] += carry[t * d + j] * out[(t - 1) * d + j];
                        }
                    }
                });
                acc(*input, &mut |gu| axpy(T::one(), &carry, gu));
            }
        }
    }
}

fn node_cols<T: Real>(t: &Tensor<T>) -> usize {
    t.cols()
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(String, Var)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to `v`, or `None` if no gradient reached it.
    pub fn wrt(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("grad shape"))
    }

    /// Gradients of every trainable parameter that the loss depends on.
    pub fn params(&self) -> GradMap<T> {
        self.params
            .iter()
            .filter_map(|(name, v)| self.wrt(*v).map(|g| (name.clone(), g)))
            .collect()
    }
}
