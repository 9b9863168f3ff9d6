//! Operation graph recorded during the forward pass and replayed in reverse.
//!
//! Nodes are appended in creation order, so every parent has a smaller index
//! than its child and reverse index order is a valid topological order.
//! `backward` therefore visits each node exactly once.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{shape_err, AutodiffError, Result};
use crate::params::{Grads, ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Transpose {
        a: Var,
        rows: usize,
        cols: usize,
    },
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias {
        a: Var,
        bias: Var,
        cols: usize,
    },
    Affine {
        a: Var,
        scale: T,
    },
    Tanh(Var),
    Sigmoid(Var),
    Gelu(Var),
    Abs(Var),
    Concat(Vec<Var>),
    ConcatCols {
        parts: Vec<Var>,
        rows: usize,
    },
    SelectCols {
        a: Var,
        cols: Vec<usize>,
        in_cols: usize,
    },
    SelectRows {
        a: Var,
        rows: Vec<usize>,
        cols: usize,
    },
    Sum(Var),
    Softmax(Var),
    SoftmaxRows {
        a: Var,
        cols: usize,
    },
    LayerNormRows {
        a: Var,
        gamma: Var,
        beta: Var,
        cols: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Dropout {
        a: Var,
        mask: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        label: usize,
        probs: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    grad: Option<Vec<T>>,
    op: Op<T>,
}

/// Reverse-mode differentiation tape.
///
/// Parameters are copied in on first use via [`Graph::param`]; after
/// [`Graph::backward`] their gradients can be folded into a [`Grads`] buffer
/// with [`Graph::accumulate_param_grads`]. Calling `backward` twice without
/// [`Graph::reset_grads`] is an error.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    backward_done: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    // ── Accessors ────────────────────────────────────────────────────

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape invariant")
    }

    /// Gradient with zeros substituted for unreachable nodes.
    pub fn grad_or_zeros(&self, v: Var) -> Vec<T> {
        self.grad(v)
            .map(<[T]>::to_vec)
            .unwrap_or_else(|| vec![T::zero(); self.value(v).len()])
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.nodes[v.0].shape[..] {
            [r, c] => Ok((r, c)),
            ref s => shape_err(op, s, &[0, 0]),
        }
    }

    // ── Leaves ───────────────────────────────────────────────────────

    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t)
    }

    /// Node for a stored parameter, created once per graph.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let t = store.get(id);
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Param(id));
        self.params.insert(id, v);
        v
    }

    // ── Linear algebra ───────────────────────────────────────────────

    /// Matrix product. A 1-D left operand is a row vector and a 1-D right
    /// operand a column vector; the corresponding output dim is dropped.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (m, k, a_vec) = match sa[..] {
            [k] => (1, k, true),
            [m, k] => (m, k, false),
            _ => return shape_err("matmul", &sa, &sb),
        };
        let (k2, n, b_vec) = match sb[..] {
            [k] => (k, 1, true),
            [k, n] => (k, n, false),
            _ => return shape_err("matmul", &sa, &sb),
        };
        if k != k2 {
            return shape_err("matmul", &sa, &sb);
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.value(a), false, self.value(b), false, T::zero(), &mut out);
        let shape = match (a_vec, b_vec) {
            (false, false) => vec![m, n],
            (false, true) => vec![m],
            (true, false) => vec![n],
            (true, true) => vec![1],
        };
        Ok(self.push(
            shape,
            out,
            Op::MatMul {
                a,
                b,
                m,
                k,
                n,
                trans_b: false,
            },
        ))
    }

    /// `a · bᵀ` for 2-D `a: [m, k]` and `b: [n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_nt")?;
        let (n, k2) = self.dims2(b, "matmul_nt")?;
        if k != k2 {
            return shape_err("matmul_nt", self.shape(a), self.shape(b));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.value(a), false, self.value(b), true, T::zero(), &mut out);
        Ok(self.push(
            vec![m, n],
            out,
            Op::MatMul {
                a,
                b,
                m,
                k,
                n,
                trans_b: true,
            },
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.dims2(a, "transpose")?;
        let src = self.value(a);
        let mut out = vec![T::zero(); rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = src[i * cols + j];
            }
        }
        Ok(self.push(vec![cols, rows], out, Op::Transpose { a, rows, cols }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() || shape.contains(&0) {
            return shape_err("reshape", self.shape(a), shape);
        }
        let value = self.value(a).to_vec();
        Ok(self.push(shape.to_vec(), value, Op::Reshape(a)))
    }

    // ── Elementwise ──────────────────────────────────────────────────

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<(Vec<usize>, Vec<T>)> {
        if self.shape(a) != self.shape(b) {
            return shape_err(name, self.shape(a), self.shape(b));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok((self.shape(a).to_vec(), out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(shape, out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(shape, out, Op::Sub(a, b)))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(shape, out, Op::Mul(a, b)))
    }

    /// Adds a `[cols]` vector to every row of a `[rows, cols]` matrix, or to
    /// a `[cols]` vector.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let cols = *self.shape(a).last().expect("non-empty shape");
        if self.shape(a).len() > 2 || self.shape(bias) != [cols] {
            return shape_err("add_row_bias", self.shape(a), self.shape(bias));
        }
        let b = self.value(bias);
        let out = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + b[i % cols])
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::AddRowBias { a, bias, cols }))
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: T, shift: T) -> Var {
        let out = self.value(a).iter().map(|&x| scale * x + shift).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Affine { a, scale })
    }

    pub fn scale(&mut self, a: Var, scale: T) -> Var {
        self.affine(a, scale, T::zero())
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, op)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, T::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let c = T::of(GELU_C);
        let k = T::of(GELU_A);
        let half = T::of(0.5);
        self.unary(
            a,
            move |x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()),
            Op::Gelu(a),
        )
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, T::abs, Op::Abs(a))
    }

    // ── Structural ───────────────────────────────────────────────────

    /// Concatenates 1-D tensors (or scalars) into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(AutodiffError::Usage("concat of zero tensors".into()));
        }
        let mut out = Vec::new();
        for &p in parts {
            if self.shape(p).len() != 1 {
                return shape_err("concat", self.shape(p), &[0]);
            }
            out.extend_from_slice(self.value(p));
        }
        Ok(self.push(vec![out.len()], out, Op::Concat(parts.to_vec())))
    }

    /// Side-by-side concatenation of 2-D tensors with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(AutodiffError::Usage("concat_cols of zero tensors".into()));
        };
        let (rows, _) = self.dims2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_cols")?;
            if r != rows {
                return shape_err("concat_cols", self.shape(first), self.shape(p));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![T::zero(); rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p);
            for i in 0..rows {
                out[i * total + offset..i * total + offset + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        Ok(self.push(
            vec![rows, total],
            out,
            Op::ConcatCols {
                parts: parts.to_vec(),
                rows,
            },
        ))
    }

    /// Gathers columns of a 2-D tensor in the given order.
    pub fn select_cols(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let (rows, in_cols) = self.dims2(a, "select_cols")?;
        if cols.is_empty() || cols.iter().any(|&c| c >= in_cols) {
            return Err(AutodiffError::Usage(format!(
                "select_cols: indices {cols:?} invalid for {in_cols} columns"
            )));
        }
        let src = self.value(a);
        let w = cols.len();
        let mut out = vec![T::zero(); rows * w];
        for i in 0..rows {
            for (j, &c) in cols.iter().enumerate() {
                out[i * w + j] = src[i * in_cols + c];
            }
        }
        Ok(self.push(
            vec![rows, w],
            out,
            Op::SelectCols {
                a,
                cols: cols.to_vec(),
                in_cols,
            },
        ))
    }

    /// Contiguous slice `start..end` of a 1-D tensor.
    pub fn slice(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let n = match self.shape(a) {
            [n] => *n,
            s => return shape_err("slice", s, &[end - start]),
        };
        if start >= end || end > n {
            return shape_err("slice", &[n], &[start, end]);
        }
        let row = self.reshape(a, &[1, n])?;
        let cols: Vec<usize> = (start..end).collect();
        let sel = self.select_cols(row, &cols)?;
        self.reshape(sel, &[end - start])
    }

    /// Gathers rows of a 2-D tensor (repeats allowed), e.g. an embedding lookup.
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (in_rows, cols) = self.dims2(a, "select_rows")?;
        if rows.is_empty() || rows.iter().any(|&r| r >= in_rows) {
            return Err(AutodiffError::Usage(format!(
                "select_rows: index out of range for {in_rows} rows"
            )));
        }
        let src = self.value(a);
        let mut out = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            out.extend_from_slice(&src[r * cols..(r + 1) * cols]);
        }
        Ok(self.push(
            vec![rows.len(), cols],
            out,
            Op::SelectRows {
                a,
                rows: rows.to_vec(),
                cols,
            },
        ))
    }

    // ── Reductions and normalizations ────────────────────────────────

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        self.push(vec![1], vec![s], Op::Sum(a))
    }

    /// Softmax over all entries, with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let out = softmax_slice(self.value(a), None).ok_or(AutodiffError::NonFinite("softmax"))?;
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Softmax(a)))
    }

    /// Row-wise softmax of a `[rows, cols]` matrix. Columns with
    /// `keep[j] == false` get probability exactly zero in every row.
    pub fn softmax_rows(&mut self, a: Var, keep: Option<&[bool]>) -> Result<Var> {
        let (rows, cols) = self.dims2(a, "softmax_rows")?;
        if let Some(k) = keep {
            if k.len() != cols {
                return shape_err("softmax_rows", &[rows, cols], &[k.len()]);
            }
            if !k.iter().any(|&x| x) {
                return Err(AutodiffError::Usage("softmax_rows: every column masked".into()));
            }
        }
        let src = self.value(a);
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            let row =
                softmax_slice(&src[i * cols..(i + 1) * cols], keep).ok_or(AutodiffError::NonFinite("softmax_rows"))?;
            out.extend(row);
        }
        Ok(self.push(vec![rows, cols], out, Op::SoftmaxRows { a, cols }))
    }

    /// Per-row layer normalization followed by the affine map `gamma * x̂ + beta`.
    pub fn layer_norm_rows(&mut self, a: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let cols = *self.shape(a).last().expect("non-empty shape");
        if self.shape(a).len() > 2 || self.shape(gamma) != [cols] || self.shape(beta) != [cols] {
            return shape_err("layer_norm_rows", self.shape(a), self.shape(gamma));
        }
        let rows = self.value(a).len() / cols;
        let n = T::of(cols as f64);
        let eps = T::of(eps);
        let src = self.value(a);
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut xhat = Vec::with_capacity(rows * cols);
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            let row = &src[i * cols..(i + 1) * cols];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
            let istd = T::one() / (var + eps).sqrt();
            inv_std.push(istd);
            for (j, &x) in row.iter().enumerate() {
                let h = (x - mean) * istd;
                xhat.push(h);
                out.push(g[j] * h + b[j]);
            }
        }
        let shape = self.shape(a).to_vec();
        Ok(self.push(
            shape,
            out,
            Op::LayerNormRows {
                a,
                gamma,
                beta,
                cols,
                xhat,
                inv_std,
            },
        ))
    }

    /// Inverted dropout. Identity when `train` is false or `rate` is zero.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, train: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(AutodiffError::Usage(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !train || rate == 0.0 {
            return Ok(a);
        }
        let keep = T::of(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(a).len())
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let out = self.value(a).iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Dropout { a, mask }))
    }

    /// `-log softmax(logits)[label]` for a 1-D logit vector.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let n = match self.shape(logits) {
            [n] => *n,
            s => return shape_err("cross_entropy", s, &[label]),
        };
        if label >= n {
            return Err(AutodiffError::Usage(format!(
                "label {label} out of range for {n} classes"
            )));
        }
        let x = self.value(logits);
        let loss = cross_entropy_value(x, label).ok_or(AutodiffError::NonFinite("cross_entropy"))?;
        let probs = softmax_slice(x, None).ok_or(AutodiffError::NonFinite("cross_entropy"))?;
        Ok(self.push(vec![1], vec![loss], Op::CrossEntropy { logits, label, probs }))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Populates gradients of every node reachable from the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(AutodiffError::Usage(format!(
                "backward needs a scalar root, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        if self.backward_done {
            return Err(AutodiffError::Usage(
                "backward already ran on this graph; call reset_grads first".into(),
            ));
        }
        self.backward_done = true;
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            let Some(g) = node.grad.take() else { continue };
            backprop_node(before, node, &g);
            node.grad = Some(g);
        }
        Ok(())
    }

    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    /// Adds `scale * dL/dparam` for every parameter used in this graph.
    pub fn accumulate_param_grads(&self, grads: &mut Grads<T>, scale: T) -> Result<()> {
        for node in &self.nodes {
            if let (Op::Param(id), Some(g)) = (&node.op, &node.grad) {
                grads.accumulate(*id, g, scale)?;
            }
        }
        Ok(())
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

/// Softmax over `x`, skipping entries with `keep[i] == false` (they get 0).
/// Returns `None` on NaN input.
pub fn softmax_slice<T: Real>(x: &[T], keep: Option<&[bool]>) -> Option<Vec<T>> {
    let kept = |i: usize| keep.is_none_or(|k| k[i]);
    let mut max = T::neg_infinity();
    for (i, &v) in x.iter().enumerate() {
        if v.is_nan() {
            return None;
        }
        if kept(i) && v > max {
            max = v;
        }
    }
    if !max.is_finite() {
        return None;
    }
    let mut out: Vec<T> = x
        .iter()
        .enumerate()
        .map(|(i, &v)| if kept(i) { (v - max).exp() } else { T::zero() })
        .collect();
    let total: T = out.iter().copied().sum();
    for v in &mut out {
        *v = *v / total;
    }
    Some(out)
}

/// Numerically careful `-log softmax(x)[label]`: exactly `ln n` for uniform
/// logits and `log1p`-accurate when the label holds nearly all the mass.
pub fn cross_entropy_value<T: Real>(x: &[T], label: usize) -> Option<T> {
    if x.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let (imax, &max) = x
        .iter()
        .enumerate()
        .fold((0, &x[0]), |best, (i, v)| if *v > *best.1 { (i, v) } else { best });
    let rest: T = x
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != imax)
        .map(|(_, &v)| (v - max).exp())
        .sum();
    let log_total = if rest < T::of(0.5) {
        rest.ln_1p()
    } else {
        (T::one() + rest).ln()
    };
    Some(log_total - (x[label] - max))
}

fn acc<T: Real>(before: &mut [Node<T>], v: Var) -> &mut Vec<T> {
    let node = &mut before[v.0];
    let len = node.value.len();
    node.grad.get_or_insert_with(|| vec![T::zero(); len])
}

fn acc_add<T: Real>(before: &mut [Node<T>], v: Var, delta: &[T]) {
    for (a, d) in acc(before, v).iter_mut().zip(delta) {
        *a = *a + *d;
    }
}

fn backprop_node<T: Real>(before: &mut [Node<T>], node: &Node<T>, g: &[T]) {
    let y = &node.value;
    match &node.op {
        Op::Leaf | Op::Param(_) => {}
        &Op::MatMul { a, b, m, k, n, trans_b } => {
            // C = A·B (or A·Bᵀ); dA = G·Bᵀ (or G·B), dB = Aᵀ·G (or Gᵀ·A)
            let bv = before[b.0].value.clone();
            T::gemm(m, n, k, g, false, &bv, !trans_b, T::one(), acc(before, a));
            let av = before[a.0].value.clone();
            if trans_b {
                T::gemm(n, m, k, g, true, &av, false, T::one(), acc(before, b));
            } else {
                T::gemm(k, m, n, &av, true, g, false, T::one(), acc(before, b));
            }
        }
        &Op::Transpose { a, rows, cols } => {
            let ga = acc(before, a);
            for i in 0..rows {
                for j in 0..cols {
                    ga[i * cols + j] = ga[i * cols + j] + g[j * rows + i];
                }
            }
        }
        &Op::Reshape(a) => acc_add(before, a, g),
        &Op::Add(a, b) => {
            acc_add(before, a, g);
            acc_add(before, b, g);
        }
        &Op::Sub(a, b) => {
            acc_add(before, a, g);
            let neg: Vec<T> = g.iter().map(|&x| -x).collect();
            acc_add(before, b, &neg);
        }
        &Op::Mul(a, b) => {
            let da: Vec<T> = g.iter().zip(&before[b.0].value).map(|(&g, &bv)| g * bv).collect();
            let db: Vec<T> = g.iter().zip(&before[a.0].value).map(|(&g, &av)| g * av).collect();
            acc_add(before, a, &da);
            acc_add(before, b, &db);
        }
        &Op::AddRowBias { a, bias, cols } => {
            acc_add(before, a, g);
            let gb = acc(before, bias);
            for (i, &x) in g.iter().enumerate() {
                gb[i % cols] = gb[i % cols] + x;
            }
        }
        &Op::Affine { a, scale } => {
            let d: Vec<T> = g.iter().map(|&x| x * scale).collect();
            acc_add(before, a, &d);
        }
        &Op::Tanh(a) => {
            let d: Vec<T> = g.iter().zip(y).map(|(&g, &y)| g * (T::one() - y * y)).collect();
            acc_add(before, a, &d);
        }
        &Op::Sigmoid(a) => {
            let d: Vec<T> = g.iter().zip(y).map(|(&g, &y)| g * y * (T::one() - y)).collect();
            acc_add(before, a, &d);
        }
        &Op::Gelu(a) => {
            let (c, k, half) = (T::of(GELU_C), T::of(GELU_A), T::of(0.5));
            let three = T::of(3.0);
            let d: Vec<T> = g
                .iter()
                .zip(&before[a.0].value)
                .map(|(&g, &x)| {
                    let t = (c * (x + k * x * x * x)).tanh();
                    let dt = (T::one() - t * t) * c * (T::one() + three * k * x * x);
                    g * (half * (T::one() + t) + half * x * dt)
                })
                .collect();
            acc_add(before, a, &d);
        }
        &Op::Abs(a) => {
            let d: Vec<T> = g
                .iter()
                .zip(&before[a.0].value)
                .map(|(&g, &x)| {
                    if x > T::zero() {
                        g
                    } else if x < T::zero() {
                        -g
                    } else {
                        T::zero()
                    }
                })
                .collect();
            acc_add(before, a, &d);
        }
        Op::Concat(parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = before[p.0].value.len();
                acc_add(before, p, &g[offset..offset + len]);
                offset += len;
            }
        }
        Op::ConcatCols { parts, rows } => {
            let total = g.len() / rows;
            let mut offset = 0;
            for &p in parts {
                let w = before[p.0].value.len() / rows;
                let gp = acc(before, p);
                for i in 0..*rows {
                    for j in 0..w {
                        gp[i * w + j] = gp[i * w + j] + g[i * total + offset + j];
                    }
                }
                offset += w;
            }
        }
        Op::SelectCols { a, cols, in_cols } => {
            let w = cols.len();
            let rows = g.len() / w;
            let ga = acc(before, *a);
            for i in 0..rows {
                for (j, &c) in cols.iter().enumerate() {
                    ga[i * in_cols + c] = ga[i * in_cols + c] + g[i * w + j];
                }
            }
        }
        Op::SelectRows { a, rows, cols } => {
            let ga = acc(before, *a);
            for (i, &r) in rows.iter().enumerate() {
                for j in 0..*cols {
                    ga[r * cols + j] = ga[r * cols + j] + g[i * cols + j];
                }
            }
        }
        &Op::Sum(a) => {
            let ga = acc(before, a);
            for x in ga.iter_mut() {
                *x = *x + g[0];
            }
        }
        &Op::Softmax(a) => {
            let dot: T = g.iter().zip(y).map(|(&g, &y)| g * y).sum();
            let d: Vec<T> = g.iter().zip(y).map(|(&g, &y)| y * (g - dot)).collect();
            acc_add(before, a, &d);
        }
        &Op::SoftmaxRows { a, cols } => {
            let mut d = vec![T::zero(); g.len()];
            for ((gr, yr), dr) in g.chunks(cols).zip(y.chunks(cols)).zip(d.chunks_mut(cols)) {
                let dot: T = gr.iter().zip(yr).map(|(&g, &y)| g * y).sum();
                for ((dv, &g), &y) in dr.iter_mut().zip(gr).zip(yr) {
                    *dv = y * (g - dot);
                }
            }
            acc_add(before, a, &d);
        }
        Op::LayerNormRows {
            a,
            gamma,
            beta,
            cols,
            xhat,
            inv_std,
        } => {
            let cols = *cols;
            let n = T::of(cols as f64);
            let gam = before[gamma.0].value.clone();
            let mut dgamma = vec![T::zero(); cols];
            let mut dbeta = vec![T::zero(); cols];
            let mut dx = vec![T::zero(); g.len()];
            for (r, ((gr, hr), dr)) in g
                .chunks(cols)
                .zip(xhat.chunks(cols))
                .zip(dx.chunks_mut(cols))
                .enumerate()
            {
                let mut sum_dh = T::zero();
                let mut sum_dh_h = T::zero();
                for j in 0..cols {
                    dgamma[j] = dgamma[j] + gr[j] * hr[j];
                    dbeta[j] = dbeta[j] + gr[j];
                    let dh = gr[j] * gam[j];
                    sum_dh = sum_dh + dh;
                    sum_dh_h = sum_dh_h + dh * hr[j];
                }
                let scale = inv_std[r] / n;
                for j in 0..cols {
                    let dh = gr[j] * gam[j];
                    dr[j] = scale * (n * dh - sum_dh - hr[j] * sum_dh_h);
                }
            }
            acc_add(before, *a, &dx);
            acc_add(before, *gamma, &dgamma);
            acc_add(before, *beta, &dbeta);
        }
        Op::Dropout { a, mask } => {
            let d: Vec<T> = g.iter().zip(mask).map(|(&g, &m)| g * m).collect();
            acc_add(before, *a, &d);
        }
        Op::CrossEntropy { logits, label, probs } => {
            let mut d: Vec<T> = probs.iter().map(|&p| p * g[0]).collect();
            d[*label] = d[*label] - g[0];
            acc_add(before, *logits, &d);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_leaf(g: &mut Graph<f64>, v: &[f64]) -> Var {
        g.leaf(Tensor::vector(v.to_vec()))
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::<f64>::new();
        let x = vec_leaf(&mut g, &[1.0, 2.0]);
        let sq = g.mul(x, x).unwrap();
        let y = g.sum(sq);
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_root_gives_zero_gradients() {
        let mut g = Graph::<f64>::new();
        let x = vec_leaf(&mut g, &[1.0, 2.0]);
        let c = g.leaf(Tensor::scalar(3.0));
        g.backward(c).unwrap();
        assert_eq!(g.grad_or_zeros(x), vec![0.0, 0.0]);
    }

    #[test]
    fn second_backward_without_reset_is_an_error() {
        let mut g = Graph::<f64>::new();
        let x = vec_leaf(&mut g, &[1.0]);
        let y = g.sum(x);
        g.backward(y).unwrap();
        assert!(matches!(g.backward(y), Err(AutodiffError::Usage(_))));
        g.reset_grads();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::<f64>::new();
        let x = vec_leaf(&mut g, &[1.0, 2.0]);
        assert!(matches!(g.backward(x), Err(AutodiffError::Usage(_))));
    }

    #[test]
    fn matmul_shape_errors() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::zeros(&[2, 3]));
        let b = g.leaf(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.matmul(a, b), Err(AutodiffError::Shape { .. })));
    }

    #[test]
    fn matmul_trivial_cases() {
        let mut g = Graph::<f64>::new();
        let x = Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let i3 = g.leaf(Tensor::identity(3));
        let xv = g.leaf(x.clone());
        let p = g.matmul(i3, xv).unwrap();
        assert_eq!(g.tensor(p), x);
        let a = g.leaf(Tensor::full(&[2, 3], 1.0));
        let b = g.leaf(Tensor::full(&[3, 1], 1.0));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 1]);
        assert_eq!(g.value(c), &[3.0, 3.0]);
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::<f64>::new();
        let a = vec_leaf(&mut g, &[1.0, 1.0, 1.0]);
        let s = g.softmax(a).unwrap();
        for &p in g.value(s) {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let b = vec_leaf(&mut g, &[0.0, 2f64.ln()]);
        let s = g.softmax(b).unwrap();
        assert!((g.value(s)[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((g.value(s)[1] - 2.0 / 3.0).abs() < 1e-15);
        let c = vec_leaf(&mut g, &[1000.0, 1000.0]);
        let s = g.softmax(c).unwrap();
        assert_eq!(g.value(s), &[0.5, 0.5]);
        let d = vec_leaf(&mut g, &[1.0, f64::NAN]);
        assert_eq!(g.softmax(d), Err(AutodiffError::NonFinite("softmax")));
    }

    #[test]
    fn masked_softmax_rows_zero_masked_columns() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::matrix(2, 3, vec![1.0, 2.0, 50.0, 0.0, 0.0, -3.0]).unwrap());
        let p = g.softmax_rows(a, Some(&[true, true, false])).unwrap();
        let v = g.value(p);
        assert_eq!(v[2], 0.0);
        assert_eq!(v[5], 0.0);
        assert!((v[3] - 0.5).abs() < 1e-15);
        assert!(g.softmax_rows(a, Some(&[false, false, false])).is_err());
    }

    #[test]
    fn cross_entropy_analytic_values() {
        let ln3 = cross_entropy_value(&[0.3, 0.3, 0.3], 1).unwrap();
        assert_eq!(ln3, 3f64.ln());
        let small = cross_entropy_value(&[10.0f64, -10.0], 0).unwrap();
        assert!((small - (-20f64).exp().ln_1p()).abs() < 1e-24);
        let large = cross_entropy_value(&[10.0f64, -10.0], 1).unwrap();
        assert!((large - 20.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_rows_are_standardized_before_affine() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::matrix(2, 4, vec![1.0, 2.0, 3.0, 10.0, -5.0, 0.5, 0.25, 7.0]).unwrap());
        let gamma = g.leaf(Tensor::full(&[4], 1.0));
        let beta = g.leaf(Tensor::zeros(&[4]));
        let y = g.layer_norm_rows(x, gamma, beta, 1e-12).unwrap();
        for row in g.value(y).chunks(4) {
            let mean = row.iter().sum::<f64>() / 4.0;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn dropout_eval_is_identity_and_train_scales_survivors() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::full(&[1000], 1.0));
        assert_eq!(g.dropout(x, 0.1, false, &mut rng).unwrap(), x);
        let d = g.dropout(x, 0.1, true, &mut rng).unwrap();
        let kept = g.value(d).iter().filter(|&&v| v != 0.0).count();
        assert!((850..950).contains(&kept), "{kept}");
        for &v in g.value(d) {
            assert!(v == 0.0 || (v - 1.0 / 0.9).abs() < 1e-15);
        }
    }
}
