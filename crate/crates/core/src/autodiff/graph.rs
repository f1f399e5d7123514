use alloc::borrow::Cow;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::kernels::gemm;
use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};
use crate::math;

/// Variance floor inside the layer-norm square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulCol(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Square(usize),
    Recip(usize),
    Gelu { x: usize, tanh: Vec<f64> },
    Sum(usize),
    Mean(usize),
    SumLast(usize),
    Softmax { x: usize, inv_t: f64 },
    LogSoftmax { x: usize, inv_t: f64 },
    CausalSoftmax { x: usize, scale: f64 },
    LayerNorm { x: usize, gain: usize, bias: usize },
    Standardize(usize),
    Embedding { table: usize, ids: Vec<usize> },
    ConcatRows(Vec<usize>),
    SelectRows { x: usize, idx: Vec<usize> },
    SliceCols { x: usize, start: usize, len: usize },
    ConcatCols(Vec<usize>),
}

#[derive(Debug)]
struct Node<'p> {
    value: Cow<'p, [f64]>,
    shape: Vec<usize>,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode computation graph.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and backward walks it from the end. Leaves may borrow
/// their storage (model parameters) for the lifetime `'p`.
#[derive(Debug, Default)]
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let c = shape.last().copied().unwrap_or(1);
    (numel(shape) / c.max(1), c)
}

fn grad_slot(grads: &mut [Option<Vec<f64>>], i: usize, len: usize) -> &mut [f64] {
    grads[i].get_or_insert_with(|| vec![0.0; len])
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Inner tanh of the GELU approximation.
fn gelu_tanh(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    if u.abs() > 20.0 {
        return u.signum();
    }
    1.0 - 2.0 / (math::exp(2.0 * u) + 1.0)
}

fn gelu_grad(x: f64, t: f64) -> f64 {
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Row-wise softmax of `x * inv_t` with max subtraction. Writes into `out`.
fn softmax_rows(x: &[f64], cols: usize, inv_t: f64, out: &mut [f64]) {
    for (xr, yr) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let mx = xr.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut s = 0.0;
        for (y, &v) in yr.iter_mut().zip(xr) {
            *y = math::exp((v - mx) * inv_t);
            s += *y;
        }
        for y in yr.iter_mut() {
            *y /= s;
        }
    }
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'p, [f64]>, shape: Vec<usize>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(value.len(), numel(&shape));
        self.nodes.push(Node {
            value,
            shape,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Leaf owning its data.
    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        let shape = t.shape().to_vec();
        self.push(Cow::Owned(t.into_data()), shape, Op::Leaf, requires_grad)
    }

    /// Gradient-free constant.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    /// Leaf borrowing a parameter tensor.
    pub fn param(&mut self, t: &'p Tensor, requires_grad: bool) -> Var {
        self.push(
            Cow::Borrowed(t.data()),
            t.shape().to_vec(),
            Op::Leaf,
            requires_grad,
        )
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.to_vec()).expect("node shape is consistent")
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    /// Gradient of the last backward pass with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Makes `backward` add the gradient of leaf `v` into `buf` instead of a
    /// fresh zero buffer.
    pub fn accumulate_into(&mut self, v: Var, buf: Vec<f64>) -> Result<()> {
        let n = &self.nodes[v.0];
        if !matches!(n.op, Op::Leaf) || !n.requires_grad {
            return Err(Error::Contract("gradient buffers attach to trainable leaves only".into()));
        }
        if buf.len() != n.value.len() {
            return Err(Error::dim("accumulate_into", &[buf.len()], &n.shape));
        }
        self.grads[v.0] = Some(buf);
        Ok(())
    }

    /// Moves the gradient out of the graph.
    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads[v.0].take()
    }

    /// Copies the value into a new gradient-free leaf.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.tensor(v);
        self.constant(t)
    }

    /// Clears every gradient so backward may run again.
    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
        self.backward_done = false;
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let n = &self.nodes[a.0];
        let value: Vec<f64> = n.value.iter().map(|&x| f(x)).collect();
        let shape = n.shape.clone();
        let rg = n.requires_grad;
        self.push(Cow::Owned(value), shape, op, rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa != sb {
            return Err(Error::dim(op, sa, sb));
        }
        Ok(())
    }

    fn binary(&mut self, op_name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(op_name, a, b)?;
        let value: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(self.nodes[b.0].value.iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(Cow::Owned(value), shape, op, rg))
    }

    fn matrix(&self, op: &'static str, a: Var) -> Result<(usize, usize)> {
        let s = &self.nodes[a.0].shape;
        if s.len() != 2 {
            return Err(Error::dim(op, s, &[]));
        }
        Ok((s[0], s[1]))
    }

    /// Matrix product of `m x k` and `k x n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = &self.nodes[a.0].shape;
        let sb = &self.nodes[b.0].shape;
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.nodes[a.0].value, false, &self.nodes[b.0].value, false, &mut out, 0.0);
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(Cow::Owned(out), vec![m, n], Op::MatMul(a.0, b.0), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix("transpose", a)?;
        let x = &self.nodes[a.0].value;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = x[i * n + j];
            }
        }
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(Cow::Owned(out), vec![n, m], Op::Transpose(a.0), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a.0, b.0), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a.0, b.0), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a.0, b.0), |x, y| x * y)
    }

    /// Adds a length-`n` vector to every row of an `m x n` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, n) = rows_cols(&self.nodes[a.0].shape);
        if numel(&self.nodes[bias.0].shape) != n {
            return Err(Error::dim("add_row", &self.nodes[a.0].shape, &self.nodes[bias.0].shape));
        }
        let b = &self.nodes[bias.0].value;
        let value: Vec<f64> = self.nodes[a.0]
            .value
            .chunks_exact(n)
            .flat_map(|r| r.iter().zip(b.iter()).map(|(x, y)| x + y))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(&[a.0, bias.0]);
        Ok(self.push(Cow::Owned(value), shape, Op::AddRow(a.0, bias.0), rg))
    }

    /// Multiplies row `i` of `a` by `col[i]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (m, n) = rows_cols(&self.nodes[a.0].shape);
        if numel(&self.nodes[col.0].shape) != m {
            return Err(Error::dim("mul_col", &self.nodes[a.0].shape, &self.nodes[col.0].shape));
        }
        let c = &self.nodes[col.0].value;
        let value: Vec<f64> = self.nodes[a.0]
            .value
            .chunks_exact(n)
            .zip(c.iter())
            .flat_map(|(r, &s)| r.iter().map(move |x| x * s))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(&[a.0, col.0]);
        Ok(self.push(Cow::Owned(value), shape, Op::MulCol(a.0, col.0), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::Scale(a.0, s), |x| x * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::AddScalar(a.0), |x| x + s)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a.0), math::exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Op::Ln(a.0), math::ln)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a.0), math::sqrt)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a.0), |x| x * x)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, Op::Recip(a.0), |x| 1.0 / x)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let n = &self.nodes[a.0];
        let tanh: Vec<f64> = n.value.iter().map(|&x| gelu_tanh(x)).collect();
        let value = n.value.iter().zip(&tanh).map(|(&x, &t)| 0.5 * x * (1.0 + t)).collect();
        let shape = n.shape.clone();
        let rg = n.requires_grad;
        let tanh = if rg { tanh } else { Vec::new() };
        self.push(Cow::Owned(value), shape, Op::Gelu { x: a.0, tanh }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.iter().sum();
        let rg = self.nodes[a.0].requires_grad;
        self.push(Cow::Owned(vec![s]), Vec::new(), Op::Sum(a.0), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.nodes[a.0].requires_grad;
        self.push(Cow::Owned(vec![s]), Vec::new(), Op::Mean(a.0), rg)
    }

    /// Sum over the last axis, keeping it with size 1.
    pub fn sum_last(&mut self, a: Var) -> Var {
        let shape = self.nodes[a.0].shape.clone();
        let (_, n) = rows_cols(&shape);
        let value: Vec<f64> = self.nodes[a.0].value.chunks_exact(n).map(|r| r.iter().sum()).collect();
        let mut out_shape = shape;
        if let Some(l) = out_shape.last_mut() {
            *l = 1;
        } else {
            out_shape.push(1);
        }
        let rg = self.nodes[a.0].requires_grad;
        self.push(Cow::Owned(value), out_shape, Op::SumLast(a.0), rg)
    }

    fn check_softmax_input(&self, a: Var, temperature: f64) -> Result<()> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::Parameter(format!("temperature must be positive, got {temperature}")));
        }
        if self.nodes[a.0].value.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite input to softmax".into()));
        }
        Ok(())
    }

    /// Temperature softmax over the last axis.
    pub fn softmax_t(&mut self, a: Var, temperature: f64) -> Result<Var> {
        self.check_softmax_input(a, temperature)?;
        let shape = self.nodes[a.0].shape.clone();
        let (_, n) = rows_cols(&shape);
        let inv_t = 1.0 / temperature;
        let mut out = vec![0.0; numel(&shape)];
        softmax_rows(&self.nodes[a.0].value, n, inv_t, &mut out);
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(Cow::Owned(out), shape, Op::Softmax { x: a.0, inv_t }, rg))
    }

    /// Temperature log-softmax over the last axis.
    pub fn log_softmax_t(&mut self, a: Var, temperature: f64) -> Result<Var> {
        self.check_softmax_input(a, temperature)?;
        let shape = self.nodes[a.0].shape.clone();
        let (_, n) = rows_cols(&shape);
        let inv_t = 1.0 / temperature;
        let x = &self.nodes[a.0].value;
        let mut out = vec![0.0; x.len()];
        for (xr, yr) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
            let mx = xr.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let s: f64 = xr.iter().map(|&v| math::exp((v - mx) * inv_t)).sum();
            let lse = math::ln(s);
            for (y, &v) in yr.iter_mut().zip(xr) {
                *y = (v - mx) * inv_t - lse;
            }
        }
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(Cow::Owned(out), shape, Op::LogSoftmax { x: a.0, inv_t }, rg))
    }

    /// Row softmax of `scale * x` over columns `j <= i` of a square matrix;
    /// masked entries are exactly zero.
    pub fn causal_softmax(&mut self, a: Var, scale: f64) -> Result<Var> {
        let (m, n) = self.matrix("causal_softmax", a)?;
        if m != n {
            return Err(Error::dim("causal_softmax", &[m, n], &[n, n]));
        }
        if self.nodes[a.0].value.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite attention score".into()));
        }
        let x = &self.nodes[a.0].value;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let xr = &x[i * n..i * n + i + 1];
            softmax_rows(xr, i + 1, scale, &mut out[i * n..i * n + i + 1]);
        }
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(Cow::Owned(out), vec![m, n], Op::CausalSoftmax { x: a.0, scale }, rg))
    }

    /// Layer normalization over the last axis with a population variance.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        let (_, d) = rows_cols(&shape);
        if numel(&self.nodes[gain.0].shape) != d || numel(&self.nodes[bias.0].shape) != d {
            return Err(Error::dim("layer_norm", &shape, &self.nodes[gain.0].shape));
        }
        let (xv, gv, bv) = (&self.nodes[x.0].value, &self.nodes[gain.0].value, &self.nodes[bias.0].value);
        let mut out = vec![0.0; xv.len()];
        for (xr, yr) in xv.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let mu = xr.iter().sum::<f64>() / d as f64;
            let var = xr.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let inv = 1.0 / math::sqrt(var + LAYER_NORM_EPS);
            for j in 0..d {
                yr[j] = (xr[j] - mu) * inv * gv[j] + bv[j];
            }
        }
        let rg = self.rg(&[x.0, gain.0, bias.0]);
        Ok(self.push(
            Cow::Owned(out),
            shape,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
            },
            rg,
        ))
    }

    /// Per-row `(x - mean) / std` over the last axis with the population
    /// standard deviation. Constant rows map to zeros.
    pub fn standardize(&mut self, x: Var) -> Var {
        let shape = self.nodes[x.0].shape.clone();
        let (_, d) = rows_cols(&shape);
        let xv = &self.nodes[x.0].value;
        let mut out = vec![0.0; xv.len()];
        for (xr, yr) in xv.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let mu = xr.iter().sum::<f64>() / d as f64;
            let var = xr.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            if var > 0.0 {
                let sd = math::sqrt(var);
                for (y, v) in yr.iter_mut().zip(xr) {
                    *y = (v - mu) / sd;
                }
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        self.push(Cow::Owned(out), shape, Op::Standardize(x.0), rg)
    }

    /// Rows of `table` at `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.matrix("embedding", table)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Contract(format!("token id {bad} outside table of {v} rows")));
        }
        let t = &self.nodes[table.0].value;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let rg = self.nodes[table.0].requires_grad;
        Ok(self.push(
            Cow::Owned(out),
            vec![ids.len(), d],
            Op::Embedding {
                table: table.0,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let (_, d) = self.matrix("concat_rows", *first)?;
        let mut rows = 0;
        for p in parts {
            let (r, c) = self.matrix("concat_rows", *p)?;
            if c != d {
                return Err(Error::dim("concat_rows", &self.nodes[first.0].shape, &self.nodes[p.0].shape));
            }
            rows += r;
        }
        let mut out = Vec::with_capacity(rows * d);
        for p in parts {
            out.extend_from_slice(&self.nodes[p.0].value);
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(Cow::Owned(out), vec![rows, d], Op::ConcatRows(ids), rg))
    }

    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.matrix("select_rows", a)?;
        if idx.is_empty() {
            return Err(Error::Contract("select_rows with no rows".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::Contract(format!("row {bad} outside {m} rows")));
        }
        let x = &self.nodes[a.0].value;
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&x[i * n..(i + 1) * n]);
        }
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(
            Cow::Owned(out),
            vec![idx.len(), n],
            Op::SelectRows {
                x: a.0,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let idx: Vec<usize> = (start..start + len).collect();
        self.select_rows(a, &idx)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.matrix("slice_cols", a)?;
        if len == 0 || start + len > n {
            return Err(Error::dim("slice_cols", &[m, n], &[start, len]));
        }
        let x = &self.nodes[a.0].value;
        let mut out = Vec::with_capacity(m * len);
        for r in x.chunks_exact(n) {
            out.extend_from_slice(&r[start..start + len]);
        }
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(Cow::Owned(out), vec![m, len], Op::SliceCols { x: a.0, start, len }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let (m, _) = self.matrix("concat_cols", *first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = self.matrix("concat_cols", *p)?;
            if r != m {
                return Err(Error::dim("concat_cols", &self.nodes[first.0].shape, &self.nodes[p.0].shape));
            }
            widths.push(c);
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.nodes[p.0].value[i * w..(i + 1) * w]);
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(Cow::Owned(out), vec![m, n], Op::ConcatCols(ids), rg))
    }

    /// Populates gradients of `loss` with respect to every reachable node
    /// that requires them. Intermediate gradients are released; leaf
    /// gradients stay readable through [`Graph::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if numel(&self.nodes[loss.0].shape) != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        if self.backward_done {
            return Err(Error::Contract("backward already ran on this graph; call zero_grad first".into()));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: &[f64]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let node = &nodes[i];
        let needs = |j: usize| nodes[j].requires_grad;
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (&nodes[*a].shape, &nodes[*b].shape);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if needs(*a) {
                    let da = grad_slot(grads, *a, m * k);
                    gemm(m, n, k, g, false, &nodes[*b].value, true, da, 1.0);
                }
                if needs(*b) {
                    let db = grad_slot(grads, *b, k * n);
                    gemm(k, m, n, &nodes[*a].value, true, g, false, db, 1.0);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (nodes[*a].shape[0], nodes[*a].shape[1]);
                let da = grad_slot(grads, *a, m * n);
                for r in 0..m {
                    for c in 0..n {
                        da[r * n + c] += g[c * m + r];
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if needs(*a) {
                    for (d, gv) in grad_slot(grads, *a, g.len()).iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                if needs(*b) {
                    for (d, gv) in grad_slot(grads, *b, g.len()).iter_mut().zip(g) {
                        *d += sign * gv;
                    }
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let bv = &nodes[*b].value;
                    for ((d, gv), x) in grad_slot(grads, *a, g.len()).iter_mut().zip(g).zip(bv.iter()) {
                        *d += gv * x;
                    }
                }
                if needs(*b) {
                    let av = &nodes[*a].value;
                    for ((d, gv), x) in grad_slot(grads, *b, g.len()).iter_mut().zip(g).zip(av.iter()) {
                        *d += gv * x;
                    }
                }
            }
            Op::AddRow(a, bias) => {
                let n = numel(&nodes[*bias].shape);
                if needs(*a) {
                    for (d, gv) in grad_slot(grads, *a, g.len()).iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                if needs(*bias) {
                    let db = grad_slot(grads, *bias, n);
                    for r in g.chunks_exact(n) {
                        for (d, gv) in db.iter_mut().zip(r) {
                            *d += gv;
                        }
                    }
                }
            }
            Op::MulCol(a, col) => {
                let m = numel(&nodes[*col].shape);
                let n = g.len() / m;
                if needs(*a) {
                    let cv = &nodes[*col].value;
                    let da = grad_slot(grads, *a, g.len());
                    for r in 0..m {
                        for c in 0..n {
                            da[r * n + c] += g[r * n + c] * cv[r];
                        }
                    }
                }
                if needs(*col) {
                    let av = &nodes[*a].value;
                    let dc = grad_slot(grads, *col, m);
                    for r in 0..m {
                        let mut s = 0.0;
                        for c in 0..n {
                            s += g[r * n + c] * av[r * n + c];
                        }
                        dc[r] += s;
                    }
                }
            }
            Op::Scale(a, s) => {
                for (d, gv) in grad_slot(grads, *a, g.len()).iter_mut().zip(g) {
                    *d += s * gv;
                }
            }
            Op::AddScalar(a) => {
                for (d, gv) in grad_slot(grads, *a, g.len()).iter_mut().zip(g) {
                    *d += gv;
                }
            }
            Op::Exp(a) => {
                for ((d, gv), yv) in grad_slot(grads, *a, g.len()).iter_mut().zip(g).zip(y.iter()) {
                    *d += gv * yv;
                }
            }
            Op::Ln(a) => {
                let x = &nodes[*a].value;
                for ((d, gv), xv) in grad_slot(grads, *a, g.len()).iter_mut().zip(g).zip(x.iter()) {
                    *d += gv / xv;
                }
            }
            Op::Sqrt(a) => {
                for ((d, gv), yv) in grad_slot(grads, *a, g.len()).iter_mut().zip(g).zip(y.iter()) {
                    *d += gv * 0.5 / yv;
                }
            }
            Op::Square(a) => {
                let x = &nodes[*a].value;
                for ((d, gv), xv) in grad_slot(grads, *a, g.len()).iter_mut().zip(g).zip(x.iter()) {
                    *d += 2.0 * gv * xv;
                }
            }
            Op::Recip(a) => {
                for ((d, gv), yv) in grad_slot(grads, *a, g.len()).iter_mut().zip(g).zip(y.iter()) {
                    *d -= gv * yv * yv;
                }
            }
            Op::Gelu { x: a, tanh } => {
                let x = &nodes[*a].value;
                for (((d, gv), xv), t) in grad_slot(grads, *a, g.len()).iter_mut().zip(g).zip(x.iter()).zip(tanh) {
                    *d += gv * gelu_grad(*xv, *t);
                }
            }
            Op::Sum(a) => {
                let n = nodes[*a].value.len();
                for d in grad_slot(grads, *a, n).iter_mut() {
                    *d += g[0];
                }
            }
            Op::Mean(a) => {
                let n = nodes[*a].value.len();
                let s = g[0] / n as f64;
                for d in grad_slot(grads, *a, n).iter_mut() {
                    *d += s;
                }
            }
            Op::SumLast(a) => {
                let len = nodes[*a].value.len();
                let n = len / g.len();
                let da = grad_slot(grads, *a, len);
                for (r, gv) in da.chunks_exact_mut(n).zip(g) {
                    for d in r {
                        *d += gv;
                    }
                }
            }
            Op::Softmax { x, inv_t } => {
                let n = *node.shape.last().unwrap_or(&1);
                let dx = grad_slot(grads, *x, g.len());
                for ((dr, gr), yr) in dx.chunks_exact_mut(n).zip(g.chunks_exact(n)).zip(y.chunks_exact(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dr[j] += inv_t * yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::LogSoftmax { x, inv_t } => {
                let n = *node.shape.last().unwrap_or(&1);
                let dx = grad_slot(grads, *x, g.len());
                for ((dr, gr), yr) in dx.chunks_exact_mut(n).zip(g.chunks_exact(n)).zip(y.chunks_exact(n)) {
                    let gs: f64 = gr.iter().sum();
                    for j in 0..n {
                        dr[j] += inv_t * (gr[j] - math::exp(yr[j]) * gs);
                    }
                }
            }
            Op::CausalSoftmax { x, scale } => {
                let n = node.shape[1];
                let dx = grad_slot(grads, *x, g.len());
                for i in 0..n {
                    let row = i * n;
                    let vis = i + 1;
                    let gr = &g[row..row + vis];
                    let yr = &y[row..row + vis];
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..vis {
                        dx[row + j] += scale * yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::LayerNorm { x, gain, bias } => {
                let d = numel(&nodes[*gain].shape);
                let xv = &nodes[*x].value;
                let gv = &nodes[*gain].value;
                let rows = xv.len() / d;
                let mut xhat = vec![0.0; xv.len()];
                let mut inv = vec![0.0; rows];
                for r in 0..rows {
                    let xr = &xv[r * d..(r + 1) * d];
                    let mu = xr.iter().sum::<f64>() / d as f64;
                    let var = xr.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
                    inv[r] = 1.0 / math::sqrt(var + LAYER_NORM_EPS);
                    for j in 0..d {
                        xhat[r * d + j] = (xr[j] - mu) * inv[r];
                    }
                }
                if needs(*gain) {
                    let dg = grad_slot(grads, *gain, d);
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if needs(*bias) {
                    let db = grad_slot(grads, *bias, d);
                    for r in g.chunks_exact(d) {
                        for (dv, gv) in db.iter_mut().zip(r) {
                            *dv += gv;
                        }
                    }
                }
                if needs(*x) {
                    let dx = grad_slot(grads, *x, xv.len());
                    let mut dxhat = vec![0.0; d];
                    for r in 0..rows {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            dxhat[j] = g[r * d + j] * gv[j];
                            m1 += dxhat[j];
                            m2 += dxhat[j] * xhat[r * d + j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            dx[r * d + j] += inv[r] * (dxhat[j] - m1 - xhat[r * d + j] * m2);
                        }
                    }
                }
            }
            Op::Standardize(x) => {
                let xv = &nodes[*x].value;
                let d = *node.shape.last().unwrap_or(&1);
                let dx = grad_slot(grads, *x, xv.len());
                for r in 0..xv.len() / d {
                    let xr = &xv[r * d..(r + 1) * d];
                    let mu = xr.iter().sum::<f64>() / d as f64;
                    let var = xr.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
                    if var <= 0.0 {
                        continue;
                    }
                    let inv = 1.0 / math::sqrt(var);
                    let (gr, yr) = (&g[r * d..(r + 1) * d], &y[r * d..(r + 1) * d]);
                    let m1 = gr.iter().sum::<f64>() / d as f64;
                    let m2 = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        dx[r * d + j] += inv * (gr[j] - m1 - yr[j] * m2);
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = nodes[*table].shape[1];
                let dt = grad_slot(grads, *table, nodes[*table].value.len());
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += g[r * d + j];
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = nodes[p].value.len();
                    if needs(p) {
                        for (d, gv) in grad_slot(grads, p, len).iter_mut().zip(&g[off..off + len]) {
                            *d += gv;
                        }
                    }
                    off += len;
                }
            }
            Op::SelectRows { x, idx } => {
                let n = node.shape[1];
                let dx = grad_slot(grads, *x, nodes[*x].value.len());
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..n {
                        dx[i * n + j] += g[r * n + j];
                    }
                }
            }
            Op::SliceCols { x, start, len } => {
                let n = nodes[*x].shape[1];
                let dx = grad_slot(grads, *x, nodes[*x].value.len());
                for (r, gr) in g.chunks_exact(*len).enumerate() {
                    for (j, gv) in gr.iter().enumerate() {
                        dx[r * n + start + j] += gv;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let n = node.shape[1];
                let mut off = 0;
                for &p in parts {
                    let w = nodes[p].shape[1];
                    if needs(p) {
                        let dp = grad_slot(grads, p, nodes[p].value.len());
                        for (r, gr) in g.chunks_exact(n).enumerate() {
                            for j in 0..w {
                                dp[r * w + j] += gr[off + j];
                            }
                        }
                    }
                    off += w;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let mut g = Graph::new();
        let i2 = g.constant(Tensor::eye(2, 2));
        let b = g.constant(mat(&[&[3.0, 4.0], &[5.0, 6.0]]));
        let c = g.matmul(i2, b).unwrap();
        assert_eq!(g.value(c), &[3.0, 4.0, 5.0, 6.0]);

        let a = g.constant(mat(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = g.constant(mat(&[&[5.0, 6.0], &[7.0, 8.0]]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        match g.matmul(a, b) {
            Err(Error::Dimension { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::new(vec![3], vec![0.0; 3]).unwrap());
        let p = g.softmax_t(z, 1.0).unwrap();
        for v in g.value(p) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        // e/(e+1) and 1/(e+1)
        let z = g.constant(Tensor::new(vec![2], vec![1.0, 0.0]).unwrap());
        let p = g.softmax_t(z, 1.0).unwrap();
        assert!((g.value(p)[0] - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!((g.value(p)[1] - 0.268_941_421_369_995_1).abs() < 1e-12);

        let z = g.constant(Tensor::new(vec![2], vec![10.0, 0.0]).unwrap());
        let p = g.softmax_t(z, 1000.0).unwrap();
        assert!(g.value(p).iter().all(|v| (v - 0.5).abs() < 0.01));
    }

    #[test]
    fn softmax_rejects_bad_temperature_and_non_finite() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::new(vec![2], vec![1.0, 0.0]).unwrap());
        assert!(matches!(g.softmax_t(z, 0.0), Err(Error::Parameter(_))));
        assert!(matches!(g.softmax_t(z, -1.0), Err(Error::Parameter(_))));
        let z = g.constant(Tensor::new(vec![2], vec![f64::NAN, 0.0]).unwrap());
        assert!(matches!(g.softmax_t(z, 1.0), Err(Error::Numeric(_))));
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![4], vec![1.0; 4]).unwrap());
        let one = g.constant(Tensor::full(&[4], 1.0));
        let zero = g.constant(Tensor::zeros(&[4]));
        let y = g.layer_norm(x, one, zero).unwrap();
        assert_eq!(g.value(y), &[0.0; 4]);

        // population variance 1 for [1,3]; eps shifts the result by ~5e-6
        let x = g.constant(Tensor::new(vec![2], vec![1.0, 3.0]).unwrap());
        let one = g.constant(Tensor::full(&[2], 1.0));
        let zero = g.constant(Tensor::zeros(&[2]));
        let y = g.layer_norm(x, one, zero).unwrap();
        assert!((g.value(y)[0] + 1.0).abs() < 1e-5);
        assert!((g.value(y)[1] - 1.0).abs() < 1e-5);

        let x = g.constant(Tensor::new(vec![2], vec![0.0, 2.0]).unwrap());
        let two = g.constant(Tensor::full(&[2], 2.0));
        let one = g.constant(Tensor::full(&[2], 1.0));
        let y = g.layer_norm(x, two, one).unwrap();
        assert!((g.value(y)[0] + 1.0).abs() < 1e-4);
        assert!((g.value(y)[1] - 3.0).abs() < 1e-4);
    }

    #[test]
    fn layer_norm_single_column_is_guarded() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![3, 1], vec![2.0, -1.0, 7.0]).unwrap());
        let one = g.constant(Tensor::full(&[1], 1.0));
        let b = g.constant(Tensor::full(&[1], 0.5));
        let y = g.layer_norm(x, one, b).unwrap();
        assert_eq!(g.value(y), &[0.5, 0.5, 0.5]);
    }

    #[test]
    fn power_rule_and_softmax_jacobian() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0), true);
        let l = g.square(x);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);

        let mut g = Graph::new();
        let z = g.leaf(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap(), true);
        let p = g.softmax_t(z, 1.0).unwrap();
        let onehot = g.constant(Tensor::new(vec![2], vec![1.0, 0.0]).unwrap());
        let m = g.mul(p, onehot).unwrap();
        let l = g.sum(m);
        g.backward(l).unwrap();
        let gz = g.grad(z).unwrap();
        assert!((gz[0] - 0.25).abs() < 1e-15);
        assert!((gz[1] + 0.25).abs() < 1e-15);
    }

    #[test]
    fn backward_twice_and_non_scalar_are_contract_errors() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true);
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
        let l = g.sum(x);
        g.backward(l).unwrap();
        assert!(matches!(g.backward(l), Err(Error::Contract(_))));
        g.zero_grad();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![3, 3], (0..9).map(|i| i as f64).collect()).unwrap());
        let p = g.causal_softmax(x, 1.0).unwrap();
        let v = g.value(p);
        assert_eq!(v[0], 1.0);
        assert_eq!(&v[1..3], &[0.0, 0.0]);
        assert_eq!(v[5], 0.0);
        for r in 0..3 {
            let s: f64 = v[r * 3..r * 3 + 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
