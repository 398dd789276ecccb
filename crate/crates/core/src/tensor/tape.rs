use std::borrow::Cow;
use std::ops::Range;

use super::gemm::gemm;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Vector-Jacobian product of a custom op.
///
/// Called with the upstream gradient, the input values and the output
/// value; returns one optional gradient per input (`None` = no contribution).
pub type BackwardFn<'a> = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Option<Tensor>> + 'a>;

/// Pointwise op selector for [`Tape::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Elementwise {
    Add,
    Mul,
    Sigmoid,
    Gelu,
    Relu,
    Scale(f64),
}

enum Op<'a> {
    Leaf,
    MatMul { a: Var, b: Var, a_t: bool, b_t: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    AddRow(Var, Var),
    Sigmoid(Var),
    Relu(Var),
    Gelu(Var),
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Sum(Var),
    Mean(Var),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Gather { table: Var, ids: Vec<usize> },
    Pick { x: Var, cols: Vec<usize> },
    ScatterAddRows { base: Var, delta: Var, offset: usize },
    StraightThrough(Var),
    Custom { inputs: Vec<Var>, backward: BackwardFn<'a> },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    requires_grad: bool,
    op: Op<'a>,
}

/// Record of one forward pass.
///
/// Nodes are appended in execution order, so the node list is always a
/// topological order and [`Tape::backward`] is a single reverse sweep.
/// Leaves may borrow their values (`'a`), which keeps frozen parameters
/// shared rather than copied into every pass.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    grads: Vec<Option<Tensor>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `(outer, len, inner)` decomposition of `shape` around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor { shape: t.shape.clone(), data: t.data.iter().map(|&v| f(v)).collect() }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    }
}

fn as_matrix(t: &Tensor) -> (usize, usize) {
    let c = t.cols();
    (t.len() / c, c)
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op<'a>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value: Cow::Owned(value), requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: Cow::Owned(value), requires_grad, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that borrows its value for the lifetime of the tape.
    pub fn leaf_ref(&mut self, value: &'a Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: Cow::Borrowed(value), requires_grad, op: Op::Leaf });
        Var(self.nodes.len() - 1)
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

    /// `op(a) · op(b)`; `a_t` / `b_t` read the stored matrix transposed.
    pub fn matmul_ext(&mut self, a: Var, b: Var, a_t: bool, b_t: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape.len() != 2 || bv.shape.len() != 2 {
            return Err(Error::Shape(format!("matmul needs matrices, got {:?} x {:?}", av.shape, bv.shape)));
        }
        let (m, k) = if a_t { (av.shape[1], av.shape[0]) } else { (av.shape[0], av.shape[1]) };
        let (k2, n) = if b_t { (bv.shape[1], bv.shape[0]) } else { (bv.shape[0], bv.shape[1]) };
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner dims {:?}{} x {:?}{}",
                av.shape,
                if a_t { "ᵀ" } else { "" },
                bv.shape,
                if b_t { "ᵀ" } else { "" }
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &av.data, a_t, &bv.data, b_t, &mut out, 0.0);
        Ok(self.push(Tensor { shape: vec![m, n], data: out }, Op::MatMul { a, b, a_t, b_t }, &[a, b]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ext(a, b, false, false)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ext(a, b, false, true)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "add")?;
        let out = zip(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "sub")?;
        let out = zip(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "mul")?;
        let out = zip(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = map(self.value(x), |v| v * c);
        self.push(out, Op::Scale(x, c), &[x])
    }

    /// `x · s` for a one-element `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::Shape(format!("scale_by needs a scalar, got {:?}", self.value(s).shape)));
        }
        let c = self.value(s).data[0];
        let out = map(self.value(x), |v| v * c);
        Ok(self.push(out, Op::ScaleBy(x, s), &[x, s]))
    }

    /// Adds a vector of length `cols(x)` to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.len() != xv.cols() {
            return Err(Error::Shape(format!("add_row {:?} + {:?}", xv.shape, bv.shape)));
        }
        let c = xv.cols();
        let mut out = xv.clone();
        for (i, v) in out.data.iter_mut().enumerate() {
            *v += bv.data[i % c];
        }
        Ok(self.push(out, Op::AddRow(x, b), &[x, b]))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = map(self.value(x), sigmoid);
        self.push(out, Op::Sigmoid(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = map(self.value(x), |v| v.max(0.0));
        self.push(out, Op::Relu(x), &[x])
    }

    /// Tanh-approximated GeLU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = map(self.value(x), gelu);
        self.push(out, Op::Gelu(x), &[x])
    }

    pub fn elementwise(&mut self, kind: Elementwise, args: &[Var]) -> Result<Var> {
        let arity = match kind {
            Elementwise::Add | Elementwise::Mul => 2,
            _ => 1,
        };
        if args.len() != arity {
            return Err(Error::Shape(format!("{kind:?} takes {arity} argument(s), got {}", args.len())));
        }
        match kind {
            Elementwise::Add => self.add(args[0], args[1]),
            Elementwise::Mul => self.mul(args[0], args[1]),
            Elementwise::Sigmoid => Ok(self.sigmoid(args[0])),
            Elementwise::Gelu => Ok(self.gelu(args[0])),
            Elementwise::Relu => Ok(self.relu(args[0])),
            Elementwise::Scale(c) => Ok(self.scale(args[0], c)),
        }
    }

    fn check_axis(&self, x: Var, axis: usize) -> Result<()> {
        if axis >= self.value(x).shape.len() {
            return Err(Error::Shape(format!("axis {axis} out of range for {:?}", self.value(x).shape)));
        }
        Ok(())
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let out = softmax_values(self.value(x), axis, false);
        Ok(self.push(out, Op::Softmax { x, axis }, &[x]))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let out = softmax_values(self.value(x), axis, true);
        Ok(self.push(out, Op::LogSoftmax { x, axis }, &[x]))
    }

    /// Normalizes each vector along the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        if d == 0 || self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(Error::Shape(format!(
                "layer_norm over {:?} with gain {:?} bias {:?}",
                xv.shape,
                self.value(gain).shape,
                self.value(bias).shape
            )));
        }
        let rows = xv.len() / d;
        let (g, b) = (&self.value(gain).data, &self.value(bias).data);
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv.data[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor { shape: xv.shape.clone(), data: out };
        Ok(self.push(value, Op::LayerNorm { x, gain, bias, xhat, inv_std }, &[x, gain, bias]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.sum() / v.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    pub fn slice_rows(&mut self, x: Var, rows: Range<usize>) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = as_matrix(xv);
        if rows.start >= rows.end || rows.end > r {
            return Err(Error::Shape(format!("slice_rows {rows:?} of {:?}", xv.shape)));
        }
        let data = xv.data[rows.start * c..rows.end * c].to_vec();
        let out = Tensor { shape: vec![rows.len(), c], data };
        Ok(self.push(out, Op::SliceRows { x, start: rows.start }, &[x]))
    }

    pub fn slice_cols(&mut self, x: Var, cols: Range<usize>) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = as_matrix(xv);
        if cols.start >= cols.end || cols.end > c {
            return Err(Error::Shape(format!("slice_cols {cols:?} of {:?}", xv.shape)));
        }
        let w = cols.len();
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&xv.data[i * c + cols.start..i * c + cols.end]);
        }
        let out = Tensor { shape: vec![r, w], data };
        Ok(self.push(out, Op::SliceCols { x, start: cols.start }, &[x]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = parts.first().map(|&p| self.value(p).cols()).ok_or_else(|| Error::Shape("concat_rows of nothing".into()))?;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.cols() != c {
                return Err(Error::Shape(format!("concat_rows width {} vs {c}", v.cols())));
            }
            data.extend_from_slice(&v.data);
        }
        let out = Tensor { shape: vec![data.len() / c, c], data };
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = parts.first().map(|&p| as_matrix(self.value(p)).0).ok_or_else(|| Error::Shape("concat_cols of nothing".into()))?;
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        for &p in parts {
            if as_matrix(self.value(p)).0 != r {
                return Err(Error::Shape("concat_cols row mismatch".into()));
            }
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data[i * w..(i + 1) * w]);
            }
        }
        let out = Tensor { shape: vec![r, total], data };
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (r, c) = as_matrix(tv);
        if ids.is_empty() {
            return Err(Error::Shape("gather_rows with no ids".into()));
        }
        let mut data = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            if i >= r {
                return Err(Error::Shape(format!("row {i} out of range for {:?}", tv.shape)));
            }
            data.extend_from_slice(&tv.data[i * c..(i + 1) * c]);
        }
        let out = Tensor { shape: vec![ids.len(), c], data };
        Ok(self.push(out, Op::Gather { table, ids: ids.to_vec() }, &[table]))
    }

    /// `out[i] = x[i, cols[i]]`.
    pub fn pick(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = as_matrix(xv);
        if cols.len() != r || cols.iter().any(|&j| j >= c) {
            return Err(Error::Shape(format!("pick {} columns from {:?}", cols.len(), xv.shape)));
        }
        let data = cols.iter().enumerate().map(|(i, &j)| xv.data[i * c + j]).collect();
        let out = Tensor { shape: vec![r], data };
        Ok(self.push(out, Op::Pick { x, cols: cols.to_vec() }, &[x]))
    }

    /// Copy of `base` with `delta` added into rows `offset..offset + rows(delta)`.
    pub fn scatter_add_rows(&mut self, base: Var, delta: Var, offset: usize) -> Result<Var> {
        let (bv, dv) = (self.value(base), self.value(delta));
        let (r, c) = as_matrix(bv);
        let (k, dc) = as_matrix(dv);
        if dc != c || offset + k > r {
            return Err(Error::Shape(format!(
                "scatter_add_rows {:?} into {:?} at {offset}",
                dv.shape, bv.shape
            )));
        }
        let mut out = bv.clone();
        for (o, d) in out.data[offset * c..(offset + k) * c].iter_mut().zip(&dv.data) {
            *o += d;
        }
        Ok(self.push(out, Op::ScatterAddRows { base, delta, offset }, &[base, delta]))
    }

    /// Forward: `1` where `sigmoid(m) >= tau`, else `0`. Backward: identity
    /// (straight-through estimator).
    pub fn threshold_ste(&mut self, m: Var, tau: f64) -> Var {
        let out = map(self.value(m), |v| if sigmoid(v) >= tau { 1.0 } else { 0.0 });
        self.push(out, Op::StraightThrough(m), &[m])
    }

    /// Records an op whose value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, backward: BackwardFn<'a>) -> Var {
        self.push(value, Op::Custom { inputs: inputs.to_vec(), backward }, inputs)
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Shape(format!("backward needs a scalar loss, got {:?}", lv.shape)));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor { shape: lv.shape.clone(), data: vec![1.0] });
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last backward pass with respect to `v`. Leaves that
    /// require grad but did not participate get zeros.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        match self.grads.get(v.0) {
            Some(Some(g)) => Some(g.clone()),
            _ => Some(Tensor::zeros(self.value(v).shape())),
        }
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let out = &*node.value;
        let val = |v: Var| -> &Tensor { &self.nodes[v.0].value };
        let mut acc = |v: Var, t: Tensor| {
            debug_assert_eq!(t.shape, self.nodes[v.0].value.shape, "gradient shape");
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, d) in existing.data.iter_mut().zip(&t.data) {
                        *e += d;
                    }
                }
                slot => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, a_t, b_t } => {
                let (av, bv) = (val(a), val(b));
                let (m, n) = (g.shape[0], g.shape[1]);
                let k = if a_t { av.shape[0] } else { av.shape[1] };
                if self.rg(a) {
                    let mut da = vec![0.0; av.len()];
                    if a_t {
                        gemm(k, n, m, &bv.data, b_t, &g.data, true, &mut da, 0.0);
                    } else {
                        gemm(m, n, k, &g.data, false, &bv.data, !b_t, &mut da, 0.0);
                    }
                    acc(a, Tensor { shape: av.shape.clone(), data: da });
                }
                if self.rg(b) {
                    let mut db = vec![0.0; bv.len()];
                    if b_t {
                        gemm(n, m, k, &g.data, true, &av.data, a_t, &mut db, 0.0);
                    } else {
                        gemm(k, m, n, &av.data, !a_t, &g.data, false, &mut db, 0.0);
                    }
                    acc(b, Tensor { shape: bv.shape.clone(), data: db });
                }
            }
            &Op::Add(a, b) => {
                if self.rg(a) {
                    acc(a, g.clone());
                }
                if self.rg(b) {
                    acc(b, g.clone());
                }
            }
            &Op::Sub(a, b) => {
                if self.rg(a) {
                    acc(a, g.clone());
                }
                if self.rg(b) {
                    acc(b, map(g, |v| -v));
                }
            }
            &Op::Mul(a, b) => {
                if self.rg(a) {
                    acc(a, zip(g, val(b), |x, y| x * y));
                }
                if self.rg(b) {
                    acc(b, zip(g, val(a), |x, y| x * y));
                }
            }
            &Op::Scale(x, c) => acc(x, map(g, |v| v * c)),
            &Op::ScaleBy(x, s) => {
                let c = val(s).data[0];
                if self.rg(x) {
                    acc(x, map(g, |v| v * c));
                }
                if self.rg(s) {
                    let d: f64 = g.data.iter().zip(&val(x).data).map(|(a, b)| a * b).sum();
                    acc(s, Tensor { shape: val(s).shape.clone(), data: vec![d] });
                }
            }
            &Op::AddRow(x, b) => {
                if self.rg(x) {
                    acc(x, g.clone());
                }
                if self.rg(b) {
                    let c = g.cols();
                    let mut db = vec![0.0; c];
                    for (j, v) in g.data.iter().enumerate() {
                        db[j % c] += v;
                    }
                    acc(b, Tensor { shape: val(b).shape.clone(), data: db });
                }
            }
            &Op::Sigmoid(x) => acc(x, zip(g, out, |gv, y| gv * y * (1.0 - y))),
            &Op::Relu(x) => acc(x, zip(g, val(x), |gv, xv| if xv > 0.0 { gv } else { 0.0 })),
            &Op::Gelu(x) => acc(x, zip(g, val(x), |gv, xv| gv * gelu_grad(xv))),
            &Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(&out.shape, axis);
                let mut dx = vec![0.0; out.len()];
                for o in 0..outer {
                    for inn in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + inn;
                        let dot: f64 = (0..len).map(|j| g.data[idx(j)] * out.data[idx(j)]).sum();
                        for j in 0..len {
                            dx[idx(j)] = out.data[idx(j)] * (g.data[idx(j)] - dot);
                        }
                    }
                }
                acc(x, Tensor { shape: out.shape.clone(), data: dx });
            }
            &Op::LogSoftmax { x, axis } => {
                let (outer, len, inner) = axis_split(&out.shape, axis);
                let mut dx = vec![0.0; out.len()];
                for o in 0..outer {
                    for inn in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + inn;
                        let gsum: f64 = (0..len).map(|j| g.data[idx(j)]).sum();
                        for j in 0..len {
                            dx[idx(j)] = g.data[idx(j)] - out.data[idx(j)].exp() * gsum;
                        }
                    }
                }
                acc(x, Tensor { shape: out.shape.clone(), data: dx });
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let d = out.cols();
                let rows = out.len() / d;
                let gv = &val(*gain).data;
                if self.rg(*gain) {
                    let mut dg = vec![0.0; d];
                    for (k, (gg, h)) in g.data.iter().zip(xhat).enumerate() {
                        dg[k % d] += gg * h;
                    }
                    acc(*gain, Tensor { shape: val(*gain).shape.clone(), data: dg });
                }
                if self.rg(*bias) {
                    let mut db = vec![0.0; d];
                    for (k, gg) in g.data.iter().enumerate() {
                        db[k % d] += gg;
                    }
                    acc(*bias, Tensor { shape: val(*bias).shape.clone(), data: db });
                }
                if self.rg(*x) {
                    let mut dx = vec![0.0; out.len()];
                    for r in 0..rows {
                        let base = r * d;
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for j in 0..d {
                            let dh = g.data[base + j] * gv[j];
                            sum_dh += dh;
                            sum_dh_h += dh * xhat[base + j];
                        }
                        let inv = inv_std[r];
                        for j in 0..d {
                            let dh = g.data[base + j] * gv[j];
                            dx[base + j] = inv / d as f64
                                * (d as f64 * dh - sum_dh - xhat[base + j] * sum_dh_h);
                        }
                    }
                    acc(*x, Tensor { shape: out.shape.clone(), data: dx });
                }
            }
            &Op::Sum(x) => acc(x, Tensor::full(val(x).shape(), g.data[0])),
            &Op::Mean(x) => {
                let n = val(x).len() as f64;
                acc(x, Tensor::full(val(x).shape(), g.data[0] / n))
            }
            &Op::SliceRows { x, start } => {
                let xv = val(x);
                let c = xv.cols();
                let mut dx = Tensor::zeros(xv.shape());
                dx.data[start * c..start * c + g.len()].copy_from_slice(&g.data);
                acc(x, dx);
            }
            &Op::SliceCols { x, start } => {
                let xv = val(x);
                let (r, c) = as_matrix(xv);
                let w = g.cols();
                let mut dx = Tensor::zeros(xv.shape());
                for i in 0..r {
                    dx.data[i * c + start..i * c + start + w].copy_from_slice(&g.data[i * w..(i + 1) * w]);
                }
                acc(x, dx);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = val(p).len();
                    if self.rg(p) {
                        let data = g.data[off..off + n].to_vec();
                        acc(p, Tensor { shape: val(p).shape.clone(), data });
                    }
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let r = g.len() / total;
                let mut off = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if self.rg(p) {
                        let mut data = Vec::with_capacity(r * w);
                        for i in 0..r {
                            data.extend_from_slice(&g.data[i * total + off..i * total + off + w]);
                        }
                        acc(p, Tensor { shape: val(p).shape.clone(), data });
                    }
                    off += w;
                }
            }
            Op::Gather { table, ids } => {
                let tv = val(*table);
                let c = tv.cols();
                let mut dt = Tensor::zeros(tv.shape());
                for (k, &id) in ids.iter().enumerate() {
                    for j in 0..c {
                        dt.data[id * c + j] += g.data[k * c + j];
                    }
                }
                acc(*table, dt);
            }
            Op::Pick { x, cols } => {
                let xv = val(*x);
                let c = xv.cols();
                let mut dx = Tensor::zeros(xv.shape());
                for (i, &j) in cols.iter().enumerate() {
                    dx.data[i * c + j] = g.data[i];
                }
                acc(*x, dx);
            }
            &Op::ScatterAddRows { base, delta, offset } => {
                if self.rg(base) {
                    acc(base, g.clone());
                }
                if self.rg(delta) {
                    let dv = val(delta);
                    let c = dv.cols();
                    let data = g.data[offset * c..offset * c + dv.len()].to_vec();
                    acc(delta, Tensor { shape: dv.shape.clone(), data });
                }
            }
            &Op::StraightThrough(m) => acc(m, g.clone()),
            Op::Custom { inputs, backward } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|&v| val(v)).collect();
                let gs = backward(g, &ins, out);
                for (&v, gi) in inputs.iter().zip(gs) {
                    if let Some(gi) = gi {
                        if self.rg(v) {
                            acc(v, gi);
                        }
                    }
                }
            }
        }
    }
}

fn softmax_values(x: &Tensor, axis: usize, log: bool) -> Tensor {
    let (outer, len, inner) = axis_split(&x.shape, axis);
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for inn in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + inn;
            let max = (0..len).map(|j| x.data[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..len).map(|j| (x.data[idx(j)] - max).exp()).sum();
            let lz = z.ln();
            for j in 0..len {
                let shifted = x.data[idx(j)] - max;
                out[idx(j)] = if log { shifted - lz } else { shifted.exp() / z };
            }
        }
    }
    Tensor { shape: x.shape.clone(), data: out }
}
