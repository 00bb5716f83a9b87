//! Reverse-mode automatic differentiation over a closed operation set.
//!
//! Forward calls record nodes on a linear tape; `backward` replays the tape
//! in reverse, accumulating vector-Jacobian products. The op set is exactly
//! what the model needs, so every rule below is individually testable
//! against finite differences.

use std::sync::Arc;

use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

/// Elementwise nonlinearities supported by the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Elu,
    Tanh,
    Sigmoid,
    Relu,
    /// Negative-side slope fixed at 0.2.
    LeakyRelu,
}

pub const LEAKY_SLOPE: f64 = 0.2;

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Elu => {
                if x >= 0.0 {
                    x
                } else {
                    x.exp() - 1.0
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
        }
    }

    /// Derivative at `x`. Kinks (ReLU/LeakyReLU at exactly 0) use the
    /// negative-side value, so gradient checks must avoid points within
    /// eps of a kink.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Elu => {
                if x >= 0.0 {
                    1.0
                } else {
                    x.exp()
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu => {
                if x > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Log-density of the standard logistic distribution, stable for large |x|:
/// log pdf(x) = -x - 2 log(1 + e^-x).
#[inline]
pub fn logistic_log_pdf(x: f64) -> f64 {
    // log(1 + e^-x) = max(-x, 0) + log1p(e^-|x|)
    let softplus_neg = (-x).max(0.0) + (-x.abs()).exp().ln_1p();
    -x - 2.0 * softplus_neg
}

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// a * b
    MatMul(Var, Var),
    /// matrix + row vector broadcast over rows
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    /// elementwise product, same shapes
    Mul(Var, Var),
    /// matrix x (1xM) row broadcast over rows
    MulRow(Var, Var),
    /// matrix x (1x1) scalar node broadcast everywhere
    MulScalar(Var, Var),
    Act(Var, Activation),
    Exp(Var),
    Log(Var),
    Square(Var),
    /// x * c for a compile-time constant c
    Scale(Var, f64),
    /// x + c elementwise (constant folded into the value at record time)
    Offset(Var),
    /// column means: BxM -> 1xM
    MeanRows(Var),
    /// sum of all entries -> 1x1
    Sum(Var),
    ConcatCols(Vec<Var>),
    /// row-wise softmax over positions where mask is true; other positions are 0.
    /// Fully masked rows produce an all-zero row.
    SoftmaxRowsMasked(Var, Arc<Vec<bool>>),
    /// out[i][j] = col[i] + row[j], col and row both Nx1
    OuterSum(Var, Var),
    /// out[b] = x[idx[b]] (row gather; backward scatter-adds)
    GatherRows(Var, Arc<Vec<usize>>),
    /// elementwise standard-logistic log density
    LogisticLogPdf(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradient tape. One tape per forward/backward pass; build a fresh one for
/// every training step.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Register a constant input; gradients never flow into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Register a trainable leaf; `backward` fills its gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = self.value(a).shape();
        let (br, bc) = self.value(b).shape();
        if ac != br {
            return Err(Error::Dimension(format!(
                "matmul {ar}x{ac} * {br}x{bc}"
            )));
        }
        let value = self.value(a).matmul(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul(a, b), needs))
    }

    pub fn add_row(&mut self, m: Var, row: Var) -> Result<Var> {
        let (_, mc) = self.value(m).shape();
        let (rr, rc) = self.value(row).shape();
        if rr != 1 || rc != mc {
            return Err(Error::Dimension(format!(
                "add_row: row {rr}x{rc} against matrix width {mc}"
            )));
        }
        let mv = self.value(m);
        let rv = self.value(row);
        let mut data = mv.data().to_vec();
        for r in 0..mv.rows() {
            for (d, &b) in data[r * mc..(r + 1) * mc].iter_mut().zip(rv.data()) {
                *d += b;
            }
        }
        let value = Tensor::raw(mv.rows(), mc, data);
        let needs = self.needs(m) || self.needs(row);
        Ok(self.push(value, Op::AddRow(m, row), needs))
    }

    /// y = x*W + b with the bias broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    fn binary_same_shape(&mut self, a: Var, b: Var, name: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Dimension(format!(
                "{name}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "add")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "sub")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Sub(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "mul")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul(a, b), needs))
    }

    pub fn mul_row(&mut self, m: Var, row: Var) -> Result<Var> {
        let (_, mc) = self.value(m).shape();
        let (rr, rc) = self.value(row).shape();
        if rr != 1 || rc != mc {
            return Err(Error::Dimension(format!(
                "mul_row: row {rr}x{rc} against matrix width {mc}"
            )));
        }
        let mv = self.value(m);
        let rv = self.value(row);
        let mut data = Vec::with_capacity(mv.len());
        for r in 0..mv.rows() {
            for (&a, &b) in mv.row_slice(r).iter().zip(rv.data()) {
                data.push(a * b);
            }
        }
        let value = Tensor::raw(mv.rows(), mc, data);
        let needs = self.needs(m) || self.needs(row);
        Ok(self.push(value, Op::MulRow(m, row), needs))
    }

    pub fn mul_scalar(&mut self, m: Var, s: Var) -> Result<Var> {
        if !self.value(s).is_scalar() {
            return Err(Error::Dimension("mul_scalar: scalar operand must be 1x1".into()));
        }
        let sv = self.value(s).scalar_value();
        let value = self.value(m).map(|x| x * sv);
        let needs = self.needs(m) || self.needs(s);
        Ok(self.push(value, Op::MulScalar(m, s), needs))
    }

    pub fn act(&mut self, x: Var, kind: Activation) -> Var {
        let value = self.value(x).map(|v| kind.apply(v));
        let needs = self.needs(x);
        self.push(value, Op::Act(x, kind), needs)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::exp);
        let needs = self.needs(x);
        self.push(value, Op::Exp(x), needs)
    }

    pub fn log(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::ln);
        let needs = self.needs(x);
        self.push(value, Op::Log(x), needs)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * v);
        let needs = self.needs(x);
        self.push(value, Op::Square(x), needs)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v * c);
        let needs = self.needs(x);
        self.push(value, Op::Scale(x, c), needs)
    }

    pub fn offset(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v + c);
        let needs = self.needs(x);
        self.push(value, Op::Offset(x), needs)
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let value = self.value(x).mean_rows();
        let needs = self.needs(x);
        self.push(value, Op::MeanRows(x), needs)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let needs = self.needs(x);
        self.push(value, Op::Sum(x), needs)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols needs at least one part".into()));
        }
        let rows = self.value(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(Error::Dimension("concat_cols: row counts differ".into()));
            }
            total += self.value(p).cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let value = Tensor::raw(rows, total, data);
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), needs))
    }

    /// Row-wise softmax restricted to `mask` positions. Positions outside the
    /// mask are exactly zero; a row with no unmasked position stays all-zero.
    pub fn softmax_rows_masked(&mut self, x: Var, mask: Arc<Vec<bool>>) -> Result<Var> {
        let xv = self.value(x);
        if mask.len() != xv.len() {
            return Err(Error::Dimension("softmax mask length".into()));
        }
        let (rows, cols) = xv.shape();
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let base = r * cols;
            let mut max = f64::NEG_INFINITY;
            for c in 0..cols {
                if mask[base + c] {
                    max = max.max(xv.data()[base + c]);
                }
            }
            if max == f64::NEG_INFINITY {
                continue; // fully masked row
            }
            let mut denom = 0.0;
            for c in 0..cols {
                if mask[base + c] {
                    let e = (xv.data()[base + c] - max).exp();
                    data[base + c] = e;
                    denom += e;
                }
            }
            for c in 0..cols {
                data[base + c] /= denom;
            }
        }
        let value = Tensor::raw(rows, cols, data);
        let needs = self.needs(x);
        Ok(self.push(value, Op::SoftmaxRowsMasked(x, mask), needs))
    }

    /// out(i,j) = col(i) + row(j); both operands are Nx1 columns.
    pub fn outer_sum(&mut self, col: Var, row: Var) -> Result<Var> {
        let cv = self.value(col);
        let rv = self.value(row);
        if cv.cols() != 1 || rv.cols() != 1 {
            return Err(Error::Dimension("outer_sum expects column vectors".into()));
        }
        let n = cv.rows();
        let m = rv.rows();
        let mut data = Vec::with_capacity(n * m);
        for i in 0..n {
            let a = cv.data()[i];
            for j in 0..m {
                data.push(a + rv.data()[j]);
            }
        }
        let value = Tensor::raw(n, m, data);
        let needs = self.needs(col) || self.needs(row);
        Ok(self.push(value, Op::OuterSum(col, row), needs))
    }

    pub fn gather_rows(&mut self, x: Var, indices: Arc<Vec<usize>>) -> Result<Var> {
        let xv = self.value(x);
        if let Some(&bad) = indices.iter().find(|&&i| i >= xv.rows()) {
            return Err(Error::Dimension(format!(
                "gather_rows: index {bad} out of {} rows",
                xv.rows()
            )));
        }
        let value = xv.select_rows(&indices);
        let needs = self.needs(x);
        Ok(self.push(value, Op::GatherRows(x, indices), needs))
    }

    pub fn logistic_log_pdf(&mut self, x: Var) -> Var {
        let value = self.value(x).map(logistic_log_pdf);
        let needs = self.needs(x);
        self.push(value, Op::LogisticLogPdf(x), needs)
    }

    /// Reverse sweep from a scalar loss. Returns one gradient slot per node;
    /// slots are populated only for nodes on a path to a trainable leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { slots: grads })
    }

    fn accumulate(grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        match &mut grads[v.0] {
            Some(t) => t.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    Self::accumulate(grads, *a, g.matmul_nt(self.value(*b)));
                }
                if self.needs(*b) {
                    Self::accumulate(grads, *b, self.value(*a).matmul_tn(g));
                }
            }
            Op::AddRow(m, row) => {
                if self.needs(*m) {
                    Self::accumulate(grads, *m, g.clone());
                }
                if self.needs(*row) {
                    Self::accumulate(grads, *row, g.col_sums());
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    Self::accumulate(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    Self::accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    Self::accumulate(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    Self::accumulate(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    Self::accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.needs(*b) {
                    Self::accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::MulRow(m, row) => {
                let rv = self.value(*row);
                if self.needs(*m) {
                    let mut data = Vec::with_capacity(g.len());
                    for r in 0..g.rows() {
                        for (&gv, &b) in g.row_slice(r).iter().zip(rv.data()) {
                            data.push(gv * b);
                        }
                    }
                    Self::accumulate(grads, *m, Tensor::raw(g.rows(), g.cols(), data));
                }
                if self.needs(*row) {
                    let mv = self.value(*m);
                    let mut out = vec![0.0; g.cols()];
                    for r in 0..g.rows() {
                        for ((o, &gv), &a) in
                            out.iter_mut().zip(g.row_slice(r)).zip(mv.row_slice(r))
                        {
                            *o += gv * a;
                        }
                    }
                    Self::accumulate(grads, *row, Tensor::raw(1, g.cols(), out));
                }
            }
            Op::MulScalar(m, s) => {
                let sv = self.value(*s).scalar_value();
                if self.needs(*m) {
                    Self::accumulate(grads, *m, g.map(|v| v * sv));
                }
                if self.needs(*s) {
                    let mv = self.value(*m);
                    let dot: f64 = g.data().iter().zip(mv.data()).map(|(&a, &b)| a * b).sum();
                    Self::accumulate(grads, *s, Tensor::scalar(dot));
                }
            }
            Op::Act(x, kind) => {
                if self.needs(*x) {
                    let xv = self.value(*x);
                    Self::accumulate(grads, *x, g.zip_map(xv, |gv, v| gv * kind.derivative(v)));
                }
            }
            Op::Exp(x) => {
                if self.needs(*x) {
                    Self::accumulate(grads, *x, g.zip_map(&node.value, |gv, y| gv * y));
                }
            }
            Op::Log(x) => {
                if self.needs(*x) {
                    Self::accumulate(grads, *x, g.zip_map(self.value(*x), |gv, v| gv / v));
                }
            }
            Op::Square(x) => {
                if self.needs(*x) {
                    Self::accumulate(grads, *x, g.zip_map(self.value(*x), |gv, v| gv * 2.0 * v));
                }
            }
            Op::Scale(x, c) => {
                if self.needs(*x) {
                    Self::accumulate(grads, *x, g.map(|v| v * c));
                }
            }
            Op::Offset(x) => {
                if self.needs(*x) {
                    Self::accumulate(grads, *x, g.clone());
                }
            }
            Op::MeanRows(x) => {
                if self.needs(*x) {
                    let xv = self.value(*x);
                    let inv = 1.0 / xv.rows() as f64;
                    let mut data = Vec::with_capacity(xv.len());
                    for _ in 0..xv.rows() {
                        data.extend(g.data().iter().map(|&v| v * inv));
                    }
                    Self::accumulate(grads, *x, Tensor::raw(xv.rows(), xv.cols(), data));
                }
            }
            Op::Sum(x) => {
                if self.needs(*x) {
                    let xv = self.value(*x);
                    let gv = g.scalar_value();
                    Self::accumulate(grads, *x, Tensor::filled(xv.rows(), xv.cols(), gv));
                }
            }
            Op::ConcatCols(parts) => {
                let rows = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.needs(p) {
                        let mut data = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            let row = g.row_slice(r);
                            data.extend_from_slice(&row[offset..offset + w]);
                        }
                        Self::accumulate(grads, p, Tensor::raw(rows, w, data));
                    }
                    offset += w;
                }
            }
            Op::SoftmaxRowsMasked(x, mask) => {
                if self.needs(*x) {
                    let y = &node.value;
                    let (rows, cols) = y.shape();
                    let mut data = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let base = r * cols;
                        let mut dot = 0.0;
                        for c in 0..cols {
                            if mask[base + c] {
                                dot += g.data()[base + c] * y.data()[base + c];
                            }
                        }
                        for c in 0..cols {
                            if mask[base + c] {
                                data[base + c] =
                                    y.data()[base + c] * (g.data()[base + c] - dot);
                            }
                        }
                    }
                    Self::accumulate(grads, *x, Tensor::raw(rows, cols, data));
                }
            }
            Op::OuterSum(col, row) => {
                if self.needs(*col) {
                    let mut out = vec![0.0; g.rows()];
                    for (i, o) in out.iter_mut().enumerate() {
                        *o = g.row_slice(i).iter().sum();
                    }
                    Self::accumulate(grads, *col, Tensor::raw(g.rows(), 1, out));
                }
                if self.needs(*row) {
                    let sums = g.col_sums();
                    Self::accumulate(grads, *row, Tensor::raw(g.cols(), 1, sums.data().to_vec()));
                }
            }
            Op::GatherRows(x, indices) => {
                if self.needs(*x) {
                    let xv = self.value(*x);
                    let mut acc = Tensor::zeros(xv.rows(), xv.cols());
                    for (b, &src) in indices.iter().enumerate() {
                        let base = src * xv.cols();
                        for (k, &gv) in g.row_slice(b).iter().enumerate() {
                            acc.data_mut()[base + k] += gv;
                        }
                    }
                    Self::accumulate(grads, *x, acc);
                }
            }
            Op::LogisticLogPdf(x) => {
                if self.needs(*x) {
                    // d/dx [-x - 2 log(1+e^-x)] = 1 - 2 sigmoid(x)
                    Self::accumulate(
                        grads,
                        *x,
                        g.zip_map(self.value(*x), |gv, v| gv * (1.0 - 2.0 * sigmoid(v))),
                    );
                }
            }
        }
    }
}

/// Per-node gradients produced by `Tape::backward`.
pub struct Gradients {
    slots: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. the node, or None if the node does not
    /// participate (callers map absent slots to zero tensors).
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.slots.get(v.0).and_then(Option::as_ref)
    }
}
