//! Tape-based reverse-mode differentiation over [`DenseMatrix`] values.
//!
//! Every operation appends a node holding its forward value and enough
//! context to push an upstream gradient back to its inputs. Nodes are
//! stored in creation order, so a single reverse sweep is a valid
//! topological traversal.

use super::matrix::{sigmoid, DenseMatrix, LN_EPS};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Clamp applied to cosines before `acos` so its derivative stays finite.
pub const ACOS_CLAMP: f64 = 1.0 - 1e-7;

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    OuterSum(Var, Var),
    ScaleBy(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Transpose(Var),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Square(Var),
    Cos(Var),
    Acos(Var),
    MinConst(Var, f64),
    RowSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: DenseMatrix,
        inv_std: Vec<f64>,
    },
    HCat(Vec<Var>),
    VCat(Vec<Var>),
    ColSlice(Var, usize),
    MeanRows(Var),
    Sum(Var),
    Mean(Var),
    NormalizeRows(Var, Vec<f64>),
    PickPerRow(Var, Vec<usize>),
    ReplacePerRow(Var, Vec<usize>, Var),
    Gather(Var, Vec<usize>),
    CrossEntropy(Var, Vec<usize>, DenseMatrix),
}

struct Node {
    value: DenseMatrix,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that requires them.
pub struct Gradients {
    grads: Vec<Option<DenseMatrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&DenseMatrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<DenseMatrix> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn shape_err(op: &str, a: (usize, usize), b: (usize, usize)) -> Error {
    Error::Shape(format!("{op}: {a:?} vs {b:?}"))
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

    pub fn value(&self, v: Var) -> &DenseMatrix {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.get(0, 0)
    }

    fn push(&mut self, value: DenseMatrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn unary(&mut self, x: Var, value: DenseMatrix, op: Op) -> Var {
        let rg = self.rg(&[x]);
        self.push(value, op, rg)
    }

    /// A leaf whose gradient is not tracked.
    pub fn constant(&mut self, value: DenseMatrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked.
    pub fn leaf(&mut self, value: DenseMatrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// `a (n x m) + row (1 x m)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(shape_err("add_row", av.shape(), rv.shape()));
        }
        let mut value = av.clone();
        for r in 0..value.rows() {
            for (v, b) in value.row_mut(r).iter_mut().zip(rv.data()) {
                *v += b;
            }
        }
        let rg = self.rg(&[a, row]);
        Ok(self.push(value, Op::AddRow(a, row), rg))
    }

    /// `out[i][j] = col[i] + row[j]` for `col: n x 1`, `row: 1 x m`.
    pub fn outer_sum(&mut self, col: Var, row: Var) -> Result<Var> {
        let (cv, rv) = (self.value(col), self.value(row));
        if cv.cols() != 1 || rv.rows() != 1 {
            return Err(shape_err("outer_sum", cv.shape(), rv.shape()));
        }
        let mut value = DenseMatrix::zeros(cv.rows(), rv.cols());
        for i in 0..cv.rows() {
            let ci = cv.get(i, 0);
            for (v, r) in value.row_mut(i).iter_mut().zip(rv.data()) {
                *v = ci + r;
            }
        }
        let rg = self.rg(&[col, row]);
        Ok(self.push(value, Op::OuterSum(col, row), rg))
    }

    /// Multiplies every entry of `a` by the `1 x 1` node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).shape() != (1, 1) {
            return Err(shape_err("scale_by", self.value(a).shape(), self.value(s).shape()));
        }
        let value = self.value(a).scale(self.scalar(s));
        let rg = self.rg(&[a, s]);
        Ok(self.push(value, Op::ScaleBy(a, s), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).scale(c);
        self.unary(a, value, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|v| v + c);
        self.unary(a, value, Op::AddScalar(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.unary(a, value, Op::Transpose(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self.value(a).leaky_relu(slope);
        self.unary(a, value, Op::LeakyRelu(a, slope))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).tanh();
        self.unary(a, value, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.unary(a, value, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.unary(a, value, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        self.unary(a, value, Op::Log(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::abs);
        self.unary(a, value, Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v * v);
        self.unary(a, value, Op::Square(a))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::cos);
        self.unary(a, value, Op::Cos(a))
    }

    /// `acos` of the input clamped to `[-ACOS_CLAMP, ACOS_CLAMP]`.
    pub fn acos(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.clamp(-ACOS_CLAMP, ACOS_CLAMP).acos());
        self.unary(a, value, Op::Acos(a))
    }

    /// `min(x, c)` elementwise; the gradient is zero where the clamp is active.
    pub fn min_const(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|v| v.min(c));
        self.unary(a, value, Op::MinConst(a, c))
    }

    /// Row softmax with optional `{0,1}` mask; masked entries are exactly 0.
    pub fn row_softmax(&mut self, a: Var, mask: Option<&DenseMatrix>) -> Result<Var> {
        let value = self.value(a).row_softmax(mask)?;
        Ok(self.unary(a, value, Op::RowSoftmax(a)))
    }

    /// Layer normalization over each row with `1 x cols` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let cols = xv.cols();
        if self.value(gain).shape() != (1, cols) || self.value(bias).shape() != (1, cols) {
            return Err(shape_err("layer_norm", xv.shape(), self.value(gain).shape()));
        }
        let n = cols as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.rows());
        for r in 0..xhat.rows() {
            let row = xhat.row_mut(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
            inv_std.push(inv);
        }
        let (g, b) = (self.value(gain), self.value(bias));
        let mut value = xhat.clone();
        for r in 0..value.rows() {
            for (c, v) in value.row_mut(r).iter_mut().enumerate() {
                *v = *v * g.data()[c] + b.data()[c];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn hcat(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&DenseMatrix> = parts.iter().map(|p| self.value(*p)).collect();
        let value = DenseMatrix::hcat(&values)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::HCat(parts.to_vec()), rg))
    }

    pub fn vcat(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&DenseMatrix> = parts.iter().map(|p| self.value(*p)).collect();
        let value = DenseMatrix::vcat(&values)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::VCat(parts.to_vec()), rg))
    }

    pub fn col_slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(a).col_slice(start, len)?;
        Ok(self.unary(a, value, Op::ColSlice(a, start)))
    }

    /// Mean over rows, `n x m -> 1 x m`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).mean_rows();
        self.unary(a, value, Op::MeanRows(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = DenseMatrix::scalar(self.value(a).sum());
        self.unary(a, value, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let value = DenseMatrix::scalar(self.value(a).mean());
        self.unary(a, value, Op::Mean(a))
    }

    /// Rows scaled to unit norm, `x / sqrt(|x|^2 + 1e-12)`.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut value = av.clone();
        let mut norms = Vec::with_capacity(av.rows());
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let norm = (row.iter().map(|v| v * v).sum::<f64>() + 1e-12).sqrt();
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        self.unary(a, value, Op::NormalizeRows(a, norms))
    }

    /// `out[i] = a[i][idx[i]]` as an `n x 1` column.
    pub fn pick_per_row(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let av = self.value(a);
        if idx.len() != av.rows() || idx.iter().any(|&c| c >= av.cols()) {
            return Err(Error::Shape(format!(
                "pick_per_row: {} indices for {:?}",
                idx.len(),
                av.shape()
            )));
        }
        let col: Vec<f64> = idx.iter().enumerate().map(|(r, &c)| av.get(r, c)).collect();
        Ok(self.unary(a, DenseMatrix::col_vector(&col), Op::PickPerRow(a, idx.to_vec())))
    }

    /// Copy of `a` with `a[i][idx[i]]` replaced by `v[i]`.
    pub fn replace_per_row(&mut self, a: Var, idx: &[usize], v: Var) -> Result<Var> {
        let (av, vv) = (self.value(a), self.value(v));
        if idx.len() != av.rows() || vv.shape() != (av.rows(), 1) || idx.iter().any(|&c| c >= av.cols()) {
            return Err(shape_err("replace_per_row", av.shape(), vv.shape()));
        }
        let mut value = av.clone();
        for (r, &c) in idx.iter().enumerate() {
            value.set(r, c, vv.get(r, 0));
        }
        let rg = self.rg(&[a, v]);
        Ok(self.push(value, Op::ReplacePerRow(a, idx.to_vec(), v), rg))
    }

    /// Gathers entries of a vector-shaped node into an `n x 1` column.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let av = self.value(a);
        if av.rows() != 1 && av.cols() != 1 {
            return Err(Error::Shape(format!("gather expects a vector, got {:?}", av.shape())));
        }
        if idx.iter().any(|&i| i >= av.len()) {
            return Err(Error::Shape("gather index out of range".into()));
        }
        let col: Vec<f64> = idx.iter().map(|&i| av.data()[i]).collect();
        Ok(self.unary(a, DenseMatrix::col_vector(&col), Op::Gather(a, idx.to_vec())))
    }

    /// Mean softmax cross-entropy of `logits` rows against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if targets.len() != lv.rows() || targets.iter().any(|&t| t >= lv.cols()) {
            return Err(Error::Shape(format!(
                "cross_entropy: {} targets for {:?}",
                targets.len(),
                lv.shape()
            )));
        }
        let probs = lv.row_softmax(None)?;
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = lv.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let n = targets.len().max(1) as f64;
        let value = DenseMatrix::scalar(total / n);
        Ok(self.unary(logits, value, Op::CrossEntropy(logits, targets.to_vec(), probs)))
    }

    /// Reverse sweep from a `1 x 1` output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).shape() != (1, 1) {
            return Err(Error::Shape(format!(
                "backward needs a scalar output, got {:?}",
                self.value(output).shape()
            )));
        }
        let mut grads: Vec<Option<DenseMatrix>> = Vec::new();
        grads.resize_with(output.0 + 1, || None);
        grads[output.0] = Some(DenseMatrix::scalar(1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<DenseMatrix>], v: Var, g: DenseMatrix) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &DenseMatrix, grads: &mut [Option<DenseMatrix>]) -> Result<()> {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    let ga = g.matmul_t(self.value(*b))?;
                    self.accumulate(grads, *a, ga)?;
                }
                if self.wants(*b) {
                    let gb = self.value(*a).t_matmul(g)?;
                    self.accumulate(grads, *b, gb)?;
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let ga = g.hadamard(self.value(*b))?;
                    self.accumulate(grads, *a, ga)?;
                }
                if self.wants(*b) {
                    let gb = g.hadamard(self.value(*a))?;
                    self.accumulate(grads, *b, gb)?;
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone())?;
                if self.wants(*row) {
                    self.accumulate(grads, *row, g.mean_rows().scale(g.rows() as f64))?;
                }
            }
            Op::OuterSum(col, row) => {
                if self.wants(*col) {
                    self.accumulate(grads, *col, DenseMatrix::col_vector(&g.row_sums()))?;
                }
                if self.wants(*row) {
                    self.accumulate(grads, *row, g.mean_rows().scale(g.rows() as f64))?;
                }
            }
            Op::ScaleBy(a, s) => {
                let sv = self.scalar(*s);
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.scale(sv))?;
                }
                if self.wants(*s) {
                    let ds = g.hadamard(self.value(*a))?.sum();
                    self.accumulate(grads, *s, DenseMatrix::scalar(ds))?;
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.scale(*c))?,
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone())?,
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose())?,
            Op::LeakyRelu(a, slope) => {
                let x = self.value(*a);
                let ga = g.zip_map(x, |gv, xv| if xv >= 0.0 { gv } else { gv * slope })?;
                self.accumulate(grads, *a, ga)?;
            }
            Op::Tanh(a) => {
                let ga = g.zip_map(out, |gv, y| gv * (1.0 - y * y))?;
                self.accumulate(grads, *a, ga)?;
            }
            Op::Sigmoid(a) => {
                let ga = g.zip_map(out, |gv, y| gv * y * (1.0 - y))?;
                self.accumulate(grads, *a, ga)?;
            }
            Op::Exp(a) => {
                let ga = g.hadamard(out)?;
                self.accumulate(grads, *a, ga)?;
            }
            Op::Log(a) => {
                let ga = g.zip_map(self.value(*a), |gv, x| gv / x)?;
                self.accumulate(grads, *a, ga)?;
            }
            Op::Abs(a) => {
                let ga = g.zip_map(self.value(*a), |gv, x| gv * x.signum() * f64::from(x != 0.0))?;
                self.accumulate(grads, *a, ga)?;
            }
            Op::Square(a) => {
                let ga = g.zip_map(self.value(*a), |gv, x| 2.0 * gv * x)?;
                self.accumulate(grads, *a, ga)?;
            }
            Op::Cos(a) => {
                let ga = g.zip_map(self.value(*a), |gv, x| -gv * x.sin())?;
                self.accumulate(grads, *a, ga)?;
            }
            Op::Acos(a) => {
                let ga = g.zip_map(self.value(*a), |gv, x| {
                    if x.abs() > ACOS_CLAMP {
                        0.0
                    } else {
                        -gv / (1.0 - x * x).sqrt()
                    }
                })?;
                self.accumulate(grads, *a, ga)?;
            }
            Op::MinConst(a, c) => {
                let ga = g.zip_map(self.value(*a), |gv, x| if x < *c { gv } else { 0.0 })?;
                self.accumulate(grads, *a, ga)?;
            }
            Op::RowSoftmax(a) => {
                let mut ga = DenseMatrix::zeros(out.rows(), out.cols());
                for r in 0..out.rows() {
                    let (y, gr) = (out.row(r), g.row(r));
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (c, v) in ga.row_mut(r).iter_mut().enumerate() {
                        *v = y[c] * (gr[c] - dot);
                    }
                }
                self.accumulate(grads, *a, ga)?;
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gain);
                if self.wants(*gain) {
                    let mut dg = DenseMatrix::zeros(1, gv.cols());
                    for r in 0..g.rows() {
                        for (c, d) in dg.data_mut().iter_mut().enumerate() {
                            *d += g.get(r, c) * xhat.get(r, c);
                        }
                    }
                    self.accumulate(grads, *gain, dg)?;
                }
                if self.wants(*bias) {
                    self.accumulate(grads, *bias, g.mean_rows().scale(g.rows() as f64))?;
                }
                if self.wants(*x) {
                    let n = g.cols() as f64;
                    let mut dx = DenseMatrix::zeros(g.rows(), g.cols());
                    for r in 0..g.rows() {
                        let dxhat: Vec<f64> = g.row(r).iter().zip(gv.data()).map(|(a, b)| a * b).collect();
                        let xh = xhat.row(r);
                        let s1: f64 = dxhat.iter().sum();
                        let s2: f64 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum();
                        for (c, v) in dx.row_mut(r).iter_mut().enumerate() {
                            *v = inv_std[r] / n * (n * dxhat[c] - s1 - xh[c] * s2);
                        }
                    }
                    self.accumulate(grads, *x, dx)?;
                }
            }
            Op::HCat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if self.wants(*p) {
                        self.accumulate(grads, *p, g.col_slice(offset, w)?)?;
                    }
                    offset += w;
                }
            }
            Op::VCat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let (h, w) = self.value(*p).shape();
                    if self.wants(*p) {
                        let slice = g.data()[offset * w..(offset + h) * w].to_vec();
                        self.accumulate(grads, *p, DenseMatrix::from_vec(h, w, slice)?)?;
                    }
                    offset += h;
                }
            }
            Op::ColSlice(a, start) => {
                let av = self.value(*a);
                let mut ga = DenseMatrix::zeros(av.rows(), av.cols());
                for r in 0..ga.rows() {
                    ga.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *a, ga)?;
            }
            Op::MeanRows(a) => {
                let av = self.value(*a);
                let n = av.rows() as f64;
                let mut ga = DenseMatrix::zeros(av.rows(), av.cols());
                for r in 0..ga.rows() {
                    for (v, gv) in ga.row_mut(r).iter_mut().zip(g.data()) {
                        *v = gv / n;
                    }
                }
                self.accumulate(grads, *a, ga)?;
            }
            Op::Sum(a) => {
                let (r, c) = self.value(*a).shape();
                self.accumulate(grads, *a, DenseMatrix::filled(r, c, g.get(0, 0)))?;
            }
            Op::Mean(a) => {
                let (r, c) = self.value(*a).shape();
                let n = (r * c).max(1) as f64;
                self.accumulate(grads, *a, DenseMatrix::filled(r, c, g.get(0, 0) / n))?;
            }
            Op::NormalizeRows(a, norms) => {
                let mut ga = DenseMatrix::zeros(out.rows(), out.cols());
                for r in 0..out.rows() {
                    let (y, gr) = (out.row(r), g.row(r));
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (c, v) in ga.row_mut(r).iter_mut().enumerate() {
                        *v = (gr[c] - y[c] * dot) / norms[r];
                    }
                }
                self.accumulate(grads, *a, ga)?;
            }
            Op::PickPerRow(a, idx) => {
                let av = self.value(*a);
                let mut ga = DenseMatrix::zeros(av.rows(), av.cols());
                for (r, &c) in idx.iter().enumerate() {
                    ga.set(r, c, g.get(r, 0));
                }
                self.accumulate(grads, *a, ga)?;
            }
            Op::ReplacePerRow(a, idx, v) => {
                if self.wants(*a) {
                    let mut ga = g.clone();
                    for (r, &c) in idx.iter().enumerate() {
                        ga.set(r, c, 0.0);
                    }
                    self.accumulate(grads, *a, ga)?;
                }
                if self.wants(*v) {
                    let col: Vec<f64> = idx.iter().enumerate().map(|(r, &c)| g.get(r, c)).collect();
                    self.accumulate(grads, *v, DenseMatrix::col_vector(&col))?;
                }
            }
            Op::Gather(a, idx) => {
                let av = self.value(*a);
                let mut ga = DenseMatrix::zeros(av.rows(), av.cols());
                for (r, &i) in idx.iter().enumerate() {
                    ga.data_mut()[i] += g.get(r, 0);
                }
                self.accumulate(grads, *a, ga)?;
            }
            Op::CrossEntropy(logits, targets, probs) => {
                let n = targets.len().max(1) as f64;
                let scale = g.get(0, 0) / n;
                let mut ga = probs.scale(scale);
                for (r, &t) in targets.iter().enumerate() {
                    let v = ga.get(r, t) - scale;
                    ga.set(r, t, v);
                }
                self.accumulate(grads, *logits, ga)?;
            }
        }
        Ok(())
    }
}
