//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records a computation as a flat list of nodes in SSA order;
//! [`Tape::backward`] walks the list in reverse and accumulates gradients.
//! Scalars are 1x1 matrices. The op set is exactly what the model needs;
//! anything exotic (the fused block-sparse attention) plugs in through the
//! [`CustomOp`] trait so the tape stays generic.
//!
//! Backward order is the reverse of construction order and all gradient
//! accumulation is ordered, so gradients are bit-deterministic for a given
//! graph.

use std::sync::Arc;

use ndarray::{Array2, Axis};
use thiserror::Error;

pub type Matrix = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Error)]
pub enum GradError {
    #[error("backward target must be a 1x1 scalar, got {0}x{1}")]
    NonScalarLoss(usize, usize),
}

/// A differentiable operation with hand-written forward and backward.
pub trait CustomOp: Send + Sync {
    fn forward(&self, inputs: &[&Matrix]) -> Matrix;
    /// Gradients with respect to every input, aligned with `inputs`.
    fn backward(&self, inputs: &[&Matrix], output_grad: &Matrix) -> Vec<Matrix>;
    fn name(&self) -> &'static str;
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_a: bool, trans_b: bool },
    Add { a: Var, b: Var },
    AddRow { a: Var, row: Var },
    MulElem { a: Var, b: Var },
    MulMask { a: Var, mask: Arc<Matrix> },
    Scale { a: Var, c: f64 },
    Relu { a: Var },
    Sigmoid { a: Var },
    LogClamped { a: Var, eps: f64 },
    SoftmaxRows { a: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: f64 },
    GatherRows { table: Var, indices: Arc<Vec<usize>> },
    MeanRows { a: Var },
    SumAll { a: Var },
    MeanAll { a: Var },
    ConcatCols { parts: Vec<Var> },
    Custom { inputs: Vec<Var>, op: Arc<dyn CustomOp> },
}

struct Node {
    value: Matrix,
    needs_grad: bool,
    op: Op,
}

/// Recorded computation graph.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.dim(), (1, 1), "scalar() on non-scalar node");
        m[(0, 0)]
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Matrix, needs_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; no gradient is tracked through it.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// Trainable input; gradients accumulate here.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, true, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let value = match (trans_a, trans_b) {
            (false, false) => av.dot(bv),
            (false, true) => av.dot(&bv.t()),
            (true, false) => av.t().dot(bv),
            (true, true) => av.t().dot(&bv.t()),
        };
        let needs = self.needs(a) || self.needs(b);
        self.push(value, needs, Op::MatMul { a, b, trans_a, trans_b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let needs = self.needs(a) || self.needs(b);
        self.push(value, needs, Op::Add { a, b })
    }

    /// Broadcast-add a 1xN row (bias) to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) + self.value(row);
        let needs = self.needs(a) || self.needs(row);
        self.push(value, needs, Op::AddRow { a, row })
    }

    pub fn mul_elem(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let needs = self.needs(a) || self.needs(b);
        self.push(value, needs, Op::MulElem { a, b })
    }

    /// Elementwise product with a constant mask (dropout).
    pub fn mul_mask(&mut self, a: Var, mask: Arc<Matrix>) -> Var {
        let value = self.value(a) * &*mask;
        let needs = self.needs(a);
        self.push(value, needs, Op::MulMask { a, mask })
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        let needs = self.needs(a);
        self.push(value, needs, Op::Scale { a, c })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        let needs = self.needs(a);
        self.push(value, needs, Op::Relu { a })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let needs = self.needs(a);
        self.push(value, needs, Op::Sigmoid { a })
    }

    /// `ln(max(x, eps))`; the gradient is zero where the clamp is active.
    pub fn log_clamped(&mut self, a: Var, eps: f64) -> Var {
        let value = self.value(a).mapv(|x| x.max(eps).ln());
        let needs = self.needs(a);
        self.push(value, needs, Op::LogClamped { a, eps })
    }

    /// Row softmax with an optional additive mask (0 or -inf entries).
    /// Rows must keep at least one finite entry.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<Arc<Matrix>>) -> Var {
        let logits = self.value(a);
        let value = softmax_rows_masked(logits, mask.as_deref());
        let needs = self.needs(a);
        // The mask is burned into the probabilities (disallowed entries are
        // exactly zero), so backward does not need to keep it.
        self.push(value, needs, Op::SoftmaxRows { a })
    }

    /// Row-wise layer normalization with learnable gain/bias (1xD each).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let d = xv.ncols() as f64;
        let mut value = xv.clone();
        for mut row in value.rows_mut() {
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let inv = 1.0 / (var + eps).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv * g[(0, j)] + b[(0, j)];
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(value, needs, Op::LayerNorm { x, gamma, beta, eps })
    }

    /// Pick rows of `table` by index (embedding lookup / position select).
    pub fn gather_rows(&mut self, table: Var, indices: Arc<Vec<usize>>) -> Var {
        let t = self.value(table);
        let mut value = Matrix::zeros((indices.len(), t.ncols()));
        for (i, &idx) in indices.iter().enumerate() {
            value.row_mut(i).assign(&t.row(idx));
        }
        let needs = self.needs(table);
        self.push(value, needs, Op::GatherRows { table, indices })
    }

    /// Column-wise mean over rows, producing 1xD.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let value = av
            .mean_axis(Axis(0))
            .expect("mean over empty matrix")
            .insert_axis(Axis(0));
        let needs = self.needs(a);
        self.push(value, needs, Op::MeanRows { a })
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Matrix::from_elem((1, 1), self.value(a).sum());
        let needs = self.needs(a);
        self.push(value, needs, Op::SumAll { a })
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let value = Matrix::from_elem((1, 1), av.sum() / av.len() as f64);
        let needs = self.needs(a);
        self.push(value, needs, Op::MeanAll { a })
    }

    /// Concatenate along columns (multi-head outputs).
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).nrows();
        let total: usize = parts.iter().map(|p| self.value(*p).ncols()).sum();
        let mut value = Matrix::zeros((rows, total));
        let mut offset = 0;
        for p in parts {
            let pv = self.value(*p);
            assert_eq!(pv.nrows(), rows);
            value
                .slice_mut(ndarray::s![.., offset..offset + pv.ncols()])
                .assign(pv);
            offset += pv.ncols();
        }
        let needs = parts.iter().any(|p| self.needs(*p));
        self.push(value, needs, Op::ConcatCols { parts: parts.to_vec() })
    }

    /// Record a custom differentiable op.
    pub fn custom(&mut self, inputs: &[Var], op: Arc<dyn CustomOp>) -> Var {
        let values: Vec<&Matrix> = inputs.iter().map(|v| self.value(*v)).collect();
        let value = op.forward(&values);
        let needs = inputs.iter().any(|v| self.needs(*v));
        self.push(
            value,
            needs,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
        )
    }

    /// Reverse sweep from a scalar loss. Returns per-node gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients, GradError> {
        let dim = self.value(loss).dim();
        if dim != (1, 1) {
            return Err(GradError::NonScalarLoss(dim.0, dim.1));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::from_elem((1, 1), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                // Leaves keep their accumulated gradient; interior nodes
                // hand theirs on and release the buffer.
                grads[idx] = Some(dy);
                continue;
            }
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul { a, b, trans_a, trans_b } => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    if self.needs(*a) {
                        let da = match (trans_a, trans_b) {
                            (false, false) => dy.dot(&bv.t()),
                            (false, true) => dy.dot(bv),
                            (true, false) => bv.dot(&dy.t()),
                            (true, true) => bv.t().dot(&dy.t()),
                        };
                        accumulate(&mut grads, a.0, da);
                    }
                    if self.needs(*b) {
                        let db = match (trans_a, trans_b) {
                            (false, false) => av.t().dot(&dy),
                            (false, true) => dy.t().dot(av),
                            (true, false) => av.dot(&dy),
                            (true, true) => dy.t().dot(&av.t()),
                        };
                        accumulate(&mut grads, b.0, db);
                    }
                }
                Op::Add { a, b } => {
                    if self.needs(*a) {
                        accumulate(&mut grads, a.0, dy.clone());
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, b.0, dy.clone());
                    }
                }
                Op::AddRow { a, row } => {
                    if self.needs(*a) {
                        accumulate(&mut grads, a.0, dy.clone());
                    }
                    if self.needs(*row) {
                        let drow = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut grads, row.0, drow);
                    }
                }
                Op::MulElem { a, b } => {
                    if self.needs(*a) {
                        accumulate(&mut grads, a.0, &dy * self.value(*b));
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, b.0, &dy * self.value(*a));
                    }
                }
                Op::MulMask { a, mask } => {
                    if self.needs(*a) {
                        accumulate(&mut grads, a.0, &dy * &**mask);
                    }
                }
                Op::Scale { a, c } => {
                    if self.needs(*a) {
                        accumulate(&mut grads, a.0, &dy * *c);
                    }
                }
                Op::Relu { a } => {
                    if self.needs(*a) {
                        let gate = self.value(*a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                        accumulate(&mut grads, a.0, &dy * &gate);
                    }
                }
                Op::Sigmoid { a } => {
                    if self.needs(*a) {
                        let y = &node.value;
                        let dsig = y * &y.mapv(|s| 1.0 - s);
                        accumulate(&mut grads, a.0, &dy * &dsig);
                    }
                }
                Op::LogClamped { a, eps } => {
                    if self.needs(*a) {
                        let av = self.value(*a);
                        let dlog = av.mapv(|x| if x > *eps { 1.0 / x } else { 0.0 });
                        accumulate(&mut grads, a.0, &dy * &dlog);
                    }
                }
                Op::SoftmaxRows { a } => {
                    if self.needs(*a) {
                        let p = &node.value;
                        let mut da = Matrix::zeros(p.dim());
                        for r in 0..p.nrows() {
                            let dot: f64 = (0..p.ncols())
                                .map(|c| p[(r, c)] * dy[(r, c)])
                                .sum();
                            for c in 0..p.ncols() {
                                da[(r, c)] = p[(r, c)] * (dy[(r, c)] - dot);
                            }
                        }
                        accumulate(&mut grads, a.0, da);
                    }
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let xv = self.value(*x);
                    let g = self.value(*gamma);
                    let d = xv.ncols();
                    let df = d as f64;
                    let mut dx = Matrix::zeros(xv.dim());
                    let mut dgamma = Matrix::zeros((1, d));
                    let mut dbeta = Matrix::zeros((1, d));
                    for r in 0..xv.nrows() {
                        let row = xv.row(r);
                        let mean = row.sum() / df;
                        let var =
                            row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / df;
                        let inv = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                        let dyg: Vec<f64> =
                            (0..d).map(|j| dy[(r, j)] * g[(0, j)]).collect();
                        let mean_dyg: f64 = dyg.iter().sum::<f64>() / df;
                        let mean_dyg_xhat: f64 =
                            dyg.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / df;
                        for j in 0..d {
                            dgamma[(0, j)] += dy[(r, j)] * xhat[j];
                            dbeta[(0, j)] += dy[(r, j)];
                            dx[(r, j)] =
                                inv * (dyg[j] - mean_dyg - xhat[j] * mean_dyg_xhat);
                        }
                    }
                    if self.needs(*x) {
                        accumulate(&mut grads, x.0, dx);
                    }
                    if self.needs(*gamma) {
                        accumulate(&mut grads, gamma.0, dgamma);
                    }
                    if self.needs(*beta) {
                        accumulate(&mut grads, beta.0, dbeta);
                    }
                }
                Op::GatherRows { table, indices } => {
                    if self.needs(*table) {
                        let t = self.value(*table);
                        let mut dt = Matrix::zeros(t.dim());
                        for (i, &idx) in indices.iter().enumerate() {
                            let mut target = dt.row_mut(idx);
                            target += &dy.row(i);
                        }
                        accumulate(&mut grads, table.0, dt);
                    }
                }
                Op::MeanRows { a } => {
                    if self.needs(*a) {
                        let av = self.value(*a);
                        let n = av.nrows() as f64;
                        let mut da = Matrix::zeros(av.dim());
                        for mut row in da.rows_mut() {
                            row.assign(&(&dy.row(0) / n));
                        }
                        accumulate(&mut grads, a.0, da);
                    }
                }
                Op::SumAll { a } => {
                    if self.needs(*a) {
                        let av = self.value(*a);
                        let da = Matrix::from_elem(av.dim(), dy[(0, 0)]);
                        accumulate(&mut grads, a.0, da);
                    }
                }
                Op::MeanAll { a } => {
                    if self.needs(*a) {
                        let av = self.value(*a);
                        let da = Matrix::from_elem(av.dim(), dy[(0, 0)] / av.len() as f64);
                        accumulate(&mut grads, a.0, da);
                    }
                }
                Op::ConcatCols { parts } => {
                    let mut offset = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        if self.needs(*p) {
                            let slice = dy.slice(ndarray::s![.., offset..offset + w]);
                            accumulate(&mut grads, p.0, slice.to_owned());
                        }
                        offset += w;
                    }
                }
                Op::Custom { inputs, op } => {
                    let values: Vec<&Matrix> = inputs.iter().map(|v| self.value(*v)).collect();
                    let dinputs = op.backward(&values, &dy);
                    assert_eq!(
                        dinputs.len(),
                        inputs.len(),
                        "custom op {} returned wrong gradient count",
                        op.name()
                    );
                    for (input, di) in inputs.iter().zip(dinputs) {
                        if self.needs(*input) {
                            accumulate(&mut grads, input.0, di);
                        }
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Matrix>], idx: usize, delta: Matrix) {
    match &mut grads[idx] {
        Some(existing) => *existing += &delta,
        slot @ None => *slot = Some(delta),
    }
}

/// Gradients from one backward sweep, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a variable, zeros when the variable never influenced
    /// the loss.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Matrix {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Matrix::zeros(shape),
        }
    }
}

/// Numerically stable masked row softmax shared by tape and oracles.
pub fn softmax_rows_masked(logits: &Matrix, mask: Option<&Matrix>) -> Matrix {
    let mut out = logits.clone();
    if let Some(m) = mask {
        assert_eq!(m.dim(), logits.dim(), "softmax mask shape mismatch");
        out += m;
    }
    for mut row in out.rows_mut() {
        let max = row
            .iter()
            .copied()
            .filter(|v| v.is_finite())
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(
            max.is_finite(),
            "softmax row has no finite entries (empty attention row)"
        );
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = if v.is_finite() { (*v - max).exp() } else { 0.0 };
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}
