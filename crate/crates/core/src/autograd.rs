//! Reverse-mode automatic differentiation over [`Tensor`] matrices.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value
//! and the recipe for its local derivative. [`Graph::backward`] walks the
//! tape once in reverse. Graphs are built fresh for every loss evaluation.

use std::collections::HashMap;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{dot, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Affine(Var, f64),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Gelu(Var),
    Softplus(Var),
    SmoothL1(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNormRows(Var, f64),
    L2NormalizeRows(Var),
    SumNormalizeRows(Var),
    Transpose(Var),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Pick(Var, Vec<(usize, usize)>),
    Sum(Var),
    RowSums(Var),
    ColSums(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients of one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(ParamId, Var)>,
    param_cache: HashMap<ParamId, Var>,
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A value that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// A free input that receives gradient but is not a stored parameter.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// The node for a stored parameter; repeated requests share one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_cache.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Leaf, true);
        self.params.push((id, v));
        self.param_cache.insert(id, v);
        v
    }

    pub fn param_by_name(&mut self, store: &ParamStore, name: &str) -> Var {
        self.param(store, store.id(name))
    }

    /// Copies `v` into a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    /// `a * b^T`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_t(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMulT(a, b), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(value, Op::Transpose(a), ng)
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    /// Adds the `1 x c` row `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "add_row expects a 1x{c} row");
        let mut value = self.value(a).clone();
        let rv = self.value(row).data().to_vec();
        for i in 0..r {
            for (x, y) in value.row_slice_mut(i).iter_mut().zip(&rv) {
                *x += y;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(value, Op::AddRow(a, row), ng)
    }

    /// Multiplies every row of `a` elementwise by the `1 x c` row `row`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "mul_row expects a 1x{c} row");
        let mut value = self.value(a).clone();
        let rv = self.value(row).data().to_vec();
        for i in 0..r {
            for (x, y) in value.row_slice_mut(i).iter_mut().zip(&rv) {
                *x *= y;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(value, Op::MulRow(a, row), ng)
    }

    /// Multiplies row `i` of `a` by `col[i]` for an `r x 1` column.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (r, _) = self.shape(a);
        assert_eq!(self.shape(col), (r, 1), "mul_col expects a {r}x1 column");
        let mut value = self.value(a).clone();
        let cv = self.value(col).data().to_vec();
        for (i, k) in cv.iter().enumerate() {
            for x in value.row_slice_mut(i) {
                *x *= k;
            }
        }
        let ng = self.ng(a) || self.ng(col);
        self.push(value, Op::MulCol(a, col), ng)
    }

    /// `k * a`
    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).map(|x| k * x);
        let ng = self.ng(a);
        self.push(value, Op::Affine(a, k), ng)
    }

    /// `c - a` for a constant `c` (used by hinge terms).
    pub fn rsub_scalar(&mut self, c: f64, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        let cst = self.constant(Tensor::filled(self.shape(a).0, self.shape(a).1, c));
        self.add(neg, cst)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        let ng = self.ng(a);
        self.push(value, Op::Exp(a), ng)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        let ng = self.ng(a);
        self.push(value, Op::Log(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(value, Op::Relu(a), ng)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| {
            let t = (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh();
            0.5 * x * (1.0 + t)
        });
        let ng = self.ng(a);
        self.push(value, Op::Gelu(a), ng)
    }

    /// `ln(1 + e^x)`, computed stably.
    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(softplus);
        let ng = self.ng(a);
        self.push(value, Op::Softplus(a), ng)
    }

    /// Elementwise smooth-L1 with transition at 1.
    pub fn smooth_l1(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x.abs() < 1.0 { 0.5 * x * x } else { x.abs() - 0.5 });
        let ng = self.ng(a);
        self.push(value, Op::SmoothL1(a), ng)
    }

    // ---- row-wise normalizations -----------------------------------------

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for i in 0..value.rows() {
            softmax_in_place(value.row_slice_mut(i));
        }
        let ng = self.ng(a);
        self.push(value, Op::SoftmaxRows(a), ng)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for i in 0..value.rows() {
            let row = value.row_slice_mut(i);
            let lse = log_sum_exp(row);
            for x in row {
                *x -= lse;
            }
        }
        let ng = self.ng(a);
        self.push(value, Op::LogSoftmaxRows(a), ng)
    }

    /// Zero-mean, unit-variance rows (no affine part).
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let mut value = self.value(a).clone();
        for i in 0..value.rows() {
            let row = value.row_slice_mut(i);
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            for x in row {
                *x = (*x - mean) * inv;
            }
        }
        let ng = self.ng(a);
        self.push(value, Op::LayerNormRows(a, eps), ng)
    }

    /// Scales each row to unit Euclidean length.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for i in 0..value.rows() {
            let row = value.row_slice_mut(i);
            let n = dot(row, row).sqrt().max(1e-12);
            for x in row {
                *x /= n;
            }
        }
        let ng = self.ng(a);
        self.push(value, Op::L2NormalizeRows(a), ng)
    }

    /// Divides each row by its sum.
    pub fn sum_normalize_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for i in 0..value.rows() {
            let row = value.row_slice_mut(i);
            let s: f64 = row.iter().sum();
            for x in row {
                *x /= s;
            }
        }
        let ng = self.ng(a);
        self.push(value, Op::SumNormalizeRows(a), ng)
    }

    // ---- indexing and assembly --------------------------------------------

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let src = self.value(a);
        let rows: Vec<&[f64]> = idx.iter().map(|&i| src.row_slice(i)).collect();
        let value = if rows.is_empty() { Tensor::zeros(0, src.cols()) } else { Tensor::from_rows(&rows) };
        let ng = self.ng(a);
        self.push(value, Op::GatherRows(a, idx.to_vec()), ng)
    }

    pub fn row(&mut self, a: Var, i: usize) -> Var {
        self.gather_rows(a, &[i])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let cols = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(v.data());
            rows += v.rows();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = self.shape(parts[0]).0;
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut value = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rows(), rows, "concat_cols row mismatch");
            for i in 0..rows {
                value.row_slice_mut(i)[off..off + v.cols()].copy_from_slice(v.row_slice(i));
            }
            off += v.cols();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let src = self.value(a);
        assert!(start + len <= src.cols(), "slice_cols out of range");
        let mut value = Tensor::zeros(src.rows(), len);
        for i in 0..src.rows() {
            value.row_slice_mut(i).copy_from_slice(&src.row_slice(i)[start..start + len]);
        }
        let ng = self.ng(a);
        self.push(value, Op::SliceCols(a, start), ng)
    }

    /// Collects the listed `(row, col)` entries into an `n x 1` column.
    pub fn pick(&mut self, a: Var, idx: &[(usize, usize)]) -> Var {
        let src = self.value(a);
        let data = idx.iter().map(|&(r, c)| src.get(r, c)).collect();
        let value = Tensor::from_vec(idx.len(), 1, data);
        let ng = self.ng(a);
        self.push(value, Op::Pick(a, idx.to_vec()), ng)
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(value, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// `r x 1` column of row sums.
    pub fn row_sums(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let data = (0..src.rows()).map(|i| src.row_slice(i).iter().sum()).collect();
        let value = Tensor::from_vec(src.rows(), 1, data);
        let ng = self.ng(a);
        self.push(value, Op::RowSums(a), ng)
    }

    /// `1 x c` row of column sums.
    pub fn col_sums(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let mut value = Tensor::zeros(1, src.cols());
        for i in 0..src.rows() {
            for (o, x) in value.data_mut().iter_mut().zip(src.row_slice(i)) {
                *o += x;
            }
        }
        let ng = self.ng(a);
        self.push(value, Op::ColSums(a), ng)
    }

    // ---- composite helpers ------------------------------------------------

    /// `x W + b` for a `1 x out` bias row.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    /// Per-row cross-entropy of `logits` against class indices, as an `n x 1` column.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Var {
        assert_eq!(self.shape(logits).0, targets.len(), "one target per row");
        let lp = self.log_softmax_rows(logits);
        let idx: Vec<(usize, usize)> = targets.iter().enumerate().map(|(i, &t)| (i, t)).collect();
        let picked = self.pick(lp, &idx);
        self.scale(picked, -1.0)
    }

    /// Mean cross-entropy over rows.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let rows = self.cross_entropy_rows(logits, targets);
        self.mean(rows)
    }

    /// `log sum_j exp(a_j)` over every entry of `a`, as a scalar.
    pub fn log_sum_exp_all(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let flat_idx: Vec<(usize, usize)> = (0..r).flat_map(|i| (0..c).map(move |j| (i, j))).collect();
        let col = self.pick(a, &flat_idx);
        let row = self.transpose(col);
        let lp = self.log_softmax_rows(row);
        // log_softmax(x)_0 = x_0 - lse  =>  lse = x_0 - log_softmax(x)_0
        let x0 = self.pick(row, &[(0, 0)]);
        let l0 = self.pick(lp, &[(0, 0)]);
        self.sub(x0, l0)
    }

    // ---- backward ---------------------------------------------------------

    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward expects a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    /// Gradient for every stored parameter touched by this graph, keyed by id.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(ParamId, Tensor)> {
        self.params
            .iter()
            .filter_map(|&(id, v)| grads.get(v).map(|g| (id, g.clone())))
            .collect()
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &self.nodes[i].value;
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    acc(*a, g.matmul_t(val(*b)));
                }
                if self.ng(*b) {
                    acc(*b, val(*a).t_matmul(g));
                }
            }
            Op::MatMulT(a, b) => {
                if self.ng(*a) {
                    acc(*a, g.matmul(val(*b)));
                }
                if self.ng(*b) {
                    acc(*b, g.t_matmul(val(*a)));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                acc(*a, g.zip_map(val(*b), |x, y| x * y));
                acc(*b, g.zip_map(val(*a), |x, y| x * y));
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                if self.ng(*row) {
                    acc(*row, column_sums(g));
                }
            }
            Op::MulRow(a, row) => {
                let rv = val(*row);
                if self.ng(*a) {
                    let mut ga = g.clone();
                    for r in 0..ga.rows() {
                        for (x, y) in ga.row_slice_mut(r).iter_mut().zip(rv.data()) {
                            *x *= y;
                        }
                    }
                    acc(*a, ga);
                }
                if self.ng(*row) {
                    acc(*row, column_sums(&g.zip_map(val(*a), |x, y| x * y)));
                }
            }
            Op::MulCol(a, col) => {
                let cv = val(*col);
                if self.ng(*a) {
                    let mut ga = g.clone();
                    for r in 0..ga.rows() {
                        let k = cv.data()[r];
                        for x in ga.row_slice_mut(r) {
                            *x *= k;
                        }
                    }
                    acc(*a, ga);
                }
                if self.ng(*col) {
                    let av = val(*a);
                    let data = (0..g.rows()).map(|r| dot(g.row_slice(r), av.row_slice(r))).collect();
                    acc(*col, Tensor::from_vec(g.rows(), 1, data));
                }
            }
            Op::Affine(a, k) => acc(*a, g.map(|x| k * x)),
            Op::Exp(a) => acc(*a, g.zip_map(out, |x, y| x * y)),
            Op::Log(a) => acc(*a, g.zip_map(val(*a), |x, y| x / y)),
            Op::Relu(a) => acc(*a, g.zip_map(val(*a), |x, y| if y > 0.0 { x } else { 0.0 })),
            Op::Gelu(a) => acc(
                *a,
                g.zip_map(val(*a), |gx, x| {
                    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
                    let t = u.tanh();
                    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
                    gx * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                }),
            ),
            Op::Softplus(a) => acc(*a, g.zip_map(val(*a), |gx, x| gx * sigmoid(x))),
            Op::SmoothL1(a) => acc(
                *a,
                g.zip_map(val(*a), |gx, x| if x.abs() < 1.0 { gx * x } else { gx * x.signum() }),
            ),
            Op::SoftmaxRows(a) => {
                let mut ga = Tensor::zeros(g.rows(), g.cols());
                for r in 0..g.rows() {
                    let y = out.row_slice(r);
                    let gy = g.row_slice(r);
                    let s = dot(y, gy);
                    for ((o, yy), gg) in ga.row_slice_mut(r).iter_mut().zip(y).zip(gy) {
                        *o = yy * (gg - s);
                    }
                }
                acc(*a, ga);
            }
            Op::LogSoftmaxRows(a) => {
                let mut ga = Tensor::zeros(g.rows(), g.cols());
                for r in 0..g.rows() {
                    let y = out.row_slice(r);
                    let gy = g.row_slice(r);
                    let s: f64 = gy.iter().sum();
                    for ((o, yy), gg) in ga.row_slice_mut(r).iter_mut().zip(y).zip(gy) {
                        *o = gg - yy.exp() * s;
                    }
                }
                acc(*a, ga);
            }
            Op::LayerNormRows(a, eps) => {
                let x = val(*a);
                let mut ga = Tensor::zeros(g.rows(), g.cols());
                for r in 0..g.rows() {
                    let xr = x.row_slice(r);
                    let n = xr.len() as f64;
                    let mean = xr.iter().sum::<f64>() / n;
                    let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    let inv = 1.0 / (var + eps).sqrt();
                    let y = out.row_slice(r);
                    let gy = g.row_slice(r);
                    let g_mean = gy.iter().sum::<f64>() / n;
                    let gy_y = dot(gy, y) / n;
                    for (k, o) in ga.row_slice_mut(r).iter_mut().enumerate() {
                        *o = inv * (gy[k] - g_mean - y[k] * gy_y);
                    }
                }
                acc(*a, ga);
            }
            Op::L2NormalizeRows(a) => {
                let x = val(*a);
                let mut ga = Tensor::zeros(g.rows(), g.cols());
                for r in 0..g.rows() {
                    let xr = x.row_slice(r);
                    let n = dot(xr, xr).sqrt().max(1e-12);
                    let y = out.row_slice(r);
                    let gy = g.row_slice(r);
                    let s = dot(gy, y);
                    for (k, o) in ga.row_slice_mut(r).iter_mut().enumerate() {
                        *o = (gy[k] - y[k] * s) / n;
                    }
                }
                acc(*a, ga);
            }
            Op::SumNormalizeRows(a) => {
                let x = val(*a);
                let mut ga = Tensor::zeros(g.rows(), g.cols());
                for r in 0..g.rows() {
                    let s: f64 = x.row_slice(r).iter().sum();
                    let y = out.row_slice(r);
                    let gy = g.row_slice(r);
                    let gy_y = dot(gy, y);
                    for (k, o) in ga.row_slice_mut(r).iter_mut().enumerate() {
                        *o = (gy[k] - gy_y) / s;
                    }
                }
                acc(*a, ga);
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::GatherRows(a, idx) => {
                let src = val(*a);
                let mut ga = Tensor::zeros(src.rows(), src.cols());
                for (k, &r) in idx.iter().enumerate() {
                    for (o, x) in ga.row_slice_mut(r).iter_mut().zip(g.row_slice(k)) {
                        *o += x;
                    }
                }
                acc(*a, ga);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (r, c) = val(p).shape();
                    if self.ng(p) {
                        acc(p, Tensor::from_vec(r, c, g.data()[off * c..(off + r) * c].to_vec()));
                    }
                    off += r;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (r, c) = val(p).shape();
                    if self.ng(p) {
                        let mut gp = Tensor::zeros(r, c);
                        for i in 0..r {
                            gp.row_slice_mut(i).copy_from_slice(&g.row_slice(i)[off..off + c]);
                        }
                        acc(p, gp);
                    }
                    off += c;
                }
            }
            Op::SliceCols(a, start) => {
                let src = val(*a);
                let mut ga = Tensor::zeros(src.rows(), src.cols());
                let len = g.cols();
                for r in 0..src.rows() {
                    ga.row_slice_mut(r)[*start..*start + len].copy_from_slice(g.row_slice(r));
                }
                acc(*a, ga);
            }
            Op::Pick(a, idx) => {
                let src = val(*a);
                let mut ga = Tensor::zeros(src.rows(), src.cols());
                for (k, &(r, c)) in idx.iter().enumerate() {
                    let cur = ga.get(r, c);
                    ga.set(r, c, cur + g.data()[k]);
                }
                acc(*a, ga);
            }
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                acc(*a, Tensor::filled(r, c, g.item()));
            }
            Op::RowSums(a) => {
                let (r, c) = val(*a).shape();
                let mut ga = Tensor::zeros(r, c);
                for i in 0..r {
                    let k = g.data()[i];
                    for x in ga.row_slice_mut(i) {
                        *x = k;
                    }
                }
                acc(*a, ga);
            }
            Op::ColSums(a) => {
                let (r, c) = val(*a).shape();
                let mut ga = Tensor::zeros(r, c);
                for i in 0..r {
                    ga.row_slice_mut(i).copy_from_slice(g.data());
                }
                acc(*a, ga);
            }
        }
    }
}

fn column_sums(t: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, t.cols());
    for r in 0..t.rows() {
        for (o, x) in out.data_mut().iter_mut().zip(t.row_slice(r)) {
            *o += x;
        }
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax_in_place(xs: &mut [f64]) {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in xs.iter_mut() {
        *x /= s;
    }
}
