use std::sync::Arc;

use super::tensor::{matmul, matmul_nt, matmul_tn, Tensor};
use super::TensorError;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Row-compressed adjacency: row `t` of the output aggregates source rows
/// `indices[offsets[t]..offsets[t + 1]]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Csr {
    pub offsets: Vec<usize>,
    pub indices: Vec<usize>,
    pub num_sources: usize,
}

impl Csr {
    pub fn from_lists(lists: &[Vec<usize>], num_sources: usize) -> Self {
        let mut offsets = Vec::with_capacity(lists.len() + 1);
        let mut indices = Vec::new();
        offsets.push(0);
        for l in lists {
            indices.extend_from_slice(l);
            offsets.push(indices.len());
        }
        Self {
            offsets,
            indices,
            num_sources,
        }
    }

    pub fn num_targets(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn row(&self, t: usize) -> &[usize] {
        &self.indices[self.offsets[t]..self.offsets[t + 1]]
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Const,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    MulRow(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    ConcatCols(Vec<Var>),
    SelectCol(Var, usize),
    Transpose(Var),
    RowSum(Var),
    Sum(Var),
    Mean(Var),
    BatchNorm { input: Var, inv_std: Vec<f64> },
    ColumnAffine { input: Var, scale: Vec<f64> },
    SoftmaxRow(Var),
    Log(Var),
    Exp(Var),
    ClampMin(Var, f64),
    L2NormalizeRows { input: Var, norms: Vec<f64> },
    Aggregate { src: Var, adj: Arc<Csr> },
    SegmentSum { src: Var, segments: Arc<Vec<usize>> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Batch statistics observed by a training-mode batch normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub const BATCH_NORM_EPS: f64 = 1e-5;

/// Records forward operations so that a single reverse sweep yields gradients.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    relu_signs: Option<Vec<bool>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::Shape {
        op,
        left: vec![a.rows(), a.cols()],
        right: vec![b.rows(), b.cols()],
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Start recording the sign pattern of every relu input (used to detect
    /// finite-difference steps that straddle a kink).
    pub fn track_relu_signs(&mut self) {
        self.relu_signs = Some(Vec::new());
    }

    pub fn relu_signs(&self) -> Option<&[bool]> {
        self.relu_signs.as_deref()
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var, TensorError> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(TensorError::NonFinite(op_name(&op)));
        }
        let requires_grad = match &op {
            Op::Leaf => true,
            Op::Const => false,
            other => inputs(other).iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Const,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (x, y) = (self.value(a), self.value(b));
        if x.cols() != y.rows() {
            return Err(shape_err("matmul", x, y));
        }
        let out = matmul(x, y);
        self.push(out, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (x, y) = (self.value(a), self.value(b));
        if !x.same_matrix_shape(y) {
            return Err(shape_err("add", x, y));
        }
        let mut out = x.clone();
        out.add_assign(y);
        self.push(out, Op::Add(a, b))
    }

    /// `x (n x d) + b (1 x d)` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var, TensorError> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(shape_err("add_row", xv, bv));
        }
        let c = xv.cols();
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(c.max(1)) {
            for (o, &bb) in row.iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        self.push(out, Op::AddRow(x, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (x, y) = (self.value(a), self.value(b));
        if !x.same_matrix_shape(y) {
            return Err(shape_err("sub", x, y));
        }
        let mut out = x.clone();
        out.axpy(-1.0, y);
        self.push(out, Op::Sub(a, b))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (x, y) = (self.value(a), self.value(b));
        if !x.same_matrix_shape(y) {
            return Err(shape_err("mul", x, y));
        }
        let mut out = x.clone();
        for (o, &v) in out.data_mut().iter_mut().zip(y.data()) {
            *o *= v;
        }
        self.push(out, Op::Mul(a, b))
    }

    /// Scales row `i` of `x (n x d)` by `c[i]` where `c` is `n x 1`.
    pub fn mul_col(&mut self, x: Var, c: Var) -> Result<Var, TensorError> {
        let (xv, cv) = (self.value(x), self.value(c));
        if cv.cols() != 1 || cv.rows() != xv.rows() {
            return Err(shape_err("mul_col", xv, cv));
        }
        let d = xv.cols();
        let mut out = xv.clone();
        if d > 0 {
            for (row, &s) in out.data_mut().chunks_mut(d).zip(cv.data()) {
                for o in row {
                    *o *= s;
                }
            }
        }
        self.push(out, Op::MulCol(x, c))
    }

    /// Scales column `j` of `x (n x d)` by `c[j]` where `c` is `1 x d`.
    pub fn mul_row(&mut self, x: Var, c: Var) -> Result<Var, TensorError> {
        let (xv, cv) = (self.value(x), self.value(c));
        if cv.rows() != 1 || cv.cols() != xv.cols() {
            return Err(shape_err("mul_row", xv, cv));
        }
        let d = xv.cols();
        let mut out = xv.clone();
        if d > 0 {
            for row in out.data_mut().chunks_mut(d) {
                for (o, &s) in row.iter_mut().zip(cv.data()) {
                    *o *= s;
                }
            }
        }
        self.push(out, Op::MulRow(x, c))
    }

    /// Multiplies every entry of `x` by the `1 x 1` tensor `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var, TensorError> {
        let (xv, sv) = (self.value(x), self.value(s));
        if sv.len() != 1 {
            return Err(shape_err("mul_scalar", xv, sv));
        }
        let k = sv.item();
        let out = xv.map(|v| v * k);
        self.push(out, Op::MulScalar(x, s))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Result<Var, TensorError> {
        let out = self.value(x).map(|v| v * k);
        self.push(out, Op::Scale(x, k))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        let xv = &self.nodes[x.0].value;
        if let Some(signs) = self.relu_signs.as_mut() {
            signs.extend(xv.data().iter().map(|&v| v > 0.0));
        }
        let out = xv.map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(out, Op::Relu(x))
    }

    /// Concatenates equally tall tensors along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = parts.first().ok_or(TensorError::Empty("concat_cols"))?;
        let rows = self.value(*first).rows();
        let mut total = 0;
        for p in parts {
            let v = self.value(*p);
            if v.rows() != rows {
                return Err(shape_err("concat_cols", self.value(*first), v));
            }
            total += v.cols();
        }
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for p in parts {
            let v = self.value(*p);
            let c = v.cols();
            for r in 0..rows {
                out[r * total + offset..r * total + offset + c].copy_from_slice(v.row_slice(r));
            }
            offset += c;
        }
        let t = Tensor::matrix(rows, total, out)?;
        self.push(t, Op::ConcatCols(parts.to_vec()))
    }

    pub fn select_col(&mut self, x: Var, col: usize) -> Result<Var, TensorError> {
        let xv = self.value(x);
        if col >= xv.cols() {
            return Err(TensorError::Index {
                op: "select_col",
                index: col,
                bound: xv.cols(),
            });
        }
        let data = (0..xv.rows()).map(|r| xv.get(r, col)).collect();
        let t = Tensor::matrix(xv.rows(), 1, data)?;
        self.push(t, Op::SelectCol(x, col))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        let t = self.value(x).transpose();
        self.push(t, Op::Transpose(x))
    }

    /// `n x d -> n x 1`.
    pub fn row_sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let d = xv.cols();
        let data: Vec<f64> = if d == 0 {
            vec![0.0; xv.rows()]
        } else {
            xv.data().chunks(d).map(|r| r.iter().sum()).collect()
        };
        let t = Tensor::matrix(xv.rows(), 1, data)?;
        self.push(t, Op::RowSum(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, TensorError> {
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(TensorError::Empty("mean"));
        }
        let m = xv.sum() / xv.len() as f64;
        self.push(Tensor::scalar(m), Op::Mean(x))
    }

    /// Training-mode batch normalization without affine terms: every column is
    /// shifted and scaled by its batch mean and biased variance. Returns the
    /// normalized tensor and the observed batch statistics.
    pub fn batch_normalize(&mut self, x: Var) -> Result<(Var, BatchStats), TensorError> {
        let xv = self.value(x);
        let (n, d) = (xv.rows(), xv.cols());
        if n == 0 {
            let v = self.push(xv.clone(), Op::Scale(x, 1.0))?;
            return Ok((
                v,
                BatchStats {
                    mean: Vec::new(),
                    var: Vec::new(),
                },
            ));
        }
        if n < 2 {
            return Err(TensorError::BatchTooSmall(n));
        }
        let mut mean = vec![0.0; d];
        for r in 0..n {
            for (m, v) in mean.iter_mut().zip(xv.row_slice(r)) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= n as f64;
        }
        let mut var = vec![0.0; d];
        for r in 0..n {
            for ((s, v), m) in var.iter_mut().zip(xv.row_slice(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        for s in var.iter_mut() {
            *s /= n as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt()).collect();
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(d) {
            for ((o, m), s) in row.iter_mut().zip(&mean).zip(&inv_std) {
                *o = (*o - m) * s;
            }
        }
        let v = self.push(out, Op::BatchNorm { input: x, inv_std })?;
        Ok((v, BatchStats { mean, var }))
    }

    /// Eval-mode normalization with fixed per-column statistics.
    pub fn normalize_with(&mut self, x: Var, mean: &[f64], var: &[f64]) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let d = xv.cols();
        if mean.len() != d || var.len() != d {
            return Err(TensorError::Shape {
                op: "normalize_with",
                left: vec![xv.rows(), d],
                right: vec![1, mean.len()],
            });
        }
        let scale: Vec<f64> = var.iter().map(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt()).collect();
        let mut out = xv.clone();
        if d > 0 {
            for row in out.data_mut().chunks_mut(d) {
                for ((o, m), s) in row.iter_mut().zip(mean).zip(&scale) {
                    *o = (*o - m) * s;
                }
            }
        }
        self.push(out, Op::ColumnAffine { input: x, scale })
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let d = xv.cols();
        let mut out = xv.clone();
        if d > 0 {
            for row in out.data_mut().chunks_mut(d) {
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - mx).exp();
                    z += *v;
                }
                for v in row.iter_mut() {
                    *v /= z;
                }
            }
        }
        self.push(out, Op::SoftmaxRow(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var, TensorError> {
        let out = self.value(x).map(f64::ln);
        self.push(out, Op::Log(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, TensorError> {
        let out = self.value(x).map(f64::exp);
        self.push(out, Op::Exp(x))
    }

    pub fn clamp_min(&mut self, x: Var, min: f64) -> Result<Var, TensorError> {
        let out = self.value(x).map(|v| v.max(min));
        self.push(out, Op::ClampMin(x, min))
    }

    /// Divides every row by its Euclidean norm; rows with norm below `1e-12` are an error.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let d = xv.cols();
        let mut norms = Vec::with_capacity(xv.rows());
        let mut out = xv.clone();
        if d > 0 {
            for (r, row) in out.data_mut().chunks_mut(d).enumerate() {
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n < 1e-12 {
                    return Err(TensorError::ZeroNorm { row: r });
                }
                for v in row.iter_mut() {
                    *v /= n;
                }
                norms.push(n);
            }
        }
        self.push(out, Op::L2NormalizeRows { input: x, norms })
    }

    /// Pairwise cosine similarities between the rows of `a` and the rows of `b`.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (x, y) = (self.value(a), self.value(b));
        if x.cols() != y.cols() {
            return Err(shape_err("cosine_similarity", x, y));
        }
        let na = self.l2_normalize_rows(a)?;
        let nb = self.l2_normalize_rows(b)?;
        let nbt = self.transpose(nb)?;
        self.matmul(na, nbt)
    }

    /// Row `t` of the output is the sum of the source rows listed in `adj.row(t)`.
    pub fn aggregate(&mut self, src: Var, adj: Arc<Csr>) -> Result<Var, TensorError> {
        let sv = self.value(src);
        if sv.rows() != adj.num_sources {
            return Err(TensorError::Shape {
                op: "aggregate",
                left: vec![sv.rows(), sv.cols()],
                right: vec![adj.num_sources, adj.num_targets()],
            });
        }
        let d = sv.cols();
        let n = adj.num_targets();
        let mut out = vec![0.0; n * d];
        for t in 0..n {
            let orow = &mut out[t * d..(t + 1) * d];
            for &s in adj.row(t) {
                for (o, v) in orow.iter_mut().zip(sv.row_slice(s)) {
                    *o += v;
                }
            }
        }
        let t = Tensor::matrix(n, d, out)?;
        self.push(t, Op::Aggregate { src, adj })
    }

    /// Sums rows sharing a segment id; `segments[i]` is the output row of input row `i`.
    pub fn segment_sum(
        &mut self,
        src: Var,
        segments: Arc<Vec<usize>>,
        num_segments: usize,
    ) -> Result<Var, TensorError> {
        let sv = self.value(src);
        if segments.len() != sv.rows() {
            return Err(TensorError::Shape {
                op: "segment_sum",
                left: vec![sv.rows(), sv.cols()],
                right: vec![segments.len(), num_segments],
            });
        }
        let d = sv.cols();
        let mut out = vec![0.0; num_segments * d];
        for (r, &s) in segments.iter().enumerate() {
            if s >= num_segments {
                return Err(TensorError::Index {
                    op: "segment_sum",
                    index: s,
                    bound: num_segments,
                });
            }
            for (o, v) in out[s * d..(s + 1) * d].iter_mut().zip(sv.row_slice(r)) {
                *o += v;
            }
        }
        let t = Tensor::matrix(num_segments, d, out)?;
        self.push(t, Op::SegmentSum { src, segments })
    }

    /// Reverse sweep from a `1 x 1` loss. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients, TensorError> {
        let node = &self.nodes[loss.0];
        if node.value.len() != 1 {
            return Err(TensorError::NonScalarLoss(node.value.shape().to_vec()));
        }
        if !node.requires_grad {
            return Err(TensorError::Detached);
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf | Op::Const => {}
            Op::MatMul(a, b) => {
                if needs(*a) {
                    acc(*a, matmul_nt(g, val(*b)));
                }
                if needs(*b) {
                    acc(*b, matmul_tn(val(*a), g));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddRow(x, b) => {
                acc(*x, g.clone());
                if needs(*b) {
                    let d = g.cols();
                    let mut db = vec![0.0; d];
                    if d > 0 {
                        for row in g.data().chunks(d) {
                            for (o, v) in db.iter_mut().zip(row) {
                                *o += v;
                            }
                        }
                    }
                    acc(*b, Tensor::row(&db));
                }
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let mut t = g.clone();
                    for (o, v) in t.data_mut().iter_mut().zip(val(*b).data()) {
                        *o *= v;
                    }
                    acc(*a, t);
                }
                if needs(*b) {
                    let mut t = g.clone();
                    for (o, v) in t.data_mut().iter_mut().zip(val(*a).data()) {
                        *o *= v;
                    }
                    acc(*b, t);
                }
            }
            Op::MulCol(x, c) => {
                let d = g.cols();
                if needs(*x) {
                    let mut t = g.clone();
                    if d > 0 {
                        for (row, &s) in t.data_mut().chunks_mut(d).zip(val(*c).data()) {
                            for o in row {
                                *o *= s;
                            }
                        }
                    }
                    acc(*x, t);
                }
                if needs(*c) {
                    let xv = val(*x);
                    let data: Vec<f64> = (0..g.rows())
                        .map(|r| {
                            g.row_slice(r)
                                .iter()
                                .zip(xv.row_slice(r))
                                .map(|(a, b)| a * b)
                                .sum()
                        })
                        .collect();
                    acc(*c, Tensor::matrix(g.rows(), 1, data).expect("shape"));
                }
            }
            Op::MulRow(x, c) => {
                let d = g.cols();
                if d == 0 {
                    return;
                }
                if needs(*x) {
                    let mut t = g.clone();
                    for row in t.data_mut().chunks_mut(d) {
                        for (o, &s) in row.iter_mut().zip(val(*c).data()) {
                            *o *= s;
                        }
                    }
                    acc(*x, t);
                }
                if needs(*c) {
                    let mut dc = vec![0.0; d];
                    for (grow, xrow) in g.data().chunks(d).zip(val(*x).data().chunks(d)) {
                        for ((o, a), b) in dc.iter_mut().zip(grow).zip(xrow) {
                            *o += a * b;
                        }
                    }
                    acc(*c, Tensor::row(&dc));
                }
            }
            Op::MulScalar(x, s) => {
                let k = val(*s).item();
                if needs(*x) {
                    acc(*x, g.map(|v| v * k));
                }
                if needs(*s) {
                    let dot: f64 = g.data().iter().zip(val(*x).data()).map(|(a, b)| a * b).sum();
                    acc(*s, Tensor::scalar(dot));
                }
            }
            Op::Scale(x, k) => acc(*x, g.map(|v| v * k)),
            Op::Relu(x) => {
                let mut t = g.clone();
                for (o, &v) in t.data_mut().iter_mut().zip(val(*x).data()) {
                    if v <= 0.0 {
                        *o = 0.0;
                    }
                }
                acc(*x, t);
            }
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let total = g.cols();
                let mut offset = 0;
                for p in parts {
                    let c = val(*p).cols();
                    if needs(*p) {
                        let mut data = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            data.extend_from_slice(&g.data()[r * total + offset..r * total + offset + c]);
                        }
                        acc(*p, Tensor::matrix(rows, c, data).expect("shape"));
                    }
                    offset += c;
                }
            }
            Op::SelectCol(x, col) => {
                let xv = val(*x);
                let mut t = xv.zeros_like();
                let c = xv.cols();
                for r in 0..xv.rows() {
                    t.data_mut()[r * c + col] = g.data()[r];
                }
                acc(*x, t);
            }
            Op::Transpose(x) => acc(*x, g.transpose()),
            Op::RowSum(x) => {
                let xv = val(*x);
                let c = xv.cols();
                let mut t = xv.zeros_like();
                if c > 0 {
                    for (row, &gv) in t.data_mut().chunks_mut(c).zip(g.data()) {
                        row.iter_mut().for_each(|o| *o = gv);
                    }
                }
                acc(*x, t);
            }
            Op::Sum(x) => {
                let gv = g.item();
                acc(*x, val(*x).map(|_| gv));
            }
            Op::Mean(x) => {
                let xv = val(*x);
                let gv = g.item() / xv.len() as f64;
                acc(*x, xv.map(|_| gv));
            }
            Op::BatchNorm { input, inv_std } => {
                // y = (x - mean) * inv_std; dx = inv_std * (g - mean(g) - y * mean(g * y))
                let y = &node.value;
                let (n, d) = (y.rows(), y.cols());
                let mut mg = vec![0.0; d];
                let mut mgy = vec![0.0; d];
                for r in 0..n {
                    let (gr, yr) = (g.row_slice(r), y.row_slice(r));
                    for j in 0..d {
                        mg[j] += gr[j];
                        mgy[j] += gr[j] * yr[j];
                    }
                }
                for j in 0..d {
                    mg[j] /= n as f64;
                    mgy[j] /= n as f64;
                }
                let mut t = g.clone();
                for (r, row) in t.data_mut().chunks_mut(d).enumerate() {
                    let yr = y.row_slice(r);
                    for j in 0..d {
                        row[j] = inv_std[j] * (row[j] - mg[j] - yr[j] * mgy[j]);
                    }
                }
                acc(*input, t);
            }
            Op::ColumnAffine { input, scale } => {
                let d = g.cols();
                let mut t = g.clone();
                if d > 0 {
                    for row in t.data_mut().chunks_mut(d) {
                        for (o, s) in row.iter_mut().zip(scale) {
                            *o *= s;
                        }
                    }
                }
                acc(*input, t);
            }
            Op::SoftmaxRow(x) => {
                let y = &node.value;
                let d = y.cols();
                let mut t = g.clone();
                if d > 0 {
                    for (r, row) in t.data_mut().chunks_mut(d).enumerate() {
                        let yr = y.row_slice(r);
                        let dot: f64 = row.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for (o, &yv) in row.iter_mut().zip(yr) {
                            *o = yv * (*o - dot);
                        }
                    }
                }
                acc(*x, t);
            }
            Op::Log(x) => {
                let mut t = g.clone();
                for (o, v) in t.data_mut().iter_mut().zip(val(*x).data()) {
                    *o /= v;
                }
                acc(*x, t);
            }
            Op::Exp(x) => {
                let mut t = g.clone();
                for (o, v) in t.data_mut().iter_mut().zip(node.value.data()) {
                    *o *= v;
                }
                acc(*x, t);
            }
            Op::ClampMin(x, min) => {
                let mut t = g.clone();
                for (o, &v) in t.data_mut().iter_mut().zip(val(*x).data()) {
                    if v < *min {
                        *o = 0.0;
                    }
                }
                acc(*x, t);
            }
            Op::L2NormalizeRows { input, norms } => {
                // y = x / |x|; dx = (g - y * <g, y>) / |x|
                let y = &node.value;
                let d = y.cols();
                let mut t = g.clone();
                if d > 0 {
                    for (r, row) in t.data_mut().chunks_mut(d).enumerate() {
                        let yr = y.row_slice(r);
                        let dot: f64 = row.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for (o, &yv) in row.iter_mut().zip(yr) {
                            *o = (*o - yv * dot) / norms[r];
                        }
                    }
                }
                acc(*input, t);
            }
            Op::Aggregate { src, adj } => {
                let d = g.cols();
                let mut t = Tensor::zeros(adj.num_sources, d);
                for tgt in 0..adj.num_targets() {
                    let grow = g.row_slice(tgt);
                    for &s in adj.row(tgt) {
                        for (o, v) in t.data_mut()[s * d..(s + 1) * d].iter_mut().zip(grow) {
                            *o += v;
                        }
                    }
                }
                acc(*src, t);
            }
            Op::SegmentSum { src, segments } => {
                let d = g.cols();
                let mut data = Vec::with_capacity(segments.len() * d);
                for &s in segments.iter() {
                    data.extend_from_slice(g.row_slice(s));
                }
                acc(*src, Tensor::matrix(segments.len(), d, data).expect("shape"));
            }
        }
    }
}

fn inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf | Op::Const => Vec::new(),
        Op::MatMul(a, b)
        | Op::Add(a, b)
        | Op::AddRow(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::MulCol(a, b)
        | Op::MulRow(a, b)
        | Op::MulScalar(a, b) => vec![*a, *b],
        Op::Scale(x, _)
        | Op::Relu(x)
        | Op::SelectCol(x, _)
        | Op::Transpose(x)
        | Op::RowSum(x)
        | Op::Sum(x)
        | Op::Mean(x)
        | Op::SoftmaxRow(x)
        | Op::Log(x)
        | Op::Exp(x)
        | Op::ClampMin(x, _) => vec![*x],
        Op::ConcatCols(parts) => parts.clone(),
        Op::BatchNorm { input, .. }
        | Op::ColumnAffine { input, .. }
        | Op::L2NormalizeRows { input, .. } => vec![*input],
        Op::Aggregate { src, .. } | Op::SegmentSum { src, .. } => vec![*src],
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Const => "const",
        Op::MatMul(..) => "matmul",
        Op::Add(..) => "add",
        Op::AddRow(..) => "add_row",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::MulCol(..) => "mul_col",
        Op::MulRow(..) => "mul_row",
        Op::MulScalar(..) => "mul_scalar",
        Op::Scale(..) => "scale",
        Op::Relu(..) => "relu",
        Op::ConcatCols(..) => "concat_cols",
        Op::SelectCol(..) => "select_col",
        Op::Transpose(..) => "transpose",
        Op::RowSum(..) => "row_sum",
        Op::Sum(..) => "sum",
        Op::Mean(..) => "mean",
        Op::BatchNorm { .. } => "batch_normalize",
        Op::ColumnAffine { .. } => "normalize_with",
        Op::SoftmaxRow(..) => "softmax_rows",
        Op::Log(..) => "log",
        Op::Exp(..) => "exp",
        Op::ClampMin(..) => "clamp_min",
        Op::L2NormalizeRows { .. } => "l2_normalize_rows",
        Op::Aggregate { .. } => "aggregate",
        Op::SegmentSum { .. } => "segment_sum",
    }
}
