//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! Nodes are appended in evaluation order, so walking the tape backwards is
//! a reverse topological order and every node is visited exactly once.

use super::mat::{axpy, dot, matmul_acc, matmul_at_acc, matmul_bt_acc, Mat};
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Relu(Var),
    ClampCols { x: Var, lo: Vec<f64>, hi: Vec<f64> },
    LayerNorm { x: Var, inv_std: Vec<f64> },
    SoftmaxRows(Var),
    RowNormalize { x: Var, norms: Vec<f64> },
    ConcatRows(Var, Var),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    Sum(Var),
    Mean(Var),
    L1(Var, Var),
    L2(Var, Var),
    SmoothL1 { x: Var, target: Mat, weights: Vec<f64> },
    Giou { x: Var, target: Mat },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf | Param(_) => Vec::new(),
            MatMul(a, b) | MatMulBt(a, b) | Add(a, b) | Sub(a, b) | AddRow(a, b) | Mul(a, b) | MulRow(a, b)
            | ConcatRows(a, b) | L1(a, b) | L2(a, b) => vec![*a, *b],
            Scale(x, _) | AddConst(x) | Relu(x) | SoftmaxRows(x) | Sum(x) | Mean(x) => vec![*x],
            ClampCols { x, .. }
            | LayerNorm { x, .. }
            | RowNormalize { x, .. }
            | SliceCols { x, .. }
            | GatherRows { x, .. }
            | SmoothL1 { x, .. }
            | Giou { x, .. } => vec![*x],
            ConcatCols(xs) => xs.clone(),
        }
    }
}

struct Node {
    value: Mat,
    op: Op,
    /// Whether any parameter or tracked leaf feeds this node.
    tracked: bool,
}

/// A single-use compute graph.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Mat>>,
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        let tracked = match op {
            Op::Leaf | Op::Param(_) => true,
            _ => op.inputs().iter().any(|v| self.nodes[v.0].tracked),
        };
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` root with respect to `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Constant or input leaf.
    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Input leaf that never receives a gradient; ops fed only by
    /// constants skip their backward pass.
    pub fn constant(&mut self, value: Mat) -> Var {
        let v = self.push(value, Op::Leaf);
        self.nodes[v.0].tracked = false;
        v
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let v = self.value(a).matmul(self.value(b));
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// `a * b^T`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.1 {
            return Err(shape_err("matmul_bt", format!("{sa:?} x {sb:?}^T")));
        }
        let v = self.value(a).matmul_bt(self.value(b));
        Ok(self.push(v, Op::MatMulBt(a, b)))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Mat {
        let (x, y) = (self.value(a), self.value(b));
        Mat::from_vec(
            x.rows,
            x.cols,
            x.data.iter().zip(&y.data).map(|(p, q)| f(*p, *q)).collect(),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    fn check_row(&self, op: &'static str, a: Var, row: Var) -> Result<()> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sr.0 != 1 || sr.1 != sa.1 {
            return Err(shape_err(op, format!("{sa:?} with row {sr:?}")));
        }
        Ok(())
    }

    /// Add a `1 x c` row to every row of `a` (bias add).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.check_row("add_row", a, row)?;
        let mut v = self.value(a).clone();
        let r = self.value(row).data.clone();
        for i in 0..v.rows {
            axpy(1.0, &r, v.row_mut(i));
        }
        Ok(self.push(v, Op::AddRow(a, row)))
    }

    /// Multiply every row of `a` elementwise by a `1 x c` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.check_row("mul_row", a, row)?;
        let mut v = self.value(a).clone();
        let r = self.value(row).data.clone();
        for i in 0..v.rows {
            for (x, s) in v.row_mut(i).iter_mut().zip(&r) {
                *x *= s;
            }
        }
        Ok(self.push(v, Op::MulRow(a, row)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut v = self.value(a).clone();
        v.data.iter_mut().for_each(|x| *x *= s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let mut v = self.value(a).clone();
        v.data.iter_mut().for_each(|x| *x += c);
        self.push(v, Op::AddConst(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        v.data.iter_mut().for_each(|x| *x = x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    /// Clamp column `j` into `[lo[j], hi[j]]`. Gradient flows only where
    /// the input was inside the bounds.
    pub fn clamp_cols(&mut self, a: Var, lo: &[f64], hi: &[f64]) -> Result<Var> {
        let (r, c) = self.shape(a);
        if lo.len() != c || hi.len() != c {
            return Err(shape_err("clamp_cols", format!("{c} columns, bounds {}/{}", lo.len(), hi.len())));
        }
        let mut v = self.value(a).clone();
        for i in 0..r {
            for (j, x) in v.row_mut(i).iter_mut().enumerate() {
                *x = x.clamp(lo[j], hi[j]);
            }
        }
        Ok(self.push(
            v,
            Op::ClampCols {
                x: a,
                lo: lo.to_vec(),
                hi: hi.to_vec(),
            },
        ))
    }

    /// Row-wise standardization `(x - mean) / sqrt(var + eps)`, no affine part.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let mut v = x.clone();
        let mut inv_std = Vec::with_capacity(x.rows);
        for i in 0..x.rows {
            let row = v.row_mut(i);
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / n;
            let s = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|y| *y = (*y - mean) * s);
            inv_std.push(s);
        }
        self.push(v, Op::LayerNorm { x: a, inv_std })
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for i in 0..v.rows {
            let row = v.row_mut(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for y in row.iter_mut() {
                *y = (*y - m).exp();
                z += *y;
            }
            row.iter_mut().for_each(|y| *y /= z);
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    /// L2-normalize each row; rows with norm below `1e-12` are left at zero.
    pub fn row_normalize(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        let mut norms = Vec::with_capacity(v.rows);
        for i in 0..v.rows {
            let row = v.row_mut(i);
            let n = dot(row, row).sqrt().max(1e-12);
            row.iter_mut().for_each(|y| *y /= n);
            norms.push(n);
        }
        self.push(v, Op::RowNormalize { x: a, norms })
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.1 {
            return Err(shape_err("concat_rows", format!("{sa:?} over {sb:?}")));
        }
        let mut data = self.value(a).data.clone();
        data.extend_from_slice(&self.value(b).data);
        Ok(self.push(Mat::from_vec(sa.0 + sb.0, sa.1, data), Op::ConcatRows(a, b)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map(|&p| self.shape(p).0).unwrap_or(0);
        if parts.iter().any(|&p| self.shape(p).0 != rows) {
            return Err(shape_err("concat_cols", "row counts differ".into()));
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Mat::zeros(rows, cols);
        for i in 0..rows {
            let mut off = 0;
            for &p in parts {
                let src = self.value(p).row(i);
                out.row_mut(i)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start + len > c {
            return Err(shape_err("slice_cols", format!("[{start}, {}) of {c}", start + len)));
        }
        let x = self.value(a);
        let mut out = Mat::zeros(r, len);
        for i in 0..r {
            out.row_mut(i).copy_from_slice(&x.row(i)[start..start + len]);
        }
        Ok(self.push(out, Op::SliceCols { x: a, start }))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(a);
        if let Some(bad) = idx.iter().find(|&&k| k >= r) {
            return Err(shape_err("gather_rows", format!("row {bad} of {r}")));
        }
        let x = self.value(a);
        let mut out = Mat::zeros(idx.len(), c);
        for (o, &k) in idx.iter().enumerate() {
            out.row_mut(o).copy_from_slice(x.row(k));
        }
        Ok(self.push(out, Op::GatherRows { x: a, idx: idx.to_vec() }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Mat::filled(1, 1, s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s = x.data.iter().sum::<f64>() / x.len().max(1) as f64;
        self.push(Mat::filled(1, 1, s), Op::Mean(a))
    }

    /// `sum |a - b|`.
    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("l1", a, b)?;
        let s = self.zip_map(a, b, |x, y| (x - y).abs()).data.iter().sum();
        Ok(self.push(Mat::filled(1, 1, s), Op::L1(a, b)))
    }

    /// `sum (a - b)^2`.
    pub fn l2(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("l2", a, b)?;
        let s = self.zip_map(a, b, |x, y| (x - y) * (x - y)).data.iter().sum();
        Ok(self.push(Mat::filled(1, 1, s), Op::L2(a, b)))
    }

    /// Column-weighted Huber loss (delta = 1) against a constant target, summed.
    pub fn smooth_l1(&mut self, a: Var, target: &Mat, weights: &[f64]) -> Result<Var> {
        let s = self.shape(a);
        if s != target.shape() || weights.len() != s.1 {
            return Err(shape_err("smooth_l1", format!("{s:?} vs {:?}", target.shape())));
        }
        let x = self.value(a);
        let mut total = 0.0;
        for i in 0..s.0 {
            for j in 0..s.1 {
                let d = (x.get(i, j) - target.get(i, j)).abs();
                total += weights[j] * if d < 1.0 { 0.5 * d * d } else { d - 0.5 };
            }
        }
        Ok(self.push(
            Mat::filled(1, 1, total),
            Op::SmoothL1 {
                x: a,
                target: target.clone(),
                weights: weights.to_vec(),
            },
        ))
    }

    /// `sum_rows (1 - giou(a_r, target_r))` for `n x 4` center-size boxes.
    /// Predicted widths and heights are floored at `EPS_BOX`.
    pub fn giou_loss(&mut self, a: Var, target: &Mat) -> Result<Var> {
        let s = self.shape(a);
        if s != target.shape() || s.1 != 4 {
            return Err(shape_err("giou_loss", format!("{s:?} vs {:?}", target.shape())));
        }
        let x = self.value(a);
        let total = (0..s.0)
            .map(|i| giou_terms(x.row(i), target.row(i)).loss)
            .sum();
        Ok(self.push(
            Mat::filled(1, 1, total),
            Op::Giou {
                x: a,
                target: target.clone(),
            },
        ))
    }

    fn acc(&mut self, v: Var, g: Mat) {
        if !self.nodes[v.0].tracked {
            return;
        }
        match &mut self.grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn acc_with(&mut self, v: Var, f: impl FnOnce(&mut Mat)) {
        if !self.nodes[v.0].tracked {
            return;
        }
        if self.grads[v.0].is_none() {
            let (r, c) = self.shape(v);
            self.grads[v.0] = Some(Mat::zeros(r, c));
        }
        f(self.grads[v.0].as_mut().expect("just set"));
    }

    /// Like `acc_with`, with read access to the value of `other`.
    fn acc_using(&mut self, v: Var, other: Var, f: impl FnOnce(&Mat, &mut Mat)) {
        let node = &self.nodes[v.0];
        if !node.tracked {
            return;
        }
        let slot = self.grads[v.0].get_or_insert_with(|| Mat::zeros(node.value.rows, node.value.cols));
        f(&self.nodes[other.0].value, slot);
    }

    /// Reverse pass from a `1 x 1` root.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.shape(root) != (1, 1) {
            return Err(shape_err("backward", format!("root shape {:?}", self.shape(root))));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[root.0] = Some(Mat::filled(1, 1, 1.0));
        for idx in (0..=root.0).rev() {
            let Some(gy) = self.grads[idx].take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
            self.backprop(idx, &op, &gy);
            self.nodes[idx].op = op;
            self.grads[idx] = Some(gy);
        }
        Ok(())
    }

    fn backprop(&mut self, idx: usize, op: &Op, gy: &Mat) {
        match op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                self.acc_using(a, b, |vb, g| matmul_bt_acc(gy, vb, g));
                self.acc_using(b, a, |va, g| matmul_at_acc(va, gy, g));
            }
            Op::MatMulBt(a, b) => {
                let (a, b) = (*a, *b);
                self.acc_using(a, b, |vb, g| matmul_acc(gy, vb, g));
                self.acc_using(b, a, |va, g| matmul_at_acc(gy, va, g));
            }
            Op::Add(a, b) => {
                self.acc(*a, gy.clone());
                self.acc(*b, gy.clone());
            }
            Op::Sub(a, b) => {
                self.acc(*a, gy.clone());
                let mut n = gy.clone();
                n.data.iter_mut().for_each(|x| *x = -*x);
                self.acc(*b, n);
            }
            Op::AddRow(a, row) => {
                self.acc(*a, gy.clone());
                let mut gr = Mat::zeros(1, gy.cols);
                for i in 0..gy.rows {
                    axpy(1.0, gy.row(i), &mut gr.data);
                }
                self.acc(*row, gr);
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let ga = mul_elem(gy, self.value(b));
                let gb = mul_elem(gy, self.value(a));
                self.acc(a, ga);
                self.acc(b, gb);
            }
            Op::MulRow(a, row) => {
                let (a, row) = (*a, *row);
                let r = self.value(row).data.clone();
                let x = self.value(a);
                let mut ga = gy.clone();
                let mut gr = Mat::zeros(1, gy.cols);
                for i in 0..gy.rows {
                    let xr = x.row(i);
                    for j in 0..gy.cols {
                        gr.data[j] += gy.get(i, j) * xr[j];
                    }
                    for (g, s) in ga.row_mut(i).iter_mut().zip(&r) {
                        *g *= s;
                    }
                }
                self.acc(a, ga);
                self.acc(row, gr);
            }
            Op::Scale(a, s) => {
                let mut g = gy.clone();
                g.data.iter_mut().for_each(|x| *x *= s);
                self.acc(*a, g);
            }
            Op::AddConst(a) => self.acc(*a, gy.clone()),
            Op::Relu(a) => {
                let y = &self.nodes[idx].value;
                let mut g = gy.clone();
                for (gv, yv) in g.data.iter_mut().zip(&y.data) {
                    if *yv <= 0.0 {
                        *gv = 0.0;
                    }
                }
                self.acc(*a, g);
            }
            Op::ClampCols { x, lo, hi } => {
                let xv = self.value(*x);
                let mut g = gy.clone();
                for i in 0..g.rows {
                    let xr = xv.row(i);
                    for (j, gv) in g.row_mut(i).iter_mut().enumerate() {
                        if xr[j] < lo[j] || xr[j] > hi[j] {
                            *gv = 0.0;
                        }
                    }
                }
                self.acc(*x, g);
            }
            Op::LayerNorm { x, inv_std } => {
                let y = &self.nodes[idx].value;
                let mut g = Mat::zeros(y.rows, y.cols);
                let n = y.cols as f64;
                for i in 0..y.rows {
                    let (yr, gr) = (y.row(i), gy.row(i));
                    let mean_g = gr.iter().sum::<f64>() / n;
                    let mean_gy = dot(gr, yr) / n;
                    for j in 0..y.cols {
                        g.data[i * y.cols + j] = inv_std[i] * (gr[j] - mean_g - yr[j] * mean_gy);
                    }
                }
                self.acc(*x, g);
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[idx].value;
                let mut g = Mat::zeros(y.rows, y.cols);
                for i in 0..y.rows {
                    let (yr, gr) = (y.row(i), gy.row(i));
                    let s = dot(yr, gr);
                    for j in 0..y.cols {
                        g.data[i * y.cols + j] = yr[j] * (gr[j] - s);
                    }
                }
                self.acc(*a, g);
            }
            Op::RowNormalize { x, norms } => {
                let y = &self.nodes[idx].value;
                let mut g = Mat::zeros(y.rows, y.cols);
                for i in 0..y.rows {
                    let (yr, gr) = (y.row(i), gy.row(i));
                    let s = dot(yr, gr);
                    for j in 0..y.cols {
                        g.data[i * y.cols + j] = (gr[j] - yr[j] * s) / norms[i];
                    }
                }
                self.acc(*x, g);
            }
            Op::ConcatRows(a, b) => {
                let ra = self.shape(*a).0;
                let split = ra * gy.cols;
                self.acc(*a, Mat::from_vec(ra, gy.cols, gy.data[..split].to_vec()));
                self.acc(*b, Mat::from_vec(gy.rows - ra, gy.cols, gy.data[split..].to_vec()));
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    let mut g = Mat::zeros(r, c);
                    for i in 0..r {
                        g.row_mut(i).copy_from_slice(&gy.row(i)[off..off + c]);
                    }
                    off += c;
                    self.acc(p, g);
                }
            }
            Op::SliceCols { x, start } => {
                let start = *start;
                self.acc_with(*x, |g| {
                    for i in 0..gy.rows {
                        axpy(1.0, gy.row(i), &mut g.row_mut(i)[start..start + gy.cols]);
                    }
                });
            }
            Op::GatherRows { x, idx: rows } => {
                self.acc_with(*x, |g| {
                    for (o, &k) in rows.iter().enumerate() {
                        axpy(1.0, gy.row(o), g.row_mut(k));
                    }
                });
            }
            Op::Sum(a) => {
                let (r, c) = self.shape(*a);
                self.acc(*a, Mat::filled(r, c, gy.scalar()));
            }
            Op::Mean(a) => {
                let (r, c) = self.shape(*a);
                self.acc(*a, Mat::filled(r, c, gy.scalar() / (r * c).max(1) as f64));
            }
            Op::L1(a, b) => {
                let s = gy.scalar();
                let ga = self.zip_map(*a, *b, |x, y| s * sign(x - y));
                let mut gb = ga.clone();
                gb.data.iter_mut().for_each(|x| *x = -*x);
                self.acc(*a, ga);
                self.acc(*b, gb);
            }
            Op::L2(a, b) => {
                let s = gy.scalar();
                let ga = self.zip_map(*a, *b, |x, y| 2.0 * s * (x - y));
                let mut gb = ga.clone();
                gb.data.iter_mut().for_each(|x| *x = -*x);
                self.acc(*a, ga);
                self.acc(*b, gb);
            }
            Op::SmoothL1 { x, target, weights } => {
                let s = gy.scalar();
                let v = self.value(*x);
                let mut g = Mat::zeros(v.rows, v.cols);
                for i in 0..v.rows {
                    for j in 0..v.cols {
                        let d = v.get(i, j) - target.get(i, j);
                        g.set(i, j, s * weights[j] * d.clamp(-1.0, 1.0));
                    }
                }
                self.acc(*x, g);
            }
            Op::Giou { x, target } => {
                let s = gy.scalar();
                let v = self.value(*x);
                let mut g = Mat::zeros(v.rows, 4);
                for i in 0..v.rows {
                    let t = giou_terms(v.row(i), target.row(i));
                    for k in 0..4 {
                        g.set(i, k, s * t.grad[k]);
                    }
                }
                self.acc(*x, g);
            }
        }
    }

    /// Add the gradients of every parameter leaf into `store`.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, self.grads.get(i).and_then(Option::as_ref)) {
                store.grad_mut(*id).add_assign(g);
            }
        }
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn mul_elem(a: &Mat, b: &Mat) -> Mat {
    Mat::from_vec(
        a.rows,
        a.cols,
        a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect(),
    )
}

struct GiouTerms {
    loss: f64,
    grad: [f64; 4],
}

/// `1 - giou` between a predicted and a target center-size box, with the
/// analytic gradient with respect to the prediction.
fn giou_terms(p: &[f64], t: &[f64]) -> GiouTerms {
    use crate::geometry::EPS_BOX;
    let (pw_raw, ph_raw) = (p[2], p[3]);
    let pw = pw_raw.max(EPS_BOX);
    let ph = ph_raw.max(EPS_BOX);
    let (px1, px2) = (p[0] - 0.5 * pw, p[0] + 0.5 * pw);
    let (py1, py2) = (p[1] - 0.5 * ph, p[1] + 0.5 * ph);
    let (tx1, tx2) = (t[0] - 0.5 * t[2], t[0] + 0.5 * t[2]);
    let (ty1, ty2) = (t[1] - 0.5 * t[3], t[1] + 0.5 * t[3]);

    let iw_raw = px2.min(tx2) - px1.max(tx1);
    let ih_raw = py2.min(ty2) - py1.max(ty1);
    let (iw, ih) = (iw_raw.max(0.0), ih_raw.max(0.0));
    let inter = iw * ih;
    let area_p = (px2 - px1) * (py2 - py1);
    let area_t = ((tx2 - tx1) * (ty2 - ty1)).max(0.0);
    let union = area_p + area_t - inter;
    let cw = px2.max(tx2) - px1.min(tx1);
    let ch = py2.max(ty2) - py1.min(ty1);
    let hull = cw * ch;
    if union < 1e-12 || hull < 1e-12 {
        return GiouTerms {
            loss: 1.0,
            grad: [0.0; 4],
        };
    }
    let loss = 2.0 - inter / union - union / hull;

    let d_inter = -(union + inter) / (union * union) + 1.0 / hull;
    let d_area_p = inter / (union * union) - 1.0 / hull;
    let d_hull = union / (hull * hull);

    // d/d(px1, px2, py1, py2)
    let mut dx1 = 0.0;
    let mut dx2 = 0.0;
    let mut dy1 = 0.0;
    let mut dy2 = 0.0;
    if iw_raw > 0.0 && ih_raw > 0.0 {
        let (d_iw, d_ih) = (d_inter * ih, d_inter * iw);
        if px2 < tx2 {
            dx2 += d_iw;
        }
        if px1 > tx1 {
            dx1 -= d_iw;
        }
        if py2 < ty2 {
            dy2 += d_ih;
        }
        if py1 > ty1 {
            dy1 -= d_ih;
        }
    }
    let (d_cw, d_ch) = (d_hull * ch, d_hull * cw);
    if px2 > tx2 {
        dx2 += d_cw;
    }
    if px1 < tx1 {
        dx1 -= d_cw;
    }
    if py2 > ty2 {
        dy2 += d_ch;
    }
    if py1 < ty1 {
        dy1 -= d_ch;
    }
    let mut grad = [dx1 + dx2, dy1 + dy2, 0.0, 0.0];
    if pw_raw > EPS_BOX {
        grad[2] = 0.5 * (dx2 - dx1) + d_area_p * (py2 - py1);
    }
    if ph_raw > EPS_BOX {
        grad[3] = 0.5 * (dy2 - dy1) + d_area_p * (px2 - px1);
    }
    GiouTerms { loss, grad }
}
