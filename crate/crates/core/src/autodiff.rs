//! Reverse-mode differentiation over dense row-major `f64` matrices.
//!
//! A [`Tape`] records every operation in creation order, which is already a
//! topological order, so [`Tape::backward`] is a single reverse sweep.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Self { rows, cols, data: vec![v; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!("{} values for a {rows}x{cols} matrix", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows<const C: usize>(rows: &[[f64; C]]) -> Self {
        Self { rows: rows.len(), cols: C, data: rows.iter().flatten().copied().collect() }
    }

    pub fn scalar(v: f64) -> Self {
        Self::filled(1, 1, v)
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    fn add_assign(&mut self, other: &Matrix) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in orow.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self * other^T`.
    pub fn matmul_nt(&self, other: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = a.iter().zip(other.row(j)).map(|(x, y)| x * y).sum();
            }
        }
        out
    }

    /// `self^T * other`.
    pub fn matmul_tn(&self, other: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let b = other.row(k);
            for (i, &a) in self.row(k).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &bv) in out.data[i * other.cols..(i + 1) * other.cols].iter_mut().zip(b) {
                    *o += a * bv;
                }
            }
        }
        out
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// `(row node, column node, edge index)` triples of a graph's directed
/// adjacency.
pub type Triples = Arc<Vec<(usize, usize, usize)>>;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    MaskedSoftmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, normalized: Matrix, inv_std: Vec<f64> },
    ConcatRows(Vec<Var>),
    MeanRows(Var),
    Sum(Var),
    EdgeScores { src: Var, dst: Var, edge: Var, triples: Triples },
    PickIncidence { att: Var, triples: Triples },
}

struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err<T>(what: &str, a: (usize, usize), b: (usize, usize)) -> Result<T> {
    Err(Error::ShapeMismatch(format!("{what}: {a:?} vs {b:?}")))
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

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Records an input or parameter.
    pub fn leaf(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return shape_err("matmul", sa, sb);
        }
        let v = self.value(a).matmul(self.value(b));
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.1 {
            return shape_err("matmul_nt", sa, sb);
        }
        let v = self.value(a).matmul_nt(self.value(b));
        Ok(self.push(v, Op::MatMulNt(a, b)))
    }

    fn zip_same(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return shape_err(what, sa, sb);
        }
        let (x, y) = (self.value(a), self.value(b));
        Ok(Matrix { rows: sa.0, cols: sa.1, data: x.data.iter().zip(&y.data).map(|(&p, &q)| f(p, q)).collect() })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same(a, b, "add", |p, q| p + q)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same(a, b, "sub", |p, q| p - q)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same(a, b, "mul", |p, q| p * q)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    /// Adds the `1 x c` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.0 != 1 || sb.1 != sa.1 {
            return shape_err("add_row", sa, sb);
        }
        let mut v = self.value(a).clone();
        let bias = &self.nodes[b.0].value.data;
        for r in 0..sa.0 {
            for (x, &bv) in v.row_mut(r).iter_mut().zip(bias) {
                *x += bv;
            }
        }
        Ok(self.push(v, Op::AddRow(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    /// Softmax along every row.
    pub fn row_softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut v = x.clone();
        for r in 0..x.rows {
            softmax_in_place(v.row_mut(r), None);
        }
        self.push(v, Op::Softmax(a))
    }

    /// Row softmax over entries where `mask` is true; masked entries get zero
    /// probability (a fully masked row is all zeros).
    pub fn masked_row_softmax(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let x = self.value(a);
        if mask.len() != x.data.len() {
            return shape_err("masked_row_softmax", x.shape(), (mask.len(), 1));
        }
        let mut v = x.clone();
        let cols = x.cols;
        for r in 0..x.rows {
            softmax_in_place(v.row_mut(r), Some(&mask[r * cols..(r + 1) * cols]));
        }
        Ok(self.push(v, Op::MaskedSoftmax(a)))
    }

    /// Per-row layer normalization with affine `gain`, `bias` (`1 x c`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (sx, sg, sb) = (self.shape(x), self.shape(gain), self.shape(bias));
        if sg != (1, sx.1) || sb != (1, sx.1) {
            return shape_err("layer_norm", sx, sg);
        }
        let xv = self.value(x);
        let c = sx.1 as f64;
        let mut normalized = xv.clone();
        let mut inv_std = Vec::with_capacity(sx.0);
        for r in 0..sx.0 {
            let row = normalized.row_mut(r);
            let mean = row.iter().sum::<f64>() / c;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
            let is = 1.0 / libm::sqrt(var + eps);
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        let (g, b) = (&self.value(gain).data, &self.value(bias).data);
        let mut out = normalized.clone();
        for r in 0..sx.0 {
            for ((o, &gv), &bv) in out.row_mut(r).iter_mut().zip(g).zip(b) {
                *o = *o * gv + bv;
            }
        }
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, normalized, inv_std }))
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::EmptyInput("concat_rows of nothing"));
        };
        let cols = self.shape(first).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            if m.cols != cols {
                return shape_err("concat_rows", (rows, cols), m.shape());
            }
            rows += m.rows;
            data.extend_from_slice(&m.data);
        }
        Ok(self.push(Matrix { rows, cols, data }, Op::ConcatRows(parts.to_vec())))
    }

    /// Column means, `1 x c`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.rows == 0 {
            return Err(Error::EmptyInput("mean_rows of an empty matrix"));
        }
        let mut out = Matrix::zeros(1, x.cols);
        for r in 0..x.rows {
            for (o, &v) in out.data.iter_mut().zip(x.row(r)) {
                *o += v;
            }
        }
        let inv = 1.0 / x.rows as f64;
        out.data.iter_mut().for_each(|o| *o *= inv);
        Ok(self.push(out, Op::MeanRows(a)))
    }

    /// Sum of all entries, `1 x 1`.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Matrix::scalar(s), Op::Sum(a))
    }

    /// `n x n` matrix with `src[i] + dst[j] + edge[e]` at every triple
    /// `(i, j, e)` and zero elsewhere. `src`, `dst` are `n x 1`, `edge` is
    /// `m x 1`.
    pub fn edge_scores(&mut self, src: Var, dst: Var, edge: Var, triples: &Triples) -> Result<Var> {
        let (ss, sd, se) = (self.shape(src), self.shape(dst), self.shape(edge));
        if ss.1 != 1 || sd != ss || se.1 != 1 {
            return shape_err("edge_scores", ss, sd);
        }
        let n = ss.0;
        let mut out = Matrix::zeros(n, n);
        let (a, b, c) = (&self.value(src).data, &self.value(dst).data, &self.value(edge).data);
        for &(i, j, e) in triples.iter() {
            if i >= n || j >= n || e >= se.0 {
                return Err(Error::ShapeMismatch(format!("triple ({i}, {j}, {e}) out of range")));
            }
            out.data[i * n + j] = a[i] + b[j] + c[e];
        }
        Ok(self.push(out, Op::EdgeScores { src, dst, edge, triples: triples.clone() }))
    }

    /// `n x m` matrix with `att[i][j]` at `(i, e)` for every triple `(i, j, e)`.
    pub fn pick_incidence(&mut self, att: Var, triples: &Triples, n_edges: usize) -> Result<Var> {
        let sa = self.shape(att);
        if sa.0 != sa.1 {
            return shape_err("pick_incidence", sa, (sa.0, sa.0));
        }
        let n = sa.0;
        let mut out = Matrix::zeros(n, n_edges);
        let a = &self.value(att).data;
        for &(i, j, e) in triples.iter() {
            if i >= n || j >= n || e >= n_edges {
                return Err(Error::ShapeMismatch(format!("triple ({i}, {j}, {e}) out of range")));
            }
            out.data[i * n_edges + e] = a[i * n + j];
        }
        Ok(self.push(out, Op::PickIncidence { att, triples: triples.clone() }))
    }

    /// Gradients of the `1 x 1` value `root` with respect to every node.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.shape(root) != (1, 1) {
            return Err(Error::ShapeMismatch(format!("backward needs a scalar root, got {:?}", self.shape(root))));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Matrix::scalar(1.0));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let mut acc = |v: Var, m: Matrix| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&m),
            slot => *slot = Some(m),
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                acc(*a, g.matmul_nt(self.value(*b)));
                acc(*b, self.value(*a).matmul_tn(g));
            }
            Op::MatMulNt(a, b) => {
                acc(*a, g.matmul(self.value(*b)));
                acc(*b, g.matmul_tn(self.value(*a)));
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
                let (x, y) = (self.value(*a), self.value(*b));
                let da = Matrix {
                    rows: g.rows,
                    cols: g.cols,
                    data: g.data.iter().zip(&y.data).map(|(p, q)| p * q).collect(),
                };
                let db = Matrix {
                    rows: g.rows,
                    cols: g.cols,
                    data: g.data.iter().zip(&x.data).map(|(p, q)| p * q).collect(),
                };
                acc(*a, da);
                acc(*b, db);
            }
            Op::AddRow(a, b) => {
                let mut db = Matrix::zeros(1, g.cols);
                for r in 0..g.rows {
                    for (o, &v) in db.data.iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                acc(*a, g.clone());
                acc(*b, db);
            }
            Op::Scale(a, s) => acc(*a, g.map(|x| x * s)),
            Op::Relu(a) => {
                let x = self.value(*a);
                let d = Matrix {
                    rows: g.rows,
                    cols: g.cols,
                    data: g.data.iter().zip(&x.data).map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 }).collect(),
                };
                acc(*a, d);
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                let d = Matrix {
                    rows: g.rows,
                    cols: g.cols,
                    data: g.data.iter().zip(&y.data).map(|(&gv, &yv)| gv * yv * (1.0 - yv)).collect(),
                };
                acc(*a, d);
            }
            Op::Softmax(a) | Op::MaskedSoftmax(a) => {
                let y = &node.value;
                let mut d = Matrix::zeros(g.rows, g.cols);
                for r in 0..g.rows {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for ((o, &yv), &gv) in d.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                acc(*a, d);
            }
            Op::LayerNorm { x, gain, bias, normalized, inv_std } => {
                let gv = &self.value(*gain).data;
                let c = g.cols as f64;
                let mut dx = Matrix::zeros(g.rows, g.cols);
                let mut dgain = Matrix::zeros(1, g.cols);
                let mut dbias = Matrix::zeros(1, g.cols);
                for r in 0..g.rows {
                    let (gr, nr) = (g.row(r), normalized.row(r));
                    let dn: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                    let mean_dn = dn.iter().sum::<f64>() / c;
                    let mean_dn_n = dn.iter().zip(nr).map(|(a, b)| a * b).sum::<f64>() / c;
                    for (k, o) in dx.row_mut(r).iter_mut().enumerate() {
                        *o = inv_std[r] * (dn[k] - mean_dn - nr[k] * mean_dn_n);
                    }
                    for k in 0..g.cols {
                        dgain.data[k] += gr[k] * nr[k];
                        dbias.data[k] += gr[k];
                    }
                }
                acc(*x, dx);
                acc(*gain, dgain);
                acc(*bias, dbias);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let rows = self.value(p).rows;
                    let slice = g.data[offset * g.cols..(offset + rows) * g.cols].to_vec();
                    acc(p, Matrix { rows, cols: g.cols, data: slice });
                    offset += rows;
                }
            }
            Op::MeanRows(a) => {
                let rows = self.value(*a).rows;
                let inv = 1.0 / rows as f64;
                let mut d = Matrix::zeros(rows, g.cols);
                for r in 0..rows {
                    for (o, &gv) in d.row_mut(r).iter_mut().zip(&g.data) {
                        *o = gv * inv;
                    }
                }
                acc(*a, d);
            }
            Op::Sum(a) => {
                let (r, c) = self.shape(*a);
                acc(*a, Matrix::filled(r, c, g.data[0]));
            }
            Op::EdgeScores { src, dst, edge, triples } => {
                let n = g.rows;
                let mut ds = Matrix::zeros(n, 1);
                let mut dd = Matrix::zeros(n, 1);
                let mut de = Matrix::zeros(self.shape(*edge).0, 1);
                for &(i, j, e) in triples.iter() {
                    let v = g.data[i * n + j];
                    ds.data[i] += v;
                    dd.data[j] += v;
                    de.data[e] += v;
                }
                acc(*src, ds);
                acc(*dst, dd);
                acc(*edge, de);
            }
            Op::PickIncidence { att, triples } => {
                let n = g.rows;
                let m = g.cols;
                let mut d = Matrix::zeros(n, n);
                for &(i, j, e) in triples.iter() {
                    d.data[i * n + j] += g.data[i * m + e];
                }
                acc(*att, d);
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

fn softmax_in_place(row: &mut [f64], mask: Option<&[bool]>) {
    let keep = |k: usize| mask.is_none_or(|m| m[k]);
    let max = row.iter().enumerate().filter(|&(k, _)| keep(k)).map(|(_, &v)| v).fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        row.fill(0.0);
        return;
    }
    let mut total = 0.0;
    for (k, v) in row.iter_mut().enumerate() {
        if keep(k) {
            *v = libm::exp(*v - max);
            total += *v;
        } else {
            *v = 0.0;
        }
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when the root does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, zeros of `shape` when unreachable.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Matrix {
        self.get(v).cloned().unwrap_or_else(|| Matrix::zeros(shape.0, shape.1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl AdamState {
    pub fn new(params: &[Matrix], lr: f64) -> Self {
        let zeros: Vec<Matrix> = params.iter().map(|p| Matrix::zeros(p.rows, p.cols)).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros.clone(), v: zeros }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut [Matrix], grads: &[Matrix], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::ShapeMismatch(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return shape_err("adam", p.shape(), g.shape());
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - libm::pow(state.beta1, t);
    let bc2 = 1.0 - libm::pow(state.beta2, t);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.lr, state.eps);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        for k in 0..p.data.len() {
            let gk = g.data[k];
            m.data[k] = b1 * m.data[k] + (1.0 - b1) * gk;
            v.data[k] = b2 * v.data[k] + (1.0 - b2) * gk * gk;
            let m_hat = m.data[k] / bc1;
            let v_hat = v.data[k] / bc2;
            p.data[k] -= lr * m_hat / (libm::sqrt(v_hat) + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, data: &[f64]) -> Matrix {
        Matrix::from_vec(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn forward_examples() {
        let mut t = Tape::new();
        let x = t.leaf(m(1, 2, &[-1.0, 2.0]));
        let r = t.relu(x);
        assert_eq!(t.value(r).data, vec![0.0, 2.0]);

        let z = t.leaf(m(1, 2, &[0.0, 0.0]));
        let s = t.row_softmax(z);
        assert_eq!(t.value(s).data, vec![0.5, 0.5]);

        let y = t.leaf(m(1, 2, &[1.0, 3.0]));
        let gain = t.leaf(Matrix::filled(1, 2, 1.0));
        let bias = t.leaf(Matrix::zeros(1, 2));
        let ln = t.layer_norm(y, gain, bias, 1e-12).unwrap();
        let out = &t.value(ln).data;
        assert!((out[0] + 1.0).abs() < 1e-9 && (out[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn masked_softmax_zeroes_masked_entries() {
        let mut t = Tape::new();
        let x = t.leaf(m(2, 3, &[1.0, 5.0, 2.0, 0.3, 0.1, 0.2]));
        let y = t.masked_row_softmax(x, &[true, false, true, false, false, false]).unwrap();
        let v = t.value(y);
        assert_eq!(v.get(0, 1), 0.0);
        assert!((v.get(0, 0) + v.get(0, 2) - 1.0).abs() < 1e-12);
        assert_eq!(v.row(1), &[0.0, 0.0, 0.0]);

        // Gradient into masked entries is zero.
        let w = t.leaf(m(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let p = t.mul(y, w).unwrap();
        let s = t.sum(p);
        let g = t.backward(s).unwrap();
        let gx = g.get(x).unwrap();
        assert_eq!(gx.get(0, 1), 0.0);
        assert!(gx.row(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn square_derivative() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::scalar(3.0));
        let y = t.mul(x, x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data, vec![6.0]);
    }

    #[test]
    fn mean_rows_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(m(4, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]));
        let mr = t.mean_rows(x).unwrap();
        let s = t.sum(mr);
        let g = t.backward(s).unwrap();
        assert!(g.get(x).unwrap().data.iter().all(|&v| v == 0.25));
    }

    #[test]
    fn backward_needs_scalar_root() {
        let mut t = Tape::new();
        let x = t.leaf(m(1, 2, &[1.0, 2.0]));
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn shape_errors() {
        let mut t = Tape::new();
        let a = t.leaf(Matrix::zeros(2, 3));
        let b = t.leaf(Matrix::zeros(2, 3));
        assert!(t.matmul(a, b).is_err());
        assert!(t.matmul_nt(a, b).is_ok());
        let c = t.leaf(Matrix::zeros(3, 2));
        assert!(t.add(a, c).is_err());
        assert!(t.concat_rows(&[a, c]).is_err());
    }

    /// Central differences of `f` at `x` for every entry.
    fn numeric_grad(x: &Matrix, f: &dyn Fn(&Matrix) -> f64) -> Matrix {
        let h = 1e-5;
        let mut out = Matrix::zeros(x.rows, x.cols);
        for k in 0..x.data.len() {
            let mut p = x.clone();
            p.data[k] += h;
            let mut q = x.clone();
            q.data[k] -= h;
            out.data[k] = (f(&p) - f(&q)) / (2.0 * h);
        }
        out
    }

    fn assert_close(a: &Matrix, b: &Matrix) {
        for (x, y) in a.data.iter().zip(&b.data) {
            let denom = x.abs().max(y.abs()).max(1e-6);
            assert!((x - y).abs() / denom < 1e-5, "{x} vs {y}");
        }
    }

    #[test]
    fn primitive_gradients_match_finite_differences() {
        let x0 = m(3, 4, &[0.3, -1.2, 0.8, 0.1, -0.4, 0.9, 1.5, -0.7, 0.2, 0.6, -1.1, 0.5]);
        let w0 = m(2, 4, &[0.5, -0.3, 0.2, 0.9, -0.6, 0.4, 0.1, -0.2]);
        let mask: Vec<bool> = (0..9).map(|k| k % 4 != 1).collect();
        let triples: Triples = Arc::new(vec![(0, 1, 0), (1, 0, 0), (1, 2, 1), (2, 1, 1)]);
        let build = |x: &Matrix, w: &Matrix| -> (Tape, Var, Var, Var) {
            let mut t = Tape::new();
            let xv = t.leaf(x.clone());
            let wv = t.leaf(w.clone());
            let h = t.matmul_nt(xv, wv).unwrap(); // 3x2
            let s = t.sigmoid(h);
            let hs = t.matmul_nt(h, s).unwrap(); // 3x3
            let sm = t.masked_row_softmax(hs, &mask).unwrap();
            let g = t.leaf(m(1, 2, &[1.3, 0.7]));
            let b = t.leaf(m(1, 2, &[0.1, -0.2]));
            let ln = t.layer_norm(h, g, b, 1e-5).unwrap();
            let agg = t.matmul(sm, ln).unwrap(); // 3x2
            let col0 = t.matmul_nt(agg, g).unwrap(); // 3x1
            let col1 = t.matmul_nt(h, b).unwrap(); // 3x1
            let e = t.leaf(m(2, 1, &[0.4, -0.9]));
            let sc = t.edge_scores(col0, col1, e, &triples).unwrap();
            let soft = t.row_softmax(sc);
            let inc = t.pick_incidence(soft, &triples, 2).unwrap(); // 3x2
            let both = t.concat_rows(&[inc, agg]).unwrap();
            let r = t.relu(both);
            let mr = t.mean_rows(r).unwrap();
            let sq = t.mul(mr, mr).unwrap();
            let sub = t.sub(sq, b).unwrap();
            let ar = t.add_row(sub, g).unwrap();
            let sc2 = t.scale(ar, 0.7);
            let out = t.sum(sc2);
            (t, xv, wv, out)
        };
        let (t, xv, wv, out) = build(&x0, &w0);
        let g = t.backward(out).unwrap();
        let fx = |x: &Matrix| {
            let (t, _, _, o) = build(x, &w0);
            t.value(o).data[0]
        };
        let fw = |w: &Matrix| {
            let (t, _, _, o) = build(&x0, w);
            t.value(o).data[0]
        };
        assert_close(g.get(xv).unwrap(), &numeric_grad(&x0, &fx));
        assert_close(g.get(wv).unwrap(), &numeric_grad(&w0, &fw));
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut params = vec![m(1, 3, &[1.0, -2.0, 0.5])];
        let before = params.clone();
        let mut st = AdamState::new(&params, 1e-4);
        adam_step(&mut params, &[Matrix::zeros(1, 3)], &mut st).unwrap();
        assert_eq!(params, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut params = vec![m(1, 3, &[0.0, 0.0, 0.0])];
        let mut st = AdamState::new(&params, 1e-4);
        adam_step(&mut params, &[m(1, 3, &[2.5, -0.01, 40.0])], &mut st).unwrap();
        for (p, s) in params[0].data.iter().zip([-1.0, 1.0, -1.0]) {
            assert!((p - s * 1e-4).abs() < 1e-9, "{p}");
        }
    }

    #[test]
    fn adam_constant_gradient_steps_approach_lr() {
        let mut params = vec![Matrix::zeros(1, 1)];
        let mut st = AdamState::new(&params, 1e-3);
        let mut last = 0.0;
        for _ in 0..2000 {
            let before = params[0].data[0];
            adam_step(&mut params, &[Matrix::scalar(0.3)], &mut st).unwrap();
            last = params[0].data[0] - before;
        }
        assert!((last + 1e-3).abs() < 1e-8);
    }

    #[test]
    fn adam_rejects_mismatched_shapes() {
        let mut params = vec![Matrix::zeros(2, 2)];
        let mut st = AdamState::new(&params, 1e-3);
        assert!(adam_step(&mut params, &[Matrix::zeros(1, 2)], &mut st).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_and_layer_norm_invariants(vals in proptest::collection::vec(-30.0f64..30.0, 12)) {
                let mut t = Tape::new();
                let x = t.leaf(Matrix::from_vec(3, 4, vals).unwrap());
                let s = t.row_softmax(x);
                for r in 0..3 {
                    let sum: f64 = t.value(s).row(r).iter().sum();
                    prop_assert!((sum - 1.0).abs() < 1e-12);
                }
                let mask = [true, false, true, true, false, true, false, false, true, true, true, true];
                let ms = t.masked_row_softmax(x, &mask).unwrap();
                for r in 0..3 {
                    let sum: f64 = t.value(ms).row(r).iter().sum();
                    prop_assert!((sum - 1.0).abs() < 1e-12);
                }
                let g = t.leaf(Matrix::filled(1, 4, 1.0));
                let b = t.leaf(Matrix::zeros(1, 4));
                let ln = t.layer_norm(x, g, b, 1e-5).unwrap();
                for r in 0..3 {
                    let mean: f64 = t.value(ln).row(r).iter().sum::<f64>() / 4.0;
                    prop_assert!(mean.abs() < 1e-9);
                }
            }
        }
    }
}
