//! Eager reverse-mode differentiation over 64-bit matrices.
//!
//! A `Graph` is a tape of primitive ops. Every insertion computes the value
//! immediately (so callers can inspect intermediate results while building,
//! which the losses need for data-dependent branch selection), and
//! `backward` replays the tape in reverse accumulating vector-Jacobian
//! products. Everything is `Array2<f64>`; vectors are 1 x n or n x 1, scalars
//! are 1 x 1.
//!
//! Discrete choices made while building (window argmins, branch selections)
//! are treated as constants of the backward pass, which is the standard
//! subgradient convention for piecewise-smooth objectives.

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    /// Leaf tensor. `trainable` only affects which gradients callers read;
    /// backward accumulates into constants too and they are simply ignored.
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    /// Broadcast-add a 1 x m row vector to every row of an n x m matrix.
    AddRowVec(NodeId, NodeId),
    ScalarMul(NodeId, f64),
    ScalarAdd(NodeId),
    /// Elementwise x^p for constant p.
    PowScalar(NodeId, f64),
    Ln(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    Clamp(NodeId, f64, f64),
    /// Row-wise softmax (each row sums to 1).
    SoftmaxRows(NodeId),
    /// Row-wise layer norm with learnable gain/bias (both 1 x m).
    LayerNormRows {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    },
    /// Average pooling along the row (time) axis, zero padded, pad frames
    /// counted in the divisor.
    AvgPool1d {
        x: NodeId,
        k: usize,
        stride: usize,
        pad: usize,
    },
    /// 1-D convolution along the row (time) axis with stride 1 and zero
    /// "same" padding. Weight is (k * c_in) x c_out with kernel-major rows,
    /// bias is 1 x c_out.
    Conv1dSame {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        k: usize,
    },
    /// Per-row sliding-window minimum of odd width, zero padded. The argmin
    /// map (None when a pad wins) is frozen at forward time; backward only
    /// needs it, not the width.
    ErodeRows {
        x: NodeId,
        argmin: Vec<Option<usize>>,
    },
    ConcatCols(Vec<NodeId>),
    /// Gather rows by index (duplicates allowed); backward scatter-adds.
    SliceRows { x: NodeId, rows: Vec<usize> },
    /// n x m -> n x 1 sum across columns.
    RowSum(NodeId),
    /// n x m -> 1 x m mean across rows.
    MeanRows(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    /// Frobenius norm, 1 x 1. Gradient at exactly zero input is defined as 0.
    Norm2(NodeId),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    /// Value of a 1 x 1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        assert_eq!(v.dim(), (1, 1), "scalar() on a non 1x1 node");
        v[(0, 0)]
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Insert a leaf. Parameters and constants are both leaves; only the
    /// caller distinguishes them (by which gradients it reads back).
    pub fn leaf(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn scalar_leaf(&mut self, v: f64) -> NodeId {
        self.leaf(Array2::from_elem((1, 1), v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) / self.value(b);
        self.push(v, Op::Div(a, b))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    pub fn add_row_vec(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (n, m) = self.value(a).dim();
        assert_eq!(self.value(row).dim(), (1, m), "row vector width mismatch");
        let mut v = self.value(a).clone();
        for i in 0..n {
            for j in 0..m {
                v[(i, j)] += self.value(row)[(0, j)];
            }
        }
        self.push(v, Op::AddRowVec(a, row))
    }

    pub fn scalar_mul(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).mapv(|x| x * c);
        self.push(v, Op::ScalarMul(a, c))
    }

    pub fn scalar_add(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).mapv(|x| x + c);
        self.push(v, Op::ScalarAdd(a))
    }

    /// 1 - x, a combinator used all over the losses.
    pub fn one_minus(&mut self, a: NodeId) -> NodeId {
        let neg = self.scalar_mul(a, -1.0);
        self.scalar_add(neg, 1.0)
    }

    pub fn pow_scalar(&mut self, a: NodeId, p: f64) -> NodeId {
        let v = self.value(a).mapv(|x| x.powf(p));
        self.push(v, Op::PowScalar(a, p))
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(f64::ln);
        self.push(v, Op::Ln(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(stable_sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let v = self.value(a).mapv(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a, lo, hi))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| (x - max).exp());
            let sum: f64 = row.sum();
            row.mapv_inplace(|x| x / sum);
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn layer_norm_rows(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> NodeId {
        let xv = self.value(x);
        let (n, m) = xv.dim();
        assert_eq!(self.value(gain).dim(), (1, m), "layer norm gain width");
        assert_eq!(self.value(bias).dim(), (1, m), "layer norm bias width");
        let mut v = Array2::zeros((n, m));
        for i in 0..n {
            let row = xv.row(i);
            let mean = row.mean().unwrap();
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / m as f64;
            let denom = (var + eps).sqrt();
            for j in 0..m {
                let norm = (row[j] - mean) / denom;
                v[(i, j)] = self.value(gain)[(0, j)] * norm + self.value(bias)[(0, j)];
            }
        }
        self.push(v, Op::LayerNormRows { x, gain, bias, eps })
    }

    pub fn avg_pool1d(&mut self, x: NodeId, k: usize, stride: usize, pad: usize) -> NodeId {
        let v = avg_pool_value(self.value(x), k, stride, pad);
        self.push(v, Op::AvgPool1d { x, k, stride, pad })
    }

    pub fn conv1d_same(&mut self, x: NodeId, w: NodeId, b: NodeId, k: usize) -> NodeId {
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        let (t, c_in) = xv.dim();
        let (rows, c_out) = wv.dim();
        assert_eq!(rows, k * c_in, "conv weight rows must be k * c_in");
        assert_eq!(bv.dim(), (1, c_out), "conv bias shape");
        assert!(k % 2 == 1, "same-padding conv needs odd kernel width");
        let off = k / 2;
        let mut v = Array2::zeros((t, c_out));
        for ti in 0..t {
            for o in 0..c_out {
                let mut acc = bv[(0, o)];
                for j in 0..k {
                    let src = ti as isize + j as isize - off as isize;
                    if src < 0 || src >= t as isize {
                        continue;
                    }
                    for c in 0..c_in {
                        acc += xv[(src as usize, c)] * wv[(j * c_in + c, o)];
                    }
                }
                v[(ti, o)] = acc;
            }
        }
        self.push(v, Op::Conv1dSame { x, w, b, k })
    }

    pub fn erode_rows(&mut self, x: NodeId, k: usize) -> NodeId {
        assert!(k % 2 == 1, "erosion width must be odd");
        let xv = self.value(x);
        let (n, m) = xv.dim();
        let r = k / 2;
        let mut v = Array2::zeros((n, m));
        let mut argmin = vec![None; n * m];
        for i in 0..n {
            for j in 0..m {
                // Zero padding: a window that sticks out always sees a 0.
                let mut best = f64::INFINITY;
                let mut best_idx = None;
                let lo = j as isize - r as isize;
                let hi = j as isize + r as isize;
                for p in lo..=hi {
                    let (val, idx) = if p < 0 || p >= m as isize {
                        (0.0, None)
                    } else {
                        (xv[(i, p as usize)], Some(p as usize))
                    };
                    if val < best {
                        best = val;
                        best_idx = idx;
                    }
                }
                v[(i, j)] = best;
                argmin[i * m + j] = best_idx;
            }
        }
        self.push(v, Op::ErodeRows { x, argmin })
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let n = self.value(parts[0]).nrows();
        let total: usize = parts.iter().map(|p| self.value(*p).ncols()).sum();
        let mut v = Array2::zeros((n, total));
        let mut col = 0;
        for p in parts {
            let pv = self.value(*p);
            assert_eq!(pv.nrows(), n, "concat_cols row mismatch");
            for i in 0..n {
                for j in 0..pv.ncols() {
                    v[(i, col + j)] = pv[(i, j)];
                }
            }
            col += pv.ncols();
        }
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, x: NodeId, rows: &[usize]) -> NodeId {
        let xv = self.value(x);
        let m = xv.ncols();
        let mut v = Array2::zeros((rows.len(), m));
        for (out, &r) in rows.iter().enumerate() {
            for j in 0..m {
                v[(out, j)] = xv[(r, j)];
            }
        }
        self.push(
            v,
            Op::SliceRows {
                x,
                rows: rows.to_vec(),
            },
        )
    }

    pub fn row_sum(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let v = xv
            .sum_axis(Axis(1))
            .into_shape_with_order((xv.nrows(), 1))
            .unwrap();
        self.push(v, Op::RowSum(x))
    }

    pub fn mean_rows(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let n = xv.nrows() as f64;
        let v = (xv.sum_axis(Axis(0)) / n)
            .into_shape_with_order((1, xv.ncols()))
            .unwrap();
        self.push(v, Op::MeanRows(x))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let v = Array2::from_elem((1, 1), self.value(x).sum());
        self.push(v, Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let v = Array2::from_elem((1, 1), xv.sum() / xv.len() as f64);
        self.push(v, Op::MeanAll(x))
    }

    pub fn norm2(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).iter().map(|x| x * x).sum::<f64>().sqrt();
        self.push(Array2::from_elem((1, 1), v), Op::Norm2(x))
    }

    /// Checks every node value for NaN/inf; returns the index of the first
    /// offending node. Used by the training loop's abort path.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.nodes
            .iter()
            .position(|n| n.value.iter().any(|v| !v.is_finite()))
    }

    /// Reverse pass from a 1 x 1 loss node. Returns one gradient per node;
    /// callers pick out their parameters by id.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).dim() != (1, 1) {
            return Err(Error::ShapeMismatch {
                context: "backward".into(),
                expected: "1x1 loss".into(),
                found: format!("{:?}", self.value(loss).dim()),
            });
        }
        let mut grads: Vec<Array2<f64>> = self
            .nodes
            .iter()
            .map(|n| Array2::zeros(n.value.dim()))
            .collect();
        grads[loss.0][(0, 0)] = 1.0;

        for idx in (0..=loss.0).rev() {
            let g = grads[idx].clone();
            if g.iter().all(|v| *v == 0.0) {
                continue;
            }
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    grads[a.0] += &g;
                    grads[b.0] += &g;
                }
                Op::Sub(a, b) => {
                    grads[a.0] += &g;
                    grads[b.0] -= &g;
                }
                Op::Mul(a, b) => {
                    let da = &g * self.value(*b);
                    let db = &g * self.value(*a);
                    grads[a.0] += &da;
                    grads[b.0] += &db;
                }
                Op::Div(a, b) => {
                    let bv = self.value(*b);
                    let av = self.value(*a);
                    grads[a.0] += &(&g / bv);
                    let db = &g * av / (bv * bv);
                    grads[b.0] -= &db;
                }
                Op::MatMul(a, b) => {
                    let da = g.dot(&self.value(*b).t());
                    let db = self.value(*a).t().dot(&g);
                    grads[a.0] += &da;
                    grads[b.0] += &db;
                }
                Op::Transpose(a) => {
                    grads[a.0] += &g.t();
                }
                Op::AddRowVec(a, row) => {
                    grads[a.0] += &g;
                    let gr = g
                        .sum_axis(Axis(0))
                        .into_shape_with_order((1, g.ncols()))
                        .unwrap();
                    grads[row.0] += &gr;
                }
                Op::ScalarMul(a, c) => {
                    grads[a.0] += &(&g * *c);
                }
                Op::ScalarAdd(a) => {
                    grads[a.0] += &g;
                }
                Op::PowScalar(a, p) => {
                    let av = self.value(*a);
                    let da = av.mapv(|x| {
                        if *p == 0.0 {
                            0.0
                        } else {
                            *p * x.powf(*p - 1.0)
                        }
                    });
                    grads[a.0] += &(&g * &da);
                }
                Op::Ln(a) => {
                    grads[a.0] += &(&g / self.value(*a));
                }
                Op::Sigmoid(a) => {
                    let y = &self.nodes[idx].value;
                    let da = y.mapv(|y| y * (1.0 - y));
                    grads[a.0] += &(&g * &da);
                }
                Op::Relu(a) => {
                    let mask = self.value(*a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    grads[a.0] += &(&g * &mask);
                }
                Op::Clamp(a, lo, hi) => {
                    let mask = self
                        .value(*a)
                        .mapv(|x| if x > *lo && x < *hi { 1.0 } else { 0.0 });
                    grads[a.0] += &(&g * &mask);
                }
                Op::SoftmaxRows(a) => {
                    let y = &self.nodes[idx].value;
                    let mut da = Array2::zeros(y.dim());
                    for i in 0..y.nrows() {
                        let dot: f64 = (0..y.ncols()).map(|j| g[(i, j)] * y[(i, j)]).sum();
                        for j in 0..y.ncols() {
                            da[(i, j)] = y[(i, j)] * (g[(i, j)] - dot);
                        }
                    }
                    grads[a.0] += &da;
                }
                Op::LayerNormRows { x, gain, bias, eps } => {
                    let xv = self.value(*x);
                    let gv = self.value(*gain);
                    let (n, m) = xv.dim();
                    let mut dx = Array2::zeros((n, m));
                    let mut dgain = Array2::zeros((1, m));
                    let mut dbias = Array2::zeros((1, m));
                    for i in 0..n {
                        let row = xv.row(i);
                        let mean = row.mean().unwrap();
                        let var =
                            row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / m as f64;
                        let denom = (var + eps).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|x| (x - mean) / denom).collect();
                        let dxhat: Vec<f64> =
                            (0..m).map(|j| g[(i, j)] * gv[(0, j)]).collect();
                        let mean_dxhat = dxhat.iter().sum::<f64>() / m as f64;
                        let mean_dxhat_xhat = dxhat
                            .iter()
                            .zip(&xhat)
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            / m as f64;
                        for j in 0..m {
                            dgain[(0, j)] += g[(i, j)] * xhat[j];
                            dbias[(0, j)] += g[(i, j)];
                            dx[(i, j)] =
                                (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat) / denom;
                        }
                    }
                    grads[x.0] += &dx;
                    grads[gain.0] += &dgain;
                    grads[bias.0] += &dbias;
                }
                Op::AvgPool1d { x, k, stride, pad } => {
                    let (t_in, c) = self.value(*x).dim();
                    let t_out = g.nrows();
                    let mut dx = Array2::zeros((t_in, c));
                    for o in 0..t_out {
                        for j in 0..*k {
                            let src = (o * stride + j) as isize - *pad as isize;
                            if src < 0 || src >= t_in as isize {
                                continue;
                            }
                            for ch in 0..c {
                                dx[(src as usize, ch)] += g[(o, ch)] / *k as f64;
                            }
                        }
                    }
                    grads[x.0] += &dx;
                }
                Op::Conv1dSame { x, w, b, k } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let (t, c_in) = xv.dim();
                    let c_out = wv.ncols();
                    let off = k / 2;
                    let mut dx = Array2::zeros((t, c_in));
                    let mut dw = Array2::zeros(wv.dim());
                    let mut db = Array2::zeros((1, c_out));
                    for ti in 0..t {
                        for o in 0..c_out {
                            let go = g[(ti, o)];
                            if go == 0.0 {
                                continue;
                            }
                            db[(0, o)] += go;
                            for j in 0..*k {
                                let src = ti as isize + j as isize - off as isize;
                                if src < 0 || src >= t as isize {
                                    continue;
                                }
                                let src = src as usize;
                                for c in 0..c_in {
                                    dx[(src, c)] += go * wv[(j * c_in + c, o)];
                                    dw[(j * c_in + c, o)] += go * xv[(src, c)];
                                }
                            }
                        }
                    }
                    grads[x.0] += &dx;
                    grads[w.0] += &dw;
                    grads[b.0] += &db;
                }
                Op::ErodeRows { x, argmin } => {
                    let m = g.ncols();
                    let mut dx = Array2::zeros(self.value(*x).dim());
                    for i in 0..g.nrows() {
                        for j in 0..m {
                            if let Some(src) = argmin[i * m + j] {
                                dx[(i, src)] += g[(i, j)];
                            }
                        }
                    }
                    grads[x.0] += &dx;
                }
                Op::ConcatCols(parts) => {
                    let mut col = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        let slice = g.slice(ndarray::s![.., col..col + w]).to_owned();
                        grads[p.0] += &slice;
                        col += w;
                    }
                }
                Op::SliceRows { x, rows } => {
                    let mut dx = Array2::zeros(self.value(*x).dim());
                    for (out, &r) in rows.iter().enumerate() {
                        for j in 0..g.ncols() {
                            dx[(r, j)] += g[(out, j)];
                        }
                    }
                    grads[x.0] += &dx;
                }
                Op::RowSum(x) => {
                    let xv = self.value(*x);
                    let mut dx = Array2::zeros(xv.dim());
                    for i in 0..xv.nrows() {
                        for j in 0..xv.ncols() {
                            dx[(i, j)] = g[(i, 0)];
                        }
                    }
                    grads[x.0] += &dx;
                }
                Op::MeanRows(x) => {
                    let xv = self.value(*x);
                    let n = xv.nrows() as f64;
                    let mut dx = Array2::zeros(xv.dim());
                    for i in 0..xv.nrows() {
                        for j in 0..xv.ncols() {
                            dx[(i, j)] = g[(0, j)] / n;
                        }
                    }
                    grads[x.0] += &dx;
                }
                Op::SumAll(x) => {
                    let dx = Array2::from_elem(self.value(*x).dim(), g[(0, 0)]);
                    grads[x.0] += &dx;
                }
                Op::MeanAll(x) => {
                    let xv = self.value(*x);
                    let dx = Array2::from_elem(xv.dim(), g[(0, 0)] / xv.len() as f64);
                    grads[x.0] += &dx;
                }
                Op::Norm2(x) => {
                    let norm = self.nodes[idx].value[(0, 0)];
                    if norm > 0.0 {
                        let dx = self.value(*x).mapv(|v| v / norm * g[(0, 0)]);
                        grads[x.0] += &dx;
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Array2<f64>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> &Array2<f64> {
        &self.grads[id.0]
    }
}

/// Numerically stable logistic function.
pub fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Average pooling along the row axis: window `k`, given stride, zero padding
/// `pad` on both ends, divisor always `k` (pad frames count as zeros).
/// Output length is floor((t + 2 pad - k) / stride) + 1.
pub fn avg_pool_value(x: &Array2<f64>, k: usize, stride: usize, pad: usize) -> Array2<f64> {
    assert!(k >= 1 && stride >= 1);
    let (t, c) = x.dim();
    assert!(t + 2 * pad >= k, "pooling window larger than padded input");
    let t_out = (t + 2 * pad - k) / stride + 1;
    let mut out = Array2::zeros((t_out, c));
    for o in 0..t_out {
        for ch in 0..c {
            let mut acc = 0.0;
            for j in 0..k {
                let src = (o * stride + j) as isize - pad as isize;
                if src >= 0 && src < t as isize {
                    acc += x[(src as usize, ch)];
                }
            }
            out[(o, ch)] = acc / k as f64;
        }
    }
    out
}
