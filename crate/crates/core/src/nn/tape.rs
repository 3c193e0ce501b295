//! Reverse-mode automatic differentiation over `Array2` values.
//!
//! A forward pass records every operation on the tape; `backward` walks
//! the records in reverse and accumulates exact gradients for every
//! parameter leaf. Graph-structured operations (block adjacency products,
//! neighbor max, gather/scatter, segment softmax) are first-class ops so
//! GNN layers differentiate exactly like dense ones.

use std::rc::Rc;

use ndarray::{Array2, Axis};

use super::{real, Real};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T: Real> {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    AddRowVec(usize, usize),
    MulRowVec(usize, usize),
    Mul(usize, usize),
    OneMinus(usize),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    LeakyRelu(usize, T),
    ConcatCols(usize, usize),
    /// Per-window left multiplication by a constant matrix; the input is
    /// `blocks` stacked row blocks of `m.ncols()` rows each.
    BlockMatMul {
        m: Rc<Array2<T>>,
        x: usize,
    },
    /// Row-wise elementwise max over fixed index lists (self included).
    NeighborMax {
        x: usize,
        argmax: Vec<u32>,
    },
    GatherRows {
        x: usize,
        idx: Rc<Vec<usize>>,
    },
    ScatterAddRows {
        x: usize,
        idx: Rc<Vec<usize>>,
    },
    /// out[e, :] = col[e, 0] * x[e, :]
    MulColVec {
        col: usize,
        x: usize,
    },
    /// Softmax over contiguous row ranges of an E x 1 column.
    SegmentSoftmax {
        x: usize,
        segments: Rc<Vec<(u32, u32)>>,
    },
    Dropout {
        x: usize,
        mask: Array2<T>,
    },
    /// Train-mode batch normalization; `xhat` and `inv_std` are saved by
    /// the forward pass.
    BatchNorm {
        x: usize,
        scale: usize,
        shift: usize,
        xhat: Array2<T>,
        inv_std: Vec<T>,
    },
    /// Weighted mean over rows of per-row cross-entropy; produces 1 x 1.
    SoftmaxXentMean {
        logits: usize,
        labels: Rc<Vec<u32>>,
        weights: Rc<Vec<T>>,
        probs: Array2<T>,
        weight_sum: T,
    },
}

struct Node<T: Real> {
    value: Array2<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients of a scalar loss with respect to every tape node.
pub struct Grads<T: Real> {
    grads: Vec<Option<Array2<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Array2<T>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for a parameter leaf; zero-shaped like `like` when the
    /// loss does not depend on it.
    pub fn get_or_zeros(&self, v: Var, like: &Array2<T>) -> Array2<T> {
        match self.grads[v.0] {
            Some(ref g) => g.clone(),
            None => Array2::zeros(like.raw_dim()),
        }
    }
}

pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn value(&self, v: Var) -> &Array2<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    /// Constant input; no gradient flows into it.
    pub fn leaf(&mut self, value: Array2<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Parameter leaf; `backward` produces its gradient.
    pub fn param(&mut self, value: &Array2<T>) -> Var {
        self.push(value.clone(), Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        assert_eq!(va.ncols(), vb.nrows(), "matmul shape mismatch");
        let value = va.dot(vb);
        let needs = self.needs(a.0) || self.needs(b.0);
        self.push(value, Op::MatMul(a.0, b.0), needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let needs = self.needs(a.0) || self.needs(b.0);
        self.push(value, Op::Add(a.0, b.0), needs)
    }

    /// Broadcast-add a 1 x d row vector to every row.
    pub fn add_row_vec(&mut self, a: Var, row: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let vr = &self.nodes[row.0].value;
        assert_eq!(vr.nrows(), 1);
        assert_eq!(va.ncols(), vr.ncols(), "row vector width mismatch");
        let value = va + &vr.row(0);
        let needs = self.needs(a.0) || self.needs(row.0);
        self.push(value, Op::AddRowVec(a.0, row.0), needs)
    }

    /// Broadcast-multiply every row by a 1 x d row vector.
    pub fn mul_row_vec(&mut self, a: Var, row: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let vr = &self.nodes[row.0].value;
        assert_eq!(vr.nrows(), 1);
        assert_eq!(va.ncols(), vr.ncols(), "row vector width mismatch");
        let value = va * &vr.row(0);
        let needs = self.needs(a.0) || self.needs(row.0);
        self.push(value, Op::MulRowVec(a.0, row.0), needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let needs = self.needs(a.0) || self.needs(b.0);
        self.push(value, Op::Mul(a.0, b.0), needs)
    }

    pub fn one_minus(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|v| T::one() - v);
        let needs = self.needs(a.0);
        self.push(value, Op::OneMinus(a.0), needs)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let mut value = self.nodes[a.0].value.clone();
        if let Some(s) = value.as_slice_mut() {
            for v in s {
                *v = v.fast_sigmoid();
            }
        } else {
            value.mapv_inplace(|v| v.fast_sigmoid());
        }
        let needs = self.needs(a.0);
        self.push(value, Op::Sigmoid(a.0), needs)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let mut value = self.nodes[a.0].value.clone();
        if let Some(s) = value.as_slice_mut() {
            for v in s {
                *v = v.fast_tanh();
            }
        } else {
            value.mapv_inplace(|v| v.fast_tanh());
        }
        let needs = self.needs(a.0);
        self.push(value, Op::Tanh(a.0), needs)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|v| v.max(T::zero()));
        let needs = self.needs(a.0);
        self.push(value, Op::Relu(a.0), needs)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let value = self.nodes[a.0]
            .value
            .mapv(|v| if v > T::zero() { v } else { slope * v });
        let needs = self.needs(a.0);
        self.push(value, Op::LeakyRelu(a.0, slope), needs)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        assert_eq!(va.nrows(), vb.nrows(), "concat row mismatch");
        let mut value = Array2::zeros((va.nrows(), va.ncols() + vb.ncols()));
        value.slice_mut(ndarray::s![.., ..va.ncols()]).assign(va);
        value.slice_mut(ndarray::s![.., va.ncols()..]).assign(vb);
        let needs = self.needs(a.0) || self.needs(b.0);
        self.push(value, Op::ConcatCols(a.0, b.0), needs)
    }

    /// Applies the constant matrix `m` to each row block of `x`; block
    /// count is `x.nrows() / m.ncols()`.
    pub fn block_matmul(&mut self, m: Rc<Array2<T>>, x: Var) -> Var {
        let vx = &self.nodes[x.0].value;
        let n = m.ncols();
        assert_eq!(m.nrows(), n, "block matrix must be square");
        assert_eq!(vx.nrows() % n, 0, "rows not a multiple of block size");
        let blocks = vx.nrows() / n;
        let mut value = Array2::zeros(vx.raw_dim());
        for b in 0..blocks {
            let range = ndarray::s![b * n..(b + 1) * n, ..];
            let block = vx.slice(range);
            value.slice_mut(range).assign(&m.dot(&block));
        }
        let needs = self.needs(x.0);
        self.push(value, Op::BlockMatMul { m, x: x.0 }, needs)
    }

    /// Row-wise elementwise max over `lists[r]` (absolute row indices).
    pub fn neighbor_max(&mut self, x: Var, lists: Rc<Vec<Vec<usize>>>) -> Var {
        let vx = &self.nodes[x.0].value;
        assert_eq!(vx.nrows(), lists.len(), "list count mismatch");
        let d = vx.ncols();
        let mut value = Array2::zeros((lists.len(), d));
        let mut argmax = vec![0u32; lists.len() * d];
        for (r, list) in lists.iter().enumerate() {
            assert!(!list.is_empty(), "empty neighbor list");
            for c in 0..d {
                let mut best = vx[[list[0], c]];
                let mut best_row = list[0];
                for &u in &list[1..] {
                    if vx[[u, c]] > best {
                        best = vx[[u, c]];
                        best_row = u;
                    }
                }
                value[[r, c]] = best;
                argmax[r * d + c] = best_row as u32;
            }
        }
        let needs = self.needs(x.0);
        self.push(value, Op::NeighborMax { x: x.0, argmax }, needs)
    }

    pub fn gather_rows(&mut self, x: Var, idx: Rc<Vec<usize>>) -> Var {
        let vx = &self.nodes[x.0].value;
        let mut value = Array2::zeros((idx.len(), vx.ncols()));
        for (e, &r) in idx.iter().enumerate() {
            value.row_mut(e).assign(&vx.row(r));
        }
        let needs = self.needs(x.0);
        self.push(value, Op::GatherRows { x: x.0, idx }, needs)
    }

    /// out has `rows` rows; out[idx[e], :] accumulates x[e, :].
    pub fn scatter_add_rows(&mut self, x: Var, idx: Rc<Vec<usize>>, rows: usize) -> Var {
        let vx = &self.nodes[x.0].value;
        assert_eq!(vx.nrows(), idx.len());
        let mut value = Array2::zeros((rows, vx.ncols()));
        for (e, &r) in idx.iter().enumerate() {
            let mut target = value.row_mut(r);
            target += &vx.row(e);
        }
        let needs = self.needs(x.0);
        self.push(value, Op::ScatterAddRows { x: x.0, idx }, needs)
    }

    pub fn mul_col_vec(&mut self, col: Var, x: Var) -> Var {
        let vc = &self.nodes[col.0].value;
        let vx = &self.nodes[x.0].value;
        assert_eq!(vc.ncols(), 1);
        assert_eq!(vc.nrows(), vx.nrows());
        let mut value = vx.clone();
        for (e, mut row) in value.rows_mut().into_iter().enumerate() {
            row *= vc[[e, 0]];
        }
        let needs = self.needs(col.0) || self.needs(x.0);
        self.push(value, Op::MulColVec { col: col.0, x: x.0 }, needs)
    }

    /// Softmax over contiguous segments of an E x 1 column vector.
    pub fn segment_softmax(&mut self, x: Var, segments: Rc<Vec<(u32, u32)>>) -> Var {
        let vx = &self.nodes[x.0].value;
        assert_eq!(vx.ncols(), 1);
        let mut value = vx.clone();
        for &(s, e) in segments.iter() {
            let (s, e) = (s as usize, e as usize);
            let max = (s..e).map(|i| value[[i, 0]]).fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for i in s..e {
                let v = (value[[i, 0]] - max).exp();
                value[[i, 0]] = v;
                sum = sum + v;
            }
            for i in s..e {
                value[[i, 0]] = value[[i, 0]] / sum;
            }
        }
        let needs = self.needs(x.0);
        self.push(value, Op::SegmentSoftmax { x: x.0, segments }, needs)
    }

    /// Inverted dropout with a caller-built mask of zeros and 1/(1-rate).
    pub fn dropout(&mut self, x: Var, mask: Array2<T>) -> Var {
        let value = &self.nodes[x.0].value * &mask;
        let needs = self.needs(x.0);
        self.push(value, Op::Dropout { x: x.0, mask }, needs)
    }

    /// Train-mode batch normalization over rows with per-column batch
    /// statistics (biased variance). Returns (output, batch_mean,
    /// batch_var_biased) so the caller can update running statistics.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        eps: T,
    ) -> (Var, Vec<T>, Vec<T>) {
        let vx = &self.nodes[x.0].value;
        let n = vx.nrows();
        assert!(n >= 2, "batch normalization needs at least 2 rows in train mode");
        let d = vx.ncols();
        let nf = real(n as f64);
        let mean: Vec<T> = (0..d).map(|c| vx.column(c).sum() / nf).collect();
        let var: Vec<T> = (0..d)
            .map(|c| {
                vx.column(c)
                    .iter()
                    .map(|&v| (v - mean[c]) * (v - mean[c]))
                    .fold(T::zero(), |a, b| a + b)
                    / nf
            })
            .collect();
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vx.clone();
        for (c, mut col) in xhat.columns_mut().into_iter().enumerate() {
            col.mapv_inplace(|v| (v - mean[c]) * inv_std[c]);
        }
        let vscale = &self.nodes[scale.0].value;
        let vshift = &self.nodes[shift.0].value;
        assert_eq!(vscale.ncols(), d);
        assert_eq!(vshift.ncols(), d);
        let value = &xhat * &vscale.row(0) + &vshift.row(0);
        let needs = self.needs(x.0) || self.needs(scale.0) || self.needs(shift.0);
        let out = self.push(
            value,
            Op::BatchNorm {
                x: x.0,
                scale: scale.0,
                shift: shift.0,
                xhat,
                inv_std: inv_std.clone(),
            },
            needs,
        );
        (out, mean, var)
    }

    /// Weighted mean of per-row cross-entropy; the weight of masked rows
    /// is zero and never contributes to loss or gradients.
    pub fn softmax_xent_mean(
        &mut self,
        logits: Var,
        labels: Rc<Vec<u32>>,
        weights: Rc<Vec<T>>,
    ) -> Var {
        let vl = &self.nodes[logits.0].value;
        assert_eq!(vl.nrows(), labels.len());
        assert_eq!(vl.nrows(), weights.len());
        let classes = vl.ncols();
        let probs = super::softmax_rows(vl);
        let mut loss = T::zero();
        let mut weight_sum = T::zero();
        for (r, (&label, &w)) in labels.iter().zip(weights.iter()).enumerate() {
            assert!((label as usize) < classes, "label out of range");
            if w != T::zero() {
                let row: Vec<T> = vl.row(r).to_vec();
                loss = loss + w * super::cross_entropy(&row, label as usize);
                weight_sum = weight_sum + w;
            }
        }
        assert!(weight_sum > T::zero(), "all rows masked out of the loss");
        let value = Array2::from_elem((1, 1), loss / weight_sum);
        let needs = self.needs(logits.0);
        self.push(
            value,
            Op::SoftmaxXentMean {
                logits: logits.0,
                labels,
                weights,
                probs,
                weight_sum,
            },
            needs,
        )
    }

    /// Reverse pass from a 1 x 1 loss node.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        assert_eq!(self.nodes[loss.0].value.dim(), (1, 1), "loss must be scalar");
        let mut grads: Vec<Option<Array2<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::from_elem((1, 1), T::one()));

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.accumulate_parents(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { grads }
    }

    fn accumulate_parents(&self, i: usize, g: &Array2<T>, grads: &mut Vec<Option<Array2<T>>>) {
        let add_to = |grads: &mut Vec<Option<Array2<T>>>, idx: usize, delta: Array2<T>| {
            match &mut grads[idx] {
                Some(existing) => *existing += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    let gb = g.dot(&self.nodes[*b].value.t());
                    add_to(grads, *a, gb);
                }
                if self.needs(*b) {
                    let ga = self.nodes[*a].value.t().dot(g);
                    add_to(grads, *b, ga);
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    add_to(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    add_to(grads, *b, g.clone());
                }
            }
            Op::AddRowVec(a, row) => {
                if self.needs(*a) {
                    add_to(grads, *a, g.clone());
                }
                if self.needs(*row) {
                    let summed = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    add_to(grads, *row, summed);
                }
            }
            Op::MulRowVec(a, row) => {
                if self.needs(*a) {
                    let vr = &self.nodes[*row].value;
                    add_to(grads, *a, g * &vr.row(0));
                }
                if self.needs(*row) {
                    let va = &self.nodes[*a].value;
                    let prod = g * va;
                    let summed = prod.sum_axis(Axis(0)).insert_axis(Axis(0));
                    add_to(grads, *row, summed);
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    add_to(grads, *a, g * &self.nodes[*b].value);
                }
                if self.needs(*b) {
                    add_to(grads, *b, g * &self.nodes[*a].value);
                }
            }
            Op::OneMinus(a) => {
                if self.needs(*a) {
                    add_to(grads, *a, g.mapv(|v| -v));
                }
            }
            Op::Sigmoid(a) => {
                if self.needs(*a) {
                    let y = &self.nodes[i].value;
                    add_to(grads, *a, g * &y.mapv(|v| v * (T::one() - v)));
                }
            }
            Op::Tanh(a) => {
                if self.needs(*a) {
                    let y = &self.nodes[i].value;
                    add_to(grads, *a, g * &y.mapv(|v| T::one() - v * v));
                }
            }
            Op::Relu(a) => {
                if self.needs(*a) {
                    let x = &self.nodes[*a].value;
                    let mask = x.mapv(|v| if v > T::zero() { T::one() } else { T::zero() });
                    add_to(grads, *a, g * &mask);
                }
            }
            Op::LeakyRelu(a, slope) => {
                if self.needs(*a) {
                    let x = &self.nodes[*a].value;
                    let s = *slope;
                    let mask = x.mapv(|v| if v > T::zero() { T::one() } else { s });
                    add_to(grads, *a, g * &mask);
                }
            }
            Op::ConcatCols(a, b) => {
                let ca = self.nodes[*a].value.ncols();
                if self.needs(*a) {
                    add_to(grads, *a, g.slice(ndarray::s![.., ..ca]).to_owned());
                }
                if self.needs(*b) {
                    add_to(grads, *b, g.slice(ndarray::s![.., ca..]).to_owned());
                }
            }
            Op::BlockMatMul { m, x } => {
                if self.needs(*x) {
                    let n = m.ncols();
                    let blocks = g.nrows() / n;
                    let mt = m.t();
                    let mut dx = Array2::zeros(g.raw_dim());
                    for b in 0..blocks {
                        let range = ndarray::s![b * n..(b + 1) * n, ..];
                        dx.slice_mut(range).assign(&mt.dot(&g.slice(range)));
                    }
                    add_to(grads, *x, dx);
                }
            }
            Op::NeighborMax { x, argmax } => {
                if self.needs(*x) {
                    let d = g.ncols();
                    let mut dx = Array2::zeros(self.nodes[*x].value.raw_dim());
                    for r in 0..g.nrows() {
                        for c in 0..d {
                            let src = argmax[r * d + c] as usize;
                            dx[[src, c]] = dx[[src, c]] + g[[r, c]];
                        }
                    }
                    add_to(grads, *x, dx);
                }
            }
            Op::GatherRows { x, idx } => {
                if self.needs(*x) {
                    let mut dx = Array2::zeros(self.nodes[*x].value.raw_dim());
                    for (e, &r) in idx.iter().enumerate() {
                        let mut target = dx.row_mut(r);
                        target += &g.row(e);
                    }
                    add_to(grads, *x, dx);
                }
            }
            Op::ScatterAddRows { x, idx } => {
                if self.needs(*x) {
                    let mut dx = Array2::zeros(self.nodes[*x].value.raw_dim());
                    for (e, &r) in idx.iter().enumerate() {
                        dx.row_mut(e).assign(&g.row(r));
                    }
                    add_to(grads, *x, dx);
                }
            }
            Op::MulColVec { col, x } => {
                if self.needs(*col) {
                    let vx = &self.nodes[*x].value;
                    let mut dc = Array2::zeros((g.nrows(), 1));
                    for e in 0..g.nrows() {
                        dc[[e, 0]] = g
                            .row(e)
                            .iter()
                            .zip(vx.row(e).iter())
                            .map(|(&a, &b)| a * b)
                            .fold(T::zero(), |a, b| a + b);
                    }
                    add_to(grads, *col, dc);
                }
                if self.needs(*x) {
                    let vc = &self.nodes[*col].value;
                    let mut dx = g.clone();
                    for (e, mut row) in dx.rows_mut().into_iter().enumerate() {
                        row *= vc[[e, 0]];
                    }
                    add_to(grads, *x, dx);
                }
            }
            Op::SegmentSoftmax { x, segments } => {
                if self.needs(*x) {
                    let alpha = &self.nodes[i].value;
                    let mut dx = Array2::zeros(alpha.raw_dim());
                    for &(s, e) in segments.iter() {
                        let (s, e) = (s as usize, e as usize);
                        let dot = (s..e)
                            .map(|j| alpha[[j, 0]] * g[[j, 0]])
                            .fold(T::zero(), |a, b| a + b);
                        for j in s..e {
                            dx[[j, 0]] = alpha[[j, 0]] * (g[[j, 0]] - dot);
                        }
                    }
                    add_to(grads, *x, dx);
                }
            }
            Op::Dropout { x, mask } => {
                if self.needs(*x) {
                    add_to(grads, *x, g * mask);
                }
            }
            Op::BatchNorm {
                x,
                scale,
                shift,
                xhat,
                inv_std,
            } => {
                if self.needs(*shift) {
                    let summed = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    add_to(grads, *shift, summed);
                }
                if self.needs(*scale) {
                    let prod = g * xhat;
                    let summed = prod.sum_axis(Axis(0)).insert_axis(Axis(0));
                    add_to(grads, *scale, summed);
                }
                if self.needs(*x) {
                    let vscale = &self.nodes[*scale].value;
                    let gx = g * &vscale.row(0);
                    let n = real(g.nrows() as f64);
                    let sum_gx = gx.sum_axis(Axis(0));
                    let sum_gx_xhat = (&gx * xhat).sum_axis(Axis(0));
                    let mut dx = Array2::zeros(g.raw_dim());
                    for r in 0..g.nrows() {
                        for c in 0..g.ncols() {
                            let term = n * gx[[r, c]]
                                - sum_gx[c]
                                - xhat[[r, c]] * sum_gx_xhat[c];
                            dx[[r, c]] = inv_std[c] / n * term;
                        }
                    }
                    add_to(grads, *x, dx);
                }
            }
            Op::SoftmaxXentMean {
                logits,
                labels,
                weights,
                probs,
                weight_sum,
            } => {
                if self.needs(*logits) {
                    let gl = g[[0, 0]];
                    let mut dl = probs.clone();
                    for (r, (&label, &w)) in labels.iter().zip(weights.iter()).enumerate() {
                        if w == T::zero() {
                            dl.row_mut(r).fill(T::zero());
                            continue;
                        }
                        dl[[r, label as usize]] = dl[[r, label as usize]] - T::one();
                        let factor = gl * w / *weight_sum;
                        let mut row = dl.row_mut(r);
                        row *= factor;
                    }
                    add_to(grads, *logits, dl);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn rand_matrix(rng: &mut ChaCha12Rng, rows: usize, cols: usize) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
    }

    /// Central finite differences of a scalar-valued builder with respect
    /// to one designated parameter.
    fn finite_diff<F>(build: F, param: &Array2<f64>, step: f64) -> Array2<f64>
    where
        F: Fn(&Array2<f64>) -> f64,
    {
        let mut grad = Array2::zeros(param.raw_dim());
        for r in 0..param.nrows() {
            for c in 0..param.ncols() {
                let mut plus = param.clone();
                plus[[r, c]] += step;
                let mut minus = param.clone();
                minus[[r, c]] -= step;
                grad[[r, c]] = (build(&plus) - build(&minus)) / (2.0 * step);
            }
        }
        grad
    }

    fn max_rel_err(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        a.iter()
            .zip(b.iter())
            .map(|(&x, &y)| (x - y).abs() / (x.abs() + y.abs()).max(1e-8))
            .fold(0.0, f64::max)
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let w = rand_matrix(&mut rng, 3, 2);
        let x = rand_matrix(&mut rng, 4, 3);
        let labels = Rc::new(vec![0u32, 1, 0, 1]);
        let weights = Rc::new(vec![1.0f64; 4]);

        let run = |w: &Array2<f64>| -> f64 {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let wv = tape.param(w);
            let y = tape.matmul(xv, wv);
            let loss = tape.softmax_xent_mean(y, labels.clone(), weights.clone());
            tape.value(loss)[[0, 0]]
        };

        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let wv = tape.param(&w);
        let y = tape.matmul(xv, wv);
        let loss = tape.softmax_xent_mean(y, labels.clone(), weights.clone());
        let grads = tape.backward(loss);
        let analytic = grads.get(wv).unwrap();
        let numeric = finite_diff(run, &w, 1e-5);
        assert!(max_rel_err(analytic, &numeric) < 1e-7);
    }

    #[test]
    fn elementwise_chain_gradients() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let w = rand_matrix(&mut rng, 2, 3);
        let x = rand_matrix(&mut rng, 2, 3);
        let labels = Rc::new(vec![2u32, 0]);
        let weights = Rc::new(vec![1.0f64, 1.0]);

        let run = |w: &Array2<f64>| -> f64 {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let wv = tape.param(w);
            let s = tape.sigmoid(wv);
            let t = tape.tanh(s);
            let m = tape.mul(t, xv);
            let o = tape.one_minus(m);
            let l = tape.leaky_relu(o, 0.2);
            let loss = tape.softmax_xent_mean(l, labels.clone(), weights.clone());
            tape.value(loss)[[0, 0]]
        };

        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let wv = tape.param(&w);
        let s = tape.sigmoid(wv);
        let t = tape.tanh(s);
        let m = tape.mul(t, xv);
        let o = tape.one_minus(m);
        let l = tape.leaky_relu(o, 0.2);
        let loss = tape.softmax_xent_mean(l, labels.clone(), weights.clone());
        let grads = tape.backward(loss);
        let analytic = grads.get(wv).unwrap();
        let numeric = finite_diff(run, &w, 1e-5);
        assert!(max_rel_err(analytic, &numeric) < 1e-6);
    }

    #[test]
    fn graph_op_gradients() {
        // gather -> mul_col -> scatter -> neighbor max composition
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let x = rand_matrix(&mut rng, 3, 2);
        let idx = Rc::new(vec![0usize, 1, 1, 2]);
        let scores = rand_matrix(&mut rng, 4, 1);
        let segs = Rc::new(vec![(0u32, 2u32), (2, 4)]);
        let lists = Rc::new(vec![vec![0usize, 1], vec![1], vec![1, 2]]);
        let labels = Rc::new(vec![0u32, 1, 0]);
        let weights = Rc::new(vec![1.0f64, 1.0, 0.0]);

        let run = |w: &Array2<f64>| -> f64 {
            let mut tape = Tape::new();
            let wv = tape.param(w);
            let sv = tape.leaf(scores.clone());
            let alpha = tape.segment_softmax(sv, segs.clone());
            let gathered = tape.gather_rows(wv, idx.clone());
            let weighted = tape.mul_col_vec(alpha, gathered);
            let out = tape.scatter_add_rows(weighted, idx.clone(), 3);
            let maxed = tape.neighbor_max(out, lists.clone());
            let loss = tape.softmax_xent_mean(maxed, labels.clone(), weights.clone());
            tape.value(loss)[[0, 0]]
        };

        let mut tape = Tape::new();
        let wv = tape.param(&x);
        let sv = tape.leaf(scores.clone());
        let alpha = tape.segment_softmax(sv, segs.clone());
        let gathered = tape.gather_rows(wv, idx.clone());
        let weighted = tape.mul_col_vec(alpha, gathered);
        let out = tape.scatter_add_rows(weighted, idx.clone(), 3);
        let maxed = tape.neighbor_max(out, lists.clone());
        let loss = tape.softmax_xent_mean(maxed, labels.clone(), weights.clone());
        let grads = tape.backward(loss);
        let analytic = grads.get(wv).unwrap();
        let numeric = finite_diff(run, &x, 1e-6);
        assert!(max_rel_err(analytic, &numeric) < 1e-6);
    }

    #[test]
    fn segment_softmax_scores_gradient() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let scores = rand_matrix(&mut rng, 4, 1);
        let feats = rand_matrix(&mut rng, 4, 3);
        let idx = Rc::new(vec![0usize, 0, 1, 1]);
        let segs = Rc::new(vec![(0u32, 2u32), (2, 4)]);
        let labels = Rc::new(vec![1u32, 2]);
        let weights = Rc::new(vec![1.0f64, 1.0]);

        let run = |s: &Array2<f64>| -> f64 {
            let mut tape = Tape::new();
            let sv = tape.param(s);
            let fv = tape.leaf(feats.clone());
            let alpha = tape.segment_softmax(sv, segs.clone());
            let weighted = tape.mul_col_vec(alpha, fv);
            let out = tape.scatter_add_rows(weighted, idx.clone(), 2);
            let loss = tape.softmax_xent_mean(out, labels.clone(), weights.clone());
            tape.value(loss)[[0, 0]]
        };

        let mut tape = Tape::new();
        let sv = tape.param(&scores);
        let fv = tape.leaf(feats.clone());
        let alpha = tape.segment_softmax(sv, segs.clone());
        let weighted = tape.mul_col_vec(alpha, fv);
        let out = tape.scatter_add_rows(weighted, idx.clone(), 2);
        let loss = tape.softmax_xent_mean(out, labels.clone(), weights.clone());
        let grads = tape.backward(loss);
        let analytic = grads.get(sv).unwrap();
        let numeric = finite_diff(run, &scores, 1e-6);
        assert!(max_rel_err(analytic, &numeric) < 1e-6);
    }

    #[test]
    fn batch_norm_gradients() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let x = rand_matrix(&mut rng, 5, 3);
        let scale = rand_matrix(&mut rng, 1, 3);
        let shift = rand_matrix(&mut rng, 1, 3);
        let labels = Rc::new(vec![0u32, 1, 2, 0, 1]);
        let weights = Rc::new(vec![1.0f64; 5]);

        let run_x = |p: &Array2<f64>| -> f64 {
            let mut tape = Tape::new();
            let xv = tape.param(p);
            let sc = tape.param(&scale);
            let sh = tape.param(&shift);
            let (y, _, _) = tape.batch_norm_train(xv, sc, sh, 1e-5);
            let loss = tape.softmax_xent_mean(y, labels.clone(), weights.clone());
            tape.value(loss)[[0, 0]]
        };

        let mut tape = Tape::new();
        let xv = tape.param(&x);
        let sc = tape.param(&scale);
        let sh = tape.param(&shift);
        let (y, _, _) = tape.batch_norm_train(xv, sc, sh, 1e-5);
        let loss = tape.softmax_xent_mean(y, labels.clone(), weights.clone());
        let grads = tape.backward(loss);

        let numeric_x = finite_diff(run_x, &x, 1e-5);
        assert!(max_rel_err(grads.get(xv).unwrap(), &numeric_x) < 1e-5);

        let run_scale = |p: &Array2<f64>| -> f64 {
            let mut tape = Tape::new();
            let xv = tape.param(&x);
            let sc = tape.param(p);
            let sh = tape.param(&shift);
            let (y, _, _) = tape.batch_norm_train(xv, sc, sh, 1e-5);
            let loss = tape.softmax_xent_mean(y, labels.clone(), weights.clone());
            tape.value(loss)[[0, 0]]
        };
        let numeric_s = finite_diff(run_scale, &scale, 1e-5);
        assert!(max_rel_err(grads.get(sc).unwrap(), &numeric_s) < 1e-6);
    }

    #[test]
    fn xent_gradient_is_probs_minus_onehot() {
        let logits = array![[2.0f64, 0.0, -1.0]];
        let labels = Rc::new(vec![0u32]);
        let weights = Rc::new(vec![1.0f64]);
        let mut tape = Tape::new();
        let lv = tape.param(&logits);
        let loss = tape.softmax_xent_mean(lv, labels, weights);
        let grads = tape.backward(loss);
        let g = grads.get(lv).unwrap();
        let p = crate::nn::softmax_rows(&logits);
        assert!((g[[0, 0]] - (p[[0, 0]] - 1.0)).abs() < 1e-12);
        assert!((g[[0, 1]] - p[[0, 1]]).abs() < 1e-12);
        assert!((g[[0, 2]] - p[[0, 2]]).abs() < 1e-12);
    }

    #[test]
    fn unused_parameter_has_no_gradient() {
        let mut tape = Tape::new();
        let used = tape.param(&array![[1.0f64, 2.0]]);
        let unused = tape.param(&array![[3.0f64, 4.0]]);
        let loss = tape.softmax_xent_mean(used, Rc::new(vec![0]), Rc::new(vec![1.0]));
        let grads = tape.backward(loss);
        assert!(grads.get(unused).is_none());
        assert!(grads.get(used).is_some());
    }

    #[test]
    fn masked_rows_contribute_nothing() {
        let x = array![[0.3f64, -0.2], [5.0, -7.0]];
        let labels = Rc::new(vec![0u32, 1]);
        let mut tape = Tape::new();
        let xv = tape.param(&x);
        let loss = tape.softmax_xent_mean(xv, labels.clone(), Rc::new(vec![1.0, 0.0]));
        let grads = tape.backward(loss);
        let g = grads.get(xv).unwrap();
        assert_eq!(g[[1, 0]], 0.0);
        assert_eq!(g[[1, 1]], 0.0);

        // loss equals the unmasked row's cross entropy
        let expected = crate::nn::cross_entropy(&[0.3, -0.2], 0);
        assert!((tape.value(loss)[[0, 0]] - expected).abs() < 1e-12);
    }

    #[test]
    fn block_matmul_applies_per_block() {
        let m = Rc::new(array![[0.0f64, 1.0], [1.0, 0.0]]);
        let x = array![[1.0f64], [2.0], [3.0], [4.0]];
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let y = tape.block_matmul(m, xv);
        let v = tape.value(y);
        assert_eq!(v, &array![[2.0], [1.0], [4.0], [3.0]]);
    }
}
