//! Reverse-mode differentiation over matrix-valued nodes.
//!
//! Every op appends a node whose inputs already exist on the tape, so node
//! order is a topological order and [`Tape::backward`] simply walks it in
//! reverse. Leaves are either parameters (adjoints wanted) or constants
//! (adjoints skipped); interior nodes need an adjoint when any input does.

use crate::error::{Error, Result};
use crate::mat::{gemm_nn, gemm_nt, gemm_tn, topk_indices, Mat};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddColBias(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, f64),
    Elu(Var),
    Relu(Var),
    Transpose(Var),
    Sum(Var),
    RowSlice(Var, usize),
    VStack(Vec<Var>),
    Assemble(Vec<Var>),
    RowL2Normalize(Var),
    TopKReduce {
        sims: Var,
        picked: Vec<usize>,
        k: usize,
        topk_mean: bool,
        token_mean: bool,
    },
    Cosine(Var, Var),
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Mat,
    },
    TemporalConv(Var, Var),
    DepthwiseConv(Var, Var, usize),
    GroupMix(Var, Var),
    AvgPoolCols(Var, usize),
    ColSoftmax(Var),
    MeanCols(Var),
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation for one backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Mat>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Adjoint of `v`; zeros when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Mat {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Mat::zeros(r, c)
            }
        }
    }

    pub fn get_ref(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }
}

fn shape_err(a: &Mat, b: &Mat, context: &'static str) -> Error {
    Error::ShapeMismatch {
        lhs: a.shape(),
        rhs: b.shape(),
        context,
    }
}

#[inline]
fn same_pad(len: usize) -> isize {
    ((len as isize) - 1) / 2
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

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Mat, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose adjoint is reported by `backward`.
    pub fn param(&mut self, value: Mat) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a * b^T`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_nt(self.value(b))?;
        Ok(self.push(out, Op::MatMulNT(a, b), &[a, b]))
    }

    fn check_same(&self, a: Var, b: Var, context: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(self.value(a), self.value(b), context));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "add")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "sub")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "mul")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// Adds an `rows x 1` bias to every column of `a`.
    pub fn add_col_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        if bv.shape() != (av.rows(), 1) {
            return Err(shape_err(av, bv, "add_col_bias"));
        }
        let mut out = av.clone();
        let cols = out.cols();
        for i in 0..out.rows() {
            let b = bv.as_slice()[i];
            for x in &mut out.as_mut_slice()[i * cols..(i + 1) * cols] {
                *x += b;
            }
        }
        Ok(self.push(out, Op::AddColBias(a, bias), &[a, bias]))
    }

    /// Adds a `1 x cols` bias to every row of `a`.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        if bv.shape() != (1, av.cols()) {
            return Err(shape_err(av, bv, "add_row_bias"));
        }
        let mut out = av.clone();
        for i in 0..out.rows() {
            for (x, b) in out.row_mut(i).iter_mut().zip(bv.as_slice()) {
                *x += b;
            }
        }
        Ok(self.push(out, Op::AddRowBias(a, bias), &[a, bias]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    pub fn elu(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .map(|x| if x > 0.0 { x } else { x.exp_m1() });
        self.push(out, Op::Elu(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a), &[a])
    }

    /// Sum of all entries as a 1x1 node.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Mat::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a), &[a])
    }

    pub fn row_slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        if start + len > av.rows() {
            return Err(Error::ShapeMismatch {
                lhs: av.shape(),
                rhs: (start + len, av.cols()),
                context: "row_slice",
            });
        }
        let out = av.slice_rows(start, len);
        Ok(self.push(out, Op::RowSlice(a, start), &[a]))
    }

    pub fn vstack(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Mat> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Mat::vstack(&mats)?;
        Ok(self.push(out, Op::VStack(parts.to_vec()), parts))
    }

    /// Packs `rows * cols` scalar nodes (row-major) into one matrix.
    pub fn assemble(&mut self, scalars: &[Var], rows: usize, cols: usize) -> Result<Var> {
        if scalars.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                lhs: (rows, cols),
                rhs: (scalars.len(), 1),
                context: "assemble",
            });
        }
        let mut data = Vec::with_capacity(scalars.len());
        for &s in scalars {
            let v = self.value(s);
            if v.shape() != (1, 1) {
                return Err(Error::NonScalarLoss {
                    rows: v.rows(),
                    cols: v.cols(),
                });
            }
            data.push(v.item());
        }
        let out = Mat::from_vec(rows, cols, data)?;
        Ok(self.push(out, Op::Assemble(scalars.to_vec()), scalars))
    }

    pub fn row_l2_normalize(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let mut out = av.clone();
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(Error::ZeroNorm("row_l2_normalize"));
            }
            row.iter_mut().for_each(|x| *x /= n);
        }
        Ok(self.push(out, Op::RowL2Normalize(a), &[a]))
    }

    /// Per row: sum (or mean) of the `k` largest entries; then sum (or mean) over rows.
    ///
    /// Selected values are summed in descending order so that any column
    /// permutation of `sims` produces the same bits.
    pub fn topk_reduce(
        &mut self,
        sims: Var,
        k: usize,
        topk_mean: bool,
        token_mean: bool,
    ) -> Result<Var> {
        let sv = self.value(sims);
        let (rows, cols) = sv.shape();
        if k == 0 || k > cols {
            return Err(Error::KOutOfRange { k, len: cols });
        }
        let mut picked = Vec::with_capacity(rows * k);
        let mut total = 0.0;
        for i in 0..rows {
            let row = sv.row(i);
            let idx = topk_indices(row, k)?;
            let mut acc = 0.0;
            for &j in &idx {
                acc += row[j];
            }
            if topk_mean {
                acc /= k as f64;
            }
            total += acc;
            picked.extend(idx);
        }
        if token_mean {
            total /= rows as f64;
        }
        let op = Op::TopKReduce {
            sims,
            picked,
            k,
            topk_mean,
            token_mean,
        };
        Ok(self.push(Mat::scalar(total), op, &[sims]))
    }

    /// Cosine similarity between two equally shaped matrices viewed as flat vectors.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "cosine")?;
        let (av, bv) = (self.value(a), self.value(b));
        let (na, nb) = (av.frobenius_norm(), bv.frobenius_norm());
        if na == 0.0 || nb == 0.0 {
            return Err(Error::ZeroNorm("cosine"));
        }
        let c = crate::mat::dot(av.as_slice(), bv.as_slice()) / (na * nb);
        Ok(self.push(Mat::scalar(c), Op::Cosine(a, b), &[a, b]))
    }

    /// Mean over rows of `logsumexp(row) - row[target]`, computed with max subtraction.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (n, c) = lv.shape();
        if targets.len() != n {
            return Err(Error::ShapeMismatch {
                lhs: lv.shape(),
                rhs: (targets.len(), 1),
                context: "softmax_cross_entropy targets",
            });
        }
        if n == 0 || c == 0 {
            return Err(Error::InvalidConfig("empty logits".into()));
        }
        let mut probs = Mat::zeros(n, c);
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(Error::InvalidConfig(format!("target {t} >= {c} classes")));
            }
            let row = lv.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if !m.is_finite() {
                return Err(Error::NonFinite(format!("logit row {i}")));
            }
            let mut z = 0.0;
            for &x in row {
                z += (x - m).exp();
            }
            let lse = m + z.ln();
            total += lse - row[t];
            for (p, &x) in probs.row_mut(i).iter_mut().zip(row) {
                *p = (x - m).exp() / z;
            }
        }
        let loss = total / n as f64;
        let op = Op::SoftmaxCrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        Ok(self.push(Mat::scalar(loss), op, &[logits]))
    }

    /// Shared 1-D filters over every input row with "same" zero padding.
    ///
    /// `x` is `R x T`, `w` is `F x L`; output row `f * R + r` is row `r` filtered by `w[f]`.
    pub fn temporal_conv(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (r, t) = xv.shape();
        let (f, l) = wv.shape();
        if l == 0 {
            return Err(shape_err(xv, wv, "temporal_conv empty kernel"));
        }
        let pad = same_pad(l);
        let mut out = Mat::zeros(f * r, t);
        for fi in 0..f {
            let ker = wv.row(fi);
            for ri in 0..r {
                let src = xv.row(ri);
                let dst = out.row_mut(fi * r + ri);
                conv_row(src, ker, pad, 1, dst);
            }
        }
        Ok(self.push(out, Op::TemporalConv(x, w), &[x, w]))
    }

    /// Per-row dilated 1-D filter with "same" zero padding; row `r` uses kernel `r % K`.
    pub fn depthwise_conv(&mut self, x: Var, w: Var, dilation: usize) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (r, t) = xv.shape();
        let (k, l) = wv.shape();
        if k == 0 || l == 0 || dilation == 0 {
            return Err(shape_err(xv, wv, "depthwise_conv"));
        }
        let pad = same_pad(l);
        let mut out = Mat::zeros(r, t);
        for ri in 0..r {
            conv_row(xv.row(ri), wv.row(ri % k), pad, dilation, out.row_mut(ri));
        }
        Ok(self.push(out, Op::DepthwiseConv(x, w, dilation), &[x, w]))
    }

    /// Mixes channel rows within each group: `x` is `(G*C) x T`, `w` is `M x C`,
    /// output row `g * M + m` is `sum_c w[m][c] * x[g * C + c]`.
    pub fn group_mix(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (rows, t) = xv.shape();
        let (m, c) = wv.shape();
        if c == 0 || rows % c != 0 {
            return Err(shape_err(xv, wv, "group_mix"));
        }
        let groups = rows / c;
        let mut out = Mat::zeros(groups * m, t);
        for g in 0..groups {
            for mi in 0..m {
                let dst_start = (g * m + mi) * t;
                for ci in 0..c {
                    let wv_mc = wv[(mi, ci)];
                    let src = xv.row(g * c + ci);
                    let dst = &mut out.as_mut_slice()[dst_start..dst_start + t];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += wv_mc * s;
                    }
                }
            }
        }
        Ok(self.push(out, Op::GroupMix(x, w), &[x, w]))
    }

    /// Non-overlapping average pooling along columns (kernel = stride = `len`);
    /// trailing columns that do not fill a window are dropped.
    pub fn avg_pool_cols(&mut self, x: Var, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, t) = xv.shape();
        if len == 0 || t < len {
            return Err(Error::InputTooShort { got: t, need: len });
        }
        let tp = t / len;
        let mut out = Mat::zeros(r, tp);
        for ri in 0..r {
            let src = xv.row(ri);
            for j in 0..tp {
                out[(ri, j)] = src[j * len..(j + 1) * len].iter().sum::<f64>() / len as f64;
            }
        }
        Ok(self.push(out, Op::AvgPoolCols(x, len), &[x]))
    }

    /// Softmax over rows, independently for each column.
    pub fn col_softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (r, c) = xv.shape();
        let mut out = Mat::zeros(r, c);
        for j in 0..c {
            let m = (0..r).map(|i| xv[(i, j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for i in 0..r {
                let e = (xv[(i, j)] - m).exp();
                out[(i, j)] = e;
                z += e;
            }
            for i in 0..r {
                out[(i, j)] /= z;
            }
        }
        self.push(out, Op::ColSoftmax(x), &[x])
    }

    /// Row means as an `R x 1` column.
    pub fn mean_cols(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.cols().max(1) as f64;
        let out = Mat::from_fn(xv.rows(), 1, |i, _| xv.row(i).iter().sum::<f64>() / c);
        self.push(out, Op::MeanCols(x), &[x])
    }

    /// Propagates adjoints from a scalar `loss` to every node that needs one.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::NonScalarLoss {
                rows: lv.rows(),
                cols: lv.cols(),
            });
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Mat::scalar(1.0));
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.needs_grad {
                self.propagate(&node.op, &node.value, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, op: &Op, out: &Mat, g: &Mat, grads: &mut [Option<Mat>]) {
        let mut acc = |v: Var, contrib: Mat| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&contrib),
            slot @ None => *slot = Some(contrib),
        };
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let mut da = Mat::zeros(av.rows(), av.cols());
                    gemm_nt(g, bv, &mut da);
                    acc(*a, da);
                }
                if self.wants(*b) {
                    let mut db = Mat::zeros(bv.rows(), bv.cols());
                    gemm_tn(av, g, &mut db);
                    acc(*b, db);
                }
            }
            Op::MatMulNT(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let mut da = Mat::zeros(av.rows(), av.cols());
                    gemm_nn(g, bv, &mut da);
                    acc(*a, da);
                }
                if self.wants(*b) {
                    let mut db = Mat::zeros(bv.rows(), bv.cols());
                    gemm_tn(g, av, &mut db);
                    acc(*b, db);
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.clone());
                }
                if self.wants(*b) {
                    acc(*b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.clone());
                }
                if self.wants(*b) {
                    acc(*b, g.scale(-1.0));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.wants(*b) {
                    acc(*b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::AddColBias(a, bias) => {
                if self.wants(*a) {
                    acc(*a, g.clone());
                }
                if self.wants(*bias) {
                    let db = Mat::from_fn(g.rows(), 1, |i, _| g.row(i).iter().sum());
                    acc(*bias, db);
                }
            }
            Op::AddRowBias(a, bias) => {
                if self.wants(*a) {
                    acc(*a, g.clone());
                }
                if self.wants(*bias) {
                    let mut db = Mat::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (d, x) in db.as_mut_slice().iter_mut().zip(g.row(i)) {
                            *d += x;
                        }
                    }
                    acc(*bias, db);
                }
            }
            Op::Scale(a, s) => acc(*a, g.scale(*s)),
            Op::Elu(a) => {
                let d = g.zip_map(self.value(*a), |gv, x| if x > 0.0 { gv } else { gv * x.exp() });
                acc(*a, d);
            }
            Op::Relu(a) => {
                let d = g.zip_map(self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 });
                acc(*a, d);
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::Sum(a) => {
                let (r, c) = self.shape(*a);
                acc(*a, Mat::filled(r, c, g.item()));
            }
            Op::RowSlice(a, start) => {
                let (r, c) = self.shape(*a);
                let mut d = Mat::zeros(r, c);
                let s = start * c;
                d.as_mut_slice()[s..s + g.len()].copy_from_slice(g.as_slice());
                acc(*a, d);
            }
            Op::VStack(parts) => {
                let mut row = 0;
                for &p in parts {
                    let pr = self.shape(p).0;
                    if self.wants(p) {
                        acc(p, g.slice_rows(row, pr));
                    }
                    row += pr;
                }
            }
            Op::Assemble(scalars) => {
                for (idx, &s) in scalars.iter().enumerate() {
                    if self.wants(s) {
                        acc(s, Mat::scalar(g.as_slice()[idx]));
                    }
                }
            }
            Op::RowL2Normalize(a) => {
                let av = self.value(*a);
                let mut d = Mat::zeros(av.rows(), av.cols());
                for i in 0..av.rows() {
                    let n = av.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
                    let y = out.row(i);
                    let gy = crate::mat::dot(g.row(i), y);
                    for ((dv, &gv), &yv) in d.row_mut(i).iter_mut().zip(g.row(i)).zip(y) {
                        *dv = (gv - yv * gy) / n;
                    }
                }
                acc(*a, d);
            }
            Op::TopKReduce {
                sims,
                picked,
                k,
                topk_mean,
                token_mean,
            } => {
                let (r, c) = self.shape(*sims);
                let mut w = g.item();
                if *topk_mean {
                    w /= *k as f64;
                }
                if *token_mean {
                    w /= r as f64;
                }
                let mut d = Mat::zeros(r, c);
                for i in 0..r {
                    for &j in &picked[i * k..(i + 1) * k] {
                        d[(i, j)] += w;
                    }
                }
                acc(*sims, d);
            }
            Op::Cosine(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (na, nb) = (av.frobenius_norm(), bv.frobenius_norm());
                let c = out.item();
                let gv = g.item();
                if self.wants(*a) {
                    let d = av.zip_map(bv, |x, y| gv * (y / (na * nb) - c * x / (na * na)));
                    acc(*a, d);
                }
                if self.wants(*b) {
                    let d = bv.zip_map(av, |y, x| gv * (x / (na * nb) - c * y / (nb * nb)));
                    acc(*b, d);
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let n = targets.len() as f64;
                let gv = g.item();
                let mut d = probs.clone();
                for (i, &t) in targets.iter().enumerate() {
                    d[(i, t)] -= 1.0;
                }
                acc(*logits, d.scale(gv / n));
            }
            Op::TemporalConv(x, w) => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (r, _) = xv.shape();
                let (f, l) = wv.shape();
                let pad = same_pad(l);
                if self.wants(*x) {
                    let mut dx = Mat::zeros(xv.rows(), xv.cols());
                    for fi in 0..f {
                        for ri in 0..r {
                            conv_row_adjoint_input(g.row(fi * r + ri), wv.row(fi), pad, 1, dx.row_mut(ri));
                        }
                    }
                    acc(*x, dx);
                }
                if self.wants(*w) {
                    let mut dw = Mat::zeros(f, l);
                    for fi in 0..f {
                        for ri in 0..r {
                            conv_row_adjoint_kernel(g.row(fi * r + ri), xv.row(ri), pad, 1, dw.row_mut(fi));
                        }
                    }
                    acc(*w, dw);
                }
            }
            Op::DepthwiseConv(x, w, dilation) => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (k, l) = wv.shape();
                let pad = same_pad(l);
                if self.wants(*x) {
                    let mut dx = Mat::zeros(xv.rows(), xv.cols());
                    for ri in 0..xv.rows() {
                        conv_row_adjoint_input(g.row(ri), wv.row(ri % k), pad, *dilation, dx.row_mut(ri));
                    }
                    acc(*x, dx);
                }
                if self.wants(*w) {
                    let mut dw = Mat::zeros(k, l);
                    for ri in 0..xv.rows() {
                        conv_row_adjoint_kernel(g.row(ri), xv.row(ri), pad, *dilation, dw.row_mut(ri % k));
                    }
                    acc(*w, dw);
                }
            }
            Op::GroupMix(x, w) => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (m, c) = wv.shape();
                let groups = xv.rows() / c;
                if self.wants(*x) {
                    let mut dx = Mat::zeros(xv.rows(), xv.cols());
                    for gi in 0..groups {
                        for mi in 0..m {
                            let grow = g.row(gi * m + mi);
                            for ci in 0..c {
                                let wmc = wv[(mi, ci)];
                                for (d, gv) in dx.row_mut(gi * c + ci).iter_mut().zip(grow) {
                                    *d += wmc * gv;
                                }
                            }
                        }
                    }
                    acc(*x, dx);
                }
                if self.wants(*w) {
                    let mut dw = Mat::zeros(m, c);
                    for gi in 0..groups {
                        for mi in 0..m {
                            let grow = g.row(gi * m + mi);
                            for ci in 0..c {
                                dw[(mi, ci)] += crate::mat::dot(grow, xv.row(gi * c + ci));
                            }
                        }
                    }
                    acc(*w, dw);
                }
            }
            Op::AvgPoolCols(x, len) => {
                let (r, t) = self.shape(*x);
                let mut dx = Mat::zeros(r, t);
                let inv = 1.0 / *len as f64;
                for ri in 0..r {
                    for j in 0..g.cols() {
                        let gv = g[(ri, j)] * inv;
                        for d in &mut dx.row_mut(ri)[j * len..(j + 1) * len] {
                            *d = gv;
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::ColSoftmax(x) => {
                let (r, c) = out.shape();
                let mut dx = Mat::zeros(r, c);
                for j in 0..c {
                    let s: f64 = (0..r).map(|i| out[(i, j)] * g[(i, j)]).sum();
                    for i in 0..r {
                        dx[(i, j)] = out[(i, j)] * (g[(i, j)] - s);
                    }
                }
                acc(*x, dx);
            }
            Op::MeanCols(x) => {
                let (r, t) = self.shape(*x);
                let inv = 1.0 / t.max(1) as f64;
                let dx = Mat::from_fn(r, t, |i, _| g[(i, 0)] * inv);
                acc(*x, dx);
            }
        }
    }
}

/// `dst[t] += sum_l ker[l] * src[t + (l - pad) * dil]`, zero outside `src`.
fn conv_row(src: &[f64], ker: &[f64], pad: isize, dil: usize, dst: &mut [f64]) {
    let t = src.len() as isize;
    for (l, &kv) in ker.iter().enumerate() {
        let off = (l as isize - pad) * dil as isize;
        let lo = (-off).max(0);
        let hi = (t - off).min(t);
        if lo >= hi {
            continue;
        }
        let (lo, hi) = (lo as usize, hi as usize);
        let s = &src[(lo as isize + off) as usize..(hi as isize + off) as usize];
        for (d, &x) in dst[lo..hi].iter_mut().zip(s) {
            *d += kv * x;
        }
    }
}

fn conv_row_adjoint_input(g: &[f64], ker: &[f64], pad: isize, dil: usize, dsrc: &mut [f64]) {
    let t = g.len() as isize;
    for (l, &kv) in ker.iter().enumerate() {
        let off = (l as isize - pad) * dil as isize;
        let lo = (-off).max(0);
        let hi = (t - off).min(t);
        if lo >= hi {
            continue;
        }
        let (lo, hi) = (lo as usize, hi as usize);
        let d = &mut dsrc[(lo as isize + off) as usize..(hi as isize + off) as usize];
        for (dv, &gv) in d.iter_mut().zip(&g[lo..hi]) {
            *dv += kv * gv;
        }
    }
}

fn conv_row_adjoint_kernel(g: &[f64], src: &[f64], pad: isize, dil: usize, dker: &mut [f64]) {
    let t = g.len() as isize;
    for (l, dk) in dker.iter_mut().enumerate() {
        let off = (l as isize - pad) * dil as isize;
        let lo = (-off).max(0);
        let hi = (t - off).min(t);
        if lo >= hi {
            continue;
        }
        let (lo, hi) = (lo as usize, hi as usize);
        let s = &src[(lo as isize + off) as usize..(hi as isize + off) as usize];
        *dk += crate::mat::dot(&g[lo..hi], s);
    }
}

/// Compares the tape's adjoint of `f` at `x` against central differences.
///
/// Returns `max_i |analytic_i - numeric_i| / (|analytic_i| + |numeric_i| + 1e-12)`.
pub fn check_grad<F>(f: F, x: &Mat, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let eval = |m: &Mat| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.param(m.clone());
        let out = f(&mut tape, v)?;
        Ok(tape.value(out).item())
    };
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let out = f(&mut tape, xv)?;
    let analytic = tape.backward(out)?.get(xv);

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.as_slice()[i];
        probe.as_mut_slice()[i] = orig + h;
        let fp = eval(&probe)?;
        probe.as_mut_slice()[i] = orig - h;
        let fm = eval(&probe)?;
        probe.as_mut_slice()[i] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic.as_slice()[i];
        let err = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
        worst = worst.max(err);
    }
    Ok(worst)
}
