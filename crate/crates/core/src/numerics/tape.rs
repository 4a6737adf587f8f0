//! Matrix-level reverse-mode differentiation.
//!
//! A [`Tape`] records every operation applied to its variables. Calling
//! [`Tape::backward`] on a 1x1 result replays the record in reverse and
//! returns the gradient of that scalar with respect to every variable that
//! was created with [`Tape::param`]. Constants never receive gradients, and
//! no work is spent on sub-graphs that do not depend on a parameter.

use crate::error::{ensure, Error, Result};
use crate::numerics::matrix::{gemm_nn, gemm_nt, gemm_tn, RealMatrix};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Boolean selection over the entries of a matrix, used by the masked
/// reductions. Masked-out entries neither contribute to nor receive
/// gradient.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, fill: bool) -> Self {
        Self {
            rows,
            cols,
            bits: vec![fill; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                bits.push(f(r, c));
            }
        }
        Self { rows, cols, bits }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, on: bool) {
        self.bits[r * self.cols + c] = on;
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[bool] {
        &self.bits[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_matrix(&self) -> RealMatrix {
        let data = self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        RealMatrix::from_vec(self.rows, self.cols, data).expect("mask shape")
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, RealMatrix),
    Scale(Var, f64),
    Relu(Var),
    Exp(Var),
    XLogX(Var),
    Square(Var),
    NormalizeRows(Var, Vec<f64>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    SqDist(Var, Var),
    SoftmaxRows(Var),
    MaskedLogSoftmax(Var, Mask),
    MaskedLogSumExp(Var, Mask),
    RowSums(Var),
    ColMeans(Var),
    Sum(Var),
    Mean(Var),
    PermuteRows(Var, Vec<usize>),
    RowNormalizeSum(Var, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    value: RealMatrix,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<RealMatrix>>,
}

impl Gradients {
    /// Gradient for `v`; `None` when `v` does not influence the output.
    pub fn get(&self, v: Var) -> Option<&RealMatrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, zero-filled to `shape` when absent.
    pub fn take_or_zeros(&mut self, v: Var, shape: (usize, usize)) -> RealMatrix {
        self.grads
            .get_mut(v.0)
            .and_then(Option::take)
            .unwrap_or_else(|| RealMatrix::zeros(shape.0, shape.1))
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &str, a: (usize, usize), b: (usize, usize)) -> Error {
    Error::Dimension(format!("{op}: {}x{} vs {}x{}", a.0, a.1, b.0, b.1))
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

    /// A trainable leaf.
    pub fn param(&mut self, value: RealMatrix) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: RealMatrix) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &RealMatrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_raw(&mut self, value: RealMatrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: RealMatrix, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push_raw(value, op, rg)
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(op, sa, sb));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_nt(self.value(b))?;
        Ok(self.push(value, Op::MatMulNt(a, b), &[a, b]))
    }

    /// Adds the 1xC row `bias` to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sb.0 != 1 || sb.1 != sx.1 {
            return Err(shape_err("add_row", sx, sb));
        }
        let mut value = self.value(x).clone();
        let b = self.value(bias).as_slice().to_vec();
        for r in 0..sx.0 {
            for (v, bb) in value.row_mut(r).iter_mut().zip(&b) {
                *v += bb;
            }
        }
        Ok(self.push(value, Op::AddRow(x, bias), &[x, bias]))
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> RealMatrix {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .as_slice()
            .iter()
            .zip(vb.as_slice())
            .map(|(&x, &y)| f(x, y))
            .collect();
        RealMatrix::from_vec(va.rows(), va.cols(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    /// Element-wise product with a constant matrix.
    pub fn mul_const(&mut self, a: Var, c: RealMatrix) -> Result<Var> {
        let sa = self.shape(a);
        if sa != c.shape() {
            return Err(shape_err("mul_const", sa, c.shape()));
        }
        let va = self.value(a);
        let data = va
            .as_slice()
            .iter()
            .zip(c.as_slice())
            .map(|(x, y)| x * y)
            .collect();
        let value = RealMatrix::from_vec(sa.0, sa.1, data)?;
        Ok(self.push(value, Op::MulConst(a, c), &[a]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| x * factor);
        self.push(value, Op::Scale(a, factor), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push(value, Op::Relu(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.push(value, Op::Exp(a), &[a])
    }

    /// Element-wise `x·ln x`; requires strictly positive entries.
    pub fn xlogx(&mut self, a: Var) -> Result<Var> {
        ensure!(
            self.value(a).as_slice().iter().all(|&x| x > 0.0),
            Numeric,
            "xlogx needs strictly positive entries"
        );
        let value = self.value(a).map(|x| x * x.ln());
        Ok(self.push(value, Op::XLogX(a), &[a]))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        self.push(value, Op::Square(a), &[a])
    }

    /// Scales every row to unit Euclidean norm.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let mut value = va.clone();
        let mut norms = Vec::with_capacity(va.rows());
        for r in 0..va.rows() {
            let n = crate::numerics::matrix::norm(va.row(r));
            if !(n > 0.0 && n.is_finite()) {
                return Err(Error::Degenerate(format!("row {r} has norm {n}")));
            }
            for v in value.row_mut(r) {
                *v /= n;
            }
            norms.push(n);
        }
        Ok(self.push(value, Op::NormalizeRows(a, norms), &[a]))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(a).slice_cols(start, len)?;
        Ok(self.push(value, Op::SliceCols(a, start), &[a]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        ensure!(!parts.is_empty(), Dimension, "concat of nothing");
        let rows = self.shape(parts[0]).0;
        for &p in parts {
            ensure!(
                self.shape(p).0 == rows,
                Dimension,
                "concat rows {} vs {rows}",
                self.shape(p).0
            );
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = RealMatrix::from_vec(rows, cols, data)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Pairwise squared Euclidean distances between the rows of `x` (NxD)
    /// and the rows of `c` (KxD), as an NxK matrix.
    pub fn sq_dist(&mut self, x: Var, c: Var) -> Result<Var> {
        let (sx, sc) = (self.shape(x), self.shape(c));
        if sx.1 != sc.1 {
            return Err(shape_err("sq_dist", sx, sc));
        }
        let (vx, vc) = (self.value(x), self.value(c));
        let mut value = RealMatrix::zeros(sx.0, sc.0);
        for i in 0..sx.0 {
            for k in 0..sc.0 {
                value.set(
                    i,
                    k,
                    crate::numerics::matrix::squared_distance(vx.row(i), vc.row(k)),
                );
            }
        }
        Ok(self.push(value, Op::SqDist(x, c), &[x, c]))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mut value = va.clone();
        for r in 0..va.rows() {
            softmax_in_place(value.row_mut(r));
        }
        self.push(value, Op::SoftmaxRows(a), &[a])
    }

    /// Row-wise log-softmax restricted to the entries selected by `mask`;
    /// unselected entries of the result are zero. Every row must select at
    /// least one entry.
    pub fn masked_log_softmax(&mut self, a: Var, mask: Mask) -> Result<Var> {
        let va = self.value(a);
        if va.shape() != mask.shape() {
            return Err(shape_err("masked_log_softmax", va.shape(), mask.shape()));
        }
        let mut value = RealMatrix::zeros(va.rows(), va.cols());
        for r in 0..va.rows() {
            let lse = masked_lse(va.row(r), mask.row(r))
                .ok_or_else(|| Error::Degenerate(format!("row {r} selects no entries")))?;
            for (c, (&x, &on)) in va.row(r).iter().zip(mask.row(r)).enumerate() {
                if on {
                    value.set(r, c, x - lse);
                }
            }
        }
        Ok(self.push(value, Op::MaskedLogSoftmax(a, mask), &[a]))
    }

    /// Row-wise log-sum-exp over the entries selected by `mask`, as Nx1.
    pub fn masked_logsumexp(&mut self, a: Var, mask: Mask) -> Result<Var> {
        let va = self.value(a);
        if va.shape() != mask.shape() {
            return Err(shape_err("masked_logsumexp", va.shape(), mask.shape()));
        }
        let mut out = Vec::with_capacity(va.rows());
        for r in 0..va.rows() {
            out.push(
                masked_lse(va.row(r), mask.row(r))
                    .ok_or_else(|| Error::Degenerate(format!("row {r} selects no entries")))?,
            );
        }
        let value = RealMatrix::from_vec(va.rows(), 1, out)?;
        Ok(self.push(value, Op::MaskedLogSumExp(a, mask), &[a]))
    }

    /// Sum of each row, as Nx1.
    pub fn row_sums(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let data = va.iter_rows().map(|r| r.iter().sum()).collect();
        let value = RealMatrix::from_vec(va.rows(), 1, data).expect("shape");
        self.push(value, Op::RowSums(a), &[a])
    }

    /// Mean of each column, as 1xC.
    pub fn col_means(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mut data = vec![0.0; va.cols()];
        for row in va.iter_rows() {
            for (d, v) in data.iter_mut().zip(row) {
                *d += v;
            }
        }
        let n = va.rows() as f64;
        data.iter_mut().for_each(|d| *d /= n);
        let value = RealMatrix::from_vec(1, va.cols(), data).expect("shape");
        self.push(value, Op::ColMeans(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).as_slice().iter().sum();
        self.push(RealMatrix::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let s = va.as_slice().iter().sum::<f64>() / va.as_slice().len() as f64;
        self.push(RealMatrix::scalar(s), Op::Mean(a), &[a])
    }

    /// Row `i` of the result is row `perm[i]` of `a`.
    pub fn permute_rows(&mut self, a: Var, perm: Vec<usize>) -> Result<Var> {
        let va = self.value(a);
        ensure!(
            perm.len() == va.rows() && perm.iter().all(|&p| p < va.rows()),
            Dimension,
            "row permutation of length {} for {} rows",
            perm.len(),
            va.rows()
        );
        let value = va.select_rows(&perm);
        Ok(self.push(value, Op::PermuteRows(a, perm), &[a]))
    }

    /// Divides every row by its sum.
    pub fn row_normalize_sum(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let mut value = va.clone();
        let mut sums = Vec::with_capacity(va.rows());
        for r in 0..va.rows() {
            let s: f64 = va.row(r).iter().sum();
            if !(s.abs() > 0.0 && s.is_finite()) {
                return Err(Error::Degenerate(format!("row {r} sums to {s}")));
            }
            value.row_mut(r).iter_mut().for_each(|v| *v /= s);
            sums.push(s);
        }
        Ok(self.push(value, Op::RowNormalizeSum(a, sums), &[a]))
    }

    /// Reverse pass from the scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        ensure!(
            self.shape(output) == (1, 1),
            Dimension,
            "backward needs a scalar output, got {:?}",
            self.shape(output)
        );
        let mut grads: Vec<Option<RealMatrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(RealMatrix::scalar(1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<RealMatrix>], v: Var, g: RealMatrix) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Like `accumulate` but builds the contribution lazily.
    fn accumulate_with(
        &self,
        grads: &mut [Option<RealMatrix>],
        v: Var,
        f: impl FnOnce() -> RealMatrix,
    ) {
        if self.rg(v) {
            let g = f();
            self.accumulate(grads, v, g);
        }
    }

    fn propagate(&self, idx: usize, g: &RealMatrix, grads: &mut [Option<RealMatrix>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.accumulate_with(grads, *a, || {
                    let mut out = RealMatrix::zeros(va.rows(), va.cols());
                    gemm_nt(g, vb, &mut out);
                    out
                });
                self.accumulate_with(grads, *b, || {
                    let mut out = RealMatrix::zeros(vb.rows(), vb.cols());
                    gemm_tn(va, g, &mut out);
                    out
                });
            }
            Op::MatMulNt(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.accumulate_with(grads, *a, || {
                    let mut out = RealMatrix::zeros(va.rows(), va.cols());
                    gemm_nn(g, vb, &mut out);
                    out
                });
                self.accumulate_with(grads, *b, || {
                    let mut out = RealMatrix::zeros(vb.rows(), vb.cols());
                    gemm_tn(g, va, &mut out);
                    out
                });
            }
            Op::AddRow(x, bias) => {
                self.accumulate_with(grads, *x, || g.clone());
                self.accumulate_with(grads, *bias, || {
                    let mut out = RealMatrix::zeros(1, g.cols());
                    for row in g.iter_rows() {
                        for (o, v) in out.as_mut_slice().iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    out
                });
            }
            Op::Add(a, b) => {
                self.accumulate_with(grads, *a, || g.clone());
                self.accumulate_with(grads, *b, || g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate_with(grads, *a, || g.clone());
                self.accumulate_with(grads, *b, || g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.accumulate_with(grads, *a, || zip(g, vb, |x, y| x * y));
                self.accumulate_with(grads, *b, || zip(g, va, |x, y| x * y));
            }
            Op::MulConst(a, c) => {
                self.accumulate_with(grads, *a, || zip(g, c, |x, y| x * y));
            }
            Op::Scale(a, f) => {
                self.accumulate_with(grads, *a, || g.map(|v| v * f));
            }
            Op::Relu(a) => {
                let va = self.value(*a);
                self.accumulate_with(grads, *a, || {
                    zip(g, va, |gv, x| if x > 0.0 { gv } else { 0.0 })
                });
            }
            Op::Exp(a) => {
                self.accumulate_with(grads, *a, || zip(g, y, |gv, e| gv * e));
            }
            Op::XLogX(a) => {
                let va = self.value(*a);
                self.accumulate_with(grads, *a, || zip(g, va, |gv, x| gv * (x.ln() + 1.0)));
            }
            Op::Square(a) => {
                let va = self.value(*a);
                self.accumulate_with(grads, *a, || zip(g, va, |gv, x| 2.0 * gv * x));
            }
            Op::NormalizeRows(a, norms) => {
                self.accumulate_with(grads, *a, || {
                    let mut out = RealMatrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let proj = crate::numerics::matrix::dot(yr, gr);
                        for ((o, &yv), &gv) in out.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o = (gv - yv * proj) / norms[r];
                        }
                    }
                    out
                });
            }
            Op::SliceCols(a, start) => {
                let (rows, cols) = self.shape(*a);
                self.accumulate_with(grads, *a, || {
                    let mut out = RealMatrix::zeros(rows, cols);
                    for r in 0..rows {
                        out.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    out
                });
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (rows, cols) = self.shape(p);
                    self.accumulate_with(grads, p, || {
                        g.slice_cols(offset, cols).expect("concat slice")
                    });
                    debug_assert_eq!(rows, g.rows());
                    offset += cols;
                }
            }
            Op::SqDist(x, c) => {
                let (vx, vc) = (self.value(*x), self.value(*c));
                self.accumulate_with(grads, *x, || {
                    let mut out = RealMatrix::zeros(vx.rows(), vx.cols());
                    for i in 0..vx.rows() {
                        let xi = vx.row(i);
                        let oi = out.row_mut(i);
                        for k in 0..vc.rows() {
                            let w = 2.0 * g.get(i, k);
                            for ((o, &a), &b) in oi.iter_mut().zip(xi).zip(vc.row(k)) {
                                *o += w * (a - b);
                            }
                        }
                    }
                    out
                });
                self.accumulate_with(grads, *c, || {
                    let mut out = RealMatrix::zeros(vc.rows(), vc.cols());
                    for i in 0..vx.rows() {
                        let xi = vx.row(i);
                        for k in 0..vc.rows() {
                            let w = 2.0 * g.get(i, k);
                            let ok = out.row_mut(k);
                            for ((o, &a), &b) in ok.iter_mut().zip(xi).zip(vc.row(k)) {
                                *o -= w * (a - b);
                            }
                        }
                    }
                    out
                });
            }
            Op::SoftmaxRows(a) => {
                self.accumulate_with(grads, *a, || {
                    let mut out = RealMatrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let inner = crate::numerics::matrix::dot(yr, gr);
                        for ((o, &yv), &gv) in out.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o = yv * (gv - inner);
                        }
                    }
                    out
                });
            }
            Op::MaskedLogSoftmax(a, mask) => {
                self.accumulate_with(grads, *a, || {
                    let mut out = RealMatrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (yr, gr, mr) = (y.row(r), g.row(r), mask.row(r));
                        let gsum: f64 = gr.iter().zip(mr).filter(|(_, &m)| m).map(|(v, _)| v).sum();
                        for (c, o) in out.row_mut(r).iter_mut().enumerate() {
                            if mr[c] {
                                *o = gr[c] - yr[c].exp() * gsum;
                            }
                        }
                    }
                    out
                });
            }
            Op::MaskedLogSumExp(a, mask) => {
                let va = self.value(*a);
                self.accumulate_with(grads, *a, || {
                    let mut out = RealMatrix::zeros(va.rows(), va.cols());
                    for r in 0..va.rows() {
                        let (lse, gr) = (y.get(r, 0), g.get(r, 0));
                        for (c, o) in out.row_mut(r).iter_mut().enumerate() {
                            if mask.get(r, c) {
                                *o = gr * (va.get(r, c) - lse).exp();
                            }
                        }
                    }
                    out
                });
            }
            Op::RowSums(a) => {
                let (rows, cols) = self.shape(*a);
                self.accumulate_with(grads, *a, || {
                    let mut out = RealMatrix::zeros(rows, cols);
                    for r in 0..rows {
                        out.row_mut(r).fill(g.get(r, 0));
                    }
                    out
                });
            }
            Op::ColMeans(a) => {
                let (rows, cols) = self.shape(*a);
                self.accumulate_with(grads, *a, || {
                    let mut out = RealMatrix::zeros(rows, cols);
                    let n = rows as f64;
                    for r in 0..rows {
                        for (o, gv) in out.row_mut(r).iter_mut().zip(g.as_slice()) {
                            *o = gv / n;
                        }
                    }
                    out
                });
            }
            Op::Sum(a) => {
                let (rows, cols) = self.shape(*a);
                self.accumulate_with(grads, *a, || RealMatrix::filled(rows, cols, g.item()));
            }
            Op::Mean(a) => {
                let (rows, cols) = self.shape(*a);
                let n = (rows * cols) as f64;
                self.accumulate_with(grads, *a, || RealMatrix::filled(rows, cols, g.item() / n));
            }
            Op::PermuteRows(a, perm) => {
                let (rows, cols) = self.shape(*a);
                self.accumulate_with(grads, *a, || {
                    let mut out = RealMatrix::zeros(rows, cols);
                    for (i, &p) in perm.iter().enumerate() {
                        for (o, gv) in out.row_mut(p).iter_mut().zip(g.row(i)) {
                            *o += gv;
                        }
                    }
                    out
                });
            }
            Op::RowNormalizeSum(a, sums) => {
                self.accumulate_with(grads, *a, || {
                    let mut out = RealMatrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let inner = crate::numerics::matrix::dot(yr, gr);
                        for (o, &gv) in out.row_mut(r).iter_mut().zip(gr) {
                            *o = (gv - inner) / sums[r];
                        }
                    }
                    out
                });
            }
        }
    }
}

fn zip(a: &RealMatrix, b: &RealMatrix, f: impl Fn(f64, f64) -> f64) -> RealMatrix {
    let data = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(&x, &y)| f(x, y))
        .collect();
    RealMatrix::from_vec(a.rows(), a.cols(), data).expect("same shape")
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

fn masked_lse(row: &[f64], mask: &[bool]) -> Option<f64> {
    let max = row
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return None;
    }
    let s: f64 = row
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&v, _)| (v - max).exp())
        .sum();
    Some(max + s.ln())
}
