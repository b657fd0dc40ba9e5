//! Reverse-mode automatic differentiation over dense row-major matrices.
//!
//! The model rebuilds a fresh tape per training window: parameters enter
//! as leaves, the forward pass records one node per operation, and
//! [`Tape::backward`] walks the record once to accumulate gradients.
//! Ops are batched over whole matrices (a window needs on the order of a
//! thousand nodes, not millions), which keeps the interpreter overhead
//! negligible next to the matmuls.

/// Dense row-major matrix of f64.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Mat { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Mat { rows, cols, data }
    }

    pub fn scalar(v: f64) -> Self {
        Mat::from_vec(1, 1, vec![v])
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn transpose(&self) -> Mat {
        Mat::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Plain (value-level) matrix product with optional transposes.
    pub fn matmul(a: &Mat, b: &Mat, ta: bool, tb: bool) -> Mat {
        let (m, k1) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
        let (k2, n) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
        assert_eq!(
            k1, k2,
            "matmul inner dims: ({m}x{k1}) * ({k2}x{n}), ta={ta} tb={tb}"
        );
        let mut out = Mat::zeros(m, n);
        // ikj loop order keeps the inner accesses sequential for the
        // untransposed case. Transposed operands are materialized first;
        // operand sizes here are small enough that the copy is cheaper
        // than strided access.
        let at;
        let a_ref = if ta {
            at = a.transpose();
            &at
        } else {
            a
        };
        let bt;
        let b_ref = if tb {
            bt = b.transpose();
            &bt
        } else {
            b
        };
        let k = k1;
        for i in 0..m {
            for p in 0..k {
                let aip = a_ref.data[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &b_ref.data[p * n..(p + 1) * n];
                let orow = &mut out.data[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += aip * brow[j];
                }
            }
        }
        out
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VarId(usize);

enum Op {
    Leaf,
    MatMul { a: VarId, b: VarId, ta: bool, tb: bool },
    Add { a: VarId, b: VarId },
    Sub { a: VarId, b: VarId },
    Mul { a: VarId, b: VarId },
    /// Broadcast-add a 1 x C row vector to every row.
    AddRow { a: VarId, b: VarId },
    /// Scale row r of `a` by `v[r]` (v is R x 1).
    MulColVec { a: VarId, v: VarId },
    /// Scale column c of `a` by `v[c]` (v is 1 x C).
    MulRowVec { a: VarId, v: VarId },
    /// alpha * x + beta, elementwise; beta is constant so only alpha
    /// survives into the backward pass.
    Affine { a: VarId, alpha: f64 },
    Sigmoid { a: VarId },
    Tanh { a: VarId },
    Relu { a: VarId },
    Softplus { a: VarId },
    Abs { a: VarId },
    Ln { a: VarId },
    Square { a: VarId },
    Rsqrt { a: VarId },
    Transpose { a: VarId },
    ConcatCols { parts: Vec<VarId> },
    ConcatRows { parts: Vec<VarId> },
    GatherRows { a: VarId, idx: Vec<usize> },
    /// base with rows idx[k] replaced by src row k. Indices must be unique.
    ScatterRows { base: VarId, src: VarId, idx: Vec<usize> },
    /// Sum rows sharing a segment id. a is E x C, seg.len() == E.
    SegmentSum { a: VarId, seg: Vec<usize> },
    /// Softmax within each segment. a is E x 1.
    SegmentSoftmax { a: VarId, seg: Vec<usize> },
    /// Place column e[k] at position pairs[k] of an n x n dense matrix.
    ScatterToDense { e: VarId, pairs: Vec<(usize, usize)> },
    SumAll { a: VarId },
    MeanAll { a: VarId },
    RowSum { a: VarId },
    /// Forward: the stored hard value. Backward: identity into `soft`.
    StraightThrough { soft: VarId },
}

struct Node {
    value: Mat,
    op: Op,
}

/// Gradient table produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, id: VarId) -> Option<&Mat> {
        self.grads[id.0].as_ref()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: VarId) -> &Mat {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Mat, op: Op) -> VarId {
        self.nodes.push(Node { value, op });
        VarId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Mat) -> VarId {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> VarId {
        self.matmul_t(a, b, false, false)
    }

    pub fn matmul_t(&mut self, a: VarId, b: VarId, ta: bool, tb: bool) -> VarId {
        let v = Mat::matmul(self.value(a), self.value(b), ta, tb);
        self.push(v, Op::MatMul { a, b, ta, tb })
    }

    /// x * W^T, the row-layout linear map used throughout the model.
    pub fn linear(&mut self, x: VarId, w: VarId) -> VarId {
        self.matmul_t(x, w, false, true)
    }

    fn zip_elementwise(
        &mut self,
        a: VarId,
        b: VarId,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> VarId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(
            va.shape(),
            vb.shape(),
            "elementwise op on mismatched shapes {:?} vs {:?}",
            va.shape(),
            vb.shape()
        );
        let data = va
            .data
            .iter()
            .zip(vb.data.iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let v = Mat::from_vec(va.rows, va.cols, data);
        self.push(v, op)
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        self.zip_elementwise(a, b, Op::Add { a, b }, |x, y| x + y)
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> VarId {
        self.zip_elementwise(a, b, Op::Sub { a, b }, |x, y| x - y)
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> VarId {
        self.zip_elementwise(a, b, Op::Mul { a, b }, |x, y| x * y)
    }

    pub fn add_row(&mut self, a: VarId, b: VarId) -> VarId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(vb.rows, 1, "add_row bias must be a row vector");
        assert_eq!(va.cols, vb.cols, "add_row width mismatch");
        let v = Mat::from_fn(va.rows, va.cols, |r, c| va.get(r, c) + vb.get(0, c));
        self.push(v, Op::AddRow { a, b })
    }

    pub fn mul_colvec(&mut self, a: VarId, v: VarId) -> VarId {
        let (va, vv) = (self.value(a), self.value(v));
        assert_eq!(vv.cols, 1, "mul_colvec scale must be a column vector");
        assert_eq!(va.rows, vv.rows, "mul_colvec height mismatch");
        let out = Mat::from_fn(va.rows, va.cols, |r, c| va.get(r, c) * vv.get(r, 0));
        self.push(out, Op::MulColVec { a, v })
    }

    pub fn mul_rowvec(&mut self, a: VarId, v: VarId) -> VarId {
        let (va, vv) = (self.value(a), self.value(v));
        assert_eq!(vv.rows, 1, "mul_rowvec scale must be a row vector");
        assert_eq!(va.cols, vv.cols, "mul_rowvec width mismatch");
        let out = Mat::from_fn(va.rows, va.cols, |r, c| va.get(r, c) * vv.get(0, c));
        self.push(out, Op::MulRowVec { a, v })
    }

    pub fn affine(&mut self, a: VarId, alpha: f64, beta: f64) -> VarId {
        let va = self.value(a);
        let data = va.data.iter().map(|&x| alpha * x + beta).collect();
        let v = Mat::from_vec(va.rows, va.cols, data);
        self.push(v, Op::Affine { a, alpha })
    }

    fn unary(&mut self, a: VarId, op: Op, f: impl Fn(f64) -> f64) -> VarId {
        let va = self.value(a);
        let data = va.data.iter().map(|&x| f(x)).collect();
        let v = Mat::from_vec(va.rows, va.cols, data);
        self.push(v, op)
    }

    pub fn sigmoid(&mut self, a: VarId) -> VarId {
        self.unary(a, Op::Sigmoid { a }, sigmoid)
    }

    pub fn tanh(&mut self, a: VarId) -> VarId {
        self.unary(a, Op::Tanh { a }, f64::tanh)
    }

    pub fn relu(&mut self, a: VarId) -> VarId {
        self.unary(a, Op::Relu { a }, |x| x.max(0.0))
    }

    pub fn softplus(&mut self, a: VarId) -> VarId {
        self.unary(a, Op::Softplus { a }, softplus)
    }

    pub fn abs(&mut self, a: VarId) -> VarId {
        self.unary(a, Op::Abs { a }, f64::abs)
    }

    pub fn ln(&mut self, a: VarId) -> VarId {
        self.unary(a, Op::Ln { a }, f64::ln)
    }

    pub fn square(&mut self, a: VarId) -> VarId {
        self.unary(a, Op::Square { a }, |x| x * x)
    }

    pub fn rsqrt(&mut self, a: VarId) -> VarId {
        self.unary(a, Op::Rsqrt { a }, |x| 1.0 / x.sqrt())
    }

    pub fn transpose_var(&mut self, a: VarId) -> VarId {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose { a })
    }

    pub fn concat_cols(&mut self, parts: &[VarId]) -> VarId {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let vp = self.value(p);
            assert_eq!(vp.rows, rows, "concat_cols row mismatch");
            for r in 0..rows {
                for c in 0..vp.cols {
                    out.set(r, off + c, vp.get(r, c));
                }
            }
            off += vp.cols;
        }
        self.push(
            out,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
        )
    }

    pub fn concat_rows(&mut self, parts: &[VarId]) -> VarId {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols;
        let rows: usize = parts.iter().map(|&p| self.value(p).rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            let vp = self.value(p);
            assert_eq!(vp.cols, cols, "concat_rows col mismatch");
            data.extend_from_slice(&vp.data);
        }
        let out = Mat::from_vec(rows, cols, data);
        self.push(
            out,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
        )
    }

    pub fn gather_rows(&mut self, a: VarId, idx: &[usize]) -> VarId {
        let va = self.value(a);
        let mut out = Mat::zeros(idx.len(), va.cols);
        for (k, &r) in idx.iter().enumerate() {
            assert!(r < va.rows, "gather_rows index {r} out of {}", va.rows);
            out.data[k * va.cols..(k + 1) * va.cols].copy_from_slice(va.row(r));
        }
        self.push(
            out,
            Op::GatherRows {
                a,
                idx: idx.to_vec(),
            },
        )
    }

    pub fn scatter_rows(&mut self, base: VarId, src: VarId, idx: &[usize]) -> VarId {
        let (vb, vs) = (self.value(base), self.value(src));
        assert_eq!(vs.rows, idx.len(), "scatter_rows src height mismatch");
        assert_eq!(vs.cols, vb.cols, "scatter_rows width mismatch");
        let mut seen = vec![false; vb.rows];
        let mut out = vb.clone();
        for (k, &r) in idx.iter().enumerate() {
            assert!(!seen[r], "scatter_rows duplicate index {r}");
            seen[r] = true;
            out.data[r * vb.cols..(r + 1) * vb.cols].copy_from_slice(vs.row(k));
        }
        self.push(
            out,
            Op::ScatterRows {
                base,
                src,
                idx: idx.to_vec(),
            },
        )
    }

    pub fn segment_sum(&mut self, a: VarId, seg: &[usize], n_seg: usize) -> VarId {
        let va = self.value(a);
        assert_eq!(seg.len(), va.rows, "segment_sum needs one id per row");
        let mut out = Mat::zeros(n_seg, va.cols);
        for (r, &s) in seg.iter().enumerate() {
            assert!(s < n_seg);
            for c in 0..va.cols {
                out.data[s * va.cols + c] += va.get(r, c);
            }
        }
        self.push(
            out,
            Op::SegmentSum {
                a,
                seg: seg.to_vec(),
            },
        )
    }

    /// Numerically stable softmax within each segment of a column vector.
    pub fn segment_softmax(&mut self, a: VarId, seg: &[usize]) -> VarId {
        let va = self.value(a);
        assert_eq!(va.cols, 1, "segment_softmax expects a column vector");
        assert_eq!(seg.len(), va.rows);
        let n_seg = seg.iter().map(|&s| s + 1).max().unwrap_or(0);
        let mut max = vec![f64::NEG_INFINITY; n_seg];
        for (r, &s) in seg.iter().enumerate() {
            max[s] = max[s].max(va.data[r]);
        }
        let mut denom = vec![0.0; n_seg];
        let mut exps = vec![0.0; seg.len()];
        for (r, &s) in seg.iter().enumerate() {
            let e = (va.data[r] - max[s]).exp();
            exps[r] = e;
            denom[s] += e;
        }
        let data: Vec<f64> = seg.iter().zip(&exps).map(|(&s, &e)| e / denom[s]).collect();
        let out = Mat::from_vec(va.rows, 1, data);
        self.push(
            out,
            Op::SegmentSoftmax {
                a,
                seg: seg.to_vec(),
            },
        )
    }

    pub fn scatter_to_dense(&mut self, e: VarId, pairs: &[(usize, usize)], n: usize) -> VarId {
        let ve = self.value(e);
        assert_eq!(ve.cols, 1, "scatter_to_dense expects a column vector");
        assert_eq!(ve.rows, pairs.len());
        let mut out = Mat::zeros(n, n);
        for (k, &(i, j)) in pairs.iter().enumerate() {
            assert!(i < n && j < n);
            assert_eq!(out.get(i, j), 0.0, "duplicate pair ({i},{j})");
            out.set(i, j, ve.data[k]);
        }
        self.push(
            out,
            Op::ScatterToDense {
                e,
                pairs: pairs.to_vec(),
            },
        )
    }

    pub fn sum_all(&mut self, a: VarId) -> VarId {
        let s = self.value(a).data.iter().sum();
        self.push(Mat::scalar(s), Op::SumAll { a })
    }

    pub fn mean_all(&mut self, a: VarId) -> VarId {
        let va = self.value(a);
        let s: f64 = va.data.iter().sum();
        let n = va.len() as f64;
        self.push(Mat::scalar(s / n), Op::MeanAll { a })
    }

    pub fn row_sum(&mut self, a: VarId) -> VarId {
        let va = self.value(a);
        let out = Mat::from_fn(va.rows, 1, |r, _| va.row(r).iter().sum());
        self.push(out, Op::RowSum { a })
    }

    /// Hard forward value with identity backward into the soft parent.
    pub fn straight_through(&mut self, soft: VarId, hard: Mat) -> VarId {
        assert_eq!(
            self.value(soft).shape(),
            hard.shape(),
            "straight_through shape mismatch"
        );
        self.push(hard, Op::StraightThrough { soft })
    }

    /// Reverse sweep from a scalar node. Returns one gradient slot per node;
    /// nodes the loss does not depend on stay `None`.
    pub fn backward(&self, loss: VarId) -> Gradients {
        assert_eq!(
            self.value(loss).shape(),
            (1, 1),
            "backward seeds only scalar losses"
        );
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else {
                continue;
            };
            self.accumulate(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Gradients { grads }
    }

    fn accumulate(&self, i: usize, gy: &Mat, grads: &mut [Option<Mat>]) {
        let add_to = |grads: &mut [Option<Mat>], id: VarId, delta: Mat| {
            match &mut grads[id.0] {
                Some(g) => {
                    debug_assert_eq!(g.shape(), delta.shape());
                    for (a, b) in g.data.iter_mut().zip(delta.data.iter()) {
                        *a += b;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };

        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (da, db) = match (ta, tb) {
                    (false, false) => (
                        Mat::matmul(gy, vb, false, true),
                        Mat::matmul(va, gy, true, false),
                    ),
                    (true, false) => (
                        Mat::matmul(vb, gy, false, true),
                        Mat::matmul(va, gy, false, false),
                    ),
                    (false, true) => (
                        Mat::matmul(gy, vb, false, false),
                        Mat::matmul(gy, va, true, false),
                    ),
                    (true, true) => (
                        Mat::matmul(vb, gy, true, true),
                        Mat::matmul(gy, va, true, true),
                    ),
                };
                add_to(grads, *a, da);
                add_to(grads, *b, db);
            }
            Op::Add { a, b } => {
                add_to(grads, *a, gy.clone());
                add_to(grads, *b, gy.clone());
            }
            Op::Sub { a, b } => {
                add_to(grads, *a, gy.clone());
                let neg = Mat::from_vec(gy.rows, gy.cols, gy.data.iter().map(|x| -x).collect());
                add_to(grads, *b, neg);
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let da = Mat::from_vec(
                    gy.rows,
                    gy.cols,
                    gy.data
                        .iter()
                        .zip(&vb.data)
                        .map(|(&g, &y)| g * y)
                        .collect(),
                );
                let db = Mat::from_vec(
                    gy.rows,
                    gy.cols,
                    gy.data
                        .iter()
                        .zip(&va.data)
                        .map(|(&g, &x)| g * x)
                        .collect(),
                );
                add_to(grads, *a, da);
                add_to(grads, *b, db);
            }
            Op::AddRow { a, b } => {
                add_to(grads, *a, gy.clone());
                let db = Mat::from_fn(1, gy.cols, |_, c| (0..gy.rows).map(|r| gy.get(r, c)).sum());
                add_to(grads, *b, db);
            }
            Op::MulColVec { a, v } => {
                let (va, vv) = (self.value(*a), self.value(*v));
                let da = Mat::from_fn(gy.rows, gy.cols, |r, c| gy.get(r, c) * vv.get(r, 0));
                let dv = Mat::from_fn(gy.rows, 1, |r, _| {
                    (0..gy.cols).map(|c| gy.get(r, c) * va.get(r, c)).sum()
                });
                add_to(grads, *a, da);
                add_to(grads, *v, dv);
            }
            Op::MulRowVec { a, v } => {
                let (va, vv) = (self.value(*a), self.value(*v));
                let da = Mat::from_fn(gy.rows, gy.cols, |r, c| gy.get(r, c) * vv.get(0, c));
                let dv = Mat::from_fn(1, gy.cols, |_, c| {
                    (0..gy.rows).map(|r| gy.get(r, c) * va.get(r, c)).sum()
                });
                add_to(grads, *a, da);
                add_to(grads, *v, dv);
            }
            Op::Affine { a, alpha } => {
                let da = Mat::from_vec(
                    gy.rows,
                    gy.cols,
                    gy.data.iter().map(|&g| g * alpha).collect(),
                );
                add_to(grads, *a, da);
            }
            Op::Sigmoid { a } => {
                let y = &self.nodes[i].value;
                let da = Mat::from_vec(
                    gy.rows,
                    gy.cols,
                    gy.data
                        .iter()
                        .zip(&y.data)
                        .map(|(&g, &s)| g * s * (1.0 - s))
                        .collect(),
                );
                add_to(grads, *a, da);
            }
            Op::Tanh { a } => {
                let y = &self.nodes[i].value;
                let da = Mat::from_vec(
                    gy.rows,
                    gy.cols,
                    gy.data
                        .iter()
                        .zip(&y.data)
                        .map(|(&g, &t)| g * (1.0 - t * t))
                        .collect(),
                );
                add_to(grads, *a, da);
            }
            Op::Relu { a } => {
                let va = self.value(*a);
                let da = Mat::from_vec(
                    gy.rows,
                    gy.cols,
                    gy.data
                        .iter()
                        .zip(&va.data)
                        .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                        .collect(),
                );
                add_to(grads, *a, da);
            }
            Op::Softplus { a } => {
                let va = self.value(*a);
                let da = Mat::from_vec(
                    gy.rows,
                    gy.cols,
                    gy.data
                        .iter()
                        .zip(&va.data)
                        .map(|(&g, &x)| g * sigmoid(x))
                        .collect(),
                );
                add_to(grads, *a, da);
            }
            Op::Abs { a } => {
                let va = self.value(*a);
                let da = Mat::from_vec(
                    gy.rows,
                    gy.cols,
                    gy.data
                        .iter()
                        .zip(&va.data)
                        .map(|(&g, &x)| g * x.signum() * (x != 0.0) as u8 as f64)
                        .collect(),
                );
                add_to(grads, *a, da);
            }
            Op::Ln { a } => {
                let va = self.value(*a);
                let da = Mat::from_vec(
                    gy.rows,
                    gy.cols,
                    gy.data
                        .iter()
                        .zip(&va.data)
                        .map(|(&g, &x)| g / x)
                        .collect(),
                );
                add_to(grads, *a, da);
            }
            Op::Square { a } => {
                let va = self.value(*a);
                let da = Mat::from_vec(
                    gy.rows,
                    gy.cols,
                    gy.data
                        .iter()
                        .zip(&va.data)
                        .map(|(&g, &x)| g * 2.0 * x)
                        .collect(),
                );
                add_to(grads, *a, da);
            }
            Op::Rsqrt { a } => {
                let y = &self.nodes[i].value;
                let da = Mat::from_vec(
                    gy.rows,
                    gy.cols,
                    gy.data
                        .iter()
                        .zip(&y.data)
                        .map(|(&g, &r)| g * (-0.5) * r * r * r)
                        .collect(),
                );
                add_to(grads, *a, da);
            }
            Op::Transpose { a } => {
                add_to(grads, *a, gy.transpose());
            }
            Op::ConcatCols { parts } => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols;
                    let dp = Mat::from_fn(gy.rows, w, |r, c| gy.get(r, off + c));
                    add_to(grads, p, dp);
                    off += w;
                }
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let h = self.value(p).rows;
                    let dp = Mat::from_fn(h, gy.cols, |r, c| gy.get(off + r, c));
                    add_to(grads, p, dp);
                    off += h;
                }
            }
            Op::GatherRows { a, idx } => {
                let va = self.value(*a);
                let mut da = Mat::zeros(va.rows, va.cols);
                for (k, &r) in idx.iter().enumerate() {
                    for c in 0..gy.cols {
                        da.data[r * gy.cols + c] += gy.get(k, c);
                    }
                }
                add_to(grads, *a, da);
            }
            Op::ScatterRows { base, src, idx } => {
                let mut dbase = gy.clone();
                for &r in idx {
                    for c in 0..gy.cols {
                        dbase.set(r, c, 0.0);
                    }
                }
                let dsrc = Mat::from_fn(idx.len(), gy.cols, |k, c| gy.get(idx[k], c));
                add_to(grads, *base, dbase);
                add_to(grads, *src, dsrc);
            }
            Op::SegmentSum { a, seg } => {
                let da = Mat::from_fn(seg.len(), gy.cols, |r, c| gy.get(seg[r], c));
                add_to(grads, *a, da);
            }
            Op::SegmentSoftmax { a, seg } => {
                let y = &self.nodes[i].value;
                let n_seg = seg.iter().map(|&s| s + 1).max().unwrap_or(0);
                // dot[s] = sum_e in s of g_e * y_e
                let mut dot = vec![0.0; n_seg];
                for (r, &s) in seg.iter().enumerate() {
                    dot[s] += gy.data[r] * y.data[r];
                }
                let da = Mat::from_vec(
                    y.rows,
                    1,
                    seg.iter()
                        .enumerate()
                        .map(|(r, &s)| y.data[r] * (gy.data[r] - dot[s]))
                        .collect(),
                );
                add_to(grads, *a, da);
            }
            Op::ScatterToDense { e, pairs, .. } => {
                let de = Mat::from_vec(
                    pairs.len(),
                    1,
                    pairs.iter().map(|&(r, c)| gy.get(r, c)).collect(),
                );
                add_to(grads, *e, de);
            }
            Op::SumAll { a } => {
                let va = self.value(*a);
                let g = gy.data[0];
                add_to(grads, *a, Mat::from_fn(va.rows, va.cols, |_, _| g));
            }
            Op::MeanAll { a } => {
                let va = self.value(*a);
                let g = gy.data[0] / va.len() as f64;
                add_to(grads, *a, Mat::from_fn(va.rows, va.cols, |_, _| g));
            }
            Op::RowSum { a } => {
                let va = self.value(*a);
                let da = Mat::from_fn(va.rows, va.cols, |r, _| gy.get(r, 0));
                add_to(grads, *a, da);
            }
            Op::StraightThrough { soft } => {
                add_to(grads, *soft, gy.clone());
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^x) without overflow for large |x|.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
        Mat::from_fn(rows, cols, |_, _| rng.random_range(-2.0..2.0))
    }

    /// Away-from-zero random values so kinked ops (relu, abs) stay smooth
    /// at the probe points.
    fn rand_mat_off_zero(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
        Mat::from_fn(rows, cols, |_, _| {
            let mag = rng.random_range(0.3..2.0);
            if rng.random_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
    }

    /// Central-difference check of every input element against the tape
    /// gradient. `build` must add its inputs as leaves in order and return
    /// a scalar loss node.
    fn fd_check(inputs: &[Mat], build: &dyn Fn(&mut Tape, &[VarId]) -> VarId, tol: f64) {
        let run = |mats: &[Mat]| -> (f64, Option<Gradients>, Vec<VarId>) {
            let mut tape = Tape::new();
            let ids: Vec<VarId> = mats.iter().map(|m| tape.leaf(m.clone())).collect();
            let loss = build(&mut tape, &ids);
            let v = tape.value(loss).data[0];
            let g = tape.backward(loss);
            (v, Some(g), ids)
        };

        let (_, grads, ids) = run(inputs);
        let grads = grads.unwrap();
        let h = 1e-5;

        for (input_idx, input) in inputs.iter().enumerate() {
            for elem in 0..input.len() {
                let mut plus = inputs.to_vec();
                plus[input_idx].data[elem] += h;
                let mut minus = inputs.to_vec();
                minus[input_idx].data[elem] -= h;
                let (lp, _, _) = run(&plus);
                let (lm, _, _) = run(&minus);
                let fd = (lp - lm) / (2.0 * h);
                let an = grads
                    .get(ids[input_idx])
                    .map(|g| g.data[elem])
                    .unwrap_or(0.0);
                let denom = fd.abs().max(an.abs()).max(1.0);
                assert!(
                    (fd - an).abs() / denom < tol,
                    "input {input_idx} elem {elem}: fd={fd} tape={an}"
                );
            }
        }
    }

    /// Scalarize any output by a fixed random weighting so every output
    /// element contributes to the checked loss.
    fn weighted(tape: &mut Tape, out: VarId, rng_seed: u64) -> VarId {
        let v = tape.value(out);
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let w = Mat::from_fn(v.rows, v.cols, |_, _| rng.random_range(-1.0..1.0));
        let wl = tape.leaf(w);
        let prod = tape.mul(out, wl);
        tape.sum_all(prod)
    }

    #[test]
    fn matmul_all_transpose_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let a = if ta {
                rand_mat(&mut rng, 4, 3)
            } else {
                rand_mat(&mut rng, 3, 4)
            };
            let b = if tb {
                rand_mat(&mut rng, 5, 4)
            } else {
                rand_mat(&mut rng, 4, 5)
            };
            fd_check(
                &[a, b],
                &move |t, ids| {
                    let y = t.matmul_t(ids[0], ids[1], ta, tb);
                    weighted(t, y, 99)
                },
                1e-6,
            );
        }
    }

    #[test]
    fn elementwise_binary_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_mat(&mut rng, 3, 4);
        let b = rand_mat(&mut rng, 3, 4);
        for which in 0..3 {
            fd_check(
                &[a.clone(), b.clone()],
                &move |t, ids| {
                    let y = match which {
                        0 => t.add(ids[0], ids[1]),
                        1 => t.sub(ids[0], ids[1]),
                        _ => t.mul(ids[0], ids[1]),
                    };
                    weighted(t, y, 7)
                },
                1e-6,
            );
        }
    }

    #[test]
    fn broadcast_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_mat(&mut rng, 4, 3);
        let brow = rand_mat(&mut rng, 1, 3);
        let vcol = rand_mat(&mut rng, 4, 1);
        fd_check(
            &[a.clone(), brow],
            &|t, ids| {
                let y = t.add_row(ids[0], ids[1]);
                weighted(t, y, 11)
            },
            1e-6,
        );
        fd_check(
            &[a.clone(), vcol],
            &|t, ids| {
                let y = t.mul_colvec(ids[0], ids[1]);
                weighted(t, y, 12)
            },
            1e-6,
        );
        let vrow = rand_mat(&mut rng, 1, 3);
        fd_check(
            &[a, vrow],
            &|t, ids| {
                let y = t.mul_rowvec(ids[0], ids[1]);
                weighted(t, y, 13)
            },
            1e-6,
        );
    }

    #[test]
    fn unary_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = rand_mat_off_zero(&mut rng, 3, 5);
        let builders: Vec<(&str, Box<dyn Fn(&mut Tape, VarId) -> VarId>)> = vec![
            ("sigmoid", Box::new(|t: &mut Tape, x| t.sigmoid(x))),
            ("tanh", Box::new(|t: &mut Tape, x| t.tanh(x))),
            ("relu", Box::new(|t: &mut Tape, x| t.relu(x))),
            ("softplus", Box::new(|t: &mut Tape, x| t.softplus(x))),
            ("abs", Box::new(|t: &mut Tape, x| t.abs(x))),
            ("square", Box::new(|t: &mut Tape, x| t.square(x))),
            ("affine", Box::new(|t: &mut Tape, x| t.affine(x, -1.7, 0.4))),
        ];
        for (name, b) in &builders {
            fd_check(
                &[a.clone()],
                &|t, ids| {
                    let y = b(t, ids[0]);
                    weighted(t, y, 21)
                },
                1e-6,
            );
            let _ = name;
        }
        // ln and rsqrt need positive inputs
        let pos = Mat::from_fn(3, 5, |r, c| 0.5 + 0.3 * (r * 5 + c) as f64);
        fd_check(
            &[pos.clone()],
            &|t, ids| {
                let y = t.ln(ids[0]);
                weighted(t, y, 22)
            },
            1e-6,
        );
        fd_check(
            &[pos],
            &|t, ids| {
                let y = t.rsqrt(ids[0]);
                weighted(t, y, 23)
            },
            1e-6,
        );
    }

    #[test]
    fn structural_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = rand_mat(&mut rng, 5, 3);
        let b = rand_mat(&mut rng, 5, 2);
        fd_check(
            &[a.clone(), b.clone()],
            &|t, ids| {
                let y = t.concat_cols(&[ids[0], ids[1]]);
                weighted(t, y, 31)
            },
            1e-6,
        );
        let c = rand_mat(&mut rng, 2, 3);
        fd_check(
            &[a.clone(), c.clone()],
            &|t, ids| {
                let y = t.concat_rows(&[ids[0], ids[1]]);
                weighted(t, y, 32)
            },
            1e-6,
        );
        fd_check(
            &[a.clone()],
            &|t, ids| {
                let y = t.transpose_var(ids[0]);
                weighted(t, y, 33)
            },
            1e-6,
        );
        // gather with a repeated index exercises the scatter-add backward
        fd_check(
            &[a.clone()],
            &|t, ids| {
                let y = t.gather_rows(ids[0], &[0, 2, 2, 4]);
                weighted(t, y, 34)
            },
            1e-6,
        );
        fd_check(
            &[a.clone(), c],
            &|t, ids| {
                let y = t.scatter_rows(ids[0], ids[1], &[1, 3]);
                weighted(t, y, 35)
            },
            1e-6,
        );
        fd_check(
            &[a.clone()],
            &|t, ids| {
                let y = t.row_sum(ids[0]);
                weighted(t, y, 36)
            },
            1e-6,
        );
        fd_check(&[a.clone()], &|t, ids| t.mean_all(ids[0]), 1e-6);
        fd_check(&[a], &|t, ids| t.sum_all(ids[0]), 1e-6);
    }

    #[test]
    fn segment_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let vals = rand_mat(&mut rng, 7, 3);
        let seg = vec![0usize, 0, 1, 2, 2, 2, 1];
        fd_check(
            &[vals],
            &|t, ids| {
                let y = t.segment_sum(ids[0], &seg, 3);
                weighted(t, y, 41)
            },
            1e-6,
        );
        let logits = rand_mat(&mut rng, 7, 1);
        fd_check(
            &[logits.clone()],
            &|t, ids| {
                let y = t.segment_softmax(ids[0], &seg);
                weighted(t, y, 42)
            },
            1e-6,
        );

        // forward sanity: each segment sums to one
        let mut tape = Tape::new();
        let l = tape.leaf(logits);
        let y = tape.segment_softmax(l, &seg);
        let yv = tape.value(y);
        for s in 0..3 {
            let total: f64 = seg
                .iter()
                .enumerate()
                .filter(|(_, &sv)| sv == s)
                .map(|(r, _)| yv.data[r])
                .sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn adjacency_assembly_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let e = Mat::from_fn(4, 1, |_, _| rng.random_range(0.05..0.95));
        let pairs = vec![(0usize, 1usize), (1, 0), (1, 2), (2, 0)];
        fd_check(
            &[e],
            &|t, ids| {
                let y = t.scatter_to_dense(ids[0], &pairs, 3);
                weighted(t, y, 51)
            },
            1e-6,
        );
    }

    #[test]
    fn straight_through_passes_gradient() {
        let soft_in = Mat::from_vec(2, 2, vec![0.2, 0.8, 0.6, 0.4]);
        let hard = Mat::from_vec(2, 2, vec![0.0, 1.0, 1.0, 0.0]);
        let mut tape = Tape::new();
        let s = tape.leaf(soft_in);
        let st = tape.straight_through(s, hard.clone());
        assert_eq!(tape.value(st), &hard);
        let w = tape.leaf(Mat::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let prod = tape.mul(st, w);
        let loss = tape.sum_all(prod);
        let g = tape.backward(loss);
        // d loss / d soft equals the weight matrix: identity backward
        assert_eq!(g.get(s).unwrap().data, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn chained_graph_matches_fd() {
        // A miniature of the real usage: linear -> nonlinearity -> gather ->
        // segment softmax -> dense assembly -> normalization-ish chain.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_mat(&mut rng, 4, 3);
        let w = rand_mat(&mut rng, 2, 3);
        let b = rand_mat(&mut rng, 1, 2);
        fd_check(
            &[x, w, b],
            &|t, ids| {
                let h = t.linear(ids[0], ids[1]);
                let h = t.add_row(h, ids[2]);
                let h = t.tanh(h);
                let g = t.gather_rows(h, &[0, 1, 1, 3, 2]);
                let col = t.row_sum(g);
                let sm = t.segment_softmax(col, &[0, 0, 1, 1, 1]);
                let dense = t.scatter_to_dense(sm, &[(0, 1), (1, 0), (1, 2), (2, 0), (2, 1)], 3);
                let rs = t.row_sum(dense);
                let shifted = t.affine(rs, 1.0, 1.0);
                let inv = t.rsqrt(shifted);
                let scaled = t.mul_colvec(dense, inv);
                weighted(t, scaled, 61)
            },
            1e-5,
        );
    }

    #[test]
    #[should_panic(expected = "matmul inner dims")]
    fn matmul_shape_mismatch_panics() {
        let a = Mat::zeros(2, 3);
        let b = Mat::zeros(4, 2);
        Mat::matmul(&a, &b, false, false);
    }

    #[test]
    fn gradients_stop_at_leaves_not_reached() {
        let mut tape = Tape::new();
        let a = tape.leaf(Mat::scalar(2.0));
        let unused = tape.leaf(Mat::scalar(5.0));
        let y = tape.square(a);
        let loss = tape.sum_all(y);
        let g = tape.backward(loss);
        assert!(g.get(unused).is_none());
        assert_eq!(g.get(a).unwrap().data[0], 4.0);
    }
}
