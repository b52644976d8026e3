//! Reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records operations eagerly as they are built; [`Tape::backward`]
//! replays them in reverse, accumulating gradients additively across fan-out.
//! The op set is deliberately small: convolution, channel mixing, matrix
//! products, a few elementwise curves and reductions, and the task losses.
//! No control-flow differentiation, no higher-order derivatives.
//!
//! Everything is `f64`. The smooth threshold saturates quickly and the test
//! suite leans on central finite differences at `h = 1e-5`; single precision
//! does not survive that.
//!
//! Tensors on a tape are never mutated in place. Branchy constructs (clamps,
//! frozen index sets) record the branch chosen during the forward pass and
//! differentiate that branch.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("node {node} ({op}): shape mismatch: {detail}")]
    ShapeMismatch { node: usize, op: &'static str, detail: String },
    #[error("backward seed shape {seed:?} does not match output shape {out:?}")]
    SeedShape { seed: Vec<usize>, out: Vec<usize> },
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),
}

/// Dense row-major tensor of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape/data mismatch");
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self { shape, data: vec![0.0; len] }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![1], data: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation record; inputs are ids of earlier nodes, so the node list is
/// always in topological order.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Neg(NodeId),
    AddConst(NodeId, #[allow(dead_code)] f64),
    MulConst(NodeId, f64),
    /// Elementwise multiply by a scalar node.
    Scale(NodeId, NodeId),
    /// Subtract a scalar node from every element.
    SubScalar(NodeId, NodeId),
    /// Divide every element by a scalar node.
    DivScalar(NodeId, NodeId),
    Tanh(NodeId),
    Softplus(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    /// (R, C) -> (R,)
    RowSum(NodeId),
    /// Select flat indices (frozen at build time).
    Gather(NodeId, Vec<usize>),
    Concat(NodeId, NodeId),
    /// Same data, different shape.
    Reshape(NodeId),
    /// Same-size zero-padded 2-D convolution of (B, H, W) with (kh, kw).
    Conv2dSame(NodeId, NodeId),
    /// (B, N, H, W) weighted across channels by (N,) -> (B, H, W)
    ChanSum(NodeId, NodeId),
    /// (B, N, H, W) -> (B, H, W), channel index frozen.
    ChanSelect(NodeId, usize),
    /// N x (B, H, W) -> (B, N, H, W)
    StackChannels(Vec<NodeId>),
    /// (B, N) x (M, N) -> (B, M): x * w^T, neuron weights in rows.
    MatmulT(NodeId, NodeId),
    /// (R, C) - (C,) broadcast over rows.
    SubCols(NodeId, NodeId),
    /// (R, C) * (C,) broadcast over rows.
    MulCols(NodeId, NodeId),
    /// (R, C) / (R,) broadcast over columns.
    DivRows(NodeId, NodeId),
    /// Elementwise clamp; branch per element frozen at forward time
    /// (0 = pass-through, 1 = low bound, 2 = high bound).
    Clamp { x: NodeId, lo: NodeId, hi: NodeId, branch: Vec<u8> },
    /// y = M x with a constant matrix (rows x cols).
    MatVecConst { x: NodeId, mat: Vec<f64>, rows: usize, cols: usize },
    /// Binary cross-entropy: per-sample sum over classes, mean over batch.
    /// Predictions clipped to [1e-7, 1 - 1e-7]; no gradient to the target.
    BceLoss(NodeId, NodeId),
    /// Softmax cross-entropy from logits against class labels.
    CeSoftmaxLoss(NodeId, Vec<usize>),
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Gradients per node after a backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a node, zeros if it was never touched by backward.
    pub fn get_or_zeros(&self, id: NodeId, shape: &[usize]) -> Tensor {
        match self.get(id) {
            Some(t) => t.clone(),
            None => Tensor::zeros(shape.to_vec()),
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const BCE_CLIP: f64 = 1e-7;

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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    fn mismatch(&self, op: &'static str, detail: String) -> AutodiffError {
        AutodiffError::ShapeMismatch { node: self.nodes.len(), op, detail }
    }

    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Leaf, t)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.leaf(Tensor::scalar(v))
    }

    fn zip_elementwise(
        &mut self,
        op_name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId, AutodiffError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.mismatch(
                op_name,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data);
        Ok(self.push(op, t))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.zip_elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.zip_elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.zip_elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let t = self.map_values(a, |x| -x);
        self.push(Op::Neg(a), t)
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let t = self.map_values(a, |x| x + c);
        self.push(Op::AddConst(a, c), t)
    }

    pub fn mul_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let t = self.map_values(a, |x| x * c);
        self.push(Op::MulConst(a, c), t)
    }

    fn map_values(&self, a: NodeId, f: impl Fn(f64) -> f64) -> Tensor {
        let v = self.value(a);
        Tensor::new(v.shape().to_vec(), v.data().iter().map(|&x| f(x)).collect())
    }

    fn expect_scalar(&self, op: &'static str, s: NodeId) -> Result<f64, AutodiffError> {
        let v = self.value(s);
        if v.len() != 1 {
            return Err(self.mismatch(op, format!("expected scalar, got {:?}", v.shape())));
        }
        Ok(v.data()[0])
    }

    pub fn scale(&mut self, a: NodeId, s: NodeId) -> Result<NodeId, AutodiffError> {
        let sv = self.expect_scalar("scale", s)?;
        let t = self.map_values(a, |x| x * sv);
        Ok(self.push(Op::Scale(a, s), t))
    }

    pub fn sub_scalar(&mut self, a: NodeId, s: NodeId) -> Result<NodeId, AutodiffError> {
        let sv = self.expect_scalar("sub_scalar", s)?;
        let t = self.map_values(a, |x| x - sv);
        Ok(self.push(Op::SubScalar(a, s), t))
    }

    pub fn div_scalar(&mut self, a: NodeId, s: NodeId) -> Result<NodeId, AutodiffError> {
        let sv = self.expect_scalar("div_scalar", s)?;
        let t = self.map_values(a, |x| x / sv);
        Ok(self.push(Op::DivScalar(a, s), t))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let t = self.map_values(a, f64::tanh);
        self.push(Op::Tanh(a), t)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let t = self.map_values(a, softplus);
        self.push(Op::Softplus(a), t)
    }

    /// The smooth threshold `xi(u) = tanh(u)/2 + 1/2` as a subgraph.
    pub fn smooth_threshold(&mut self, a: NodeId) -> NodeId {
        let t = self.tanh(a);
        let h = self.mul_const(t, 0.5);
        self.add_const(h, 0.5)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).data().iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(v))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len().max(1);
        let v = self.value(a).data().iter().sum::<f64>() / n as f64;
        self.push(Op::Mean(a), Tensor::scalar(v))
    }

    pub fn row_sum(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let v = self.value(a);
        let [r, c] = *shape2(v.shape()).ok_or_else(|| self.mismatch("row_sum", format!("{:?}", v.shape())))?;
        let data: Vec<f64> = (0..r).map(|i| v.data()[i * c..(i + 1) * c].iter().sum()).collect();
        Ok(self.push(Op::RowSum(a), Tensor::new(vec![r], data)))
    }

    pub fn gather(&mut self, a: NodeId, indices: Vec<usize>) -> Result<NodeId, AutodiffError> {
        let v = self.value(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= v.len()) {
            return Err(self.mismatch("gather", format!("index {bad} out of {}", v.len())));
        }
        let data: Vec<f64> = indices.iter().map(|&i| v.data()[i]).collect();
        let t = Tensor::new(vec![indices.len()], data);
        Ok(self.push(Op::Gather(a, indices), t))
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let t = Tensor::new(vec![data.len()], data);
        self.push(Op::Concat(a, b), t)
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId, AutodiffError> {
        let v = self.value(a);
        if shape.iter().product::<usize>() != v.len() {
            return Err(self.mismatch("reshape", format!("{:?} -> {:?}", v.shape(), shape)));
        }
        let t = Tensor::new(shape, v.data().to_vec());
        Ok(self.push(Op::Reshape(a), t))
    }

    /// Zero-padded convolution keeping the spatial size:
    /// `y[b, j] = sum_k w(k) * x[b, j - k]` with `k` centered on the kernel.
    pub fn conv2d_same(&mut self, x: NodeId, w: NodeId) -> Result<NodeId, AutodiffError> {
        let (xv, wv) = (self.value(x), self.value(w));
        let [b, h, wd] =
            *shape3(xv.shape()).ok_or_else(|| self.mismatch("conv2d_same", format!("input {:?}", xv.shape())))?;
        let [kh, kw] =
            *shape2(wv.shape()).ok_or_else(|| self.mismatch("conv2d_same", format!("kernel {:?}", wv.shape())))?;
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(self.mismatch("conv2d_same", format!("kernel extents must be odd: {kh}x{kw}")));
        }
        let mut out = vec![0.0; b * h * wd];
        let (ch, cw) = (kh as i32 / 2, kw as i32 / 2);
        for bi in 0..b {
            let xs = &xv.data()[bi * h * wd..(bi + 1) * h * wd];
            let ys = &mut out[bi * h * wd..(bi + 1) * h * wd];
            for u in 0..kh {
                for v in 0..kw {
                    let wgt = wv.data()[u * kw + v];
                    if wgt == 0.0 {
                        continue;
                    }
                    acc_shifted(ys, xs, h, wd, u as i32 - ch, v as i32 - cw, wgt);
                }
            }
        }
        Ok(self.push(Op::Conv2dSame(x, w), Tensor::new(vec![b, h, wd], out)))
    }

    /// Weighted sum across the channel axis: `(B,N,H,W) x (N,) -> (B,H,W)`.
    pub fn chan_sum(&mut self, x: NodeId, u: NodeId) -> Result<NodeId, AutodiffError> {
        let (xv, uv) = (self.value(x), self.value(u));
        let [b, n, h, w] =
            *shape4(xv.shape()).ok_or_else(|| self.mismatch("chan_sum", format!("input {:?}", xv.shape())))?;
        if uv.shape() != [n] {
            return Err(self.mismatch("chan_sum", format!("weights {:?} for {n} channels", uv.shape())));
        }
        let hw = h * w;
        let mut out = vec![0.0; b * hw];
        for bi in 0..b {
            for ni in 0..n {
                let wgt = uv.data()[ni];
                let src = &xv.data()[(bi * n + ni) * hw..(bi * n + ni + 1) * hw];
                let dst = &mut out[bi * hw..(bi + 1) * hw];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += wgt * s;
                }
            }
        }
        Ok(self.push(Op::ChanSum(x, u), Tensor::new(vec![b, h, w], out)))
    }

    pub fn chan_select(&mut self, x: NodeId, channel: usize) -> Result<NodeId, AutodiffError> {
        let xv = self.value(x);
        let [b, n, h, w] =
            *shape4(xv.shape()).ok_or_else(|| self.mismatch("chan_select", format!("input {:?}", xv.shape())))?;
        if channel >= n {
            return Err(self.mismatch("chan_select", format!("channel {channel} of {n}")));
        }
        let hw = h * w;
        let mut out = vec![0.0; b * hw];
        for bi in 0..b {
            out[bi * hw..(bi + 1) * hw]
                .copy_from_slice(&xv.data()[(bi * n + channel) * hw..(bi * n + channel + 1) * hw]);
        }
        Ok(self.push(Op::ChanSelect(x, channel), Tensor::new(vec![b, h, w], out)))
    }

    pub fn stack_channels(&mut self, xs: &[NodeId]) -> Result<NodeId, AutodiffError> {
        let first = *xs.first().ok_or_else(|| self.mismatch("stack_channels", "no inputs".into()))?;
        let [b, h, w] = *shape3(self.value(first).shape())
            .ok_or_else(|| self.mismatch("stack_channels", format!("{:?}", self.value(first).shape())))?;
        let n = xs.len();
        let hw = h * w;
        let mut out = vec![0.0; b * n * hw];
        for (ni, &x) in xs.iter().enumerate() {
            if self.value(x).shape() != [b, h, w] {
                return Err(self.mismatch(
                    "stack_channels",
                    format!("{:?} vs {:?}", self.value(x).shape(), [b, h, w]),
                ));
            }
            for bi in 0..b {
                out[(bi * n + ni) * hw..(bi * n + ni + 1) * hw]
                    .copy_from_slice(&self.value(x).data()[bi * hw..(bi + 1) * hw]);
            }
        }
        Ok(self.push(Op::StackChannels(xs.to_vec()), Tensor::new(vec![b, n, h, w], out)))
    }

    /// `(B,N) x (M,N) -> (B,M)`, weights stored one neuron per row.
    pub fn matmul_t(&mut self, x: NodeId, w: NodeId) -> Result<NodeId, AutodiffError> {
        let (xv, wv) = (self.value(x), self.value(w));
        let [b, n] = *shape2(xv.shape()).ok_or_else(|| self.mismatch("matmul_t", format!("input {:?}", xv.shape())))?;
        let [m, n2] =
            *shape2(wv.shape()).ok_or_else(|| self.mismatch("matmul_t", format!("weights {:?}", wv.shape())))?;
        if n != n2 {
            return Err(self.mismatch("matmul_t", format!("inner dims {n} vs {n2}")));
        }
        let mut out = vec![0.0; b * m];
        for bi in 0..b {
            let xr = &xv.data()[bi * n..(bi + 1) * n];
            for mi in 0..m {
                let wr = &wv.data()[mi * n..(mi + 1) * n];
                let mut acc = 0.0;
                for i in 0..n {
                    acc += xr[i] * wr[i];
                }
                out[bi * m + mi] = acc;
            }
        }
        Ok(self.push(Op::MatmulT(x, w), Tensor::new(vec![b, m], out)))
    }

    pub fn sub_cols(&mut self, a: NodeId, v: NodeId) -> Result<NodeId, AutodiffError> {
        self.cols_op("sub_cols", a, v, |x, y| x - y, Op::SubCols(a, v))
    }

    pub fn mul_cols(&mut self, a: NodeId, v: NodeId) -> Result<NodeId, AutodiffError> {
        self.cols_op("mul_cols", a, v, |x, y| x * y, Op::MulCols(a, v))
    }

    fn cols_op(
        &mut self,
        name: &'static str,
        a: NodeId,
        v: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId, AutodiffError> {
        let (av, vv) = (self.value(a), self.value(v));
        let [r, c] = *shape2(av.shape()).ok_or_else(|| self.mismatch(name, format!("{:?}", av.shape())))?;
        if vv.shape() != [c] {
            return Err(self.mismatch(name, format!("vector {:?} for {c} columns", vv.shape())));
        }
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = f(av.data()[i * c + j], vv.data()[j]);
            }
        }
        Ok(self.push(op, Tensor::new(vec![r, c], out)))
    }

    pub fn div_rows(&mut self, a: NodeId, v: NodeId) -> Result<NodeId, AutodiffError> {
        let (av, vv) = (self.value(a), self.value(v));
        let [r, c] = *shape2(av.shape()).ok_or_else(|| self.mismatch("div_rows", format!("{:?}", av.shape())))?;
        if vv.shape() != [r] {
            return Err(self.mismatch("div_rows", format!("vector {:?} for {r} rows", vv.shape())));
        }
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = av.data()[i * c + j] / vv.data()[i];
            }
        }
        Ok(self.push(Op::DivRows(a, v), Tensor::new(vec![r, c], out)))
    }

    /// Clamp `x` to `[lo, hi]` elementwise; all three share one shape. The
    /// selected branch is frozen, so gradients flow to the active bound.
    pub fn clamp(&mut self, x: NodeId, lo: NodeId, hi: NodeId) -> Result<NodeId, AutodiffError> {
        let shape = self.value(x).shape().to_vec();
        if self.value(lo).shape() != shape || self.value(hi).shape() != shape {
            return Err(self.mismatch("clamp", "bounds must match value shape".into()));
        }
        let n = self.value(x).len();
        let mut data = vec![0.0; n];
        let mut branch = vec![0u8; n];
        for i in 0..n {
            let (xv, lv, hv) = (self.value(x).data()[i], self.value(lo).data()[i], self.value(hi).data()[i]);
            if xv < lv {
                data[i] = lv;
                branch[i] = 1;
            } else if xv > hv {
                data[i] = hv;
                branch[i] = 2;
            } else {
                data[i] = xv;
            }
        }
        Ok(self.push(Op::Clamp { x, lo, hi, branch }, Tensor::new(shape, data)))
    }

    /// Multiply by a constant matrix: `y = M x`.
    pub fn matvec_const(&mut self, mat: Vec<f64>, rows: usize, cols: usize, x: NodeId) -> Result<NodeId, AutodiffError> {
        assert_eq!(mat.len(), rows * cols);
        let xv = self.value(x);
        if xv.len() != cols {
            return Err(self.mismatch("matvec_const", format!("{} vs {cols} columns", xv.len())));
        }
        let mut out = vec![0.0; rows];
        for i in 0..rows {
            let mut acc = 0.0;
            for j in 0..cols {
                acc += mat[i * cols + j] * xv.data()[j];
            }
            out[i] = acc;
        }
        Ok(self.push(Op::MatVecConst { x, mat, rows, cols }, Tensor::new(vec![rows], out)))
    }

    /// Mean squared error over all elements.
    pub fn mse_loss(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId, AutodiffError> {
        let d = self.sub(pred, target)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    /// Binary cross-entropy: `-(t log p + (1-t) log(1-p))` summed over classes
    /// and averaged over the batch (first axis). Predictions are clipped away
    /// from 0 and 1.
    pub fn bce_loss(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId, AutodiffError> {
        let (pv, tv) = (self.value(pred), self.value(target));
        if pv.shape() != tv.shape() {
            return Err(self.mismatch("bce_loss", format!("{:?} vs {:?}", pv.shape(), tv.shape())));
        }
        let batch = pv.shape().first().copied().unwrap_or(1).max(1);
        let mut total = 0.0;
        for (&p, &t) in pv.data().iter().zip(tv.data()) {
            let p = p.clamp(BCE_CLIP, 1.0 - BCE_CLIP);
            total -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
        }
        Ok(self.push(Op::BceLoss(pred, target), Tensor::scalar(total / batch as f64)))
    }

    /// Softmax cross-entropy from logits `(B, C)` against class labels.
    pub fn ce_softmax_loss(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId, AutodiffError> {
        let lv = self.value(logits);
        let [b, c] =
            *shape2(lv.shape()).ok_or_else(|| self.mismatch("ce_softmax_loss", format!("{:?}", lv.shape())))?;
        if labels.len() != b {
            return Err(self.mismatch("ce_softmax_loss", format!("{} labels for batch {b}", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(self.mismatch("ce_softmax_loss", format!("label {bad} out of {c} classes")));
        }
        let mut total = 0.0;
        for (bi, &y) in labels.iter().enumerate() {
            let row = &lv.data()[bi * c..(bi + 1) * c];
            total += log_sum_exp(row) - row[y];
        }
        let t = Tensor::scalar(total / b as f64);
        Ok(self.push(Op::CeSoftmaxLoss(logits, labels.to_vec()), t))
    }

    /// Reverse pass from `out` seeded with `seed`. Gradients accumulate
    /// additively across fan-out; each node is visited exactly once.
    pub fn backward(&self, out: NodeId, seed: Tensor) -> Result<Gradients, AutodiffError> {
        if seed.shape() != self.value(out).shape() {
            return Err(AutodiffError::SeedShape {
                seed: seed.shape().to_vec(),
                out: self.value(out).shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);

        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.accumulate_inputs(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Convenience: backward from a scalar loss with seed 1.
    pub fn backward_scalar(&self, out: NodeId) -> Result<Gradients, AutodiffError> {
        self.backward(out, Tensor::scalar(1.0))
    }

    fn accumulate_inputs(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let add_to = |grads: &mut [Option<Tensor>], id: NodeId, contribution: Tensor| {
            match &mut grads[id.0] {
                Some(acc) => {
                    for (a, c) in acc.data_mut().iter_mut().zip(contribution.data()) {
                        *a += c;
                    }
                }
                slot => *slot = Some(contribution),
            }
        };
        let val = |id: NodeId| self.value(id);
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                add_to(grads, *a, g.clone());
                add_to(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                add_to(grads, *a, g.clone());
                let neg = Tensor::new(g.shape().to_vec(), g.data().iter().map(|&x| -x).collect());
                add_to(grads, *b, neg);
            }
            Op::Mul(a, b) => {
                let ga = zip_mul(g, val(*b));
                let gb = zip_mul(g, val(*a));
                add_to(grads, *a, ga);
                add_to(grads, *b, gb);
            }
            Op::Neg(a) => {
                let ga = Tensor::new(g.shape().to_vec(), g.data().iter().map(|&x| -x).collect());
                add_to(grads, *a, ga);
            }
            Op::AddConst(a, _) => add_to(grads, *a, g.clone()),
            Op::MulConst(a, c) => {
                let ga = Tensor::new(g.shape().to_vec(), g.data().iter().map(|&x| x * c).collect());
                add_to(grads, *a, ga);
            }
            Op::Scale(a, s) => {
                let sv = val(*s).data()[0];
                let ga = Tensor::new(g.shape().to_vec(), g.data().iter().map(|&x| x * sv).collect());
                let gs = g.data().iter().zip(val(*a).data()).map(|(&gi, &ai)| gi * ai).sum();
                add_to(grads, *a, ga);
                add_to(grads, *s, Tensor::scalar(gs));
            }
            Op::SubScalar(a, s) => {
                add_to(grads, *a, g.clone());
                let gs: f64 = g.data().iter().sum();
                add_to(grads, *s, Tensor::scalar(-gs));
            }
            Op::DivScalar(a, s) => {
                let sv = val(*s).data()[0];
                let ga = Tensor::new(g.shape().to_vec(), g.data().iter().map(|&x| x / sv).collect());
                let gs = g
                    .data()
                    .iter()
                    .zip(val(*a).data())
                    .map(|(&gi, &ai)| -gi * ai / (sv * sv))
                    .sum();
                add_to(grads, *a, ga);
                add_to(grads, *s, Tensor::scalar(gs));
            }
            Op::Tanh(a) => {
                let y = &self.nodes[i].value;
                let ga = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(y.data()).map(|(&gi, &yi)| gi * (1.0 - yi * yi)).collect(),
                );
                add_to(grads, *a, ga);
            }
            Op::Softplus(a) => {
                let ga = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(val(*a).data()).map(|(&gi, &xi)| gi * sigmoid(xi)).collect(),
                );
                add_to(grads, *a, ga);
            }
            Op::Sum(a) => {
                let gv = g.data()[0];
                add_to(grads, *a, Tensor::new(val(*a).shape().to_vec(), vec![gv; val(*a).len()]));
            }
            Op::Mean(a) => {
                let gv = g.data()[0] / val(*a).len().max(1) as f64;
                add_to(grads, *a, Tensor::new(val(*a).shape().to_vec(), vec![gv; val(*a).len()]));
            }
            Op::RowSum(a) => {
                let [r, c] = *shape2(val(*a).shape()).unwrap();
                let mut ga = vec![0.0; r * c];
                for ri in 0..r {
                    let gv = g.data()[ri];
                    for cv in ga[ri * c..(ri + 1) * c].iter_mut() {
                        *cv += gv;
                    }
                }
                add_to(grads, *a, Tensor::new(vec![r, c], ga));
            }
            Op::Gather(a, indices) => {
                let mut ga = Tensor::zeros(val(*a).shape().to_vec());
                for (pos, &idx) in indices.iter().enumerate() {
                    ga.data_mut()[idx] += g.data()[pos];
                }
                add_to(grads, *a, ga);
            }
            Op::Concat(a, b) => {
                let (la, lb) = (val(*a).len(), val(*b).len());
                let ga = Tensor::new(val(*a).shape().to_vec(), g.data()[..la].to_vec());
                let gb = Tensor::new(val(*b).shape().to_vec(), g.data()[la..la + lb].to_vec());
                add_to(grads, *a, ga);
                add_to(grads, *b, gb);
            }
            Op::Reshape(a) => {
                let ga = Tensor::new(val(*a).shape().to_vec(), g.data().to_vec());
                add_to(grads, *a, ga);
            }
            Op::Conv2dSame(x, w) => {
                let (xv, wv) = (val(*x), val(*w));
                let [b, h, wd] = *shape3(xv.shape()).unwrap();
                let [kh, kw] = *shape2(wv.shape()).unwrap();
                let (ch, cw) = (kh as i32 / 2, kw as i32 / 2);
                let mut gx = vec![0.0; xv.len()];
                let mut gw = vec![0.0; wv.len()];
                for bi in 0..b {
                    let gs = &g.data()[bi * h * wd..(bi + 1) * h * wd];
                    let xs = &xv.data()[bi * h * wd..(bi + 1) * h * wd];
                    let gxs = &mut gx[bi * h * wd..(bi + 1) * h * wd];
                    for u in 0..kh {
                        for v in 0..kw {
                            let (dy, dx) = (u as i32 - ch, v as i32 - cw);
                            let wgt = wv.data()[u * kw + v];
                            if wgt != 0.0 {
                                acc_shifted(gxs, gs, h, wd, -dy, -dx, wgt);
                            }
                            gw[u * kw + v] += dot_shifted(gs, xs, h, wd, dy, dx);
                        }
                    }
                }
                add_to(grads, *x, Tensor::new(xv.shape().to_vec(), gx));
                add_to(grads, *w, Tensor::new(wv.shape().to_vec(), gw));
            }
            Op::ChanSum(x, u) => {
                let (xv, uv) = (val(*x), val(*u));
                let [b, n, h, w] = *shape4(xv.shape()).unwrap();
                let hw = h * w;
                let mut gx = vec![0.0; xv.len()];
                let mut gu = vec![0.0; n];
                for bi in 0..b {
                    let gs = &g.data()[bi * hw..(bi + 1) * hw];
                    for ni in 0..n {
                        let wgt = uv.data()[ni];
                        let xs = &xv.data()[(bi * n + ni) * hw..(bi * n + ni + 1) * hw];
                        let gxs = &mut gx[(bi * n + ni) * hw..(bi * n + ni + 1) * hw];
                        let mut acc = 0.0;
                        for k in 0..hw {
                            gxs[k] += wgt * gs[k];
                            acc += gs[k] * xs[k];
                        }
                        gu[ni] += acc;
                    }
                }
                add_to(grads, *x, Tensor::new(xv.shape().to_vec(), gx));
                add_to(grads, *u, Tensor::new(vec![n], gu));
            }
            Op::ChanSelect(x, channel) => {
                let xv = val(*x);
                let [b, n, h, w] = *shape4(xv.shape()).unwrap();
                let hw = h * w;
                let mut gx = vec![0.0; xv.len()];
                for bi in 0..b {
                    gx[(bi * n + channel) * hw..(bi * n + channel + 1) * hw]
                        .copy_from_slice(&g.data()[bi * hw..(bi + 1) * hw]);
                }
                add_to(grads, *x, Tensor::new(xv.shape().to_vec(), gx));
            }
            Op::StackChannels(xs) => {
                let n = xs.len();
                let [b, _, h, w] = *shape4(self.nodes[i].value.shape()).unwrap();
                let hw = h * w;
                for (ni, &x) in xs.iter().enumerate() {
                    let mut gx = vec![0.0; b * hw];
                    for bi in 0..b {
                        gx[bi * hw..(bi + 1) * hw]
                            .copy_from_slice(&g.data()[(bi * n + ni) * hw..(bi * n + ni + 1) * hw]);
                    }
                    add_to(grads, x, Tensor::new(vec![b, h, w], gx));
                }
            }
            Op::MatmulT(x, w) => {
                let (xv, wv) = (val(*x), val(*w));
                let [b, n] = *shape2(xv.shape()).unwrap();
                let [m, _] = *shape2(wv.shape()).unwrap();
                let mut gx = vec![0.0; b * n];
                let mut gw = vec![0.0; m * n];
                for bi in 0..b {
                    let gr = &g.data()[bi * m..(bi + 1) * m];
                    let xr = &xv.data()[bi * n..(bi + 1) * n];
                    for mi in 0..m {
                        let gv = gr[mi];
                        if gv == 0.0 {
                            continue;
                        }
                        let wr = &wv.data()[mi * n..(mi + 1) * n];
                        let gxr = &mut gx[bi * n..(bi + 1) * n];
                        for k in 0..n {
                            gxr[k] += gv * wr[k];
                        }
                        let gwr = &mut gw[mi * n..(mi + 1) * n];
                        for k in 0..n {
                            gwr[k] += gv * xr[k];
                        }
                    }
                }
                add_to(grads, *x, Tensor::new(vec![b, n], gx));
                add_to(grads, *w, Tensor::new(vec![m, n], gw));
            }
            Op::SubCols(a, v) => {
                let [r, c] = *shape2(val(*a).shape()).unwrap();
                add_to(grads, *a, g.clone());
                let mut gv = vec![0.0; c];
                for ri in 0..r {
                    for ci in 0..c {
                        gv[ci] -= g.data()[ri * c + ci];
                    }
                }
                add_to(grads, *v, Tensor::new(vec![c], gv));
            }
            Op::MulCols(a, v) => {
                let (av, vv) = (val(*a), val(*v));
                let [r, c] = *shape2(av.shape()).unwrap();
                let mut ga = vec![0.0; r * c];
                let mut gv = vec![0.0; c];
                for ri in 0..r {
                    for ci in 0..c {
                        let gi = g.data()[ri * c + ci];
                        ga[ri * c + ci] = gi * vv.data()[ci];
                        gv[ci] += gi * av.data()[ri * c + ci];
                    }
                }
                add_to(grads, *a, Tensor::new(vec![r, c], ga));
                add_to(grads, *v, Tensor::new(vec![c], gv));
            }
            Op::DivRows(a, v) => {
                let (av, vv) = (val(*a), val(*v));
                let [r, c] = *shape2(av.shape()).unwrap();
                let mut ga = vec![0.0; r * c];
                let mut gv = vec![0.0; r];
                for ri in 0..r {
                    let s = vv.data()[ri];
                    for ci in 0..c {
                        let gi = g.data()[ri * c + ci];
                        ga[ri * c + ci] = gi / s;
                        gv[ri] -= gi * av.data()[ri * c + ci] / (s * s);
                    }
                }
                add_to(grads, *a, Tensor::new(vec![r, c], ga));
                add_to(grads, *v, Tensor::new(vec![r], gv));
            }
            Op::Clamp { x, lo, hi, branch } => {
                let shape = val(*x).shape().to_vec();
                let n = branch.len();
                let (mut gx, mut gl, mut gh) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
                for k in 0..n {
                    match branch[k] {
                        0 => gx[k] = g.data()[k],
                        1 => gl[k] = g.data()[k],
                        _ => gh[k] = g.data()[k],
                    }
                }
                add_to(grads, *x, Tensor::new(shape.clone(), gx));
                add_to(grads, *lo, Tensor::new(shape.clone(), gl));
                add_to(grads, *hi, Tensor::new(shape, gh));
            }
            Op::MatVecConst { x, mat, rows, cols } => {
                let mut gx = vec![0.0; *cols];
                for r in 0..*rows {
                    let gv = g.data()[r];
                    if gv == 0.0 {
                        continue;
                    }
                    for c in 0..*cols {
                        gx[c] += mat[r * cols + c] * gv;
                    }
                }
                add_to(grads, *x, Tensor::new(vec![*cols], gx));
            }
            Op::BceLoss(pred, target) => {
                let (pv, tv) = (val(*pred), val(*target));
                let batch = pv.shape().first().copied().unwrap_or(1).max(1) as f64;
                let gv = g.data()[0] / batch;
                let gp: Vec<f64> = pv
                    .data()
                    .iter()
                    .zip(tv.data())
                    .map(|(&p, &t)| {
                        if !(BCE_CLIP..=1.0 - BCE_CLIP).contains(&p) {
                            0.0
                        } else {
                            gv * (p - t) / (p * (1.0 - p))
                        }
                    })
                    .collect();
                add_to(grads, *pred, Tensor::new(pv.shape().to_vec(), gp));
            }
            Op::CeSoftmaxLoss(logits, labels) => {
                let lv = val(*logits);
                let [b, c] = *shape2(lv.shape()).unwrap();
                let gv = g.data()[0] / b as f64;
                let mut gl = vec![0.0; b * c];
                for (bi, &y) in labels.iter().enumerate() {
                    let row = &lv.data()[bi * c..(bi + 1) * c];
                    let lse = log_sum_exp(row);
                    for ci in 0..c {
                        let p = (row[ci] - lse).exp();
                        gl[bi * c + ci] = gv * (p - if ci == y { 1.0 } else { 0.0 });
                    }
                }
                add_to(grads, *logits, Tensor::new(vec![b, c], gl));
            }
        }
    }
}

fn zip_mul(a: &Tensor, b: &Tensor) -> Tensor {
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect(),
    )
}

fn shape2(shape: &[usize]) -> Option<&[usize; 2]> {
    shape.try_into().ok()
}

fn shape3(shape: &[usize]) -> Option<&[usize; 3]> {
    shape.try_into().ok()
}

fn shape4(shape: &[usize]) -> Option<&[usize; 4]> {
    shape.try_into().ok()
}

/// dst[r][c] += scale * src[r - dy][c - dx], zero outside the grid.
fn acc_shifted(dst: &mut [f64], src: &[f64], h: usize, w: usize, dy: i32, dx: i32, scale: f64) {
    for r in 0..h as i32 {
        let sr = r - dy;
        if sr < 0 || sr >= h as i32 {
            continue;
        }
        let c_lo = dx.max(0) as usize;
        let c_hi = (w as i32 + dx.min(0)) as usize;
        let dst_row = &mut dst[r as usize * w..(r as usize + 1) * w];
        let src_row = &src[sr as usize * w..(sr as usize + 1) * w];
        for c in c_lo..c_hi {
            dst_row[c] += scale * src_row[(c as i32 - dx) as usize];
        }
    }
}

/// sum over valid pixels of a[r][c] * b[r - dy][c - dx].
fn dot_shifted(a: &[f64], b: &[f64], h: usize, w: usize, dy: i32, dx: i32) -> f64 {
    let mut acc = 0.0;
    for r in 0..h as i32 {
        let sr = r - dy;
        if sr < 0 || sr >= h as i32 {
            continue;
        }
        let c_lo = dx.max(0) as usize;
        let c_hi = (w as i32 + dx.min(0)) as usize;
        let a_row = &a[r as usize * w..(r as usize + 1) * w];
        let b_row = &b[sr as usize * w..(sr as usize + 1) * w];
        for c in c_lo..c_hi {
            acc += a_row[c] * b_row[(c as i32 - dx) as usize];
        }
    }
    acc
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

/// One parameter's finite-difference comparison.
#[derive(Debug, Clone)]
pub struct FdParamReport {
    pub param: usize,
    pub max_rel_err: f64,
    pub worst_component: usize,
}

/// Report of [`finite_diff_check`]: per-parameter worst relative error.
#[derive(Debug, Clone, Default)]
pub struct FdReport {
    pub per_param: Vec<FdParamReport>,
}

impl FdReport {
    pub fn max_rel_err(&self) -> f64 {
        self.per_param.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }
}

/// Compares reverse-mode gradients of a scalar-valued graph against central
/// finite differences `(f(t + h) - f(t - h)) / 2h`, componentwise.
///
/// `build` must construct the graph from leaves made of `params` in order and
/// return the scalar output node. Relative error uses
/// `|ad - fd| / max(|ad|, |fd|, 1e-6)`.
pub fn finite_diff_check<F>(build: F, params: &[Tensor], step: f64) -> Result<FdReport, AutodiffError>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId, AutodiffError>,
{
    assert!(step > 0.0, "finite difference step must be positive");
    let eval = |params: &[Tensor]| -> Result<f64, AutodiffError> {
        let mut tape = Tape::new();
        let leaves: Vec<NodeId> = params.iter().map(|p| tape.leaf(p.clone())).collect();
        let out = build(&mut tape, &leaves)?;
        let loss = tape.value(out).item();
        if !loss.is_finite() {
            return Err(AutodiffError::NonFinite("loss during finite-difference probe".into()));
        }
        Ok(loss)
    };

    // Analytic gradients once.
    let mut tape = Tape::new();
    let leaves: Vec<NodeId> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = build(&mut tape, &leaves)?;
    let grads = tape.backward_scalar(out)?;

    let mut report = FdReport::default();
    let mut probe: Vec<Tensor> = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        let ad = grads.get_or_zeros(leaves[pi], param.shape());
        let mut worst = (0.0f64, 0usize);
        for ci in 0..param.len() {
            let orig = probe[pi].data()[ci];
            probe[pi].data_mut()[ci] = orig + step;
            let fp = eval(&probe)?;
            probe[pi].data_mut()[ci] = orig - step;
            let fm = eval(&probe)?;
            probe[pi].data_mut()[ci] = orig;
            let fd = (fp - fm) / (2.0 * step);
            let a = ad.data()[ci];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            if rel > worst.0 {
                worst = (rel, ci);
            }
        }
        report.per_param.push(FdParamReport {
            param: pi,
            max_rel_err: worst.0,
            worst_component: worst.1,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn square_of_three() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        assert_eq!(tape.value(y).item(), 9.0);
        let grads = tape.backward_scalar(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn identity_graph_returns_input() {
        let mut tape = Tape::new();
        let t = Tensor::new(vec![2, 2], vec![0.25, 0.5, 0.75, 1.0]);
        let x = tape.leaf(t.clone());
        assert_eq!(tape.value(x), &t);
    }

    #[test]
    fn smooth_threshold_at_zero_is_half_with_half_slope() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0));
        let y = tape.smooth_threshold(x);
        assert_eq!(tape.value(y).item(), 0.5);
        let grads = tape.backward_scalar(y).unwrap();
        assert!((grads.get(x).unwrap().item() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn fan_out_gradients_accumulate() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.5));
        let y = tape.add(x, x).unwrap();
        let grads = tape.backward_scalar(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 2.0);
    }

    #[test]
    fn gradient_linearity_over_summed_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let xv = Tensor::new(vec![4], (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect());

        let grad_for = |combine: &dyn Fn(&mut Tape, NodeId) -> NodeId| -> Vec<f64> {
            let mut tape = Tape::new();
            let x = tape.leaf(xv.clone());
            let out = combine(&mut tape, x);
            tape.backward_scalar(out).unwrap().get(x).unwrap().data().to_vec()
        };

        let g_a = grad_for(&|t, x| {
            let m = t.mul(x, x).unwrap();
            t.sum(m)
        });
        let g_b = grad_for(&|t, x| {
            let th = t.tanh(x);
            t.sum(th)
        });
        let g_ab = grad_for(&|t, x| {
            let m = t.mul(x, x).unwrap();
            let s1 = t.sum(m);
            let th = t.tanh(x);
            let s2 = t.sum(th);
            t.add(s1, s2).unwrap()
        });
        for i in 0..4 {
            assert!((g_ab[i] - (g_a[i] + g_b[i])).abs() < 1e-14);
        }
    }

    #[test]
    fn repeated_evaluation_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::new(vec![2, 8, 8], (0..128).map(|_| rng.gen_range(0.0..1.0)).collect());
        let w = Tensor::new(vec![3, 3], (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let run = || {
            let mut tape = Tape::new();
            let xi = tape.leaf(x.clone());
            let wi = tape.leaf(w.clone());
            let y = tape.conv2d_same(xi, wi).unwrap();
            let s = tape.smooth_threshold(y);
            tape.value(s).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shape_mismatch_is_structured() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(vec![2]));
        let b = tape.leaf(Tensor::zeros(vec![3]));
        let err = tape.add(a, b).unwrap_err();
        assert!(matches!(err, AutodiffError::ShapeMismatch { op: "add", .. }));
    }

    #[test]
    fn seed_shape_checked() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![3]));
        let y = tape.mul_const(x, 2.0);
        assert!(matches!(
            tape.backward(y, Tensor::scalar(1.0)),
            Err(AutodiffError::SeedShape { .. })
        ));
    }

    #[test]
    fn finite_diff_on_cubic_is_tight() {
        // f(x) = sum(x^3): central differences are exact for cubics up to rounding.
        let params = [Tensor::new(vec![3], vec![0.3, -0.7, 1.2])];
        let report = finite_diff_check(
            |tape, leaves| {
                let sq = tape.mul(leaves[0], leaves[0])?;
                let cu = tape.mul(sq, leaves[0])?;
                Ok(tape.sum(cu))
            },
            &params,
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel_err() < 1e-7, "max rel err {}", report.max_rel_err());
    }

    #[test]
    fn finite_diff_empty_report_without_params() {
        let report = finite_diff_check(
            |tape, _| {
                let c = tape.leaf(Tensor::scalar(4.0));
                Ok(tape.mul_const(c, 2.0))
            },
            &[],
            1e-6,
        )
        .unwrap();
        assert!(report.per_param.is_empty());
    }

    #[test]
    fn elementwise_and_broadcast_ops_pass_finite_diff() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = [
            Tensor::new(vec![2, 3], (0..6).map(|_| rng.gen_range(0.2..1.0)).collect()),
            Tensor::new(vec![3], (0..3).map(|_| rng.gen_range(0.2..1.0)).collect()),
            Tensor::new(vec![1], vec![0.7]),
            Tensor::new(vec![2], vec![0.4, 2.0]),
        ];
        let report = finite_diff_check(
            |tape, l| {
                let a = tape.sub_cols(l[0], l[1])?;
                let b = tape.mul_cols(a, l[1])?;
                let c = tape.div_rows(b, l[3])?;
                let d = tape.scale(c, l[2])?;
                let e = tape.softplus(d);
                let f = tape.tanh(e);
                let g = tape.div_scalar(f, l[2])?;
                let s1 = tape.sum(g);
                let rs = tape.row_sum(c)?;
                let s2 = tape.mean(rs);
                tape.add(s1, s2)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err() < 1e-7, "max rel err {}", report.max_rel_err());
    }

    #[test]
    fn conv_chan_and_matmul_ops_pass_finite_diff() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let params = [
            Tensor::new(vec![2, 5, 4], (0..40).map(|_| rng.gen_range(0.0..1.0)).collect()),
            Tensor::new(vec![3, 3], (0..9).map(|_| rng.gen_range(-0.5..0.5)).collect()),
            Tensor::new(vec![2], vec![0.6, -0.3]),
            Tensor::new(vec![3, 4], (0..12).map(|_| rng.gen_range(-0.5..0.5)).collect()),
        ];
        let report = finite_diff_check(
            |tape, l| {
                let y = tape.conv2d_same(l[0], l[1])?;
                let stacked = tape.stack_channels(&[y, l[0]])?;
                let mixed = tape.chan_sum(stacked, l[2])?;
                let sel = tape.chan_select(stacked, 1)?;
                let joined = tape.add(mixed, sel)?;
                let s1 = tape.sum(joined);
                // (B,N) x (M,N)
                let flat = tape.gather(l[0], (0..8).collect())?;
                let rows = tape.reshape(flat, vec![2, 4])?;
                let mm = tape.matmul_t(rows, l[3])?;
                let s2 = tape.sum(mm);
                tape.add(s1, s2)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err() < 1e-6, "max rel err {}", report.max_rel_err());
    }

    #[test]
    fn loss_ops_pass_finite_diff() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = [
            Tensor::new(vec![3, 4], (0..12).map(|_| rng.gen_range(0.1..0.9)).collect()),
            Tensor::new(vec![3, 4], (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()),
        ];
        let target = Tensor::new(vec![3, 4], (0..12).map(|i| (i % 2) as f64).collect());
        let labels = vec![0usize, 3, 1];
        let report = finite_diff_check(
            |tape, l| {
                let t = tape.leaf(target.clone());
                let bce = tape.bce_loss(l[0], t)?;
                let ce = tape.ce_softmax_loss(l[1], &labels)?;
                let mse = tape.mse_loss(l[0], t)?;
                let a = tape.add(bce, ce)?;
                tape.add(a, mse)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err() < 1e-6, "max rel err {}", report.max_rel_err());
    }

    #[test]
    fn clamp_routes_gradient_to_active_branch() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![0.1, 0.5, 0.9]));
        let lo = tape.leaf(Tensor::new(vec![3], vec![0.3, 0.3, 0.3]));
        let hi = tape.leaf(Tensor::new(vec![3], vec![0.7, 0.7, 0.7]));
        let y = tape.clamp(x, lo, hi).unwrap();
        assert_eq!(tape.value(y).data(), &[0.3, 0.5, 0.7]);
        let s = tape.sum(y);
        let grads = tape.backward_scalar(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 0.0]);
        assert_eq!(grads.get(lo).unwrap().data(), &[1.0, 0.0, 0.0]);
        assert_eq!(grads.get(hi).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn ce_on_uniform_logits_is_log_classes() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(vec![2, 10]));
        let loss = tape.ce_softmax_loss(logits, &[3, 7]).unwrap();
        assert!((tape.value(loss).item() - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn bce_half_prediction_one_hot_is_ten_log_two() {
        let mut tape = Tape::new();
        let pred = tape.leaf(Tensor::new(vec![1, 10], vec![0.5; 10]));
        let mut t = vec![0.0; 10];
        t[4] = 1.0;
        let target = tape.leaf(Tensor::new(vec![1, 10], t));
        let loss = tape.bce_loss(pred, target).unwrap();
        assert!((tape.value(loss).item() - 10.0 * 2f64.ln()).abs() < 1e-12);
    }
}
