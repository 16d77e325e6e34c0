//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Every operation appends a node holding its output and the ids of its
//! inputs; ids therefore increase in execution order and the backward
//! pass walks them in exact reverse. Gradients accumulate additively
//! across fan-out. Matrix products and other reductions accumulate in
//! `f64` before rounding to the `f32` storage precision.

use crate::tensor::{Array, Shape, TensorError};

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

/// Layer-norm denominator epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;

// C[m,n] = A[m,k] * B[k,n]
pub(crate) fn matmul_nn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.fill(0.0);
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            let av = aip as f64;
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in acc.iter_mut().zip(brow) {
                *o += av * bv as f64;
            }
        }
        for (dst, &v) in out[i * n..(i + 1) * n].iter_mut().zip(acc.iter()) {
            *dst = v as f32;
        }
    }
}

// C[m,n] = A[m,k] * B[n,k]^T
pub(crate) fn matmul_nt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0f64;
            for (&x, &y) in arow.iter().zip(brow) {
                s += x as f64 * y as f64;
            }
            out[i * n + j] = s as f32;
        }
    }
}

// C[k,n] = A[m,k]^T * B[m,n]
pub(crate) fn matmul_tn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    let mut acc = vec![0.0f64; k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            let av = aip as f64;
            for (o, &bv) in acc[p * n..(p + 1) * n].iter_mut().zip(brow) {
                *o += av * bv as f64;
            }
        }
    }
    for (dst, &v) in out.iter_mut().zip(acc.iter()) {
        *dst = v as f32;
    }
}

pub(crate) fn gelu_value(x: f32) -> f32 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let xf = x as f64;
    let inner = C * (xf + 0.044715 * xf * xf * xf);
    (0.5 * xf * (1.0 + inner.tanh())) as f32
}

pub(crate) fn gelu_grad(x: f32) -> f32 {
    const C: f64 = 0.797_884_560_802_865_4;
    let xf = x as f64;
    let inner = C * (xf + 0.044715 * xf * xf * xf);
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    let d_inner = C * (1.0 + 3.0 * 0.044715 * xf * xf);
    (0.5 * (1.0 + t) + 0.5 * xf * sech2 * d_inner) as f32
}

enum Storage<'a> {
    Owned(Vec<f32>),
    Borrowed(&'a [f32]),
}

impl Storage<'_> {
    fn as_slice(&self) -> &[f32] {
        match self {
            Storage::Owned(v) => v,
            Storage::Borrowed(s) => s,
        }
    }
}

enum Op {
    Leaf,
    Matmul { a: NodeId, b: NodeId },
    MatmulNt { a: NodeId, b: NodeId },
    Linear { x: NodeId, w: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: f32 },
    AddRow { a: NodeId, row: NodeId },
    Relu { a: NodeId },
    Gelu { a: NodeId },
    Sin { a: NodeId },
    Cos { a: NodeId },
    SoftmaxRows { a: NodeId },
    LayerNorm { a: NodeId, gain: NodeId, bias: NodeId },
    MeanRows { a: NodeId },
    ConcatCols { a: NodeId, b: NodeId },
    SliceCols { a: NodeId, start: usize, len: usize },
    Mse { a: NodeId, b: NodeId },
    BlockMatmulNt { a: NodeId, b: NodeId, block: usize },
    BlockMatmul { a: NodeId, b: NodeId, block: usize },
    BlockMeanRows { a: NodeId, block: usize },
    AddBlockRows { a: NodeId, rows: NodeId, block: usize },
    AddTileRows { a: NodeId, tile: NodeId, block: usize },
}

struct Node<'a> {
    shape: Shape,
    values: Storage<'a>,
    op: Op,
    // f64-accumulated value of scalar reductions, kept for numerical probes.
    acc64: Option<f64>,
}

/// Gradients indexed by node id, returned by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Vec<f32>>,
}

impl Gradients {
    pub fn grad(&self, id: NodeId) -> &[f32] {
        &self.grads[id.0]
    }
}

/// Recording tape. Consumed (cleared) by the backward pass.
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

impl<'a> Tape<'a> {
    pub fn new() -> Tape<'a> {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Shape, values: Vec<f32>, op: Op) -> NodeId {
        self.push_full(shape, Storage::Owned(values), op, None)
    }

    fn push_full(&mut self, shape: Shape, values: Storage<'a>, op: Op, acc64: Option<f64>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { shape, values, op, acc64 });
        id
    }

    /// Owned leaf.
    pub fn input(&mut self, arr: Array) -> NodeId {
        let shape = arr.shape();
        self.push(shape, arr.into_values(), Op::Leaf)
    }

    /// Zero-copy leaf over borrowed parameter storage.
    pub fn param(&mut self, arr: &'a Array) -> NodeId {
        self.push_full(arr.shape(), Storage::Borrowed(arr.values()), Op::Leaf, None)
    }

    /// Zero-copy leaf over a borrowed slice.
    pub fn leaf_slice(&mut self, values: &'a [f32], shape: Shape) -> Result<NodeId, TensorError> {
        if values.len() != shape.numel() {
            return Err(TensorError::LengthMismatch {
                shape: shape.to_string(),
                expected: shape.numel(),
                got: values.len(),
            });
        }
        Ok(self.push_full(shape, Storage::Borrowed(values), Op::Leaf, None))
    }

    pub fn shape(&self, id: NodeId) -> Shape {
        self.nodes[id.0].shape
    }

    pub fn values(&self, id: NodeId) -> &[f32] {
        self.nodes[id.0].values.as_slice()
    }

    /// Scalar value of a 1-element node, at the precision it was
    /// accumulated in (f64 for reductions, f32 otherwise).
    pub fn scalar_f64(&self, id: NodeId) -> f64 {
        let node = &self.nodes[id.0];
        node.acc64.unwrap_or_else(|| node.values.as_slice()[0] as f64)
    }

    fn mat_dims(&self, id: NodeId, op: &'static str) -> Result<(usize, usize), TensorError> {
        let sh = self.nodes[id.0].shape;
        if sh.rank() > 2 {
            return Err(TensorError::BadShape { op, shape: sh.to_string() });
        }
        Ok((sh.rows(), sh.cols()))
    }

    /// Standard product A[m,k] * B[k,n].
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (m, ka) = self.mat_dims(a, "matmul")?;
        let (kb, n) = self.mat_dims(b, "matmul")?;
        if ka != kb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.nodes[a.0].shape.to_string(),
                rhs: self.nodes[b.0].shape.to_string(),
            });
        }
        let mut out = vec![0.0f32; m * n];
        matmul_nn(self.values(a), self.values(b), m, ka, n, &mut out);
        Ok(self.push(Shape::d2(m, n), out, Op::Matmul { a, b }))
    }

    /// Product against a transposed right operand: A[m,k] * B[n,k]^T.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (m, ka) = self.mat_dims(a, "matmul_nt")?;
        let (n, kb) = self.mat_dims(b, "matmul_nt")?;
        if ka != kb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_nt",
                lhs: self.nodes[a.0].shape.to_string(),
                rhs: self.nodes[b.0].shape.to_string(),
            });
        }
        let mut out = vec![0.0f32; m * n];
        matmul_nt(self.values(a), self.values(b), m, ka, n, &mut out);
        Ok(self.push(Shape::d2(m, n), out, Op::MatmulNt { a, b }))
    }

    /// Affine map X[m,k] * W[k,n] + bias[n] broadcast over rows.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (m, kx) = self.mat_dims(x, "linear")?;
        let (kw, n) = self.mat_dims(w, "linear")?;
        if kx != kw || self.nodes[b.0].shape.numel() != n {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                lhs: format!("{}*{}", self.nodes[x.0].shape, self.nodes[w.0].shape),
                rhs: self.nodes[b.0].shape.to_string(),
            });
        }
        let mut out = vec![0.0f32; m * n];
        matmul_nn(self.values(x), self.values(w), m, kx, n, &mut out);
        let bias = self.values(b);
        for row in out.chunks_exact_mut(n) {
            for (o, &bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        Ok(self.push(Shape::d2(m, n), out, Op::Linear { x, w, b }))
    }

    fn binary_shapes(
        &self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
    ) -> Result<Shape, TensorError> {
        let sa = self.nodes[a.0].shape;
        let sb = self.nodes[b.0].shape;
        if sa.dims() == sb.dims() {
            Ok(sa)
        } else if sb.numel() == 1 {
            Ok(sa)
        } else if sa.numel() == 1 {
            Ok(sb)
        } else {
            Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.to_string(),
                rhs: sb.to_string(),
            })
        }
    }

    fn pointwise_binary(
        &mut self,
        opname: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f32, f32) -> f32,
        op: Op,
    ) -> Result<NodeId, TensorError> {
        let shape = self.binary_shapes(opname, a, b)?;
        let va = self.values(a);
        let vb = self.values(b);
        let out = if va.len() == vb.len() {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        } else if vb.len() == 1 {
            va.iter().map(|&x| f(x, vb[0])).collect()
        } else {
            vb.iter().map(|&y| f(va[0], y)).collect()
        };
        Ok(self.push(shape, out, op))
    }

    /// Pointwise sum; equal shapes or one scalar operand.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.pointwise_binary("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.pointwise_binary("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    /// Hadamard product; equal shapes or one scalar operand.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.pointwise_binary("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&mut self, a: NodeId, c: f32) -> NodeId {
        let shape = self.nodes[a.0].shape;
        let out = self.values(a).iter().map(|&x| x * c).collect();
        self.push(shape, out, Op::Scale { a, c })
    }

    /// Broadcast-add a row vector to every row of a matrix.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId, TensorError> {
        let (m, n) = self.mat_dims(a, "add_row")?;
        if self.nodes[row.0].shape.numel() != n {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: self.nodes[a.0].shape.to_string(),
                rhs: self.nodes[row.0].shape.to_string(),
            });
        }
        let rv = self.values(row);
        let mut out = self.values(a).to_vec();
        for chunk in out.chunks_exact_mut(n) {
            for (o, &r) in chunk.iter_mut().zip(rv) {
                *o += r;
            }
        }
        let _ = m;
        let shape = self.nodes[a.0].shape;
        Ok(self.push(shape, out, Op::AddRow { a, row }))
    }

    fn unary(&mut self, a: NodeId, f: impl Fn(f32) -> f32, op: Op) -> NodeId {
        let shape = self.nodes[a.0].shape;
        let out = self.values(a).iter().map(|&x| f(x)).collect();
        self.push(shape, out, op)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.max(0.0), Op::Relu { a })
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, gelu_value, Op::Gelu { a })
    }

    pub fn sin(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f32::sin, Op::Sin { a })
    }

    pub fn cos(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f32::cos, Op::Cos { a })
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let (m, n) = self.mat_dims(a, "softmax_rows")?;
        let va = self.values(a);
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            let row = &va[i * n..(i + 1) * n];
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f64;
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &x) in orow.iter_mut().zip(row) {
                let e = ((x - max) as f64).exp();
                *o = e as f32;
                sum += e;
            }
            let inv = (1.0 / sum) as f32;
            for o in orow.iter_mut() {
                *o *= inv;
            }
        }
        let shape = self.nodes[a.0].shape;
        Ok(self.push(shape, out, Op::SoftmaxRows { a }))
    }

    /// Per-row standardization followed by a learned affine map.
    pub fn layer_norm(
        &mut self,
        a: NodeId,
        gain: NodeId,
        bias: NodeId,
    ) -> Result<NodeId, TensorError> {
        let (m, n) = self.mat_dims(a, "layer_norm")?;
        if n < 2 {
            return Err(TensorError::BadShape {
                op: "layer_norm",
                shape: self.nodes[a.0].shape.to_string(),
            });
        }
        if self.nodes[gain.0].shape.numel() != n || self.nodes[bias.0].shape.numel() != n {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: self.nodes[a.0].shape.to_string(),
                rhs: format!(
                    "gain {} bias {}",
                    self.nodes[gain.0].shape,
                    self.nodes[bias.0].shape
                ),
            });
        }
        let va = self.values(a);
        let vg = self.values(gain);
        let vb = self.values(bias);
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            let row = &va[i * n..(i + 1) * n];
            let (mean, inv_std) = row_moments(row);
            for (j, (o, &x)) in out[i * n..(i + 1) * n].iter_mut().zip(row).enumerate() {
                let xhat = (x as f64 - mean) * inv_std;
                *o = (xhat * vg[j] as f64 + vb[j] as f64) as f32;
            }
        }
        let shape = self.nodes[a.0].shape;
        Ok(self.push(shape, out, Op::LayerNorm { a, gain, bias }))
    }

    /// Column means: [m,n] -> [1,n].
    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let (m, n) = self.mat_dims(a, "mean_rows")?;
        let va = self.values(a);
        let mut acc = vec![0.0f64; n];
        for row in va.chunks_exact(n) {
            for (o, &x) in acc.iter_mut().zip(row) {
                *o += x as f64;
            }
        }
        let out = acc.iter().map(|&s| (s / m as f64) as f32).collect();
        Ok(self.push(Shape::d2(1, n), out, Op::MeanRows { a }))
    }

    /// Column-wise concatenation of two matrices with equal row counts.
    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (ma, na) = self.mat_dims(a, "concat_cols")?;
        let (mb, nb) = self.mat_dims(b, "concat_cols")?;
        if ma != mb {
            return Err(TensorError::ShapeMismatch {
                op: "concat_cols",
                lhs: self.nodes[a.0].shape.to_string(),
                rhs: self.nodes[b.0].shape.to_string(),
            });
        }
        let va = self.values(a);
        let vb = self.values(b);
        let mut out = Vec::with_capacity(ma * (na + nb));
        for i in 0..ma {
            out.extend_from_slice(&va[i * na..(i + 1) * na]);
            out.extend_from_slice(&vb[i * nb..(i + 1) * nb]);
        }
        Ok(self.push(Shape::d2(ma, na + nb), out, Op::ConcatCols { a, b }))
    }

    /// Column slice [m, start..start+len].
    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId, TensorError> {
        let (m, n) = self.mat_dims(a, "slice_cols")?;
        if start + len > n || len == 0 {
            return Err(TensorError::BadShape {
                op: "slice_cols",
                shape: format!("{}..{} of {}", start, start + len, self.nodes[a.0].shape),
            });
        }
        let va = self.values(a);
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&va[i * n + start..i * n + start + len]);
        }
        Ok(self.push(Shape::d2(m, len), out, Op::SliceCols { a, start, len }))
    }

    /// Mean of squared differences; differentiable w.r.t. both operands.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let sa = self.nodes[a.0].shape;
        let sb = self.nodes[b.0].shape;
        if sa.dims() != sb.dims() {
            return Err(TensorError::ShapeMismatch {
                op: "mse",
                lhs: sa.to_string(),
                rhs: sb.to_string(),
            });
        }
        let va = self.values(a);
        let vb = self.values(b);
        let mut acc = 0.0f64;
        for (&x, &y) in va.iter().zip(vb) {
            let d = x as f64 - y as f64;
            acc += d * d;
        }
        let mean = acc / va.len() as f64;
        Ok(self.push_full(
            Shape::d1(1),
            Storage::Owned(vec![mean as f32]),
            Op::Mse { a, b },
            Some(mean),
        ))
    }

    fn block_count(&self, id: NodeId, block: usize, op: &'static str) -> Result<usize, TensorError> {
        let rows = self.nodes[id.0].shape.rows();
        if block == 0 || rows % block != 0 {
            return Err(TensorError::BadShape {
                op,
                shape: format!("{} rows in blocks of {block}", rows),
            });
        }
        Ok(rows / block)
    }

    /// Per-block product against the transposed right operand: both
    /// operands are stacks of [block, k] matrices; each block's result is
    /// A_g * B_g^T, stacked into [rows, block].
    pub fn block_matmul_nt(
        &mut self,
        a: NodeId,
        b: NodeId,
        block: usize,
    ) -> Result<NodeId, TensorError> {
        let (ra, ka) = self.mat_dims(a, "block_matmul_nt")?;
        let (rb, kb) = self.mat_dims(b, "block_matmul_nt")?;
        if ra != rb || ka != kb {
            return Err(TensorError::ShapeMismatch {
                op: "block_matmul_nt",
                lhs: self.nodes[a.0].shape.to_string(),
                rhs: self.nodes[b.0].shape.to_string(),
            });
        }
        let groups = self.block_count(a, block, "block_matmul_nt")?;
        let va = self.values(a);
        let vb = self.values(b);
        let mut out = vec![0.0f32; ra * block];
        for g in 0..groups {
            let astart = g * block * ka;
            let a_g = &va[astart..astart + block * ka];
            let b_g = &vb[astart..astart + block * ka];
            matmul_nt(a_g, b_g, block, ka, block, &mut out[g * block * block..(g + 1) * block * block]);
        }
        Ok(self.push(Shape::d2(ra, block), out, Op::BlockMatmulNt { a, b, block }))
    }

    /// Per-block product: A is a stack of [block, block] matrices
    /// (e.g. attention weights), B a stack of [block, k]; each block's
    /// result is A_g * B_g.
    pub fn block_matmul(
        &mut self,
        a: NodeId,
        b: NodeId,
        block: usize,
    ) -> Result<NodeId, TensorError> {
        let (ra, ca) = self.mat_dims(a, "block_matmul")?;
        let (rb, k) = self.mat_dims(b, "block_matmul")?;
        if ra != rb || ca != block {
            return Err(TensorError::ShapeMismatch {
                op: "block_matmul",
                lhs: self.nodes[a.0].shape.to_string(),
                rhs: self.nodes[b.0].shape.to_string(),
            });
        }
        let groups = self.block_count(a, block, "block_matmul")?;
        let va = self.values(a);
        let vb = self.values(b);
        let mut out = vec![0.0f32; rb * k];
        for g in 0..groups {
            let a_g = &va[g * block * block..(g + 1) * block * block];
            let b_g = &vb[g * block * k..(g + 1) * block * k];
            matmul_nn(a_g, b_g, block, block, k, &mut out[g * block * k..(g + 1) * block * k]);
        }
        Ok(self.push(Shape::d2(rb, k), out, Op::BlockMatmul { a, b, block }))
    }

    /// Mean over each block of rows: [groups*block, d] -> [groups, d].
    pub fn block_mean_rows(&mut self, a: NodeId, block: usize) -> Result<NodeId, TensorError> {
        let (_, d) = self.mat_dims(a, "block_mean_rows")?;
        let groups = self.block_count(a, block, "block_mean_rows")?;
        let va = self.values(a);
        let mut out = vec![0.0f32; groups * d];
        let inv = 1.0 / block as f64;
        for g in 0..groups {
            let mut acc = vec![0.0f64; d];
            for row in va[g * block * d..(g + 1) * block * d].chunks_exact(d) {
                for (o, &x) in acc.iter_mut().zip(row) {
                    *o += x as f64;
                }
            }
            for (o, &s) in out[g * d..(g + 1) * d].iter_mut().zip(acc.iter()) {
                *o = (s * inv) as f32;
            }
        }
        Ok(self.push(Shape::d2(groups, d), out, Op::BlockMeanRows { a, block }))
    }

    /// Add one row vector per block to every row of that block:
    /// a[groups*block, d] + rows[groups, d].
    pub fn add_block_rows(&mut self, a: NodeId, rows: NodeId) -> Result<NodeId, TensorError> {
        let (ra, d) = self.mat_dims(a, "add_block_rows")?;
        let (groups, dr) = self.mat_dims(rows, "add_block_rows")?;
        if dr != d || groups == 0 || ra % groups != 0 {
            return Err(TensorError::ShapeMismatch {
                op: "add_block_rows",
                lhs: self.nodes[a.0].shape.to_string(),
                rhs: self.nodes[rows.0].shape.to_string(),
            });
        }
        let block = ra / groups;
        let vr = self.values(rows);
        let mut out = self.values(a).to_vec();
        for g in 0..groups {
            let r = &vr[g * d..(g + 1) * d];
            for row in out[g * block * d..(g + 1) * block * d].chunks_exact_mut(d) {
                for (o, &v) in row.iter_mut().zip(r) {
                    *o += v;
                }
            }
        }
        let shape = self.nodes[a.0].shape;
        Ok(self.push(shape, out, Op::AddBlockRows { a, rows, block }))
    }

    /// Add the same [block, d] tile to every block of rows (e.g. a learned
    /// per-position embedding repeated across a batch).
    pub fn add_tile_rows(&mut self, a: NodeId, tile: NodeId) -> Result<NodeId, TensorError> {
        let (ra, d) = self.mat_dims(a, "add_tile_rows")?;
        let (block, dt) = self.mat_dims(tile, "add_tile_rows")?;
        if dt != d || block == 0 || ra % block != 0 {
            return Err(TensorError::ShapeMismatch {
                op: "add_tile_rows",
                lhs: self.nodes[a.0].shape.to_string(),
                rhs: self.nodes[tile.0].shape.to_string(),
            });
        }
        let vt = self.values(tile);
        let mut out = self.values(a).to_vec();
        for chunk in out.chunks_exact_mut(block * d) {
            for (o, &v) in chunk.iter_mut().zip(vt) {
                *o += v;
            }
        }
        let shape = self.nodes[a.0].shape;
        Ok(self.push(shape, out, Op::AddTileRows { a, tile, block }))
    }

    /// Backward pass from a scalar loss. Visits nodes in exact reverse
    /// execution order, accumulating into per-node gradient buffers,
    /// and consumes (clears) the tape.
    pub fn backward(self, loss: NodeId) -> Result<Gradients, TensorError> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.shape.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: loss_node.shape.to_string(),
            });
        }
        let mut grads: Vec<Vec<f32>> = self
            .nodes
            .iter()
            .map(|n| vec![0.0f32; n.shape.numel()])
            .collect();
        grads[loss.0][0] = 1.0;

        for i in (0..self.nodes.len()).rev() {
            let node = &self.nodes[i];
            let (lo, hi) = grads.split_at_mut(i);
            let g: &[f32] = &hi[0];
            match node.op {
                Op::Leaf => {}
                Op::Matmul { a, b } => {
                    let (m, k) = (self.nodes[a.0].shape.rows(), self.nodes[a.0].shape.cols());
                    let n = node.shape.cols();
                    let mut da = vec![0.0f32; m * k];
                    matmul_nt(g, self.values(b), m, n, k, &mut da);
                    add_into(&mut lo[a.0], &da);
                    let mut db = vec![0.0f32; k * n];
                    matmul_tn(self.values(a), g, m, k, n, &mut db);
                    add_into(&mut lo[b.0], &db);
                }
                Op::MatmulNt { a, b } => {
                    // C = A B^T: dA = G B, dB = G^T A
                    let (m, k) = (self.nodes[a.0].shape.rows(), self.nodes[a.0].shape.cols());
                    let n = node.shape.cols();
                    let mut da = vec![0.0f32; m * k];
                    matmul_nn(g, self.values(b), m, n, k, &mut da);
                    add_into(&mut lo[a.0], &da);
                    let mut db = vec![0.0f32; n * k];
                    matmul_tn(g, self.values(a), m, n, k, &mut db);
                    add_into(&mut lo[b.0], &db);
                }
                Op::Linear { x, w, b } => {
                    let (m, k) = (self.nodes[x.0].shape.rows(), self.nodes[x.0].shape.cols());
                    let n = node.shape.cols();
                    let mut dx = vec![0.0f32; m * k];
                    matmul_nt(g, self.values(w), m, n, k, &mut dx);
                    add_into(&mut lo[x.0], &dx);
                    let mut dw = vec![0.0f32; k * n];
                    matmul_tn(self.values(x), g, m, k, n, &mut dw);
                    add_into(&mut lo[w.0], &dw);
                    add_col_sums(&mut lo[b.0], g, n);
                }
                Op::Add { a, b } => {
                    accumulate_broadcast(&mut lo[a.0], g, 1.0, None);
                    accumulate_broadcast(&mut lo[b.0], g, 1.0, None);
                }
                Op::Sub { a, b } => {
                    accumulate_broadcast(&mut lo[a.0], g, 1.0, None);
                    accumulate_broadcast(&mut lo[b.0], g, -1.0, None);
                }
                Op::Mul { a, b } => {
                    let va = self.nodes[a.0].values.as_slice();
                    let vb = self.nodes[b.0].values.as_slice();
                    accumulate_broadcast(&mut lo[a.0], g, 1.0, Some(vb));
                    accumulate_broadcast(&mut lo[b.0], g, 1.0, Some(va));
                }
                Op::Scale { a, c } => {
                    for (o, &gv) in lo[a.0].iter_mut().zip(g) {
                        *o += c * gv;
                    }
                }
                Op::AddRow { a, row } => {
                    add_into(&mut lo[a.0], g);
                    let n = self.nodes[row.0].shape.numel();
                    add_col_sums(&mut lo[row.0], g, n);
                }
                Op::Relu { a } => {
                    let va = self.nodes[a.0].values.as_slice();
                    for ((o, &gv), &x) in lo[a.0].iter_mut().zip(g).zip(va) {
                        if x > 0.0 {
                            *o += gv;
                        }
                    }
                }
                Op::Gelu { a } => {
                    let va = self.nodes[a.0].values.as_slice();
                    for ((o, &gv), &x) in lo[a.0].iter_mut().zip(g).zip(va) {
                        *o += gv * gelu_grad(x);
                    }
                }
                Op::Sin { a } => {
                    let va = self.nodes[a.0].values.as_slice();
                    for ((o, &gv), &x) in lo[a.0].iter_mut().zip(g).zip(va) {
                        *o += gv * x.cos();
                    }
                }
                Op::Cos { a } => {
                    let va = self.nodes[a.0].values.as_slice();
                    for ((o, &gv), &x) in lo[a.0].iter_mut().zip(g).zip(va) {
                        *o -= gv * x.sin();
                    }
                }
                Op::SoftmaxRows { a } => {
                    let s = node.values.as_slice();
                    let n = node.shape.cols();
                    let da = &mut lo[a.0];
                    for i in 0..node.shape.rows() {
                        let srow = &s[i * n..(i + 1) * n];
                        let grow = &g[i * n..(i + 1) * n];
                        let mut dot = 0.0f64;
                        for (&sv, &gv) in srow.iter().zip(grow) {
                            dot += sv as f64 * gv as f64;
                        }
                        for ((o, &sv), &gv) in
                            da[i * n..(i + 1) * n].iter_mut().zip(srow).zip(grow)
                        {
                            *o += (sv as f64 * (gv as f64 - dot)) as f32;
                        }
                    }
                }
                Op::LayerNorm { a, gain, bias } => {
                    let va = self.nodes[a.0].values.as_slice();
                    let vg = self.nodes[gain.0].values.as_slice();
                    let n = node.shape.cols();
                    let m = node.shape.rows();
                    let nf = n as f64;
                    for i in 0..m {
                        let row = &va[i * n..(i + 1) * n];
                        let grow = &g[i * n..(i + 1) * n];
                        let (mean, inv_std) = row_moments(row);
                        let mut dxhat = vec![0.0f64; n];
                        let mut xhat = vec![0.0f64; n];
                        let mut sum_dxhat = 0.0f64;
                        let mut sum_dxhat_xhat = 0.0f64;
                        for j in 0..n {
                            xhat[j] = (row[j] as f64 - mean) * inv_std;
                            dxhat[j] = grow[j] as f64 * vg[j] as f64;
                            sum_dxhat += dxhat[j];
                            sum_dxhat_xhat += dxhat[j] * xhat[j];
                        }
                        for j in 0..n {
                            let dg = grow[j] as f64;
                            lo[gain.0][j] += (dg * xhat[j]) as f32;
                            lo[bias.0][j] += grow[j];
                            let dx = inv_std / nf
                                * (nf * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                            lo[a.0][i * n + j] += dx as f32;
                        }
                    }
                }
                Op::MeanRows { a } => {
                    let m = self.nodes[a.0].shape.rows();
                    let n = node.shape.cols();
                    let inv = 1.0 / m as f32;
                    for (chunk, _) in lo[a.0].chunks_exact_mut(n).zip(0..m) {
                        for (o, &gv) in chunk.iter_mut().zip(g) {
                            *o += gv * inv;
                        }
                    }
                }
                Op::ConcatCols { a, b } => {
                    let na = self.nodes[a.0].shape.cols();
                    let nb = self.nodes[b.0].shape.cols();
                    let m = node.shape.rows();
                    for i in 0..m {
                        let grow = &g[i * (na + nb)..(i + 1) * (na + nb)];
                        for (o, &gv) in lo[a.0][i * na..(i + 1) * na].iter_mut().zip(&grow[..na]) {
                            *o += gv;
                        }
                        for (o, &gv) in lo[b.0][i * nb..(i + 1) * nb].iter_mut().zip(&grow[na..]) {
                            *o += gv;
                        }
                    }
                }
                Op::SliceCols { a, start, len } => {
                    let n = self.nodes[a.0].shape.cols();
                    let m = node.shape.rows();
                    for i in 0..m {
                        let grow = &g[i * len..(i + 1) * len];
                        let dst = &mut lo[a.0][i * n + start..i * n + start + len];
                        for (o, &gv) in dst.iter_mut().zip(grow) {
                            *o += gv;
                        }
                    }
                }
                Op::Mse { a, b } => {
                    let va = self.nodes[a.0].values.as_slice();
                    let vb = self.nodes[b.0].values.as_slice();
                    let scale = g[0] as f64 * 2.0 / va.len() as f64;
                    for (j, (&x, &y)) in va.iter().zip(vb).enumerate() {
                        let d = (scale * (x as f64 - y as f64)) as f32;
                        lo[a.0][j] += d;
                        lo[b.0][j] -= d;
                    }
                }
                Op::BlockMatmulNt { a, b, block } => {
                    // per block: dA_g += G_g B_g, dB_g += G_g^T A_g
                    let k = self.nodes[a.0].shape.cols();
                    let groups = self.nodes[a.0].shape.rows() / block;
                    let va = self.nodes[a.0].values.as_slice();
                    let vb = self.nodes[b.0].values.as_slice();
                    let mut scratch = vec![0.0f32; block * k];
                    for gi in 0..groups {
                        let gr = &g[gi * block * block..(gi + 1) * block * block];
                        let astart = gi * block * k;
                        matmul_nn(gr, &vb[astart..astart + block * k], block, block, k, &mut scratch);
                        add_into(&mut lo[a.0][astart..astart + block * k], &scratch);
                        matmul_tn(gr, &va[astart..astart + block * k], block, block, k, &mut scratch);
                        add_into(&mut lo[b.0][astart..astart + block * k], &scratch);
                    }
                }
                Op::BlockMatmul { a, b, block } => {
                    // per block: dA_g += G_g B_g^T, dB_g += A_g^T G_g
                    let k = self.nodes[b.0].shape.cols();
                    let groups = self.nodes[b.0].shape.rows() / block;
                    let va = self.nodes[a.0].values.as_slice();
                    let vb = self.nodes[b.0].values.as_slice();
                    let mut da = vec![0.0f32; block * block];
                    let mut db = vec![0.0f32; block * k];
                    for gi in 0..groups {
                        let gr = &g[gi * block * k..(gi + 1) * block * k];
                        let b_g = &vb[gi * block * k..(gi + 1) * block * k];
                        let a_g = &va[gi * block * block..(gi + 1) * block * block];
                        matmul_nt(gr, b_g, block, k, block, &mut da);
                        add_into(&mut lo[a.0][gi * block * block..(gi + 1) * block * block], &da);
                        matmul_tn(a_g, gr, block, block, k, &mut db);
                        add_into(&mut lo[b.0][gi * block * k..(gi + 1) * block * k], &db);
                    }
                }
                Op::BlockMeanRows { a, block } => {
                    let d = node.shape.cols();
                    let groups = node.shape.rows();
                    let inv = 1.0 / block as f32;
                    for gi in 0..groups {
                        let gr = &g[gi * d..(gi + 1) * d];
                        for row in lo[a.0][gi * block * d..(gi + 1) * block * d].chunks_exact_mut(d)
                        {
                            for (o, &gv) in row.iter_mut().zip(gr) {
                                *o += gv * inv;
                            }
                        }
                    }
                }
                Op::AddBlockRows { a, rows, block } => {
                    add_into(&mut lo[a.0], g);
                    let d = node.shape.cols();
                    let groups = self.nodes[rows.0].shape.rows();
                    for gi in 0..groups {
                        let mut acc = vec![0.0f64; d];
                        for row in g[gi * block * d..(gi + 1) * block * d].chunks_exact(d) {
                            for (o, &gv) in acc.iter_mut().zip(row) {
                                *o += gv as f64;
                            }
                        }
                        for (o, &s) in lo[rows.0][gi * d..(gi + 1) * d].iter_mut().zip(acc.iter()) {
                            *o += s as f32;
                        }
                    }
                }
                Op::AddTileRows { a, tile, block } => {
                    add_into(&mut lo[a.0], g);
                    let d = node.shape.cols();
                    let mut acc = vec![0.0f64; block * d];
                    for chunk in g.chunks_exact(block * d) {
                        for (o, &gv) in acc.iter_mut().zip(chunk) {
                            *o += gv as f64;
                        }
                    }
                    for (o, &s) in lo[tile.0].iter_mut().zip(acc.iter()) {
                        *o += s as f32;
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Tape::new()
    }
}

fn row_moments(row: &[f32]) -> (f64, f64) {
    let n = row.len() as f64;
    let mut sum = 0.0f64;
    for &x in row {
        sum += x as f64;
    }
    let mean = sum / n;
    let mut var = 0.0f64;
    for &x in row {
        let d = x as f64 - mean;
        var += d * d;
    }
    var /= n;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    for (o, &v) in dst.iter_mut().zip(src) {
        *o += v;
    }
}

// dst[j] += sum over rows of g[., j], accumulated in f64.
fn add_col_sums(dst: &mut [f32], g: &[f32], n: usize) {
    let mut acc = vec![0.0f64; n];
    for row in g.chunks_exact(n) {
        for (o, &gv) in acc.iter_mut().zip(row) {
            *o += gv as f64;
        }
    }
    for (o, &s) in dst.iter_mut().zip(acc.iter()) {
        *o += s as f32;
    }
}

// Gradient of a possibly scalar-broadcast operand: when the operand is a
// single element, the incoming gradient (times the optional partner
// factor) reduces to an f64 sum.
fn accumulate_broadcast(dst: &mut [f32], g: &[f32], sign: f32, factor: Option<&[f32]>) {
    if dst.len() == g.len() {
        match factor {
            None => {
                for (o, &gv) in dst.iter_mut().zip(g) {
                    *o += sign * gv;
                }
            }
            Some(f) if f.len() == g.len() => {
                for ((o, &gv), &fv) in dst.iter_mut().zip(g).zip(f) {
                    *o += sign * gv * fv;
                }
            }
            Some(f) => {
                // scalar partner
                for (o, &gv) in dst.iter_mut().zip(g) {
                    *o += sign * gv * f[0];
                }
            }
        }
    } else {
        debug_assert_eq!(dst.len(), 1);
        let mut acc = 0.0f64;
        match factor {
            None => {
                for &gv in g {
                    acc += gv as f64;
                }
            }
            Some(f) => {
                for (&gv, &fv) in g.iter().zip(f) {
                    acc += gv as f64 * fv as f64;
                }
            }
        }
        dst[0] += sign * acc as f32;
    }
}
