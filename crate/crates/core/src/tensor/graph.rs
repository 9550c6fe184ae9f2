//! Dense f64 tensors on a reverse-mode differentiation tape.
//!
//! A [`Graph`] owns every tensor produced while building an expression; ops
//! evaluate eagerly and record enough structure for [`Graph::backward`] to
//! walk the tape once in reverse topological order. Creation order is the
//! topological order because an op can only reference nodes that already
//! exist.
//!
//! Values are checked for NaN/Inf after every op: a non-finite value is a
//! reported error, never silent state.

use crate::error::{Error, Result};

/// Dense n-dimensional f64 tensor in row-major order.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Build a tensor, validating that the shape matches the payload and
    /// every value is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero dimension in shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} implies {numel} elements, got {}",
                data.len()
            )));
        }
        ensure_finite("tensor data", &data)?;
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Result<Self> {
        Tensor::new(vec![1], vec![v])
    }

    pub fn with_requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Accumulated gradient, present only on requires-grad leaves after a
    /// backward pass.
    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }
}

/// Handle to a tensor recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

/// Recorded operation; holds the input handles needed for the backward pass.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: NodeId, b: NodeId },
    Conv2d { x: NodeId, w: NodeId, stride: usize, pad: usize },
    Softmax { x: NodeId, axis: usize },
    BilinearResize { x: NodeId },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    MulScalar { x: NodeId, c: f64 },
    ScaleByGate { x: NodeId, gate: NodeId },
    Relu { x: NodeId },
    Concat { inputs: Vec<NodeId>, axis: usize },
    Mean { x: NodeId },
    Sum { x: NodeId },
    Log { x: NodeId },
    Transpose2d { x: NodeId },
    Reshape { x: NodeId },
    ChannelAffine { x: NodeId, scale: NodeId, bias: NodeId },
    PixelCrossEntropy { logits: NodeId, labels: Vec<u8>, ignore: u8 },
}

struct Node {
    tensor: Tensor,
    op: Op,
}

/// Tape of recorded tensor operations.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record an input tensor. Gradients accumulate on requires-grad leaves.
    pub fn leaf(&mut self, tensor: Tensor) -> NodeId {
        self.push(tensor, Op::Leaf)
    }

    pub fn tensor(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].tensor
    }

    pub fn data(&self, id: NodeId) -> &[f64] {
        self.nodes[id.0].tensor.data()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].tensor.shape()
    }

    /// Value of a single-element tensor.
    pub fn scalar_value(&self, id: NodeId) -> Result<f64> {
        let t = self.tensor(id);
        if t.numel() != 1 {
            return Err(Error::Contract(format!(
                "expected scalar tensor, got shape {:?}",
                t.shape()
            )));
        }
        Ok(t.data()[0])
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].tensor.grad()
    }

    /// Drop every accumulated gradient.
    pub fn clear_grads(&mut self) {
        for node in &mut self.nodes {
            node.tensor.grad = None;
        }
    }

    fn push(&mut self, tensor: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { tensor, op });
        NodeId(self.nodes.len() - 1)
    }

    fn out(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool) -> Result<NodeId> {
        ensure_finite(op_name(&op), &data)?;
        let mut t = Tensor {
            shape,
            data,
            requires_grad,
            grad: None,
        };
        t.requires_grad = requires_grad;
        Ok(self.push(t, op))
    }

    fn needs_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.tensor(*id).requires_grad())
    }

    // ── op builders ─────────────────────────────────────────────────────

    /// Matrix product of `a: [M,K]` and `b: [K,N]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape(format!(
                "matmul expects [M,K]x[K,N], got {sa:?} x {sb:?}"
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_kernel(self.data(a), self.data(b), m, k, n);
        let rg = self.needs_grad(&[a, b]);
        self.out(vec![m, n], data, Op::Matmul { a, b }, rg)
    }

    /// 2-D cross-correlation of `x: [C_in,H,W]` with `w: [C_out,C_in,k,k]`,
    /// zero padding, square odd kernel.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 4 {
            return Err(Error::Shape(format!(
                "conv2d expects x [C,H,W] and w [O,C,k,k], got {sx:?} and {sw:?}"
            )));
        }
        if sw[1] != sx[0] || sw[2] != sw[3] {
            return Err(Error::Shape(format!(
                "conv2d kernel {sw:?} incompatible with input {sx:?}"
            )));
        }
        let k = sw[2];
        if k % 2 == 0 {
            return Err(Error::Config(format!("conv2d kernel size must be odd, got {k}")));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be positive".into()));
        }
        let (h, wid) = (sx[1], sx[2]);
        let oh = conv_out_dim(h, k, stride, pad)?;
        let ow = conv_out_dim(wid, k, stride, pad)?;
        let data = conv2d_kernel(self.data(x), self.data(w), &sx, &sw, stride, pad, oh, ow);
        let rg = self.needs_grad(&[x, w]);
        self.out(vec![sw[0], oh, ow], data, Op::Conv2d { x, w, stride, pad }, rg)
    }

    /// Numerically stable softmax along `axis`; each slice sums to 1.
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape(format!(
                "softmax axis {axis} out of bounds for shape {shape:?}"
            )));
        }
        let data = softmax_kernel(self.data(x), &shape, axis);
        let rg = self.needs_grad(&[x]);
        self.out(shape, data, Op::Softmax { x, axis }, rg)
    }

    /// Bilinear resample of `x: [C,H,W]` with half-pixel-center mapping
    /// (source coordinate `(i + 0.5) * in / out - 0.5`, clamped).
    pub fn bilinear_resize(&mut self, x: NodeId, out_h: usize, out_w: usize) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 {
            return Err(Error::Shape(format!(
                "bilinear_resize expects [C,H,W], got {shape:?}"
            )));
        }
        if out_h == 0 || out_w == 0 {
            return Err(Error::Config("bilinear_resize output dims must be >= 1".into()));
        }
        let data = bilinear_kernel(self.data(x), shape[0], shape[1], shape[2], out_h, out_w);
        let rg = self.needs_grad(&[x]);
        self.out(vec![shape[0], out_h, out_w], data, Op::BilinearResize { x }, rg)
    }

    /// Elementwise sum; shapes must match exactly (no broadcasting).
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(Error::Shape(format!("add shape mismatch: {sa:?} vs {sb:?}")));
        }
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.needs_grad(&[a, b]);
        self.out(sa, data, Op::Add { a, b }, rg)
    }

    /// Elementwise product; shapes must match exactly.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(Error::Shape(format!("mul shape mismatch: {sa:?} vs {sb:?}")));
        }
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.needs_grad(&[a, b]);
        self.out(sa, data, Op::Mul { a, b }, rg)
    }

    /// Multiply by a compile-time constant.
    pub fn mul_scalar(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let data: Vec<f64> = self.data(x).iter().map(|v| v * c).collect();
        let rg = self.needs_grad(&[x]);
        self.out(shape, data, Op::MulScalar { x, c }, rg)
    }

    /// Multiply every element by a learned single-element gate tensor.
    pub fn scale_by_gate(&mut self, x: NodeId, gate: NodeId) -> Result<NodeId> {
        if self.tensor(gate).numel() != 1 {
            return Err(Error::Shape(format!(
                "gate must be a single element, got shape {:?}",
                self.shape(gate)
            )));
        }
        let g = self.data(gate)[0];
        let shape = self.shape(x).to_vec();
        let data: Vec<f64> = self.data(x).iter().map(|v| v * g).collect();
        let rg = self.needs_grad(&[x, gate]);
        self.out(shape, data, Op::ScaleByGate { x, gate }, rg)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let data: Vec<f64> = self.data(x).iter().map(|v| v.max(0.0)).collect();
        let rg = self.needs_grad(&[x]);
        self.out(shape, data, Op::Relu { x }, rg)
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(Error::Shape("concat of zero tensors".into()));
        }
        let first = self.shape(inputs[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::Shape(format!(
                "concat axis {axis} out of bounds for shape {first:?}"
            )));
        }
        let mut axis_total = 0usize;
        for &id in inputs {
            let s = self.shape(id);
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(Error::Shape(format!(
                    "concat shape mismatch on axis {axis}: {:?} vs {:?}",
                    s, first
                )));
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;

        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = vec![0.0; out_shape.iter().product()];
        let mut offset = 0usize;
        for &id in inputs {
            let len_axis = self.shape(id)[axis];
            let src = self.data(id);
            for o in 0..outer {
                let dst_base = (o * axis_total + offset) * inner;
                let src_base = o * len_axis * inner;
                data[dst_base..dst_base + len_axis * inner]
                    .copy_from_slice(&src[src_base..src_base + len_axis * inner]);
            }
            offset += len_axis;
        }
        let rg = self.needs_grad(inputs);
        self.out(
            out_shape,
            data,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        )
    }

    /// Mean over all elements, producing a `[1]` tensor.
    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.tensor(x).numel() as f64;
        let v = self.data(x).iter().sum::<f64>() / n;
        let rg = self.needs_grad(&[x]);
        self.out(vec![1], vec![v], Op::Mean { x }, rg)
    }

    /// Sum over all elements, producing a `[1]` tensor.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.data(x).iter().sum::<f64>();
        let rg = self.needs_grad(&[x]);
        self.out(vec![1], vec![v], Op::Sum { x }, rg)
    }

    /// Natural log; non-positive inputs surface as numeric errors.
    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let data: Vec<f64> = self.data(x).iter().map(|v| v.ln()).collect();
        let rg = self.needs_grad(&[x]);
        self.out(shape, data, Op::Log { x }, rg)
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose2d(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::Shape(format!("transpose2d expects rank 2, got {s:?}")));
        }
        let (m, n) = (s[0], s[1]);
        let data = transpose_kernel(self.data(x), m, n);
        let rg = self.needs_grad(&[x]);
        self.out(vec![n, m], data, Op::Transpose2d { x }, rg)
    }

    /// Reinterpret the data with a new shape of identical element count.
    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.tensor(x).numel() {
            return Err(Error::Shape(format!(
                "reshape {:?} -> {shape:?} changes element count",
                self.shape(x)
            )));
        }
        let data = self.data(x).to_vec();
        let rg = self.needs_grad(&[x]);
        self.out(shape, data, Op::Reshape { x }, rg)
    }

    /// Per-channel affine `y[c,h,w] = scale[c] * x[c,h,w] + bias[c]` on a
    /// `[C,H,W]` tensor. Stands in for running-statistics normalization so
    /// inference stays batch independent.
    pub fn channel_affine(&mut self, x: NodeId, scale: NodeId, bias: NodeId) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 {
            return Err(Error::Shape(format!("channel_affine expects [C,H,W], got {sx:?}")));
        }
        let c = sx[0];
        if self.shape(scale) != [c] || self.shape(bias) != [c] {
            return Err(Error::Shape(format!(
                "channel_affine scale/bias must be [{c}], got {:?}/{:?}",
                self.shape(scale),
                self.shape(bias)
            )));
        }
        let hw = sx[1] * sx[2];
        let mut data = vec![0.0; c * hw];
        {
            let xs = self.data(x);
            let sc = self.data(scale);
            let bi = self.data(bias);
            for ch in 0..c {
                let (s, b) = (sc[ch], bi[ch]);
                for i in 0..hw {
                    data[ch * hw + i] = s * xs[ch * hw + i] + b;
                }
            }
        }
        let rg = self.needs_grad(&[x, scale, bias]);
        self.out(sx, data, Op::ChannelAffine { x, scale, bias }, rg)
    }

    /// Mean cross-entropy of `logits: [C,H,W]` against a flat `H*W` label
    /// buffer; pixels labelled `ignore` are excluded. Produces `[1]`.
    ///
    /// All pixels ignored yields loss 0 (flagged by [`Graph::data`] being 0
    /// with zero contributing pixels; callers that care can pre-count).
    pub fn pixel_cross_entropy(&mut self, logits: NodeId, labels: &[u8], ignore: u8) -> Result<NodeId> {
        let s = self.shape(logits).to_vec();
        if s.len() != 3 {
            return Err(Error::Shape(format!(
                "pixel_cross_entropy expects logits [C,H,W], got {s:?}"
            )));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        if labels.len() != h * w {
            return Err(Error::Shape(format!(
                "label buffer has {} entries, logits are {h}x{w}",
                labels.len()
            )));
        }
        for (i, &lab) in labels.iter().enumerate() {
            if lab != ignore && lab as usize >= c {
                return Err(Error::Data(format!(
                    "label {lab} out of range [0,{c}) at pixel ({},{})",
                    i / w,
                    i % w
                )));
            }
        }
        let value = cross_entropy_value(self.data(logits), labels, ignore, c, h, w);
        let rg = self.needs_grad(&[logits]);
        self.out(
            vec![1],
            vec![value],
            Op::PixelCrossEntropy {
                logits,
                labels: labels.to_vec(),
                ignore,
            },
            rg,
        )
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Walks the tape once in reverse
    /// creation order (reverse topological order) and adds the resulting
    /// gradients onto every requires-grad leaf; repeated calls accumulate
    /// until [`Graph::clear_grads`].
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.tensor(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut scratch: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        scratch[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(upstream) = scratch[idx].take() else {
                continue;
            };
            if !self.nodes[idx].tensor.requires_grad {
                continue;
            }
            match self.nodes[idx].op.clone() {
                Op::Leaf => {
                    let t = &mut self.nodes[idx].tensor;
                    match &mut t.grad {
                        Some(g) => {
                            for (gi, ui) in g.iter_mut().zip(&upstream) {
                                *gi += ui;
                            }
                        }
                        None => t.grad = Some(upstream),
                    }
                }
                Op::Matmul { a, b } => {
                    let (m, k) = {
                        let s = self.shape(a);
                        (s[0], s[1])
                    };
                    let n = self.shape(b)[1];
                    if self.tensor(a).requires_grad() {
                        // dA = dC . B^T
                        let bt = transpose_kernel(self.data(b), k, n);
                        let da = matmul_kernel(&upstream, &bt, m, n, k);
                        accumulate(&mut scratch[a.0], &da);
                    }
                    if self.tensor(b).requires_grad() {
                        // dB = A^T . dC
                        let at = transpose_kernel(self.data(a), m, k);
                        let db = matmul_kernel(&at, &upstream, k, m, n);
                        accumulate(&mut scratch[b.0], &db);
                    }
                }
                Op::Conv2d { x, w, stride, pad } => {
                    let sx = self.shape(x).to_vec();
                    let sw = self.shape(w).to_vec();
                    let so = self.shape(NodeId(idx)).to_vec();
                    if self.tensor(x).requires_grad() {
                        let dx = conv2d_backward_input(&upstream, self.data(w), &sx, &sw, &so, stride, pad);
                        accumulate(&mut scratch[x.0], &dx);
                    }
                    if self.tensor(w).requires_grad() {
                        let dw = conv2d_backward_weight(&upstream, self.data(x), &sx, &sw, &so, stride, pad);
                        accumulate(&mut scratch[w.0], &dw);
                    }
                }
                Op::Softmax { x, axis } => {
                    if self.tensor(x).requires_grad() {
                        let shape = self.shape(NodeId(idx)).to_vec();
                        let y = self.data(NodeId(idx));
                        let dx = softmax_backward(y, &upstream, &shape, axis);
                        accumulate(&mut scratch[x.0], &dx);
                    }
                }
                Op::BilinearResize { x } => {
                    if self.tensor(x).requires_grad() {
                        let sx = self.shape(x).to_vec();
                        let so = self.shape(NodeId(idx)).to_vec();
                        let dx = bilinear_backward(&upstream, sx[0], sx[1], sx[2], so[1], so[2]);
                        accumulate(&mut scratch[x.0], &dx);
                    }
                }
                Op::Add { a, b } => {
                    if self.tensor(a).requires_grad() {
                        accumulate(&mut scratch[a.0], &upstream);
                    }
                    if self.tensor(b).requires_grad() {
                        accumulate(&mut scratch[b.0], &upstream);
                    }
                }
                Op::Mul { a, b } => {
                    if self.tensor(a).requires_grad() {
                        let da: Vec<f64> = upstream.iter().zip(self.data(b)).map(|(u, v)| u * v).collect();
                        accumulate(&mut scratch[a.0], &da);
                    }
                    if self.tensor(b).requires_grad() {
                        let db: Vec<f64> = upstream.iter().zip(self.data(a)).map(|(u, v)| u * v).collect();
                        accumulate(&mut scratch[b.0], &db);
                    }
                }
                Op::MulScalar { x, c } => {
                    if self.tensor(x).requires_grad() {
                        let dx: Vec<f64> = upstream.iter().map(|u| u * c).collect();
                        accumulate(&mut scratch[x.0], &dx);
                    }
                }
                Op::ScaleByGate { x, gate } => {
                    let g = self.data(gate)[0];
                    if self.tensor(x).requires_grad() {
                        let dx: Vec<f64> = upstream.iter().map(|u| u * g).collect();
                        accumulate(&mut scratch[x.0], &dx);
                    }
                    if self.tensor(gate).requires_grad() {
                        let dg: f64 = upstream.iter().zip(self.data(x)).map(|(u, v)| u * v).sum();
                        accumulate(&mut scratch[gate.0], &[dg]);
                    }
                }
                Op::Relu { x } => {
                    if self.tensor(x).requires_grad() {
                        // subgradient 0 at the kink
                        let dx: Vec<f64> = upstream
                            .iter()
                            .zip(self.data(x))
                            .map(|(u, v)| if *v > 0.0 { *u } else { 0.0 })
                            .collect();
                        accumulate(&mut scratch[x.0], &dx);
                    }
                }
                Op::Concat { inputs, axis } => {
                    let out_shape = self.shape(NodeId(idx)).to_vec();
                    let outer: usize = out_shape[..axis].iter().product();
                    let inner: usize = out_shape[axis + 1..].iter().product();
                    let axis_total = out_shape[axis];
                    let mut offset = 0usize;
                    for &id in &inputs {
                        let len_axis = self.shape(id)[axis];
                        if self.tensor(id).requires_grad() {
                            let mut dx = vec![0.0; self.tensor(id).numel()];
                            for o in 0..outer {
                                let src_base = (o * axis_total + offset) * inner;
                                let dst_base = o * len_axis * inner;
                                dx[dst_base..dst_base + len_axis * inner]
                                    .copy_from_slice(&upstream[src_base..src_base + len_axis * inner]);
                            }
                            accumulate(&mut scratch[id.0], &dx);
                        }
                        offset += len_axis;
                    }
                }
                Op::Mean { x } => {
                    if self.tensor(x).requires_grad() {
                        let n = self.tensor(x).numel();
                        let v = upstream[0] / n as f64;
                        accumulate(&mut scratch[x.0], &vec![v; n]);
                    }
                }
                Op::Sum { x } => {
                    if self.tensor(x).requires_grad() {
                        let n = self.tensor(x).numel();
                        accumulate(&mut scratch[x.0], &vec![upstream[0]; n]);
                    }
                }
                Op::Log { x } => {
                    if self.tensor(x).requires_grad() {
                        let dx: Vec<f64> = upstream.iter().zip(self.data(x)).map(|(u, v)| u / v).collect();
                        accumulate(&mut scratch[x.0], &dx);
                    }
                }
                Op::Transpose2d { x } => {
                    if self.tensor(x).requires_grad() {
                        let so = self.shape(NodeId(idx)).to_vec();
                        let dx = transpose_kernel(&upstream, so[0], so[1]);
                        accumulate(&mut scratch[x.0], &dx);
                    }
                }
                Op::Reshape { x } => {
                    if self.tensor(x).requires_grad() {
                        accumulate(&mut scratch[x.0], &upstream);
                    }
                }
                Op::ChannelAffine { x, scale, bias } => {
                    let sx = self.shape(x).to_vec();
                    let (c, hw) = (sx[0], sx[1] * sx[2]);
                    if self.tensor(x).requires_grad() {
                        let sc = self.data(scale);
                        let mut dx = vec![0.0; c * hw];
                        for ch in 0..c {
                            for i in 0..hw {
                                dx[ch * hw + i] = upstream[ch * hw + i] * sc[ch];
                            }
                        }
                        accumulate(&mut scratch[x.0], &dx);
                    }
                    if self.tensor(scale).requires_grad() {
                        let xs = self.data(x);
                        let mut ds = vec![0.0; c];
                        for ch in 0..c {
                            for i in 0..hw {
                                ds[ch] += upstream[ch * hw + i] * xs[ch * hw + i];
                            }
                        }
                        accumulate(&mut scratch[scale.0], &ds);
                    }
                    if self.tensor(bias).requires_grad() {
                        let mut db = vec![0.0; c];
                        for ch in 0..c {
                            for i in 0..hw {
                                db[ch] += upstream[ch * hw + i];
                            }
                        }
                        accumulate(&mut scratch[bias.0], &db);
                    }
                }
                Op::PixelCrossEntropy { logits, labels, ignore } => {
                    if self.tensor(logits).requires_grad() {
                        let s = self.shape(logits).to_vec();
                        let dx = cross_entropy_backward(
                            self.data(logits),
                            &labels,
                            ignore,
                            s[0],
                            s[1],
                            s[2],
                            upstream[0],
                        );
                        accumulate(&mut scratch[logits.0], &dx);
                    }
                }
            }
        }
        Ok(())
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: &[f64]) {
    match slot {
        Some(buf) => {
            for (b, d) in buf.iter_mut().zip(delta) {
                *b += d;
            }
        }
        None => *slot = Some(delta.to_vec()),
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Matmul { .. } => "matmul",
        Op::Conv2d { .. } => "conv2d",
        Op::Softmax { .. } => "softmax",
        Op::BilinearResize { .. } => "bilinear_resize",
        Op::Add { .. } => "add",
        Op::Mul { .. } => "mul",
        Op::MulScalar { .. } => "mul_scalar",
        Op::ScaleByGate { .. } => "scale_by_gate",
        Op::Relu { .. } => "relu",
        Op::Concat { .. } => "concat",
        Op::Mean { .. } => "mean",
        Op::Sum { .. } => "sum",
        Op::Log { .. } => "log",
        Op::Transpose2d { .. } => "transpose2d",
        Op::Reshape { .. } => "reshape",
        Op::ChannelAffine { .. } => "channel_affine",
        Op::PixelCrossEntropy { .. } => "pixel_cross_entropy",
    }
}

fn ensure_finite(what: &str, data: &[f64]) -> Result<()> {
    for (i, v) in data.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite value {v} in {what} at flat index {i}"
            )));
        }
    }
    Ok(())
}

// ── kernels ─────────────────────────────────────────────────────────────

fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

fn transpose_kernel(x: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = x[i * n + j];
        }
    }
    out
}

fn conv_out_dim(inp: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = inp + 2 * pad;
    if padded < k {
        return Err(Error::Config(format!(
            "conv2d kernel {k} larger than padded input {padded}"
        )));
    }
    if (padded - k) % stride != 0 {
        return Err(Error::Config(format!(
            "conv2d output size not integral: ({inp} + 2*{pad} - {k}) / {stride}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

fn conv2d_kernel(
    x: &[f64],
    w: &[f64],
    sx: &[usize],
    sw: &[usize],
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let (cin, h, wid) = (sx[0], sx[1], sx[2]);
    let (cout, k) = (sw[0], sw[2]);
    let mut out = vec![0.0; cout * oh * ow];
    for oc in 0..cout {
        for ic in 0..cin {
            let wbase = (oc * cin + ic) * k * k;
            let xbase = ic * h * wid;
            for oy in 0..oh {
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let xrow = xbase + iy as usize * wid;
                    let wrow = wbase + ky * k;
                    let orow = (oc * oh + oy) * ow;
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= wid as isize {
                                continue;
                            }
                            acc += x[xrow + ix as usize] * w[wrow + kx];
                        }
                        out[orow + ox] += acc;
                    }
                }
            }
        }
    }
    out
}

fn conv2d_backward_input(
    dy: &[f64],
    w: &[f64],
    sx: &[usize],
    sw: &[usize],
    so: &[usize],
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let (cin, h, wid) = (sx[0], sx[1], sx[2]);
    let (cout, k) = (sw[0], sw[2]);
    let (oh, ow) = (so[1], so[2]);
    let mut dx = vec![0.0; cin * h * wid];
    for oc in 0..cout {
        for ic in 0..cin {
            let wbase = (oc * cin + ic) * k * k;
            for oy in 0..oh {
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dxrow = ic * h * wid + iy as usize * wid;
                    let wrow = wbase + ky * k;
                    let dyrow = (oc * oh + oy) * ow;
                    for ox in 0..ow {
                        let g = dy[dyrow + ox];
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= wid as isize {
                                continue;
                            }
                            dx[dxrow + ix as usize] += g * w[wrow + kx];
                        }
                    }
                }
            }
        }
    }
    dx
}

fn conv2d_backward_weight(
    dy: &[f64],
    x: &[f64],
    sx: &[usize],
    sw: &[usize],
    so: &[usize],
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let (cin, h, wid) = (sx[0], sx[1], sx[2]);
    let (cout, k) = (sw[0], sw[2]);
    let (oh, ow) = (so[1], so[2]);
    let mut dw = vec![0.0; cout * cin * k * k];
    for oc in 0..cout {
        for ic in 0..cin {
            let wbase = (oc * cin + ic) * k * k;
            let xbase = ic * h * wid;
            for oy in 0..oh {
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let xrow = xbase + iy as usize * wid;
                    let wrow = wbase + ky * k;
                    let dyrow = (oc * oh + oy) * ow;
                    for ox in 0..ow {
                        let g = dy[dyrow + ox];
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= wid as isize {
                                continue;
                            }
                            dw[wrow + kx] += g * x[xrow + ix as usize];
                        }
                    }
                }
            }
        }
    }
    dw
}

fn softmax_kernel(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let axis_len = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| (o * axis_len + a) * inner + i;
            let mut max = f64::NEG_INFINITY;
            for a in 0..axis_len {
                max = max.max(x[at(a)]);
            }
            let mut sum = 0.0;
            for a in 0..axis_len {
                let e = (x[at(a)] - max).exp();
                out[at(a)] = e;
                sum += e;
            }
            for a in 0..axis_len {
                out[at(a)] /= sum;
            }
        }
    }
    out
}

fn softmax_backward(y: &[f64], dy: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let axis_len = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut dx = vec![0.0; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| (o * axis_len + a) * inner + i;
            let mut dot = 0.0;
            for a in 0..axis_len {
                dot += dy[at(a)] * y[at(a)];
            }
            for a in 0..axis_len {
                dx[at(a)] = y[at(a)] * (dy[at(a)] - dot);
            }
        }
    }
    dx
}

/// Four-tap weights for one output coordinate under half-pixel-center
/// mapping, clamped at the borders.
fn bilinear_taps(out_idx: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let src = ((out_idx as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5)
        .clamp(0.0, (in_len - 1) as f64);
    let lo = src.floor() as usize;
    let hi = (lo + 1).min(in_len - 1);
    (lo, hi, src - lo as f64)
}

fn bilinear_kernel(x: &[f64], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * oh * ow];
    let xtaps: Vec<(usize, usize, f64)> = (0..ow).map(|ox| bilinear_taps(ox, w, ow)).collect();
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1, wy) = bilinear_taps(oy, h, oh);
            let row0 = &plane[y0 * w..y0 * w + w];
            let row1 = &plane[y1 * w..y1 * w + w];
            let orow = (ch * oh + oy) * ow;
            for (ox, &(x0, x1, wx)) in xtaps.iter().enumerate() {
                let top = row0[x0] * (1.0 - wx) + row0[x1] * wx;
                let bot = row1[x0] * (1.0 - wx) + row1[x1] * wx;
                out[orow + ox] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    out
}

fn bilinear_backward(dy: &[f64], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let mut dx = vec![0.0; c * h * w];
    let xtaps: Vec<(usize, usize, f64)> = (0..ow).map(|ox| bilinear_taps(ox, w, ow)).collect();
    for ch in 0..c {
        let plane = &mut dx[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1, wy) = bilinear_taps(oy, h, oh);
            let dyrow = (ch * oh + oy) * ow;
            for (ox, &(x0, x1, wx)) in xtaps.iter().enumerate() {
                let g = dy[dyrow + ox];
                plane[y0 * w + x0] += g * (1.0 - wy) * (1.0 - wx);
                plane[y0 * w + x1] += g * (1.0 - wy) * wx;
                plane[y1 * w + x0] += g * wy * (1.0 - wx);
                plane[y1 * w + x1] += g * wy * wx;
            }
        }
    }
    dx
}

fn cross_entropy_value(logits: &[f64], labels: &[u8], ignore: u8, c: usize, h: usize, w: usize) -> f64 {
    let hw = h * w;
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..hw {
        let lab = labels[i];
        if lab == ignore {
            continue;
        }
        let mut max = f64::NEG_INFINITY;
        for ch in 0..c {
            max = max.max(logits[ch * hw + i]);
        }
        let mut sum = 0.0;
        for ch in 0..c {
            sum += (logits[ch * hw + i] - max).exp();
        }
        // -log softmax[label] = log(sum exp) + max - logit[label]
        total += sum.ln() + max - logits[lab as usize * hw + i];
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

fn cross_entropy_backward(
    logits: &[f64],
    labels: &[u8],
    ignore: u8,
    c: usize,
    h: usize,
    w: usize,
    upstream: f64,
) -> Vec<f64> {
    let hw = h * w;
    let count = labels.iter().filter(|&&l| l != ignore).count();
    let mut dx = vec![0.0; c * hw];
    if count == 0 {
        return dx;
    }
    let scale = upstream / count as f64;
    for i in 0..hw {
        let lab = labels[i];
        if lab == ignore {
            continue;
        }
        let mut max = f64::NEG_INFINITY;
        for ch in 0..c {
            max = max.max(logits[ch * hw + i]);
        }
        let mut sum = 0.0;
        for ch in 0..c {
            sum += (logits[ch * hw + i] - max).exp();
        }
        for ch in 0..c {
            let p = (logits[ch * hw + i] - max).exp() / sum;
            let target = if ch == lab as usize { 1.0 } else { 0.0 };
            dx[ch * hw + i] = scale * (p - target);
        }
    }
    dx
}
