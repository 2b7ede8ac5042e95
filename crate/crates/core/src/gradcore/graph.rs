use super::kernels::{self, AttentionGrads, AttentionSaved, AttentionWeights, ConvGeom};
use super::kernels::{CosineSaved, LayerNormSaved};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Conv2d(ConvGeom),
    Depthwise(ConvGeom),
    Linear { rows: usize, d_in: usize, d_out: usize },
    LayerNorm { d: usize, saved: LayerNormSaved },
    Gelu,
    Attention { n: usize, t: usize, d: usize, saved: AttentionSaved },
    GlobalAvgPool { n: usize, c: usize, hw: usize },
    Permute { map: Vec<usize> },
    Reshape,
    Add,
    Mul,
    Scale(f64),
    AddScalar,
    Hinge(f64),
    Sum,
    Mean,
    CosineRows { d: usize, saved: CosineSaved },
    GradScale(f64),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d(_) => "conv2d",
            Op::Depthwise(_) => "depthwise_conv2d",
            Op::Linear { .. } => "linear",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu => "gelu",
            Op::Attention { .. } => "attention",
            Op::GlobalAvgPool { .. } => "global_avg_pool",
            Op::Permute { .. } => "permute",
            Op::Reshape => "reshape",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::AddScalar => "add_scalar",
            Op::Hinge(_) => "hinge",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::CosineRows { .. } => "cosine_rows",
            Op::GradScale(_) => "grad_scale",
        }
    }
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only tape of operations. Nodes only reference earlier nodes, so
/// reverse append order is a valid reverse topological order.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn expect_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::Rank {
            op,
            expected: rank,
            got: t.rank(),
        });
    }
    Ok(())
}

fn expect_dim(op: &'static str, axis: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Dimension {
            op,
            axis,
            expected,
            got,
        });
    }
    Ok(())
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

    /// Adds an input tensor. Only leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last backward pass; `None` when the node does not require grad.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].value.grad()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.name()
    }

    pub fn inputs(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id.0].inputs
    }

    /// Row-stochastic attention weights (N×T×T) saved by an attention node.
    pub fn attention_probs(&self, id: NodeId) -> Option<&[f64]> {
        match &self.nodes[id.0].op {
            Op::Attention { saved, .. } => Some(&saved.probs),
            _ => None,
        }
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn shaped(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).expect("kernel produced inconsistent shape")
    }

    fn conv_geom(
        &self,
        op: &'static str,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
        depthwise: bool,
    ) -> Result<ConvGeom> {
        let (xt, wt, bt) = (self.value(x), self.value(w), self.value(b));
        expect_rank(op, xt, 4)?;
        expect_rank(op, wt, 4)?;
        expect_rank(op, bt, 1)?;
        if stride == 0 {
            return Err(Error::OutOfRange {
                what: "stride",
                value: 0.0,
                range: ">= 1",
            });
        }
        let (n, c_in, h, w_) = (xt.shape()[0], xt.shape()[1], xt.shape()[2], xt.shape()[3]);
        let (c_out, k_in, kh, kw) = (wt.shape()[0], wt.shape()[1], wt.shape()[2], wt.shape()[3]);
        if depthwise {
            expect_dim(op, "weight channels (O)", c_in, c_out)?;
            expect_dim(op, "weight input channels (I)", 1, k_in)?;
        } else {
            expect_dim(op, "input channels (C vs weight I)", k_in, c_in)?;
        }
        expect_dim(op, "bias length", c_out, bt.shape()[0])?;
        if h + 2 * pad < kh {
            return Err(Error::Dimension {
                op,
                axis: "height (kernel larger than padded input)",
                expected: kh,
                got: h + 2 * pad,
            });
        }
        if w_ + 2 * pad < kw {
            return Err(Error::Dimension {
                op,
                axis: "width (kernel larger than padded input)",
                expected: kw,
                got: w_ + 2 * pad,
            });
        }
        Ok(ConvGeom {
            n,
            c_in,
            h,
            w: w_,
            c_out,
            kh,
            kw,
            stride,
            pad,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (w_ + 2 * pad - kw) / stride + 1,
        })
    }

    /// NCHW convolution with an OIHW weight.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, padding: usize) -> Result<NodeId> {
        let g = self.conv_geom("conv2d", x, w, b, stride, padding, false)?;
        let out = kernels::conv2d_forward(&g, self.value(x).data(), self.value(w).data(), self.value(b).data());
        let t = Self::shaped(vec![g.n, g.c_out, g.out_h, g.out_w], out);
        Ok(self.push(Op::Conv2d(g), vec![x, w, b], t))
    }

    /// Per-channel stride-1 convolution with a C×1×kH×kW weight.
    pub fn depthwise_conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, padding: usize) -> Result<NodeId> {
        let g = self.conv_geom("depthwise_conv2d", x, w, b, 1, padding, true)?;
        let out = kernels::depthwise_forward(&g, self.value(x).data(), self.value(w).data(), self.value(b).data());
        let t = Self::shaped(vec![g.n, g.c_in, g.out_h, g.out_w], out);
        Ok(self.push(Op::Depthwise(g), vec![x, w, b], t))
    }

    /// `x · wᵀ + b` over the last axis; leading axes are treated as rows.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xt, wt, bt) = (self.value(x), self.value(w), self.value(b));
        if xt.rank() < 2 {
            return Err(Error::Rank {
                op: "linear",
                expected: 2,
                got: xt.rank(),
            });
        }
        expect_rank("linear", wt, 2)?;
        expect_rank("linear", bt, 1)?;
        let d_in = *xt.shape().last().unwrap();
        let (d_out, w_in) = (wt.shape()[0], wt.shape()[1]);
        expect_dim("linear", "inner (input features vs weight columns)", w_in, d_in)?;
        expect_dim("linear", "bias length", d_out, bt.shape()[0])?;
        let rows = xt.numel() / d_in;
        let out = kernels::linear_forward(xt.data(), rows, d_in, wt.data(), bt.data());
        let mut shape = xt.shape().to_vec();
        *shape.last_mut().unwrap() = d_out;
        let t = Self::shaped(shape, out);
        Ok(self.push(Op::Linear { rows, d_in, d_out }, vec![x, w, b], t))
    }

    /// Normalizes each row over the last axis with population variance.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let (xt, gt, bt) = (self.value(x), self.value(gamma), self.value(beta));
        if !(eps >= 0.0) {
            return Err(Error::OutOfRange {
                what: "layer_norm epsilon",
                value: eps,
                range: ">= 0",
            });
        }
        expect_rank("layer_norm", gt, 1)?;
        expect_rank("layer_norm", bt, 1)?;
        let d = *xt.shape().last().unwrap();
        expect_dim("layer_norm", "gamma length", d, gt.numel())?;
        expect_dim("layer_norm", "beta length", d, bt.numel())?;
        let (out, saved) = kernels::layer_norm_forward(xt.data(), d, gt.data(), bt.data(), eps);
        let t = Self::shaped(xt.shape().to_vec(), out);
        Ok(self.push(Op::LayerNorm { d, saved }, vec![x, gamma, beta], t))
    }

    /// Elementwise GELU, tanh approximation.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let xt = self.value(x);
        let t = Self::shaped(xt.shape().to_vec(), xt.data().iter().map(|&v| kernels::gelu(v)).collect());
        self.push(Op::Gelu, vec![x], t)
    }

    /// Single-head attention over N×T×D tokens:
    /// `softmax((x wq)(x wk)ᵀ / sqrt(D)) (x wv) wo`.
    pub fn attention(&mut self, x: NodeId, wq: NodeId, wk: NodeId, wv: NodeId, wo: NodeId) -> Result<NodeId> {
        let xt = self.value(x);
        expect_rank("attention", xt, 3)?;
        let (n, t, d) = (xt.shape()[0], xt.shape()[1], xt.shape()[2]);
        for (name, id) in [("wq", wq), ("wk", wk), ("wv", wv), ("wo", wo)] {
            let wt = self.value(id);
            expect_rank("attention", wt, 2)?;
            let axis = match name {
                "wq" => "wq rows",
                "wk" => "wk rows",
                "wv" => "wv rows",
                _ => "wo rows",
            };
            expect_dim("attention", axis, d, wt.shape()[0])?;
            expect_dim("attention", axis, d, wt.shape()[1])?;
        }
        let weights = AttentionWeights {
            wq: self.value(wq).data(),
            wk: self.value(wk).data(),
            wv: self.value(wv).data(),
            wo: self.value(wo).data(),
        };
        let (out, saved) = kernels::attention_forward(xt.data(), n, t, d, &weights);
        let tensor = Self::shaped(vec![n, t, d], out);
        Ok(self.push(Op::Attention { n, t, d, saved }, vec![x, wq, wk, wv, wo], tensor))
    }

    /// Mean over spatial positions: N×C×H×W → N×C.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let xt = self.value(x);
        expect_rank("global_avg_pool", xt, 4)?;
        let s = xt.shape();
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let out = xt.data().chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
        let t = Self::shaped(vec![n, c], out);
        Ok(self.push(Op::GlobalAvgPool { n, c, hw }, vec![x], t))
    }

    pub fn permute(&mut self, x: NodeId, axes: &[usize]) -> Result<NodeId> {
        let xt = self.value(x);
        expect_dim("permute", "axes count", xt.rank(), axes.len())?;
        let mut seen = vec![false; axes.len()];
        for &a in axes {
            if a >= axes.len() || seen[a] {
                return Err(Error::InvalidConfig(format!("permute: invalid axes {axes:?}")));
            }
            seen[a] = true;
        }
        let map = kernels::permute_index(xt.shape(), axes);
        let data = map.iter().map(|&i| xt.data()[i]).collect();
        let shape = axes.iter().map(|&a| xt.shape()[a]).collect();
        let t = Self::shaped(shape, data);
        Ok(self.push(Op::Permute { map }, vec![x], t))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let t = self.value(x).reshape(shape)?;
        Ok(self.push(Op::Reshape, vec![x], t))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (at, bt) = (self.value(a), self.value(b));
        expect_rank(op, bt, at.rank())?;
        for (&x, &y) in at.shape().iter().zip(bt.shape()) {
            expect_dim(op, "elementwise operand", x, y)?;
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let (at, bt) = (self.value(a), self.value(b));
        let data = at.data().iter().zip(bt.data()).map(|(x, y)| x + y).collect();
        let t = Self::shaped(at.shape().to_vec(), data);
        Ok(self.push(Op::Add, vec![a, b], t))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let (at, bt) = (self.value(a), self.value(b));
        let data = at.data().iter().zip(bt.data()).map(|(x, y)| x * y).collect();
        let t = Self::shaped(at.shape().to_vec(), data);
        Ok(self.push(Op::Mul, vec![a, b], t))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let xt = self.value(x);
        let t = Self::shaped(xt.shape().to_vec(), xt.data().iter().map(|v| v * factor).collect());
        self.push(Op::Scale(factor), vec![x], t)
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        let xt = self.value(x);
        let t = Self::shaped(xt.shape().to_vec(), xt.data().iter().map(|v| v + c).collect());
        self.push(Op::AddScalar, vec![x], t)
    }

    /// `max(0, x − margin)`; the gradient at the corner is 0.
    pub fn hinge(&mut self, x: NodeId, margin: f64) -> NodeId {
        let xt = self.value(x);
        let t = Self::shaped(
            xt.shape().to_vec(),
            xt.data().iter().map(|v| (v - margin).max(0.0)).collect(),
        );
        self.push(Op::Hinge(margin), vec![x], t)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let t = Tensor::scalar(self.value(x).data().iter().sum());
        self.push(Op::Sum, vec![x], t)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let xt = self.value(x);
        let t = Tensor::scalar(xt.data().iter().sum::<f64>() / xt.numel() as f64);
        self.push(Op::Mean, vec![x], t)
    }

    /// Row-wise cosine similarity of two N×D matrices → N.
    /// Rows with norm below 1e-12 are rejected.
    pub fn cosine_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("cosine_rows", a, b)?;
        let (at, bt) = (self.value(a), self.value(b));
        expect_rank("cosine_rows", at, 2)?;
        let (n, d) = (at.shape()[0], at.shape()[1]);
        let (out, saved) = kernels::cosine_rows_forward(at.data(), bt.data(), d);
        for (&aa, &bb) in saved.aa.iter().zip(&saved.bb) {
            let norm = aa.sqrt().min(bb.sqrt());
            if !(norm > 1e-12) {
                return Err(Error::DegenerateEmbedding { norm });
            }
        }
        let t = Self::shaped(vec![n], out);
        Ok(self.push(Op::CosineRows { d, saved }, vec![a, b], t))
    }

    /// Identity in the forward pass; multiplies the incoming gradient by
    /// `factor` in the backward pass (−1 gives a gradient-reversal layer).
    pub fn grad_scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let t = Self::shaped(self.value(x).shape().to_vec(), self.value(x).data().to_vec());
        self.push(Op::GradScale(factor), vec![x], t)
    }

    /// Reverse pass from a scalar node. Every node that requires grad ends
    /// up with a gradient buffer, zero if no path reaches it.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if !matches!(node.op, Op::Leaf) {
                let mut slots: Vec<Option<Vec<f64>>> = node
                    .inputs
                    .iter()
                    .map(|i| {
                        let n = &self.nodes[i.0];
                        n.requires_grad.then(|| vec![0.0; n.value.numel()])
                    })
                    .collect();
                self.local_backward(idx, &gout, &mut slots);
                for (input, slot) in node.inputs.iter().zip(slots) {
                    let Some(g) = slot else { continue };
                    match grads[input.0].as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, v)| *a += v),
                        None => grads[input.0] = Some(g),
                    }
                }
            }
            grads[idx] = Some(gout);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.requires_grad {
                let g = g.unwrap_or_else(|| vec![0.0; node.value.numel()]);
                node.value.set_grad(g)?;
            } else {
                node.value.clear_grad();
            }
        }
        Ok(())
    }

    fn local_backward(&self, idx: usize, gout: &[f64], slots: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let val = |k: usize| self.nodes[node.inputs[k].0].value.data();
        let mut it = slots.iter_mut();
        let mut next = || it.next().and_then(|s| s.as_deref_mut());
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d(g) => {
                let (dx, dw, db) = (next(), next(), next());
                kernels::conv2d_backward(g, val(0), val(1), gout, dx, dw, db);
            }
            Op::Depthwise(g) => {
                let (dx, dw, db) = (next(), next(), next());
                kernels::depthwise_backward(g, val(0), val(1), gout, dx, dw, db);
            }
            Op::Linear { rows, d_in, d_out } => {
                let (dx, dw, db) = (next(), next(), next());
                kernels::linear_backward(val(0), *rows, *d_in, val(1), gout, *d_out, dx, dw, db);
            }
            Op::LayerNorm { d, saved } => {
                let (dx, dg, db) = (next(), next(), next());
                kernels::layer_norm_backward(saved, *d, val(1), gout, dx, dg, db);
            }
            Op::Gelu => {
                if let Some(dx) = next() {
                    for ((d, &x), &g) in dx.iter_mut().zip(val(0)).zip(gout) {
                        *d += g * kernels::gelu_grad(x);
                    }
                }
            }
            Op::Attention { n, t, d, saved } => {
                let weights = AttentionWeights {
                    wq: val(1),
                    wk: val(2),
                    wv: val(3),
                    wo: val(4),
                };
                let mut grads = AttentionGrads {
                    dx: next(),
                    dwq: next(),
                    dwk: next(),
                    dwv: next(),
                    dwo: next(),
                };
                kernels::attention_backward(val(0), *n, *t, *d, &weights, saved, gout, &mut grads);
            }
            Op::GlobalAvgPool { n, c, hw } => {
                if let Some(dx) = next() {
                    for p in 0..n * c {
                        let g = gout[p] / *hw as f64;
                        dx[p * hw..(p + 1) * hw].iter_mut().for_each(|d| *d += g);
                    }
                }
            }
            Op::Permute { map } => {
                if let Some(dx) = next() {
                    for (o, &src) in map.iter().enumerate() {
                        dx[src] += gout[o];
                    }
                }
            }
            Op::Reshape => {
                if let Some(dx) = next() {
                    dx.iter_mut().zip(gout).for_each(|(d, g)| *d += g);
                }
            }
            Op::Add => {
                if let Some(da) = next() {
                    da.iter_mut().zip(gout).for_each(|(d, g)| *d += g);
                }
                if let Some(db) = next() {
                    db.iter_mut().zip(gout).for_each(|(d, g)| *d += g);
                }
            }
            Op::Mul => {
                let (a, b) = (val(0), val(1));
                if let Some(da) = next() {
                    for i in 0..gout.len() {
                        da[i] += gout[i] * b[i];
                    }
                }
                if let Some(db) = next() {
                    for i in 0..gout.len() {
                        db[i] += gout[i] * a[i];
                    }
                }
            }
            Op::Scale(f) | Op::GradScale(f) => {
                if let Some(dx) = next() {
                    dx.iter_mut().zip(gout).for_each(|(d, g)| *d += g * f);
                }
            }
            Op::AddScalar => {
                if let Some(dx) = next() {
                    dx.iter_mut().zip(gout).for_each(|(d, g)| *d += g);
                }
            }
            Op::Hinge(m) => {
                if let Some(dx) = next() {
                    for ((d, &x), &g) in dx.iter_mut().zip(val(0)).zip(gout) {
                        if x - m > 0.0 {
                            *d += g;
                        }
                    }
                }
            }
            Op::Sum => {
                if let Some(dx) = next() {
                    dx.iter_mut().for_each(|d| *d += gout[0]);
                }
            }
            Op::Mean => {
                if let Some(dx) = next() {
                    let g = gout[0] / dx.len() as f64;
                    dx.iter_mut().for_each(|d| *d += g);
                }
            }
            Op::CosineRows { d, saved } => {
                let (da, db) = (next(), next());
                kernels::cosine_rows_backward(val(0), val(1), *d, saved, gout, da, db);
            }
        }
    }
}
