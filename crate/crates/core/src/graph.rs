//! Reverse-mode autodiff on a growing tape of primitive applications.
//!
//! Forward calls evaluate eagerly and record a [`Node`] per application;
//! inputs always precede their consumers, so the tape order is topological.
//! The backward pass is *symbolic*: it builds the vector-Jacobian products
//! as new nodes on the same tape and reads their values. Because gradients
//! are themselves ordinary nodes, a gradient can feed later forward ops and
//! be differentiated again — this is how the iterative encoder's internal
//! gradient steps stay exactly differentiable end to end.
//!
//! Value-dependent branch masks (relu, abs sign) enter as constants: their
//! derivative is zero almost everywhere, so this is exact off the kink set.

use crate::error::{Error, Result};
use crate::kernels;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`]'s tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VarId(pub(crate) usize);

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    /// Seeded noise, a constant under differentiation.
    GaussianSample,
    /// Forward value supplied by the caller; backward is the identity.
    StePassthrough,
    Add,
    Sub,
    Mul,
    Scale(f64),
    /// Elementwise product of a tensor with a scalar node.
    MulScalar,
    Abs,
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    Tanh,
    /// Clamp to [0,1]; straight-through gradient.
    Clamp01Ste,
    Sum,
    Mean,
    /// [c,h,w] -> [c], summing over the spatial axes.
    SumSpatial,
    /// [c] -> [c,h,w]; adjoint of SumSpatial.
    BroadcastSpatial,
    Matmul,
    Transpose,
    Reshape,
    Concat { axis: usize },
    Narrow { axis: usize, start: usize, len: usize },
    Conv2d { dilation: usize },
    ConvInputVjp { dilation: usize },
    ConvKernelVjp { dilation: usize },
    Upsample2x,
    SumPool2x,
    Residual5x5,
    BceWithLogits,
    Mse,
}

pub(crate) struct Node {
    pub op: Op,
    pub inputs: Vec<VarId>,
    pub value: Tensor,
    pub requires_grad: bool,
}

/// Tape of primitive applications plus their values.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients for the grad-requiring leaves of one backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. a leaf; zeros were materialized for
    /// grad-requiring leaves the loss never touched.
    pub fn get(&self, id: VarId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: VarId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
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

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: VarId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, op: Op, inputs: Vec<VarId>, value: Tensor) -> VarId {
        let requires_grad = match op {
            Op::Leaf | Op::GaussianSample => false,
            _ => inputs.iter().any(|&i| self.nodes[i.0].requires_grad),
        };
        self.push_with_grad(op, inputs, value, requires_grad)
    }

    fn push_with_grad(
        &mut self,
        op: Op,
        inputs: Vec<VarId>,
        value: Tensor,
        requires_grad: bool,
    ) -> VarId {
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
        });
        VarId(self.nodes.len() - 1)
    }

    /// Register an external tensor. `requires_grad` marks it differentiable;
    /// a leaf that is differentiated through but never harvested is fine.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> VarId {
        self.push_with_grad(Op::Leaf, vec![], value, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> VarId {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> VarId {
        self.leaf(value, true)
    }

    /// Seeded standard-normal draw; contributes no gradient.
    pub fn gaussian_sample(&mut self, shape: &[usize], seed: u64) -> VarId {
        let mut t = Tensor::zeros(shape);
        Rng::new(seed).fill_normal(t.data_mut());
        self.push(Op::GaussianSample, vec![], t)
    }

    fn binary_same_shape(&mut self, op: Op, name: &'static str, a: VarId, b: VarId) -> Result<VarId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                name,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let v = match op {
            Op::Add => self.value(a).zip(self.value(b), |x, y| x + y)?,
            Op::Sub => self.value(a).zip(self.value(b), |x, y| x - y)?,
            Op::Mul => self.value(a).zip(self.value(b), |x, y| x * y)?,
            _ => unreachable!(),
        };
        Ok(self.push(op, vec![a, b], v))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary_same_shape(Op::Add, "add", a, b)
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary_same_shape(Op::Sub, "sub", a, b)
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary_same_shape(Op::Mul, "mul", a, b)
    }

    pub fn scale(&mut self, a: VarId, factor: f64) -> VarId {
        let v = self.value(a).map(|x| x * factor);
        self.push(Op::Scale(factor), vec![a], v)
    }

    /// Elementwise product with a scalar node (shape []).
    pub fn mul_scalar(&mut self, t: VarId, s: VarId) -> Result<VarId> {
        if !self.value(s).is_scalar() {
            return Err(Error::shape(
                "mul-scalar",
                format!("scalar operand has shape {:?}", self.value(s).shape()),
            ));
        }
        let sv = self.value(s).item();
        let v = self.value(t).map(|x| x * sv);
        Ok(self.push(Op::MulScalar, vec![t, s], v))
    }

    pub fn abs(&mut self, a: VarId) -> VarId {
        let v = self.value(a).map(f64::abs);
        self.push(Op::Abs, vec![a], v)
    }

    pub fn relu(&mut self, a: VarId) -> VarId {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu, vec![a], v)
    }

    pub fn leaky_relu(&mut self, a: VarId, slope: f64) -> VarId {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.push(Op::LeakyRelu(slope), vec![a], v)
    }

    pub fn sigmoid(&mut self, a: VarId) -> VarId {
        let v = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid, vec![a], v)
    }

    pub fn tanh(&mut self, a: VarId) -> VarId {
        let v = self.value(a).map(f64::tanh);
        self.push(Op::Tanh, vec![a], v)
    }

    /// Clamp to [0,1]; the backward multiplies the incoming gradient by
    /// exactly one (straight-through).
    pub fn clamp01_ste(&mut self, a: VarId) -> VarId {
        let v = self.value(a).map(|x| x.clamp(0.0, 1.0));
        self.push(Op::Clamp01Ste, vec![a], v)
    }

    /// Insert a caller-computed forward value (e.g. a lossy compression round
    /// trip) whose backward is the identity.
    pub fn ste_passthrough(&mut self, input: VarId, value: Tensor) -> Result<VarId> {
        if self.value(input).shape() != value.shape() {
            return Err(Error::shape(
                "ste-passthrough",
                format!("{:?} vs {:?}", self.value(input).shape(), value.shape()),
            ));
        }
        Ok(self.push(Op::StePassthrough, vec![input], value))
    }

    pub fn sum(&mut self, a: VarId) -> VarId {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum, vec![a], v)
    }

    pub fn mean(&mut self, a: VarId) -> VarId {
        let v = Tensor::scalar(self.value(a).mean());
        self.push(Op::Mean, vec![a], v)
    }

    /// [c,h,w] -> [c] spatial sums.
    pub fn sum_spatial(&mut self, a: VarId) -> Result<VarId> {
        let (c, h, w) = self.value(a).image_dims()?;
        let d = self.value(a).data();
        let v = Tensor::from_vec(
            &[c],
            (0..c).map(|ch| d[ch * h * w..(ch + 1) * h * w].iter().sum()).collect(),
        )?;
        Ok(self.push(Op::SumSpatial, vec![a], v))
    }

    /// [c] -> [c,h,w], repeating each channel value over the plane.
    pub fn broadcast_spatial(&mut self, a: VarId, height: usize, width: usize) -> Result<VarId> {
        let sh = self.value(a).shape();
        if sh.len() != 1 {
            return Err(Error::shape(
                "broadcast-spatial",
                format!("expected [c], got {:?}", sh),
            ));
        }
        let c = sh[0];
        let mut data = Vec::with_capacity(c * height * width);
        for ch in 0..c {
            data.extend(std::iter::repeat(self.value(a).data()[ch]).take(height * width));
        }
        let v = Tensor::from_vec(&[c, height, width], data)?;
        Ok(self.push(Op::BroadcastSpatial, vec![a], v))
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", sa, sb)));
        }
        let v = kernels::matmul(self.value(a), self.value(b));
        Ok(self.push(Op::Matmul, vec![a, b], v))
    }

    pub fn transpose(&mut self, a: VarId) -> Result<VarId> {
        if self.value(a).shape().len() != 2 {
            return Err(Error::shape(
                "transpose",
                format!("{:?}", self.value(a).shape()),
            ));
        }
        let v = kernels::transpose(self.value(a));
        Ok(self.push(Op::Transpose, vec![a], v))
    }

    pub fn reshape(&mut self, a: VarId, shape: &[usize]) -> Result<VarId> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.value(a).shape(), shape),
            ));
        }
        let v = Tensor::from_vec(shape, self.value(a).data().to_vec())?;
        Ok(self.push(Op::Reshape, vec![a], v))
    }

    pub fn concat(&mut self, axis: usize, parts: &[VarId]) -> Result<VarId> {
        if parts.is_empty() {
            return Err(Error::invalid("concat of zero tensors"));
        }
        let first = self.value(parts[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} of {:?}", first)));
        }
        let mut axis_total = 0;
        for &p in parts {
            let sh = self.value(p).shape();
            if sh.len() != first.len()
                || sh
                    .iter()
                    .enumerate()
                    .any(|(i, &d)| i != axis && d != first[i])
            {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} incompatible with {:?} on axis {axis}", sh, first),
                ));
            }
            axis_total += sh[axis];
        }
        let mut shape = first.clone();
        shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let len = self.value(p).shape()[axis];
                let chunk = &self.value(p).data()[o * len * inner..(o + 1) * len * inner];
                data.extend_from_slice(chunk);
            }
        }
        let v = Tensor::from_vec(&shape, data)?;
        Ok(self.push(Op::Concat { axis }, parts.to_vec(), v))
    }

    /// Contiguous slice along one axis.
    pub fn narrow(&mut self, a: VarId, axis: usize, start: usize, len: usize) -> Result<VarId> {
        let sh = self.value(a).shape().to_vec();
        if axis >= sh.len() || start + len > sh[axis] || len == 0 {
            return Err(Error::shape(
                "narrow",
                format!("axis {axis}, {start}..{} of {:?}", start + len, sh),
            ));
        }
        let outer: usize = sh[..axis].iter().product();
        let inner: usize = sh[axis + 1..].iter().product();
        let mut shape = sh.clone();
        shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * sh[axis] + start) * inner;
            data.extend_from_slice(&self.value(a).data()[base..base + len * inner]);
        }
        let v = Tensor::from_vec(&shape, data)?;
        Ok(self.push(Op::Narrow { axis, start, len }, vec![a], v))
    }

    /// 3x3 convolution, stride 1, zero-padded "same", optional dilation and bias.
    /// Input [ci,h,w], kernel [co,ci,3,3], bias [co].
    pub fn conv2d(
        &mut self,
        x: VarId,
        kernel: VarId,
        bias: Option<VarId>,
        dilation: usize,
    ) -> Result<VarId> {
        let (ci, _, _) = self.value(x).image_dims().map_err(|_| {
            Error::shape("conv2d", format!("input {:?}", self.value(x).shape()))
        })?;
        let ks = self.value(kernel).shape();
        if ks.len() != 4 || ks[1] != ci || ks[2] != 3 || ks[3] != 3 {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {:?} for input {:?}", ks, self.value(x).shape()),
            ));
        }
        if dilation == 0 {
            return Err(Error::invalid("conv2d dilation must be >= 1"));
        }
        let co = ks[0];
        let mut inputs = vec![x, kernel];
        let v = match bias {
            Some(b) => {
                if self.value(b).shape() != [co] {
                    return Err(Error::shape(
                        "conv2d",
                        format!("bias {:?} for {co} output channels", self.value(b).shape()),
                    ));
                }
                inputs.push(b);
                kernels::conv3x3(self.value(x), self.value(kernel), Some(self.value(b)), dilation)
            }
            None => kernels::conv3x3(self.value(x), self.value(kernel), None, dilation),
        };
        Ok(self.push(Op::Conv2d { dilation }, inputs, v))
    }

    /// Adjoint of conv2d w.r.t. its input; upstream [co,h,w], kernel [co,ci,3,3].
    pub fn conv_input_vjp(&mut self, upstream: VarId, kernel: VarId, dilation: usize) -> Result<VarId> {
        let (co, _, _) = self.value(upstream).image_dims()?;
        let ks = self.value(kernel).shape();
        if ks.len() != 4 || ks[0] != co {
            return Err(Error::shape(
                "conv-input-vjp",
                format!("kernel {:?} vs upstream {:?}", ks, self.value(upstream).shape()),
            ));
        }
        let v = kernels::conv3x3_input_vjp(self.value(upstream), self.value(kernel), dilation);
        Ok(self.push(Op::ConvInputVjp { dilation }, vec![upstream, kernel], v))
    }

    /// Adjoint of conv2d w.r.t. its kernel; x [ci,h,w], upstream [co,h,w].
    pub fn conv_kernel_vjp(&mut self, x: VarId, upstream: VarId, dilation: usize) -> Result<VarId> {
        let (_, h, w) = self.value(x).image_dims()?;
        let (_, hu, wu) = self.value(upstream).image_dims()?;
        if (h, w) != (hu, wu) {
            return Err(Error::shape(
                "conv-kernel-vjp",
                format!("{:?} vs {:?}", self.value(x).shape(), self.value(upstream).shape()),
            ));
        }
        let v = kernels::conv3x3_kernel_vjp(self.value(x), self.value(upstream), dilation);
        Ok(self.push(Op::ConvKernelVjp { dilation }, vec![x, upstream], v))
    }

    pub fn upsample2x(&mut self, a: VarId) -> Result<VarId> {
        self.value(a).image_dims()?;
        let v = kernels::upsample2x(self.value(a));
        Ok(self.push(Op::Upsample2x, vec![a], v))
    }

    pub fn sumpool2x(&mut self, a: VarId) -> Result<VarId> {
        let (_, h, w) = self.value(a).image_dims()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("sumpool2x", format!("odd dims {h}x{w}")));
        }
        let v = kernels::sumpool2x(self.value(a));
        Ok(self.push(Op::SumPool2x, vec![a], v))
    }

    /// Fixed 5x5 high-pass residual filter, applied per channel.
    pub fn residual5x5(&mut self, a: VarId) -> Result<VarId> {
        self.value(a).image_dims()?;
        let v = kernels::residual5x5(self.value(a));
        Ok(self.push(Op::Residual5x5, vec![a], v))
    }

    /// Mean binary cross-entropy from logits, numerically stable:
    /// mean(max(z,0) - z*y + ln(1+exp(-|z|))).
    pub fn bce_with_logits(&mut self, logits: VarId, targets: VarId) -> Result<VarId> {
        if self.value(logits).shape() != self.value(targets).shape() {
            return Err(Error::shape(
                "bce-with-logits",
                format!(
                    "{:?} vs {:?}",
                    self.value(logits).shape(),
                    self.value(targets).shape()
                ),
            ));
        }
        let per = self
            .value(logits)
            .zip(self.value(targets), |z, y| {
                z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
            })?;
        let v = Tensor::scalar(per.mean());
        Ok(self.push(Op::BceWithLogits, vec![logits, targets], v))
    }

    /// Mean squared error (scalar).
    pub fn mse(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                "mse",
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let v = Tensor::scalar(self.value(a).mse_value(self.value(b))?);
        Ok(self.push(Op::Mse, vec![a, b], v))
    }

    /// Gradients of a scalar loss w.r.t. `wrt`, built as nodes on this tape.
    /// Unreached entries come back as zero constants.
    pub fn grad_vars(&mut self, loss: VarId, wrt: &[VarId]) -> Result<Vec<VarId>> {
        if !self.value(loss).is_scalar() {
            return Err(Error::invalid(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = loss.0 + 1;
        // Nodes that transitively consume one of `wrt`.
        let mut on_path = vec![false; n];
        for &w in wrt {
            if w.0 < n {
                on_path[w.0] = true;
            }
        }
        for i in 0..n {
            if !on_path[i] {
                on_path[i] = self.nodes[i].inputs.iter().any(|p| on_path[p.0]);
            }
        }
        let mut grads: Vec<Option<VarId>> = vec![None; n];
        if on_path[loss.0] {
            grads[loss.0] = Some(self.constant(Tensor::scalar(1.0)));
        }
        for i in (0..n).rev() {
            let Some(upstream) = grads[i] else { continue };
            if self.nodes[i].inputs.is_empty() {
                continue;
            }
            let inputs = self.nodes[i].inputs.clone();
            let want: Vec<bool> = inputs
                .iter()
                .map(|p| on_path[p.0] && self.nodes[p.0].requires_grad)
                .collect();
            if !want.iter().any(|&w| w) {
                continue;
            }
            let vjps = self.vjp(i, upstream, &want)?;
            for ((&inp, &w), vjp) in inputs.iter().zip(&want).zip(vjps) {
                if !w {
                    continue;
                }
                let Some(g) = vjp else { continue };
                grads[inp.0] = Some(match grads[inp.0] {
                    None => g,
                    Some(prev) => self.add(prev, g)?,
                });
            }
        }
        wrt.iter()
            .map(|&w| {
                Ok(match grads.get(w.0).and_then(|g| *g) {
                    Some(g) => g,
                    None => {
                        let z = Tensor::zeros(self.value(w).shape());
                        self.constant(z)
                    }
                })
            })
            .collect()
    }

    /// Backward pass: gradients for every grad-requiring leaf below `loss`.
    pub fn backward(&mut self, loss: VarId) -> Result<Gradients> {
        let leaves: Vec<VarId> = (0..=loss.0)
            .filter(|&i| matches!(self.nodes[i].op, Op::Leaf) && self.nodes[i].requires_grad)
            .map(VarId)
            .collect();
        let grad_ids = self.grad_vars(loss, &leaves)?;
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        for (leaf, gid) in leaves.iter().zip(grad_ids) {
            let g = self.value(gid).clone();
            if !g.is_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient for leaf {} is not finite",
                    leaf.0
                )));
            }
            grads[leaf.0] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Per-op VJP construction. `want[j]` gates building the j-th input's
    /// gradient so unused branches cost nothing.
    fn vjp(&mut self, node: usize, u: VarId, want: &[bool]) -> Result<Vec<Option<VarId>>> {
        let op = self.nodes[node].op.clone();
        let inputs = self.nodes[node].inputs.clone();
        let out = VarId(node);
        Ok(match op {
            Op::Leaf | Op::GaussianSample => vec![],
            Op::StePassthrough | Op::Clamp01Ste => vec![Some(u)],
            Op::Add => vec![Some(u), Some(u)],
            Op::Sub => {
                let neg = if want[1] { Some(self.scale(u, -1.0)) } else { None };
                vec![Some(u), neg]
            }
            Op::Mul => {
                let ga = if want[0] { Some(self.mul(u, inputs[1])?) } else { None };
                let gb = if want[1] { Some(self.mul(u, inputs[0])?) } else { None };
                vec![ga, gb]
            }
            Op::Scale(f) => vec![Some(self.scale(u, f))],
            Op::MulScalar => {
                let gt = if want[0] {
                    Some(self.mul_scalar(u, inputs[1])?)
                } else {
                    None
                };
                let gs = if want[1] {
                    let prod = self.mul(u, inputs[0])?;
                    Some(self.sum(prod))
                } else {
                    None
                };
                vec![gt, gs]
            }
            Op::Abs => {
                let sign = self.value(inputs[0]).map(|x| {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                let mask = self.constant(sign);
                vec![Some(self.mul(u, mask)?)]
            }
            Op::Relu => {
                let m = self.value(inputs[0]).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                let mask = self.constant(m);
                vec![Some(self.mul(u, mask)?)]
            }
            Op::LeakyRelu(slope) => {
                let m = self
                    .value(inputs[0])
                    .map(|x| if x > 0.0 { 1.0 } else { slope });
                let mask = self.constant(m);
                vec![Some(self.mul(u, mask)?)]
            }
            Op::Sigmoid => {
                // y(1-y), with y the output node so higher orders stay exact.
                let ones = self.constant(Tensor::ones(self.value(out).shape()));
                let one_minus = self.sub(ones, out)?;
                let d = self.mul(out, one_minus)?;
                vec![Some(self.mul(u, d)?)]
            }
            Op::Tanh => {
                let ones = self.constant(Tensor::ones(self.value(out).shape()));
                let sq = self.mul(out, out)?;
                let d = self.sub(ones, sq)?;
                vec![Some(self.mul(u, d)?)]
            }
            Op::Sum => {
                let ones = self.constant(Tensor::ones(self.value(inputs[0]).shape()));
                vec![Some(self.mul_scalar(ones, u)?)]
            }
            Op::Mean => {
                let n = self.value(inputs[0]).numel() as f64;
                let ones = self.constant(Tensor::ones(self.value(inputs[0]).shape()));
                let b = self.mul_scalar(ones, u)?;
                vec![Some(self.scale(b, 1.0 / n))]
            }
            Op::SumSpatial => {
                let (_, h, w) = self.value(inputs[0]).image_dims()?;
                vec![Some(self.broadcast_spatial(u, h, w)?)]
            }
            Op::BroadcastSpatial => vec![Some(self.sum_spatial(u)?)],
            Op::Matmul => {
                let ga = if want[0] {
                    let bt = self.transpose(inputs[1])?;
                    Some(self.matmul(u, bt)?)
                } else {
                    None
                };
                let gb = if want[1] {
                    let at = self.transpose(inputs[0])?;
                    Some(self.matmul(at, u)?)
                } else {
                    None
                };
                vec![ga, gb]
            }
            Op::Transpose => vec![Some(self.transpose(u)?)],
            Op::Reshape => {
                let sh = self.value(inputs[0]).shape().to_vec();
                vec![Some(self.reshape(u, &sh)?)]
            }
            Op::Concat { axis } => {
                let mut offset = 0;
                let mut out_grads = Vec::with_capacity(inputs.len());
                for (j, &p) in inputs.iter().enumerate() {
                    let len = self.value(p).shape()[axis];
                    out_grads.push(if want[j] {
                        Some(self.narrow(u, axis, offset, len)?)
                    } else {
                        None
                    });
                    offset += len;
                }
                out_grads
            }
            Op::Narrow { axis, start, len } => {
                // Pad the upstream back to the source shape with zeros.
                let src_shape = self.value(inputs[0]).shape().to_vec();
                let total = src_shape[axis];
                let mut parts = Vec::new();
                if start > 0 {
                    let mut sh = src_shape.clone();
                    sh[axis] = start;
                    parts.push(self.constant(Tensor::zeros(&sh)));
                }
                parts.push(u);
                if start + len < total {
                    let mut sh = src_shape.clone();
                    sh[axis] = total - start - len;
                    parts.push(self.constant(Tensor::zeros(&sh)));
                }
                vec![Some(self.concat(axis, &parts)?)]
            }
            Op::Conv2d { dilation } => {
                let gx = if want[0] {
                    Some(self.conv_input_vjp(u, inputs[1], dilation)?)
                } else {
                    None
                };
                let gk = if want[1] {
                    Some(self.conv_kernel_vjp(inputs[0], u, dilation)?)
                } else {
                    None
                };
                let mut grads = vec![gx, gk];
                if inputs.len() == 3 {
                    grads.push(if want[2] {
                        Some(self.sum_spatial(u)?)
                    } else {
                        None
                    });
                }
                grads
            }
            Op::ConvInputVjp { dilation } => {
                // f(u0, k) is bilinear: d/du0 = conv2d(v, k), d/dk = kernel_vjp(v, u0).
                let gu = if want[0] {
                    Some(self.conv2d(u, inputs[1], None, dilation)?)
                } else {
                    None
                };
                let gk = if want[1] {
                    Some(self.conv_kernel_vjp(u, inputs[0], dilation)?)
                } else {
                    None
                };
                vec![gu, gk]
            }
            Op::ConvKernelVjp { dilation } => {
                // h(x, u0) is bilinear: d/dx = input_vjp(u0, kappa), d/du0 = conv2d(x, kappa).
                let gx = if want[0] {
                    Some(self.conv_input_vjp(inputs[1], u, dilation)?)
                } else {
                    None
                };
                let gu = if want[1] {
                    Some(self.conv2d(inputs[0], u, None, dilation)?)
                } else {
                    None
                };
                vec![gx, gu]
            }
            Op::Upsample2x => vec![Some(self.sumpool2x(u)?)],
            Op::SumPool2x => vec![Some(self.upsample2x(u)?)],
            Op::Residual5x5 => {
                // The kernel is symmetric under both axis flips: self-adjoint.
                vec![Some(self.residual5x5(u)?)]
            }
            Op::BceWithLogits => {
                let n = self.value(inputs[0]).numel() as f64;
                let gz = if want[0] {
                    // (sigmoid(z) - y) / n, scaled by the upstream scalar.
                    let sig = self.sigmoid(inputs[0]);
                    let diff = self.sub(sig, inputs[1])?;
                    let scaled = self.scale(diff, 1.0 / n);
                    Some(self.mul_scalar(scaled, u)?)
                } else {
                    None
                };
                let gy = if want[1] {
                    // d/dy of (-z*y + ...) is -z / n.
                    let scaled = self.scale(inputs[0], -1.0 / n);
                    Some(self.mul_scalar(scaled, u)?)
                } else {
                    None
                };
                vec![gz, gy]
            }
            Op::Mse => {
                let n = self.value(inputs[0]).numel() as f64;
                let diff = self.sub(inputs[0], inputs[1])?;
                let base = self.scale(diff, 2.0 / n);
                let g = self.mul_scalar(base, u)?;
                let ga = if want[0] { Some(g) } else { None };
                let gb = if want[1] { Some(self.scale(g, -1.0)) } else { None };
                vec![ga, gb]
            }
        })
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
