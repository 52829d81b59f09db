//! Reverse-mode automatic differentiation over dense 3D volumes.
//!
//! The engine is a classic eager tape: every operation computes its value
//! immediately and records enough context to replay exact analytic partials
//! in reverse topological order (which is simply reverse creation order).
//! A tape is built per forward pass, consumed by one [`Tape::backward`]
//! call, and dropped afterwards.
//!
//! Channels are represented as separate nodes; there is no 4D tensor and no
//! broadcasting beyond the dedicated scalar-bias op. Multi-channel
//! convolution sums per-channel 3D convolutions inside one node so feature
//! maps stay cheap. Kernel taps only receive gradients when the kernel node
//! itself requires them (learned layers); constant kernels such as the
//! distance kernel stay gradient-free.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::volume::{Kernel3, Volume};

/// Handle into a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum UnaryKind {
    Neg,
    Log,
    Exp,
    ClampMin(u64),   // f64 bits; keeps the enum Copy+Eq
    Scale(u64),
    AddC(u64),
    LeakyRelu(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum HingeSide {
    TpLower,
    FpUpper,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Unary {
        a: NodeId,
        kind: UnaryKind,
    },
    Binary {
        a: NodeId,
        b: NodeId,
        kind: BinaryKind,
    },
    /// out = sum_i corr3(inputs[i], kernels[i]) (+ bias), zero padding,
    /// stride 1, same shape.
    Conv {
        inputs: Vec<NodeId>,
        kernels: Vec<NodeId>,
        bias: Option<NodeId>,
    },
    /// 3x3x3 window, stride 1, zero padding; `argmax` holds the winning
    /// input linear index per output voxel, or -1 when the zero pad won.
    MaxPool {
        a: NodeId,
        argmax: Vec<i64>,
    },
    SoftmaxPair {
        a: NodeId,
        b: NodeId,
        chan: u8,
    },
    ReduceSum {
        a: NodeId,
        mask: Option<Volume>,
    },
    InstanceNorm {
        a: NodeId,
        inv_std: f64,
    },
    DownAvg2 {
        a: NodeId,
    },
    UpNearest2 {
        a: NodeId,
    },
    AddBias {
        a: NodeId,
        bias: NodeId,
    },
    HingeSums {
        pred: NodeId,
        threshold: NodeId,
        labels: Volume,
        side: HingeSide,
    },
}

struct Node {
    value: Volume,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Recorded computation graph with gradient accumulation.
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Volume, requires_grad: bool, op: Op) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn req(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn value(&self, id: NodeId) -> &Volume {
        &self.nodes[id.0].value
    }

    /// Value of a 1-voxel node.
    pub fn scalar_value(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].value.len(), 1);
        self.nodes[id.0].value.data()[0]
    }

    /// Accumulated gradient, present after backward for nodes that require it.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.req(id)
    }

    /// Clears all gradients and re-arms backward.
    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    // ── graph construction ──────────────────────────────────────────────

    pub fn leaf(&mut self, value: Volume, requires_grad: bool) -> NodeId {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Volume) -> NodeId {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.constant(Volume::scalar(value))
    }

    pub fn scalar_param(&mut self, value: f64) -> NodeId {
        self.leaf(Volume::scalar(value), true)
    }

    fn binary(&mut self, a: NodeId, b: NodeId, kind: BinaryKind) -> Result<NodeId> {
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        va.check_same_shape(vb)?;
        let data: Vec<f64> = match kind {
            BinaryKind::Add => va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect(),
            BinaryKind::Sub => va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect(),
            BinaryKind::Mul => va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect(),
            BinaryKind::Div => va.data().iter().zip(vb.data()).map(|(x, y)| x / y).collect(),
        };
        let value = Volume::new(va.dims(), data)?;
        let rg = self.req(a) || self.req(b);
        Ok(self.push(value, rg, Op::Binary { a, b, kind }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, BinaryKind::Add)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, BinaryKind::Sub)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, BinaryKind::Mul)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, BinaryKind::Div)
    }

    fn unary(&mut self, a: NodeId, kind: UnaryKind) -> Result<NodeId> {
        let va = &self.nodes[a.0].value;
        let data: Vec<f64> = match kind {
            UnaryKind::Neg => va.data().iter().map(|&v| -v).collect(),
            UnaryKind::Log => {
                if let Some((i, &v)) = va
                    .data()
                    .iter()
                    .enumerate()
                    .find(|(_, &v)| v <= 0.0)
                {
                    return Err(Error::NonPositiveLog { value: v, index: i });
                }
                va.data().iter().map(|&v| v.ln()).collect()
            }
            UnaryKind::Exp => va.data().iter().map(|&v| v.exp()).collect(),
            UnaryKind::ClampMin(c) => {
                let c = f64::from_bits(c);
                va.data().iter().map(|&v| v.max(c)).collect()
            }
            UnaryKind::Scale(c) => {
                let c = f64::from_bits(c);
                va.data().iter().map(|&v| v * c).collect()
            }
            UnaryKind::AddC(c) => {
                let c = f64::from_bits(c);
                va.data().iter().map(|&v| v + c).collect()
            }
            UnaryKind::LeakyRelu(s) => {
                let s = f64::from_bits(s);
                va.data().iter().map(|&v| if v > 0.0 { v } else { s * v }).collect()
            }
        };
        let value = Volume::new(va.dims(), data)?;
        let rg = self.req(a);
        Ok(self.push(value, rg, Op::Unary { a, kind }))
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, UnaryKind::Neg)
    }

    /// Natural log; errors on any non-positive sample (clamp first).
    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, UnaryKind::Log)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, UnaryKind::Exp)
    }

    /// max(v, c); subgradient 0 where v == c.
    pub fn clamp_min(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.unary(a, UnaryKind::ClampMin(c.to_bits()))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.unary(a, UnaryKind::Scale(c.to_bits()))
    }

    pub fn add_c(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.unary(a, UnaryKind::AddC(c.to_bits()))
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> Result<NodeId> {
        self.unary(a, UnaryKind::LeakyRelu(slope.to_bits()))
    }

    /// Convolution (cross-correlation) with a constant kernel, zero padding,
    /// stride 1, same output shape. Kernel taps are constants here.
    pub fn conv3d(&mut self, input: NodeId, kernel: &Kernel3) -> Result<NodeId> {
        let k = self.constant(kernel.to_volume());
        self.conv3d_mc(&[input], &[k], None)
    }

    /// Multi-channel convolution: `out = sum_i corr3(inputs[i], kernels[i]) + bias`.
    /// Kernels are volume nodes with odd dims; learned kernels get gradients.
    pub fn conv3d_mc(
        &mut self,
        inputs: &[NodeId],
        kernels: &[NodeId],
        bias: Option<NodeId>,
    ) -> Result<NodeId> {
        if inputs.is_empty() || inputs.len() != kernels.len() {
            return Err(Error::InvalidParam(format!(
                "conv3d_mc needs matching non-empty inputs/kernels, got {}/{}",
                inputs.len(),
                kernels.len()
            )));
        }
        let dims = self.nodes[inputs[0].0].value.dims();
        for &i in inputs {
            let d = self.nodes[i.0].value.dims();
            if d != dims {
                return Err(Error::ShapeMismatch(dims, d));
            }
        }
        for &k in kernels {
            let ks = self.nodes[k.0].value.dims();
            if ks.0 % 2 == 0 || ks.1 % 2 == 0 || ks.2 % 2 == 0 {
                return Err(Error::InvalidParam(format!(
                    "kernel size components must be odd, got {ks:?}"
                )));
            }
        }
        if let Some(b) = bias {
            if self.nodes[b.0].value.len() != 1 {
                return Err(Error::InvalidParam("conv bias must be a scalar node".into()));
            }
        }
        let mut out = vec![0.0; dims.0 * dims.1 * dims.2];
        let mut tmp = vec![0.0; out.len()];
        for (idx, (&i, &k)) in inputs.iter().zip(kernels).enumerate() {
            let inp = &self.nodes[i.0].value;
            let ker = &self.nodes[k.0].value;
            if idx == 0 {
                conv_same(inp.data(), dims, ker.data(), ker.dims(), &mut out);
            } else {
                conv_same(inp.data(), dims, ker.data(), ker.dims(), &mut tmp);
                for (o, t) in out.iter_mut().zip(&tmp) {
                    *o += t;
                }
            }
        }
        if let Some(b) = bias {
            let bv = self.nodes[b.0].value.data()[0];
            for o in &mut out {
                *o += bv;
            }
        }
        let rg = inputs.iter().any(|&i| self.req(i))
            || kernels.iter().any(|&k| self.req(k))
            || bias.map_or(false, |b| self.req(b));
        let value = Volume::new(dims, out)?;
        Ok(self.push(
            value,
            rg,
            Op::Conv {
                inputs: inputs.to_vec(),
                kernels: kernels.to_vec(),
                bias,
            },
        ))
    }

    /// Windowed maximum, 3x3x3, stride 1, zero padding. Backward routes the
    /// whole gradient to the first argmax tap in x-fastest scan order; a
    /// window won by the zero pad routes nothing.
    pub fn maxpool3d(&mut self, a: NodeId) -> Result<NodeId> {
        let va = &self.nodes[a.0].value;
        let (nx, ny, nz) = va.dims();
        let data = va.data();
        let mut out = vec![0.0; data.len()];
        let mut argmax = vec![-1i64; data.len()];
        let nxy = nx * ny;
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = -1i64;
                    // ascending (dz, dy, dx) visits taps in ascending input
                    // linear index, so ties resolve to the first in scan order
                    for dz in -1i64..=1 {
                        let zz = z as i64 + dz;
                        for dy in -1i64..=1 {
                            let yy = y as i64 + dy;
                            for dx in -1i64..=1 {
                                let xx = x as i64 + dx;
                                let (v, idx) = if xx >= 0
                                    && yy >= 0
                                    && zz >= 0
                                    && (xx as usize) < nx
                                    && (yy as usize) < ny
                                    && (zz as usize) < nz
                                {
                                    let li = xx as usize + nx * (yy as usize) + nxy * (zz as usize);
                                    (data[li], li as i64)
                                } else {
                                    (0.0, -1)
                                };
                                if v > best {
                                    best = v;
                                    best_idx = idx;
                                }
                            }
                        }
                    }
                    let oi = x + nx * y + nxy * z;
                    out[oi] = best;
                    argmax[oi] = best_idx;
                }
            }
        }
        let value = Volume::new((nx, ny, nz), out)?;
        let rg = self.req(a);
        Ok(self.push(value, rg, Op::MaxPool { a, argmax }))
    }

    /// Per-voxel two-way softmax; returns the two channels.
    pub fn channel_softmax(&mut self, a: NodeId, b: NodeId) -> Result<(NodeId, NodeId)> {
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        va.check_same_shape(vb)?;
        let dims = va.dims();
        let mut sa = Vec::with_capacity(va.len());
        let mut sb = Vec::with_capacity(va.len());
        for (&x, &y) in va.data().iter().zip(vb.data()) {
            let m = x.max(y);
            let ea = (x - m).exp();
            let eb = (y - m).exp();
            let s = ea + eb;
            sa.push(ea / s);
            sb.push(eb / s);
        }
        let rg = self.req(a) || self.req(b);
        let na = self.push(Volume::new(dims, sa)?, rg, Op::SoftmaxPair { a, b, chan: 0 });
        let nb = self.push(Volume::new(dims, sb)?, rg, Op::SoftmaxPair { a, b, chan: 1 });
        Ok((na, nb))
    }

    /// Scalar sum over all voxels, optionally restricted by a binary mask.
    pub fn reduce_sum(&mut self, a: NodeId, mask: Option<&Volume>) -> Result<NodeId> {
        let va = &self.nodes[a.0].value;
        let total = match mask {
            Some(m) => {
                va.check_same_shape(m)?;
                if !m.is_binary() {
                    return Err(Error::InvalidVolume(
                        "reduce_sum mask must be binary".into(),
                    ));
                }
                va.data().iter().zip(m.data()).map(|(v, w)| v * w).sum()
            }
            None => va.sum(),
        };
        let rg = self.req(a);
        Ok(self.push(
            Volume::scalar(total),
            rg,
            Op::ReduceSum {
                a,
                mask: mask.cloned(),
            },
        ))
    }

    /// (x - mean) / sqrt(var + eps) over the whole volume (one instance, one
    /// channel). Population variance.
    pub fn instance_norm(&mut self, a: NodeId, eps: f64) -> Result<NodeId> {
        let va = &self.nodes[a.0].value;
        let n = va.len() as f64;
        let mean = va.sum() / n;
        let var = va.data().iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv_std = 1.0 / (var + eps).sqrt();
        let data: Vec<f64> = va.data().iter().map(|&v| (v - mean) * inv_std).collect();
        let value = Volume::new(va.dims(), data)?;
        let rg = self.req(a);
        Ok(self.push(value, rg, Op::InstanceNorm { a, inv_std }))
    }

    /// 2x2x2 average pooling with stride 2; dims must be even.
    pub fn downsample_avg2(&mut self, a: NodeId) -> Result<NodeId> {
        let va = &self.nodes[a.0].value;
        let (nx, ny, nz) = va.dims();
        if nx % 2 != 0 || ny % 2 != 0 || nz % 2 != 0 {
            return Err(Error::InvalidVolume(format!(
                "downsample_avg2 needs even dims, got {:?}",
                va.dims()
            )));
        }
        let (ox, oy, oz) = (nx / 2, ny / 2, nz / 2);
        let mut out = vec![0.0; ox * oy * oz];
        let d = va.data();
        for z in 0..oz {
            for y in 0..oy {
                for x in 0..ox {
                    let mut acc = 0.0;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                acc += d[(2 * x + dx) + nx * ((2 * y + dy) + ny * (2 * z + dz))];
                            }
                        }
                    }
                    out[x + ox * (y + oy * z)] = acc / 8.0;
                }
            }
        }
        let rg = self.req(a);
        let value = Volume::new((ox, oy, oz), out)?;
        Ok(self.push(value, rg, Op::DownAvg2 { a }))
    }

    /// Nearest-neighbor 2x upsampling.
    pub fn upsample_nearest2(&mut self, a: NodeId) -> Result<NodeId> {
        let va = &self.nodes[a.0].value;
        let (nx, ny, nz) = va.dims();
        let (ox, oy, oz) = (nx * 2, ny * 2, nz * 2);
        let mut out = vec![0.0; ox * oy * oz];
        let d = va.data();
        for z in 0..oz {
            for y in 0..oy {
                for x in 0..ox {
                    out[x + ox * (y + oy * z)] = d[(x / 2) + nx * ((y / 2) + ny * (z / 2))];
                }
            }
        }
        let rg = self.req(a);
        let value = Volume::new((ox, oy, oz), out)?;
        Ok(self.push(value, rg, Op::UpNearest2 { a }))
    }

    /// Adds a learnable scalar to every voxel.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        if self.nodes[bias.0].value.len() != 1 {
            return Err(Error::InvalidParam("bias must be a scalar node".into()));
        }
        let b = self.nodes[bias.0].value.data()[0];
        let va = &self.nodes[a.0].value;
        let value = va.map(|v| v + b);
        let rg = self.req(a) || self.req(bias);
        Ok(self.push(value, rg, Op::AddBias { a, bias }))
    }

    /// Hinge-bounded confusion sums at threshold `t` (a scalar node):
    /// with labels mapped to ±1 and `hinge(v) = max(0, 1 - y*(v - t))`,
    /// returns `(tp_lower, fp_upper)` where `tp_lower = Σ_{y=1} (1 - hinge)`
    /// and `fp_upper = Σ_{y=0} hinge`. Subgradient 0 at the kink. Both sums
    /// are differentiable in `pred` and `t`.
    pub fn hinge_sums(
        &mut self,
        pred: NodeId,
        labels: &Volume,
        t: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let vp = &self.nodes[pred.0].value;
        vp.check_same_shape(labels)?;
        if !labels.is_binary() {
            return Err(Error::InvalidVolume("hinge labels must be binary".into()));
        }
        if self.nodes[t.0].value.len() != 1 {
            return Err(Error::InvalidParam("hinge threshold must be a scalar node".into()));
        }
        let tv = self.nodes[t.0].value.data()[0];
        let (mut tp, mut fp) = (0.0, 0.0);
        for (&v, &y) in vp.data().iter().zip(labels.data()) {
            if y != 0.0 {
                let hinge = (1.0 - (v - tv)).max(0.0);
                tp += 1.0 - hinge;
            } else {
                let hinge = (1.0 + (v - tv)).max(0.0);
                fp += hinge;
            }
        }
        let rg = self.req(pred) || self.req(t);
        let tp_node = self.push(
            Volume::scalar(tp),
            rg,
            Op::HingeSums {
                pred,
                threshold: t,
                labels: labels.clone(),
                side: HingeSide::TpLower,
            },
        );
        let fp_node = self.push(
            Volume::scalar(fp),
            rg,
            Op::HingeSums {
                pred,
                threshold: t,
                labels: labels.clone(),
                side: HingeSide::FpUpper,
            },
        );
        Ok((tp_node, fp_node))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse accumulation from a scalar root. Errors on a non-scalar root
    /// or when called twice without [`Tape::zero_grads`].
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let root_node = &self.nodes[root.0];
        if root_node.value.len() != 1 {
            return Err(Error::NonScalarRoot(root_node.value.dims()));
        }
        self.backward_done = true;
        self.nodes[root.0].grad = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let g = node.grad.as_deref().expect("checked above");
            match &node.op {
                Op::Leaf => {}
                Op::Unary { a, kind } => {
                    if !before[a.0].requires_grad {
                        continue;
                    }
                    let av: Vec<f64> = before[a.0].value.data().to_vec();
                    let av = av.as_slice();
                    accum(before, *a, |dst| match kind {
                        UnaryKind::Neg => {
                            for (d, gi) in dst.iter_mut().zip(g) {
                                *d -= gi;
                            }
                        }
                        UnaryKind::Log => {
                            for ((d, gi), &v) in dst.iter_mut().zip(g).zip(av) {
                                *d += gi / v;
                            }
                        }
                        UnaryKind::Exp => {
                            let out = node.value.data();
                            for ((d, gi), &o) in dst.iter_mut().zip(g).zip(out) {
                                *d += gi * o;
                            }
                        }
                        UnaryKind::ClampMin(c) => {
                            let c = f64::from_bits(*c);
                            for ((d, gi), &v) in dst.iter_mut().zip(g).zip(av) {
                                if v > c {
                                    *d += gi;
                                }
                            }
                        }
                        UnaryKind::Scale(c) => {
                            let c = f64::from_bits(*c);
                            for (d, gi) in dst.iter_mut().zip(g) {
                                *d += gi * c;
                            }
                        }
                        UnaryKind::AddC(_) => {
                            for (d, gi) in dst.iter_mut().zip(g) {
                                *d += gi;
                            }
                        }
                        UnaryKind::LeakyRelu(s) => {
                            let s = f64::from_bits(*s);
                            for ((d, gi), &v) in dst.iter_mut().zip(g).zip(av) {
                                *d += gi * if v > 0.0 { 1.0 } else { s };
                            }
                        }
                    });
                }
                Op::Binary { a, b, kind } => match kind {
                    BinaryKind::Add => {
                        accum(before, *a, |dst| {
                            for (d, gi) in dst.iter_mut().zip(g) {
                                *d += gi;
                            }
                        });
                        accum(before, *b, |dst| {
                            for (d, gi) in dst.iter_mut().zip(g) {
                                *d += gi;
                            }
                        });
                    }
                    BinaryKind::Sub => {
                        accum(before, *a, |dst| {
                            for (d, gi) in dst.iter_mut().zip(g) {
                                *d += gi;
                            }
                        });
                        accum(before, *b, |dst| {
                            for (d, gi) in dst.iter_mut().zip(g) {
                                *d -= gi;
                            }
                        });
                    }
                    BinaryKind::Mul => {
                        let (ai, bi) = (a.0, b.0);
                        if before[ai].requires_grad {
                            let bv: Vec<f64> = before[bi].value.data().to_vec();
                            accum(before, *a, |dst| {
                                for ((d, gi), &v) in dst.iter_mut().zip(g).zip(&bv) {
                                    *d += gi * v;
                                }
                            });
                        }
                        if before[bi].requires_grad {
                            let av: Vec<f64> = before[ai].value.data().to_vec();
                            accum(before, *b, |dst| {
                                for ((d, gi), &v) in dst.iter_mut().zip(g).zip(&av) {
                                    *d += gi * v;
                                }
                            });
                        }
                    }
                    BinaryKind::Div => {
                        let (ai, bi) = (a.0, b.0);
                        if before[ai].requires_grad {
                            let bv: Vec<f64> = before[bi].value.data().to_vec();
                            accum(before, *a, |dst| {
                                for ((d, gi), &v) in dst.iter_mut().zip(g).zip(&bv) {
                                    *d += gi / v;
                                }
                            });
                        }
                        if before[bi].requires_grad {
                            let av: Vec<f64> = before[ai].value.data().to_vec();
                            let bv: Vec<f64> = before[bi].value.data().to_vec();
                            accum(before, *b, |dst| {
                                for (((d, gi), &x), &y) in
                                    dst.iter_mut().zip(g).zip(&av).zip(&bv)
                                {
                                    *d -= gi * x / (y * y);
                                }
                            });
                        }
                    }
                },
                Op::Conv {
                    inputs,
                    kernels,
                    bias,
                } => {
                    let dims = node.value.dims();
                    for (&inp_id, &ker_id) in inputs.iter().zip(kernels) {
                        if before[inp_id.0].requires_grad {
                            let ker = before[ker_id.0].value.clone();
                            let mut flipped = ker.data().to_vec();
                            flipped.reverse();
                            let mut dinp = vec![0.0; g.len()];
                            conv_same(g, dims, &flipped, ker.dims(), &mut dinp);
                            accum(before, inp_id, |dst| {
                                for (d, v) in dst.iter_mut().zip(&dinp) {
                                    *d += v;
                                }
                            });
                        }
                        if before[ker_id.0].requires_grad {
                            let inp = before[inp_id.0].value.clone();
                            let ks = before[ker_id.0].value.dims();
                            let mut dk = vec![0.0; ks.0 * ks.1 * ks.2];
                            conv_kernel_grad(inp.data(), dims, g, ks, &mut dk);
                            accum(before, ker_id, |dst| {
                                for (d, v) in dst.iter_mut().zip(&dk) {
                                    *d += v;
                                }
                            });
                        }
                    }
                    if let Some(b) = bias {
                        if before[b.0].requires_grad {
                            let s: f64 = g.iter().sum();
                            accum(before, *b, |dst| dst[0] += s);
                        }
                    }
                }
                Op::MaxPool { a, argmax } => {
                    accum(before, *a, |dst| {
                        for (gi, &am) in g.iter().zip(argmax) {
                            if am >= 0 {
                                dst[am as usize] += gi;
                            }
                        }
                    });
                }
                Op::SoftmaxPair { a, b, chan } => {
                    // d s_own / d own-logit = s_a * s_b; cross partial is the
                    // negation. s_a * s_b is channel-symmetric.
                    let own = node.value.data();
                    let prod: Vec<f64> = own.iter().map(|&s| s * (1.0 - s)).collect();
                    let (own_parent, other_parent) = if *chan == 0 { (*a, *b) } else { (*b, *a) };
                    accum(before, own_parent, |dst| {
                        for ((d, gi), &p) in dst.iter_mut().zip(g).zip(&prod) {
                            *d += gi * p;
                        }
                    });
                    accum(before, other_parent, |dst| {
                        for ((d, gi), &p) in dst.iter_mut().zip(g).zip(&prod) {
                            *d -= gi * p;
                        }
                    });
                }
                Op::ReduceSum { a, mask } => {
                    let gs = g[0];
                    match mask {
                        Some(m) => {
                            let mv: Vec<f64> = m.data().to_vec();
                            accum(before, *a, |dst| {
                                for (d, &w) in dst.iter_mut().zip(&mv) {
                                    *d += gs * w;
                                }
                            });
                        }
                        None => accum(before, *a, |dst| {
                            for d in dst.iter_mut() {
                                *d += gs;
                            }
                        }),
                    }
                }
                Op::InstanceNorm { a, inv_std } => {
                    let y = node.value.data();
                    let n = y.len() as f64;
                    let mean_g: f64 = g.iter().sum::<f64>() / n;
                    let mean_gy: f64 = g.iter().zip(y).map(|(gi, yi)| gi * yi).sum::<f64>() / n;
                    let s = *inv_std;
                    let yv: Vec<f64> = y.to_vec();
                    accum(before, *a, |dst| {
                        for ((d, gi), yi) in dst.iter_mut().zip(g).zip(&yv) {
                            *d += s * (gi - mean_g - yi * mean_gy);
                        }
                    });
                }
                Op::DownAvg2 { a } => {
                    let (ox, oy, oz) = node.value.dims();
                    let (nx, ny) = (ox * 2, oy * 2);
                    accum(before, *a, |dst| {
                        for z in 0..oz {
                            for y in 0..oy {
                                for x in 0..ox {
                                    let gi = g[x + ox * (y + oy * z)] / 8.0;
                                    for dz in 0..2 {
                                        for dy in 0..2 {
                                            for dx in 0..2 {
                                                dst[(2 * x + dx)
                                                    + nx * ((2 * y + dy) + ny * (2 * z + dz))] += gi;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    });
                }
                Op::UpNearest2 { a } => {
                    let (ox, oy, oz) = node.value.dims();
                    let (nx, ny) = (ox / 2, oy / 2);
                    accum(before, *a, |dst| {
                        for z in 0..oz {
                            for y in 0..oy {
                                for x in 0..ox {
                                    dst[(x / 2) + nx * ((y / 2) + ny * (z / 2))] +=
                                        g[x + ox * (y + oy * z)];
                                }
                            }
                        }
                    });
                }
                Op::AddBias { a, bias } => {
                    accum(before, *a, |dst| {
                        for (d, gi) in dst.iter_mut().zip(g) {
                            *d += gi;
                        }
                    });
                    let s: f64 = g.iter().sum();
                    accum(before, *bias, |dst| dst[0] += s);
                }
                Op::HingeSums {
                    pred,
                    threshold,
                    labels,
                    side,
                } => {
                    let gs = g[0];
                    let tv = before[threshold.0].value.data()[0];
                    let pv: Vec<f64> = before[pred.0].value.data().to_vec();
                    let lv: Vec<f64> = labels.data().to_vec();
                    let side = *side;
                    let mut dt = 0.0;
                    if before[pred.0].requires_grad {
                        accum(before, *pred, |dst| {
                            for ((d, &v), &y) in dst.iter_mut().zip(&pv).zip(&lv) {
                                match side {
                                    HingeSide::TpLower => {
                                        if y != 0.0 && 1.0 - (v - tv) > 0.0 {
                                            *d += gs;
                                        }
                                    }
                                    HingeSide::FpUpper => {
                                        if y == 0.0 && 1.0 + (v - tv) > 0.0 {
                                            *d += gs;
                                        }
                                    }
                                }
                            }
                        });
                    }
                    for (&v, &y) in pv.iter().zip(&lv) {
                        match side {
                            HingeSide::TpLower => {
                                if y != 0.0 && 1.0 - (v - tv) > 0.0 {
                                    dt -= gs;
                                }
                            }
                            HingeSide::FpUpper => {
                                if y == 0.0 && 1.0 + (v - tv) > 0.0 {
                                    dt -= gs;
                                }
                            }
                        }
                    }
                    accum(before, *threshold, |dst| dst[0] += dt);
                }
            }
        }
        Ok(())
    }
}

/// Accumulate into a parent's gradient buffer, allocating it on first touch.
/// Parents that do not require gradients are skipped.
fn accum(nodes: &mut [Node], id: NodeId, f: impl FnOnce(&mut [f64])) {
    let node = &mut nodes[id.0];
    if !node.requires_grad {
        return;
    }
    let len = node.value.len();
    let buf = node.grad.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}

/// Same-shape cross-correlation with zero padding, stride 1.
/// `out[v] = Σ_t ker[t] · inp[v + t]` over signed tap offsets `t`.
pub(crate) fn conv_same(
    inp: &[f64],
    dims: (usize, usize, usize),
    ker: &[f64],
    ksize: (usize, usize, usize),
    out: &mut [f64],
) {
    let (nx, ny, nz) = dims;
    let (kx, ky, kz) = ksize;
    let (rx, ry, rz) = ((kx / 2) as isize, (ky / 2) as isize, (kz / 2) as isize);

    // Skip exact-zero taps: delta and sparse kernels collapse to a few reads.
    let mut taps: Vec<(isize, isize, isize, f64)> = Vec::with_capacity(kx * ky * kz);
    for dz in -rz..=rz {
        for dy in -ry..=ry {
            for dx in -rx..=rx {
                let w = ker[(dx + rx) as usize
                    + kx * ((dy + ry) as usize + ky * (dz + rz) as usize)];
                if w != 0.0 {
                    taps.push((dx, dy, dz, w));
                }
            }
        }
    }
    let lin: Vec<(isize, f64)> = taps
        .iter()
        .map(|&(dx, dy, dz, w)| (dx + (nx as isize) * (dy + (ny as isize) * dz), w))
        .collect();

    let nxy = nx * ny;
    let interior_x = rx as usize..nx.saturating_sub(rx as usize);
    out.par_chunks_mut(nxy).enumerate().for_each(|(z, plane)| {
        let z = z as isize;
        let interior_z = z >= rz && z + rz < nz as isize;
        for y in 0..ny as isize {
            let interior_y = y >= ry && y + ry < ny as isize;
            let row = y as usize * nx;
            if interior_z && interior_y && !interior_x.is_empty() {
                for x in interior_x.clone() {
                    let base = (x + row + nxy * z as usize) as isize;
                    let mut acc = 0.0;
                    for &(off, w) in &lin {
                        acc += w * inp[(base + off) as usize];
                    }
                    plane[row + x] = acc;
                }
                for x in (0..rx as usize).chain(nx.saturating_sub(rx as usize)..nx) {
                    plane[row + x] = conv_at(inp, nx, ny, nz, &taps, x as isize, y, z);
                }
            } else {
                for x in 0..nx {
                    plane[row + x] = conv_at(inp, nx, ny, nz, &taps, x as isize, y, z);
                }
            }
        }
    });
}

#[inline]
fn conv_at(
    inp: &[f64],
    nx: usize,
    ny: usize,
    nz: usize,
    taps: &[(isize, isize, isize, f64)],
    x: isize,
    y: isize,
    z: isize,
) -> f64 {
    let mut acc = 0.0;
    for &(dx, dy, dz, w) in taps {
        let xx = x + dx;
        let yy = y + dy;
        let zz = z + dz;
        if xx >= 0
            && yy >= 0
            && zz >= 0
            && (xx as usize) < nx
            && (yy as usize) < ny
            && (zz as usize) < nz
        {
            acc += w * inp[xx as usize + nx * (yy as usize + ny * zz as usize)];
        }
    }
    acc
}

/// dK[t] = Σ_v g[v] · inp[v + t], the kernel-tap gradient of [`conv_same`].
fn conv_kernel_grad(
    inp: &[f64],
    dims: (usize, usize, usize),
    g: &[f64],
    ksize: (usize, usize, usize),
    dk: &mut [f64],
) {
    let (nx, ny, nz) = dims;
    let (kx, ky, kz) = ksize;
    let (rx, ry, rz) = ((kx / 2) as isize, (ky / 2) as isize, (kz / 2) as isize);
    dk.par_iter_mut().enumerate().for_each(|(ti, slot)| {
        let dx = (ti % kx) as isize - rx;
        let dy = ((ti / kx) % ky) as isize - ry;
        let dz = (ti / (kx * ky)) as isize - rz;
        let x0 = (-dx).max(0) as usize;
        let x1 = ((nx as isize - dx).min(nx as isize)).max(0) as usize;
        let y0 = (-dy).max(0) as usize;
        let y1 = ((ny as isize - dy).min(ny as isize)).max(0) as usize;
        let z0 = (-dz).max(0) as usize;
        let z1 = ((nz as isize - dz).min(nz as isize)).max(0) as usize;
        let mut acc = 0.0;
        for z in z0..z1 {
            for y in y0..y1 {
                let gbase = nx * (y + ny * z);
                // may be negative before the x offset lands in range
                let ibase = gbase as isize + dx + (nx as isize) * (dy + (ny as isize) * dz);
                let istart = (ibase + x0 as isize) as usize;
                let grow = &g[gbase + x0..gbase + x1];
                let irow = &inp[istart..istart + (x1 - x0)];
                for (gv, iv) in grow.iter().zip(irow) {
                    acc += gv * iv;
                }
            }
        }
        *slot += acc;
    });
}
