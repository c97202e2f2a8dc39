//! Reverse-mode differentiation over the tensor kernels.
//!
//! A [`Tape`] records every primitive op as it executes; [`Tape::backward`]
//! replays the record in exact reverse order and applies each op's gradient
//! rule. Constants baked into an op (validity masks, switch maps,
//! normalization factors) receive no gradient, which is how the
//! non-differentiable mask path is kept out of the chain rule.

mod check;

pub use check::grad_check;

use crate::error::{Error, Result};
use crate::tensor::{self, Scalar, Shape, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Saved batch statistics for the batch-norm gradient rule.
#[derive(Clone)]
struct BnSaved<T> {
    normalized: Tensor<T>,
    inv_std: Vec<T>,
}

enum Op<T: Scalar> {
    Leaf,
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        dilation: usize,
        pad: usize,
    },
    TConv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Relu {
        x: NodeId,
    },
    /// Multiply by a constant, broadcast over axes of extent one.
    MulConst {
        x: NodeId,
        factor: Tensor<T>,
    },
    /// Add a constant, broadcast over axes of extent one.
    AddConst {
        x: NodeId,
    },
    /// Add a per-output-channel bias stored as a `(1, C, 1, 1)` node.
    AddBias {
        x: NodeId,
        b: NodeId,
    },
    /// Pointwise choice by a constant binary single-channel map:
    /// where the switch is 1 take `on`, else `off`.
    Select {
        on: NodeId,
        off: NodeId,
        switch: Tensor<T>,
    },
    Scale {
        x: NodeId,
        factor: T,
    },
    Concat {
        parts: Vec<NodeId>,
        extents: Vec<usize>,
    },
    /// Average over a coarse grid of roughly `scale`-sized cells,
    /// broadcast back to the input resolution.
    PyramidPool {
        x: NodeId,
        cells: Vec<(usize, usize, usize, usize)>,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        saved: BnSaved<T>,
    },
    Sum {
        x: NodeId,
    },
    /// Mean squared error over mask-selected pixels; scalar output.
    MaskedSqErr {
        pred: NodeId,
        target: Tensor<T>,
        mask: Tensor<T>,
        count: usize,
    },
    /// Mean absolute first-order spatial difference over both axes;
    /// scalar output.
    SmoothAbs {
        pred: NodeId,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by a backward pass, indexed by [`NodeId`].
pub struct Gradients<T> {
    slots: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.slots[id.0].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.slots[id.0].take()
    }
}

/// Ordered record of executed primitive ops.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> Shape {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Record an input or parameter. Only nodes entered with
    /// `needs_grad = true` (and values derived from them) receive gradients.
    pub fn leaf(&mut self, value: Tensor<T>, needs_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, needs_grad)
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        dilation: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let bias: Option<Vec<T>> = b.map(|bid| self.value(bid).data().to_vec());
        let y = tensor::conv2d(
            self.value(x),
            self.value(w),
            bias.as_deref(),
            stride,
            dilation,
            pad,
        )?;
        let needs =
            self.needs(x) || self.needs(w) || b.map(|bid| self.needs(bid)).unwrap_or(false);
        Ok(self.push(
            y,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                dilation,
                pad,
            },
            needs,
        ))
    }

    pub fn transposed_conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let bias: Option<Vec<T>> = b.map(|bid| self.value(bid).data().to_vec());
        let y = tensor::transposed_conv2d(
            self.value(x),
            self.value(w),
            bias.as_deref(),
            stride,
            pad,
        )?;
        let needs =
            self.needs(x) || self.needs(w) || b.map(|bid| self.needs(bid)).unwrap_or(false);
        Ok(self.push(y, Op::TConv2d { x, w, b, stride, pad }, needs))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let y = self.value(a).add(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(y, Op::Add { a, b }, needs))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let y = self.value(a).mul(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(y, Op::Mul { a, b }, needs))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let y = self.value(x).relu();
        let needs = self.needs(x);
        self.push(y, Op::Relu { x }, needs)
    }

    pub fn mul_const(&mut self, x: NodeId, factor: Tensor<T>) -> Result<NodeId> {
        let y = self.value(x).mul_broadcast(&factor)?;
        let needs = self.needs(x);
        Ok(self.push(y, Op::MulConst { x, factor }, needs))
    }

    pub fn add_const(&mut self, x: NodeId, addend: Tensor<T>) -> Result<NodeId> {
        let y = self.value(x).add_broadcast(&addend)?;
        let needs = self.needs(x);
        Ok(self.push(y, Op::AddConst { x }, needs))
    }

    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let bs = self.shape(b);
        let xs = self.shape(x);
        if bs.channels != xs.channels || bs.batch != 1 || bs.height != 1 || bs.width != 1 {
            return Err(Error::shape(
                "add_bias",
                format!("bias {} for features {}", bs, xs),
            ));
        }
        let y = self.value(x).add_broadcast(self.value(b))?;
        let needs = self.needs(x) || self.needs(b);
        Ok(self.push(y, Op::AddBias { x, b }, needs))
    }

    pub fn select(&mut self, on: NodeId, off: NodeId, switch: Tensor<T>) -> Result<NodeId> {
        let on_v = self.value(on);
        let off_v = self.value(off);
        if on_v.shape() != off_v.shape() {
            return Err(Error::shape(
                "select",
                format!("{} vs {}", on_v.shape(), off_v.shape()),
            ));
        }
        let y = select_forward(on_v, off_v, &switch)?;
        let needs = self.needs(on) || self.needs(off);
        Ok(self.push(y, Op::Select { on, off, switch }, needs))
    }

    pub fn scale(&mut self, x: NodeId, factor: T) -> NodeId {
        let y = self.value(x).scale(factor);
        let needs = self.needs(x);
        self.push(y, Op::Scale { x, factor }, needs)
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let y = Tensor::concat_channels(&tensors)?;
        let extents: Vec<usize> = parts.iter().map(|&p| self.shape(p).channels).collect();
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            y,
            Op::Concat {
                parts: parts.to_vec(),
                extents,
            },
            needs,
        ))
    }

    /// Adaptive average pooling to a `ceil(h/scale) x ceil(w/scale)` grid,
    /// broadcast back to the input resolution.
    pub fn pyramid_pool(&mut self, x: NodeId, scale: usize) -> Result<NodeId> {
        if scale < 2 {
            return Err(Error::invalid("pyramid scale must be at least 2"));
        }
        let cells = pyramid_cells(self.shape(x), scale);
        let y = pyramid_forward(self.value(x), &cells);
        let needs = self.needs(x);
        Ok(self.push(y, Op::PyramidPool { x, cells }, needs))
    }

    /// Batch normalization with batch statistics. Returns the output node
    /// plus the per-channel batch mean and variance so the caller can fold
    /// them into running statistics.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: T,
    ) -> Result<(NodeId, Vec<T>, Vec<T>)> {
        let xs = self.shape(x);
        let per_channel = xs.batch * xs.height * xs.width;
        if per_channel == 0 {
            return Err(Error::invalid("batch norm over empty tensor"));
        }
        let n = T::of_f64(per_channel as f64);
        let xv = self.value(x);
        let mut mean = vec![T::zero(); xs.channels];
        let mut var = vec![T::zero(); xs.channels];
        for b in 0..xs.batch {
            for (c, m) in mean.iter_mut().enumerate() {
                for h in 0..xs.height {
                    for &v in xv.row(b, c, h) {
                        *m += v;
                    }
                }
            }
        }
        for m in mean.iter_mut() {
            *m = *m / n;
        }
        for b in 0..xs.batch {
            for (c, s) in var.iter_mut().enumerate() {
                let m = mean[c];
                for h in 0..xs.height {
                    for &v in xv.row(b, c, h) {
                        let d = v - m;
                        *s += d * d;
                    }
                }
            }
        }
        for s in var.iter_mut() {
            *s = *s / n;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();

        let mut normalized = Tensor::zeros(xs);
        for b in 0..xs.batch {
            for c in 0..xs.channels {
                let (m, is) = (mean[c], inv_std[c]);
                for h in 0..xs.height {
                    let src = xv.row(b, c, h);
                    let dst_start = xs.index(b, c, h, 0);
                    for (i, &v) in src.iter().enumerate() {
                        normalized.data_mut()[dst_start + i] = (v - m) * is;
                    }
                }
            }
        }
        let g = self.value(gamma);
        let bt = self.value(beta);
        let mut out = Tensor::zeros(xs);
        for b in 0..xs.batch {
            for c in 0..xs.channels {
                let (gv, bv) = (g.data()[c], bt.data()[c]);
                for h in 0..xs.height {
                    let start = xs.index(b, c, h, 0);
                    for i in 0..xs.width {
                        out.data_mut()[start + i] = normalized.data()[start + i] * gv + bv;
                    }
                }
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let node = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                saved: BnSaved {
                    normalized,
                    inv_std,
                },
            },
            needs,
        );
        Ok((node, mean, var))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let y = Tensor::scalar(self.value(x).sum());
        let needs = self.needs(x);
        self.push(y, Op::Sum { x }, needs)
    }

    /// `mean over mask==1 of (pred - target)^2`, scalar. Errors when the
    /// mask selects nothing.
    pub fn masked_sq_err(
        &mut self,
        pred: NodeId,
        target: &Tensor<T>,
        mask: &Tensor<T>,
    ) -> Result<NodeId> {
        let p = self.value(pred);
        if p.shape() != target.shape() || p.shape() != mask.shape() {
            return Err(Error::shape(
                "masked_sq_err",
                format!("pred {}, target {}, mask {}", p.shape(), target.shape(), mask.shape()),
            ));
        }
        let count = mask.data().iter().filter(|&&m| m != T::zero()).count();
        if count == 0 {
            return Err(Error::NoSupervision);
        }
        let n = T::of_f64(count as f64);
        let mut acc = T::zero();
        for ((&pv, &tv), &mv) in p.data().iter().zip(target.data()).zip(mask.data()) {
            if mv != T::zero() {
                let d = pv - tv;
                acc += d * d;
            }
        }
        let value = Tensor::scalar(acc / n);
        let needs = self.needs(pred);
        Ok(self.push(
            value,
            Op::MaskedSqErr {
                pred,
                target: target.clone(),
                mask: mask.clone(),
                count,
            },
            needs,
        ))
    }

    /// Mean absolute first-order spatial difference over both axes, scalar.
    pub fn smooth_abs(&mut self, pred: NodeId) -> NodeId {
        let value = Tensor::scalar(smooth_abs_value(self.value(pred)));
        let needs = self.needs(pred);
        self.push(value, Op::SmoothAbs { pred }, needs)
    }

    /// Replay the tape backward from a scalar terminal node seeded with
    /// `seed`, returning a gradient for every node that was marked as
    /// needing one.
    pub fn backward(&self, terminal: NodeId, seed: Tensor<T>) -> Result<Gradients<T>> {
        if !self.shape(terminal).is_scalar() {
            return Err(Error::invalid(format!(
                "backward requires a scalar terminal node, got {}",
                self.shape(terminal)
            )));
        }
        if !seed.shape().is_scalar() {
            return Err(Error::invalid(format!(
                "backward seed must be scalar, got {}",
                seed.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[terminal.0] = Some(seed);

        for idx in (0..self.nodes.len()).rev() {
            if !self.nodes[idx].needs_grad {
                grads[idx] = None;
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.apply_rule(idx, &g, &mut grads)?;
            // Leaves keep their gradient; interior nodes release it.
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Ok(Gradients { slots: grads })
    }

    /// Convenience for `backward` with a unit seed.
    pub fn backward_unit(&self, terminal: NodeId) -> Result<Gradients<T>> {
        self.backward(terminal, Tensor::scalar(T::one()))
    }

    fn accumulate(grads: &mut [Option<Tensor<T>>], id: NodeId, delta: Tensor<T>) -> Result<()> {
        match &mut grads[id.0] {
            Some(existing) => {
                *existing = existing.add(&delta)?;
            }
            slot @ None => *slot = Some(delta),
        }
        Ok(())
    }

    fn apply_rule(
        &self,
        idx: usize,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                dilation,
                pad,
            } => {
                if self.needs(*x) {
                    let dx = tensor::conv2d_backward_input(
                        g,
                        self.value(*w),
                        *stride,
                        *dilation,
                        *pad,
                        self.shape(*x),
                    )?;
                    Self::accumulate(grads, *x, dx)?;
                }
                if self.needs(*w) {
                    let dw = tensor::conv2d_backward_weights(
                        g,
                        self.value(*x),
                        *stride,
                        *dilation,
                        *pad,
                        self.shape(*w),
                    )?;
                    Self::accumulate(grads, *w, dw)?;
                }
                if let Some(bid) = b {
                    if self.needs(*bid) {
                        let db = tensor::conv2d_backward_bias(g);
                        let len = db.len();
                        Self::accumulate(
                            grads,
                            *bid,
                            Tensor::new(Shape::new(1, len, 1, 1), db)?,
                        )?;
                    }
                }
            }
            Op::TConv2d { x, w, b, stride, pad } => {
                if self.needs(*x) {
                    let dx = tensor::tconv_backward_input(
                        g,
                        self.value(*w),
                        *stride,
                        *pad,
                        self.shape(*x),
                    )?;
                    Self::accumulate(grads, *x, dx)?;
                }
                if self.needs(*w) {
                    let dw = tensor::tconv_backward_weights(
                        g,
                        self.value(*x),
                        *stride,
                        *pad,
                        self.shape(*w),
                    )?;
                    Self::accumulate(grads, *w, dw)?;
                }
                if let Some(bid) = b {
                    if self.needs(*bid) {
                        let db = tensor::tconv_backward_bias(g);
                        let len = db.len();
                        Self::accumulate(
                            grads,
                            *bid,
                            Tensor::new(Shape::new(1, len, 1, 1), db)?,
                        )?;
                    }
                }
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    Self::accumulate(grads, *a, g.clone())?;
                }
                if self.needs(*b) {
                    Self::accumulate(grads, *b, g.clone())?;
                }
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    Self::accumulate(grads, *a, g.mul(self.value(*b))?)?;
                }
                if self.needs(*b) {
                    Self::accumulate(grads, *b, g.mul(self.value(*a))?)?;
                }
            }
            Op::Relu { x } => {
                if self.needs(*x) {
                    let gate = self.value(*x).map(|v| {
                        if v > T::zero() {
                            T::one()
                        } else {
                            T::zero()
                        }
                    });
                    Self::accumulate(grads, *x, g.mul(&gate)?)?;
                }
            }
            Op::MulConst { x, factor } => {
                if self.needs(*x) {
                    Self::accumulate(grads, *x, g.mul_broadcast(factor)?)?;
                }
            }
            Op::AddConst { x } => {
                if self.needs(*x) {
                    Self::accumulate(grads, *x, g.clone())?;
                }
            }
            Op::AddBias { x, b } => {
                if self.needs(*x) {
                    Self::accumulate(grads, *x, g.clone())?;
                }
                if self.needs(*b) {
                    Self::accumulate(grads, *b, g.reduce_to(self.shape(*b))?)?;
                }
            }
            Op::Select { on, off, switch } => {
                if self.needs(*on) {
                    let zero = Tensor::zeros(g.shape());
                    Self::accumulate(grads, *on, select_forward(g, &zero, switch)?)?;
                }
                if self.needs(*off) {
                    let zero = Tensor::zeros(g.shape());
                    Self::accumulate(grads, *off, select_forward(&zero, g, switch)?)?;
                }
            }
            Op::Scale { x, factor } => {
                if self.needs(*x) {
                    Self::accumulate(grads, *x, g.scale(*factor))?;
                }
            }
            Op::Concat { parts, extents } => {
                let splits = g.split_channels(extents)?;
                for (part, dg) in parts.iter().zip(splits) {
                    if self.needs(*part) {
                        Self::accumulate(grads, *part, dg)?;
                    }
                }
            }
            Op::PyramidPool { x, cells } => {
                if self.needs(*x) {
                    Self::accumulate(grads, *x, pyramid_backward(g, cells, self.shape(*x)))?;
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                saved,
            } => {
                let xs = self.shape(*x);
                let n = T::of_f64((xs.batch * xs.height * xs.width) as f64);
                let gv = self.value(*gamma);
                // Per-channel reductions of g and g * normalized.
                let mut sum_g = vec![T::zero(); xs.channels];
                let mut sum_gx = vec![T::zero(); xs.channels];
                for b in 0..xs.batch {
                    for c in 0..xs.channels {
                        for h in 0..xs.height {
                            let start = xs.index(b, c, h, 0);
                            for i in 0..xs.width {
                                let gi = g.data()[start + i];
                                sum_g[c] += gi;
                                sum_gx[c] += gi * saved.normalized.data()[start + i];
                            }
                        }
                    }
                }
                if self.needs(*beta) {
                    Self::accumulate(
                        grads,
                        *beta,
                        Tensor::new(Shape::new(1, xs.channels, 1, 1), sum_g.clone())?,
                    )?;
                }
                if self.needs(*gamma) {
                    Self::accumulate(
                        grads,
                        *gamma,
                        Tensor::new(Shape::new(1, xs.channels, 1, 1), sum_gx.clone())?,
                    )?;
                }
                if self.needs(*x) {
                    let mut dx = Tensor::zeros(xs);
                    for b in 0..xs.batch {
                        for c in 0..xs.channels {
                            let scale = gv.data()[c] * saved.inv_std[c] / n;
                            for h in 0..xs.height {
                                let start = xs.index(b, c, h, 0);
                                for i in 0..xs.width {
                                    let gi = g.data()[start + i];
                                    let xh = saved.normalized.data()[start + i];
                                    dx.data_mut()[start + i] =
                                        scale * (n * gi - sum_g[c] - xh * sum_gx[c]);
                                }
                            }
                        }
                    }
                    Self::accumulate(grads, *x, dx)?;
                }
            }
            Op::Sum { x } => {
                if self.needs(*x) {
                    let seed = g.data()[0];
                    Self::accumulate(grads, *x, Tensor::filled(self.shape(*x), seed))?;
                }
            }
            Op::MaskedSqErr {
                pred,
                target,
                mask,
                count,
            } => {
                if self.needs(*pred) {
                    let seed = g.data()[0];
                    let two_over_n = T::of_f64(2.0 / *count as f64) * seed;
                    let p = self.value(*pred);
                    let mut dp = Tensor::zeros(p.shape());
                    for (i, ((&pv, &tv), &mv)) in p
                        .data()
                        .iter()
                        .zip(target.data())
                        .zip(mask.data())
                        .enumerate()
                    {
                        if mv != T::zero() {
                            dp.data_mut()[i] = two_over_n * (pv - tv);
                        }
                    }
                    Self::accumulate(grads, *pred, dp)?;
                }
            }
            Op::SmoothAbs { pred } => {
                if self.needs(*pred) {
                    let seed = g.data()[0];
                    Self::accumulate(grads, *pred, smooth_abs_grad(self.value(*pred), seed))?;
                }
            }
        }
        Ok(())
    }
}

fn select_forward<T: Scalar>(
    on: &Tensor<T>,
    off: &Tensor<T>,
    switch: &Tensor<T>,
) -> Result<Tensor<T>> {
    let s = on.shape();
    let ss = switch.shape();
    if ss.batch != s.batch || ss.channels != 1 || ss.height != s.height || ss.width != s.width {
        return Err(Error::shape(
            "select switch",
            format!("switch {} for features {}", ss, s),
        ));
    }
    let mut out = Tensor::zeros(s);
    for b in 0..s.batch {
        for c in 0..s.channels {
            for h in 0..s.height {
                let sw = switch.row(b, 0, h);
                let on_row = on.row(b, c, h);
                let off_row = off.row(b, c, h);
                let start = s.index(b, c, h, 0);
                for i in 0..s.width {
                    out.data_mut()[start + i] = if sw[i] == T::one() {
                        on_row[i]
                    } else {
                        off_row[i]
                    };
                }
            }
        }
    }
    Ok(out)
}

fn pyramid_cells(shape: Shape, scale: usize) -> Vec<(usize, usize, usize, usize)> {
    let grid_h = shape.height.div_ceil(scale).max(1);
    let grid_w = shape.width.div_ceil(scale).max(1);
    let mut cells = Vec::with_capacity(grid_h * grid_w);
    for gi in 0..grid_h {
        let h0 = gi * shape.height / grid_h;
        let h1 = (gi + 1) * shape.height / grid_h;
        for gj in 0..grid_w {
            let w0 = gj * shape.width / grid_w;
            let w1 = (gj + 1) * shape.width / grid_w;
            cells.push((h0, h1, w0, w1));
        }
    }
    cells
}

fn pyramid_forward<T: Scalar>(x: &Tensor<T>, cells: &[(usize, usize, usize, usize)]) -> Tensor<T> {
    let s = x.shape();
    let mut out = Tensor::zeros(s);
    for b in 0..s.batch {
        for c in 0..s.channels {
            for &(h0, h1, w0, w1) in cells {
                let size = T::of_f64(((h1 - h0) * (w1 - w0)) as f64);
                let mut acc = T::zero();
                for h in h0..h1 {
                    for &v in &x.row(b, c, h)[w0..w1] {
                        acc += v;
                    }
                }
                let mean = acc / size;
                for h in h0..h1 {
                    for v in &mut out.row_mut(b, c, h)[w0..w1] {
                        *v = mean;
                    }
                }
            }
        }
    }
    out
}

fn pyramid_backward<T: Scalar>(
    g: &Tensor<T>,
    cells: &[(usize, usize, usize, usize)],
    shape: Shape,
) -> Tensor<T> {
    let mut dx = Tensor::zeros(shape);
    for b in 0..shape.batch {
        for c in 0..shape.channels {
            for &(h0, h1, w0, w1) in cells {
                let size = T::of_f64(((h1 - h0) * (w1 - w0)) as f64);
                let mut acc = T::zero();
                for h in h0..h1 {
                    for &v in &g.row(b, c, h)[w0..w1] {
                        acc += v;
                    }
                }
                let share = acc / size;
                for h in h0..h1 {
                    for v in &mut dx.row_mut(b, c, h)[w0..w1] {
                        *v = share;
                    }
                }
            }
        }
    }
    dx
}

fn smooth_abs_value<T: Scalar>(pred: &Tensor<T>) -> T {
    let s = pred.shape();
    let diffs = s.batch * s.channels * (s.height * (s.width - 1) + (s.height - 1) * s.width);
    if diffs == 0 {
        return T::zero();
    }
    let mut acc = T::zero();
    for b in 0..s.batch {
        for c in 0..s.channels {
            for h in 0..s.height {
                let row = pred.row(b, c, h);
                for w in 0..s.width - 1 {
                    acc += (row[w + 1] - row[w]).abs();
                }
            }
            for h in 0..s.height - 1 {
                let row = pred.row(b, c, h);
                let next = pred.row(b, c, h + 1);
                for w in 0..s.width {
                    acc += (next[w] - row[w]).abs();
                }
            }
        }
    }
    acc / T::of_f64(diffs as f64)
}

fn smooth_abs_grad<T: Scalar>(pred: &Tensor<T>, seed: T) -> Tensor<T> {
    let s = pred.shape();
    let diffs = s.batch * s.channels * (s.height * (s.width - 1) + (s.height - 1) * s.width);
    let mut dx = Tensor::zeros(s);
    if diffs == 0 {
        return dx;
    }
    let unit = seed / T::of_f64(diffs as f64);
    let sign = |d: T| {
        if d > T::zero() {
            unit
        } else if d < T::zero() {
            -unit
        } else {
            T::zero()
        }
    };
    for b in 0..s.batch {
        for c in 0..s.channels {
            for h in 0..s.height {
                for w in 0..s.width - 1 {
                    let d = pred.at(b, c, h, w + 1) - pred.at(b, c, h, w);
                    let sg = sign(d);
                    let right = s.index(b, c, h, w + 1);
                    let left = s.index(b, c, h, w);
                    dx.data_mut()[right] += sg;
                    dx.data_mut()[left] -= sg;
                }
            }
            for h in 0..s.height - 1 {
                for w in 0..s.width {
                    let d = pred.at(b, c, h + 1, w) - pred.at(b, c, h, w);
                    let sg = sign(d);
                    let down = s.index(b, c, h + 1, w);
                    let up = s.index(b, c, h, w);
                    dx.data_mut()[down] += sg;
                    dx.data_mut()[up] -= sg;
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng_tensor(shape: Shape, seed: u64) -> Tensor<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(rng_tensor(Shape::new(1, 2, 3, 3), 1), true);
        let s = tape.sum(x);
        let grads = tape.backward_unit(s).unwrap();
        let gx = grads.get(x).unwrap();
        assert!(gx.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn conv_sum_gradient_counts_taps() {
        // loss = sum(conv2d(x, all-ones 3x3 w, pad 1)): the gradient of an
        // interior pixel equals the number of windows it participates in,
        // which is the full tap count 9.
        let mut tape = Tape::new();
        let x = tape.leaf(rng_tensor(Shape::new(1, 1, 5, 5), 2), true);
        let w = tape.leaf(Tensor::filled(Shape::new(1, 1, 3, 3), 1.0), false);
        let y = tape.conv2d(x, w, None, 1, 1, 1).unwrap();
        let s = tape.sum(y);
        let grads = tape.backward_unit(s).unwrap();
        let gx = grads.get(x).unwrap();
        assert_eq!(gx.at(0, 0, 2, 2), 9.0);
        assert_eq!(gx.at(0, 0, 0, 0), 4.0); // corner participates in 4 windows
        assert_eq!(gx.at(0, 0, 0, 2), 6.0); // edge in 6
    }

    #[test]
    fn non_scalar_terminal_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(rng_tensor(Shape::new(1, 1, 2, 2), 3), true);
        let y = tape.relu(x);
        assert!(tape.backward_unit(y).is_err());
    }

    #[test]
    fn constants_block_gradient_flow() {
        let mut tape = Tape::new();
        let x = tape.leaf(rng_tensor(Shape::new(1, 1, 4, 4), 4), true);
        let frozen = tape.leaf(rng_tensor(Shape::new(1, 1, 4, 4), 5), false);
        let y = tape.mul(x, frozen).unwrap();
        let s = tape.sum(y);
        let grads = tape.backward_unit(s).unwrap();
        assert!(grads.get(frozen).is_none());
        assert!(grads.get(x).is_some());
    }

    #[test]
    fn gradient_accumulates_over_reuse() {
        // y = x*x summed: dy/dx = 2x via the two Mul branches.
        let mut tape = Tape::new();
        let xv = rng_tensor(Shape::new(1, 1, 3, 3), 6);
        let x = tape.leaf(xv.clone(), true);
        let y = tape.mul(x, x).unwrap();
        let s = tape.sum(y);
        let grads = tape.backward_unit(s).unwrap();
        let gx = grads.get(x).unwrap();
        for (g, v) in gx.data().iter().zip(xv.data()) {
            assert!((g - 2.0 * v).abs() < 1e-12);
        }
    }

    #[test]
    fn select_routes_gradient_by_switch() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::filled(Shape::new(1, 1, 1, 2), 3.0), true);
        let b = tape.leaf(Tensor::filled(Shape::new(1, 1, 1, 2), 5.0), true);
        let switch = Tensor::new(Shape::new(1, 1, 1, 2), vec![1.0, 0.0]).unwrap();
        let y = tape.select(a, b, switch).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 5.0]);
        let s = tape.sum(y);
        let grads = tape.backward_unit(s).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[1.0, 0.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn pyramid_pool_averages_cells() {
        let mut tape = Tape::new();
        let x = tape.leaf(
            Tensor::new(
                Shape::new(1, 1, 2, 4),
                vec![1.0, 3.0, 5.0, 7.0, 2.0, 4.0, 6.0, 8.0],
            )
            .unwrap(),
            true,
        );
        let y = tape.pyramid_pool(x, 2).unwrap();
        // 2x2 cells: means 2.5 and 6.5 broadcast back.
        assert_eq!(
            tape.value(y).data(),
            &[2.5, 2.5, 6.5, 6.5, 2.5, 2.5, 6.5, 6.5]
        );
        let s = tape.sum(y);
        let grads = tape.backward_unit(s).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }
}
