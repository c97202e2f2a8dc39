//! Sparsity Invariant Switch Layer.
//!
//! Two sparsity-invariant convolutions run in parallel, one undilated and
//! one dilated, and a per-pixel binary switch picks the undilated result
//! wherever the undilated window has any non-center valid tap, falling back
//! to the dilated branch elsewhere. The same switch blends the two
//! propagated validity masks, so the output mask is denser than the
//! undilated branch alone could make it.

use super::si_conv::{si_conv_mask, si_conv_on_tape, ConvNodes, SiConvHyper, SIConvParams};
use super::switch::switch_map;
use super::ValidityMask;
use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Which of the two parallel convolutions to address.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Undilated,
    Dilated,
}

/// Parameters of the two branches. With weight sharing enabled both
/// branches read (and update through) the same storage.
#[derive(Clone, Debug)]
pub struct SislParams<T> {
    base: SIConvParams<T>,
    dilated: Option<SIConvParams<T>>,
    d_switch: usize,
}

impl<T: Scalar> SislParams<T> {
    /// Weight-sharing layout: one set of tensors serves both branches.
    pub fn shared(base: SIConvParams<T>, d_switch: usize) -> Result<Self> {
        Self::validate_base(&base, d_switch)?;
        Ok(SislParams {
            base,
            dilated: None,
            d_switch,
        })
    }

    /// Independent weights per branch. The dilated branch's dilation is the
    /// switch dilation.
    pub fn unshared(base: SIConvParams<T>, dilated: SIConvParams<T>) -> Result<Self> {
        Self::validate_base(&base, dilated.dilation())?;
        if base.half_kernel() != dilated.half_kernel()
            || base.stride() != dilated.stride()
            || base.in_channels() != dilated.in_channels()
            || base.out_channels() != dilated.out_channels()
        {
            return Err(Error::invalid(
                "switch branches must agree on kernel, stride and channel counts",
            ));
        }
        let d_switch = dilated.dilation();
        Ok(SislParams {
            base,
            dilated: Some(dilated),
            d_switch,
        })
    }

    fn validate_base(base: &SIConvParams<T>, d_switch: usize) -> Result<()> {
        if base.dilation() != 1 {
            return Err(Error::invalid("the undilated branch must have dilation 1"));
        }
        if base.half_kernel() == 0 {
            return Err(Error::invalid("switch layer needs half_kernel >= 1"));
        }
        if d_switch < 2 {
            return Err(Error::invalid("switch dilation must be at least 2"));
        }
        Ok(())
    }

    pub fn share_weights(&self) -> bool {
        self.dilated.is_none()
    }

    pub fn d_switch(&self) -> usize {
        self.d_switch
    }

    pub fn base(&self) -> &SIConvParams<T> {
        &self.base
    }

    pub fn branch(&self, which: Branch) -> &SIConvParams<T> {
        match (which, &self.dilated) {
            (Branch::Undilated, _) | (Branch::Dilated, None) => &self.base,
            (Branch::Dilated, Some(d)) => d,
        }
    }

    /// Mutable weight access; with sharing enabled both branches alias the
    /// same storage, so an update through either is visible to both.
    pub fn weight_mut(&mut self, which: Branch) -> &mut Tensor<T> {
        match (which, &mut self.dilated) {
            (Branch::Undilated, _) | (Branch::Dilated, None) => self.base.weight_mut(),
            (Branch::Dilated, Some(d)) => d.weight_mut(),
        }
    }

    pub fn bias_mut(&mut self, which: Branch) -> &mut Tensor<T> {
        match (which, &mut self.dilated) {
            (Branch::Undilated, _) | (Branch::Dilated, None) => self.base.bias_mut(),
            (Branch::Dilated, Some(d)) => d.bias_mut(),
        }
    }

    pub fn hyper(&self) -> SislHyper<T> {
        SislHyper {
            half_kernel: self.base.half_kernel(),
            d_switch: self.d_switch,
            stride: self.base.stride(),
            epsilon: self.base.epsilon(),
        }
    }
}

/// Geometry of a switch layer, independent of parameter storage.
#[derive(Clone, Copy, Debug)]
pub struct SislHyper<T> {
    pub half_kernel: usize,
    pub d_switch: usize,
    pub stride: usize,
    pub epsilon: T,
}

impl<T: Scalar> SislHyper<T> {
    pub fn undilated(&self) -> SiConvHyper<T> {
        SiConvHyper {
            half_kernel: self.half_kernel,
            dilation: 1,
            stride: self.stride,
            epsilon: self.epsilon,
        }
    }

    pub fn dilated(&self) -> SiConvHyper<T> {
        SiConvHyper {
            half_kernel: self.half_kernel,
            dilation: self.d_switch,
            stride: self.stride,
            epsilon: self.epsilon,
        }
    }
}

/// Tape handles for both branches; shared weights simply repeat the ids.
#[derive(Clone, Copy, Debug)]
pub struct SislNodes {
    pub undilated: ConvNodes,
    pub dilated: ConvNodes,
}

/// Sample the input-resolution switch map at the strided output grid. With
/// same-size padding the window center of output (u, v) is input pixel
/// (u * stride, v * stride).
fn sample_strided<T: Scalar>(switch: &Tensor<T>, stride: usize) -> Tensor<T> {
    if stride == 1 {
        return switch.clone();
    }
    let s = switch.shape();
    let out_h = (s.height - 1) / stride + 1;
    let out_w = (s.width - 1) / stride + 1;
    Tensor::from_fn(
        crate::tensor::Shape::new(s.batch, 1, out_h, out_w),
        |b, _, h, w| switch.at(b, 0, h * stride, w * stride),
    )
}

/// Switch layer on a tape. Gradients flow through both branch feature
/// paths, gated by the constant switch map.
pub fn sisl_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    x: NodeId,
    o: &ValidityMask<T>,
    nodes: SislNodes,
    hyper: SislHyper<T>,
) -> Result<(NodeId, ValidityMask<T>)> {
    let switch = switch_map(o, hyper.half_kernel)?;
    let (y1, m1) = si_conv_on_tape(tape, x, o, nodes.undilated, hyper.undilated())?;
    let (y2, m2) = si_conv_on_tape(tape, x, o, nodes.dilated, hyper.dilated())?;
    if tape.shape(y1) != tape.shape(y2) {
        return Err(Error::shape(
            "switch branches",
            format!("{} vs {}", tape.shape(y1), tape.shape(y2)),
        ));
    }
    let switch_out = sample_strided(&switch, hyper.stride);
    let y = tape.select(y1, y2, switch_out.clone())?;
    // Both branch masks are binary and the switch picks one of them per
    // pixel, so the blend is binary by construction; the rounding in
    // `from_binary` is only a guard.
    let mask = m1
        .tensor()
        .zip_map(&switch_out, |a, s| a * s)?
        .add(&m2.tensor().zip_map(&switch_out, |b, s| b * (T::one() - s))?)?;
    let o_out = ValidityMask::from_binary(mask.map(|v| v.round()));
    Ok((y, o_out))
}

/// Switch layer as a pure function.
pub fn sisl_forward<T: Scalar>(
    x: &Tensor<T>,
    o: &ValidityMask<T>,
    params: &SislParams<T>,
) -> Result<(Tensor<T>, ValidityMask<T>)> {
    let mut tape = Tape::new();
    let xn = tape.leaf(x.clone(), false);
    let base = ConvNodes {
        weight: tape.leaf(params.branch(Branch::Undilated).weight().clone(), false),
        bias: tape.leaf(params.branch(Branch::Undilated).bias().clone(), false),
    };
    let dilated = if params.share_weights() {
        base
    } else {
        ConvNodes {
            weight: tape.leaf(params.branch(Branch::Dilated).weight().clone(), false),
            bias: tape.leaf(params.branch(Branch::Dilated).bias().clone(), false),
        }
    };
    let (y, o_out) = sisl_on_tape(
        &mut tape,
        xn,
        o,
        SislNodes {
            undilated: base,
            dilated,
        },
        params.hyper(),
    )?;
    Ok((tape.value(y).clone(), o_out))
}

/// Mask path of the switch layer alone: Eq-style blend of the two
/// propagated masks by the switch.
pub fn sisl_mask<T: Scalar>(
    o: &ValidityMask<T>,
    half_kernel: usize,
    d_switch: usize,
    stride: usize,
) -> Result<ValidityMask<T>> {
    let switch = sample_strided(&switch_map(o, half_kernel)?, stride);
    let m1 = si_conv_mask(o, half_kernel, 1, stride)?;
    let m2 = si_conv_mask(o, half_kernel, d_switch, stride)?;
    let blend = m1
        .tensor()
        .zip_map(&switch, |a, s| a * s)?
        .add(&m2.tensor().zip_map(&switch, |b, s| b * (T::one() - s))?)?;
    Ok(ValidityMask::from_binary(blend.map(|v| v.round())))
}
