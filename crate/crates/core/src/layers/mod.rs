//! Sparse-aware layers: sparsity-invariant convolution with validity-mask
//! propagation, the binary switch layer (SISL), the sparsity-invariant
//! residual bottleneck, and the decoder fusion blocks.
//!
//! Every layer comes in two forms that share the same kernels and produce
//! bit-identical values: a pure function over tensors, and an `*_on_tape`
//! variant recording onto a [`Tape`](crate::autodiff::Tape) for training.
//! Validity masks and switch maps enter the tape only as constants, so no
//! gradient ever flows through the mask path.

mod bottleneck;
mod fusion;
mod si_conv;
mod sisl;
mod switch;

pub use bottleneck::{
    si_bottleneck_forward, si_bottleneck_on_tape, BottleneckHyper, BottleneckInner,
    BottleneckNodes, BottleneckParams, BottleneckVariant, InnerHyper, InnerNodes,
};
pub use fusion::{
    fusion_block, fusion_block_on_tape, spp_fuse, spp_fuse_on_tape, FusionParams, SppParams,
    SPP_SCALES,
};
pub use si_conv::{
    si_conv_forward, si_conv_mask, si_conv_on_tape, si_conv_with_counts, ConvNodes, SiConvHyper,
    SIConvParams,
};
pub use sisl::{sisl_forward, sisl_mask, sisl_on_tape, SislHyper, SislNodes, SislParams};
pub use switch::switch_map;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Binary map of observed pixels accompanying a sparse feature tensor.
/// Shape is `(batch, 1, height, width)`; every value is exactly 0 or 1.
#[derive(Clone, Debug, PartialEq)]
pub struct ValidityMask<T>(Tensor<T>);

impl<T: Scalar> ValidityMask<T> {
    pub fn new(tensor: Tensor<T>) -> Result<Self> {
        let s = tensor.shape();
        if s.channels != 1 {
            return Err(Error::shape(
                "validity mask",
                format!("expected a single channel, got {}", s),
            ));
        }
        for (i, &v) in tensor.data().iter().enumerate() {
            if v != T::zero() && v != T::one() {
                return Err(Error::NonBinaryMask {
                    value: v.as_f64(),
                    index: i,
                });
            }
        }
        Ok(ValidityMask(tensor))
    }

    /// Wrap a tensor that is binary by construction (pooling or blending of
    /// binary inputs).
    pub(crate) fn from_binary(tensor: Tensor<T>) -> Self {
        debug_assert!(
            tensor
                .data()
                .iter()
                .all(|&v| v == T::zero() || v == T::one()),
            "mask produced a non-binary value"
        );
        ValidityMask(tensor)
    }

    pub fn all_valid(batch: usize, height: usize, width: usize) -> Self {
        ValidityMask(Tensor::filled(Shape::new(batch, 1, height, width), T::one()))
    }

    pub fn all_invalid(batch: usize, height: usize, width: usize) -> Self {
        ValidityMask(Tensor::zeros(Shape::new(batch, 1, height, width)))
    }

    /// Derive a mask from a depth plane: nonzero means observed.
    pub fn from_nonzero(depth: &Tensor<T>) -> Result<Self> {
        let s = depth.shape();
        if s.channels != 1 {
            return Err(Error::shape(
                "mask from depth",
                format!("expected a single channel, got {}", s),
            ));
        }
        Ok(ValidityMask(depth.map(|v| {
            if v != T::zero() {
                T::one()
            } else {
                T::zero()
            }
        })))
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.0
    }

    pub fn shape(&self) -> Shape {
        self.0.shape()
    }

    /// Fraction of 1-valued pixels.
    pub fn density(&self) -> f64 {
        let total = self.0.shape().count();
        if total == 0 {
            return 0.0;
        }
        let ones = self.0.data().iter().filter(|&&v| v == T::one()).count();
        ones as f64 / total as f64
    }

    /// True when `self` is 1 everywhere `other` is 1.
    pub fn dominates(&self, other: &Self) -> bool {
        self.0
            .data()
            .iter()
            .zip(other.0.data())
            .all(|(&a, &b)| a >= b)
    }

    pub fn matches_features(&self, features: &Tensor<T>) -> Result<()> {
        let (ms, fs) = (self.0.shape(), features.shape());
        if ms.batch != fs.batch || ms.height != fs.height || ms.width != fs.width {
            return Err(Error::shape(
                "mask vs features",
                format!("mask {} for features {}", ms, fs),
            ));
        }
        Ok(())
    }
}

/// Fraction of valid pixels in a mask.
pub fn mask_density<T: Scalar>(mask: &ValidityMask<T>) -> f64 {
    mask.density()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_rejects_non_binary_values() {
        let t = Tensor::new(Shape::new(1, 1, 1, 3), vec![0.0, 1.0, 0.25]).unwrap();
        assert!(matches!(
            ValidityMask::new(t),
            Err(Error::NonBinaryMask { value, index: 2 }) if value == 0.25
        ));
    }

    #[test]
    fn mask_rejects_multichannel() {
        let t = Tensor::<f64>::zeros(Shape::new(1, 2, 2, 2));
        assert!(ValidityMask::new(t).is_err());
    }

    #[test]
    fn density_counts_ones() {
        let m = ValidityMask::new(
            Tensor::new(Shape::new(1, 1, 2, 2), vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
        )
        .unwrap();
        assert_eq!(m.density(), 0.5);
        assert_eq!(ValidityMask::<f64>::all_valid(1, 4, 4).density(), 1.0);
        assert_eq!(ValidityMask::<f64>::all_invalid(1, 4, 4).density(), 0.0);
    }
}
