//! Binary switch map deciding where dilation helps.
//!
//! The switch at a pixel is 0 exactly when every non-center tap of the
//! undilated window is invalid — the one situation where re-sampling at a
//! larger dilation cannot skip over available neighbor information. The
//! center pixel never influences the decision.

use super::ValidityMask;
use crate::error::{Error, Result};
use crate::tensor::{window_valid_count, Scalar, Tensor};

/// `s(u,v) = min(sum over the undilated window of o - o(u,v), 1)` with zero
/// padding. The result is binary and is treated as a constant during
/// differentiation.
pub fn switch_map<T: Scalar>(o: &ValidityMask<T>, half_kernel: usize) -> Result<Tensor<T>> {
    if half_kernel == 0 {
        return Err(Error::invalid("switch window needs half_kernel >= 1"));
    }
    let counts = window_valid_count(o.tensor(), half_kernel, 1, 1, half_kernel)?;
    // Counts are small exact integers, so the comparison below is exact.
    let switch = counts.zip_map(o.tensor(), |count, center| {
        if count - center >= T::one() {
            T::one()
        } else {
            T::zero()
        }
    })?;
    Ok(switch)
}
