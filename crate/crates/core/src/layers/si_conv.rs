//! Sparsity-invariant convolution.
//!
//! The feature path gates the input by the validity mask, convolves, and
//! normalizes every window by its count of valid taps plus a small epsilon:
//!
//! ```text
//! y(u,v) = sum_taps o * x * w / (sum_taps o + eps) + b
//! ```
//!
//! The mask path propagates validity as the max over the same window. A
//! window with no valid tap yields the bias alone and an invalid output
//! pixel.

use super::ValidityMask;
use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::tensor::{max_pool_window, window_valid_count, Scalar, Shape, Tensor};

/// Weights, bias and window geometry of one sparsity-invariant convolution.
#[derive(Clone, Debug)]
pub struct SIConvParams<T> {
    weight: Tensor<T>,
    bias: Tensor<T>,
    half_kernel: usize,
    dilation: usize,
    stride: usize,
    epsilon: T,
}

impl<T: Scalar> SIConvParams<T> {
    /// `weight` is `(out_ch, in_ch, 2k+1, 2k+1)`, `bias` is `(1, out_ch, 1, 1)`.
    pub fn new(
        weight: Tensor<T>,
        bias: Tensor<T>,
        dilation: usize,
        stride: usize,
        epsilon: T,
    ) -> Result<Self> {
        let ws = weight.shape();
        if ws.height != ws.width || ws.height % 2 == 0 {
            return Err(Error::invalid(format!(
                "kernel must be square with odd side, got {}x{}",
                ws.height, ws.width
            )));
        }
        let bs = bias.shape();
        if bs != Shape::new(1, ws.batch, 1, 1) {
            return Err(Error::shape(
                "si-conv bias",
                format!("expected (1, {}, 1, 1), got {}", ws.batch, bs),
            ));
        }
        if epsilon <= T::zero() {
            return Err(Error::invalid("epsilon must be positive"));
        }
        if dilation == 0 || stride == 0 {
            return Err(Error::invalid("dilation and stride must be positive"));
        }
        Ok(SIConvParams {
            half_kernel: ws.height / 2,
            weight,
            bias,
            dilation,
            stride,
            epsilon,
        })
    }

    pub fn weight(&self) -> &Tensor<T> {
        &self.weight
    }

    pub fn weight_mut(&mut self) -> &mut Tensor<T> {
        &mut self.weight
    }

    pub fn bias(&self) -> &Tensor<T> {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut Tensor<T> {
        &mut self.bias
    }

    pub fn half_kernel(&self) -> usize {
        self.half_kernel
    }

    pub fn dilation(&self) -> usize {
        self.dilation
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn epsilon(&self) -> T {
        self.epsilon
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape().batch
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape().channels
    }

    pub fn hyper(&self) -> SiConvHyper<T> {
        SiConvHyper {
            half_kernel: self.half_kernel,
            dilation: self.dilation,
            stride: self.stride,
            epsilon: self.epsilon,
        }
    }
}

/// Window geometry of a sparsity-invariant convolution, separate from its
/// tensors so model code can keep weights in a registry.
#[derive(Clone, Copy, Debug)]
pub struct SiConvHyper<T> {
    pub half_kernel: usize,
    pub dilation: usize,
    pub stride: usize,
    pub epsilon: T,
}

impl<T: Scalar> SiConvHyper<T> {
    /// Zero padding producing same-size outputs at stride one.
    pub fn padding(&self) -> usize {
        self.dilation * self.half_kernel
    }
}

/// Tape handles for one convolution's weight and bias.
#[derive(Clone, Copy, Debug)]
pub struct ConvNodes {
    pub weight: NodeId,
    pub bias: NodeId,
}

/// Sparsity-invariant convolution on a tape. Returns the output node, the
/// propagated mask, and the per-window valid-tap counts the normalization
/// used (the bottleneck derives its mask from these).
pub fn si_conv_with_counts<T: Scalar>(
    tape: &mut Tape<T>,
    x: NodeId,
    o: &ValidityMask<T>,
    nodes: ConvNodes,
    hyper: SiConvHyper<T>,
) -> Result<(NodeId, ValidityMask<T>, Tensor<T>)> {
    o.matches_features(tape.value(x))?;
    let pad = hyper.padding();
    let gated = tape.mul_const(x, o.tensor().clone())?;
    let numerator = tape.conv2d(
        gated,
        nodes.weight,
        None,
        hyper.stride,
        hyper.dilation,
        pad,
    )?;
    let counts = window_valid_count(
        o.tensor(),
        hyper.half_kernel,
        hyper.dilation,
        hyper.stride,
        pad,
    )?;
    let eps = hyper.epsilon;
    let inv_norm = counts.map(|c| T::one() / (c + eps));
    let normalized = tape.mul_const(numerator, inv_norm)?;
    let y = tape.add_bias(normalized, nodes.bias)?;
    let o_out = si_conv_mask(o, hyper.half_kernel, hyper.dilation, hyper.stride)?;
    Ok((y, o_out, counts))
}

/// Sparsity-invariant convolution on a tape.
pub fn si_conv_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    x: NodeId,
    o: &ValidityMask<T>,
    nodes: ConvNodes,
    hyper: SiConvHyper<T>,
) -> Result<(NodeId, ValidityMask<T>)> {
    let (y, o_out, _) = si_conv_with_counts(tape, x, o, nodes, hyper)?;
    Ok((y, o_out))
}

/// Sparsity-invariant convolution as a pure function.
pub fn si_conv_forward<T: Scalar>(
    x: &Tensor<T>,
    o: &ValidityMask<T>,
    params: &SIConvParams<T>,
) -> Result<(Tensor<T>, ValidityMask<T>)> {
    if x.shape().channels != params.in_channels() {
        return Err(Error::shape(
            "si_conv_forward",
            format!(
                "input has {} channels, weights expect {}",
                x.shape().channels,
                params.in_channels()
            ),
        ));
    }
    let mut tape = Tape::new();
    let xn = tape.leaf(x.clone(), false);
    let nodes = ConvNodes {
        weight: tape.leaf(params.weight.clone(), false),
        bias: tape.leaf(params.bias.clone(), false),
    };
    let (y, o_out) = si_conv_on_tape(&mut tape, xn, o, nodes, params.hyper())?;
    Ok((tape.value(y).clone(), o_out))
}

/// Mask propagation alone (max over the convolution window).
pub fn si_conv_mask<T: Scalar>(
    o: &ValidityMask<T>,
    half_kernel: usize,
    dilation: usize,
    stride: usize,
) -> Result<ValidityMask<T>> {
    let pooled = max_pool_window(
        o.tensor(),
        half_kernel,
        dilation,
        stride,
        dilation * half_kernel,
    )?;
    Ok(ValidityMask::from_binary(pooled))
}

#[cfg(test)]
mod tests {
    use super::*;

    const EPS: f64 = 1e-5;

    fn ones_params(k: usize, dilation: usize, stride: usize) -> SIConvParams<f64> {
        let side = 2 * k + 1;
        SIConvParams::new(
            Tensor::filled(Shape::new(1, 1, side, side), 1.0),
            Tensor::zeros(Shape::new(1, 1, 1, 1)),
            dilation,
            stride,
            EPS,
        )
        .unwrap()
    }

    #[test]
    fn empty_window_outputs_bias_and_invalid() {
        let x = Tensor::filled(Shape::new(1, 1, 3, 3), 7.0);
        let o = ValidityMask::all_invalid(1, 3, 3);
        let mut p = ones_params(1, 1, 1);
        *p.bias_mut() = Tensor::filled(Shape::new(1, 1, 1, 1), 0.5);
        let (y, o_out) = si_conv_forward(&x, &o, &p).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.5));
        assert_eq!(o_out.density(), 0.0);
    }

    #[test]
    fn two_valid_taps_average_to_their_mean() {
        // Window sees exactly two valid taps of values 4 and 8:
        // output = 12 / (2 + eps), mask 1.
        let mut x = Tensor::zeros(Shape::new(1, 1, 3, 3));
        x.set(0, 0, 0, 0, 4.0);
        x.set(0, 0, 2, 2, 8.0);
        let mut m = Tensor::zeros(Shape::new(1, 1, 3, 3));
        m.set(0, 0, 0, 0, 1.0);
        m.set(0, 0, 2, 2, 1.0);
        let o = ValidityMask::new(m).unwrap();
        let (y, o_out) = si_conv_forward(&x, &o, &ones_params(1, 1, 1)).unwrap();
        let center = y.at(0, 0, 1, 1);
        assert_eq!(center, 12.0 / (2.0 + EPS));
        assert!((center - 6.0).abs() < 1e-4);
        assert_eq!(o_out.tensor().at(0, 0, 1, 1), 1.0);
    }

    #[test]
    fn dense_constant_input_degenerates_to_normalized_sum() {
        let c = 3.25;
        let x = Tensor::filled(Shape::new(1, 1, 5, 5), c);
        let o = ValidityMask::all_valid(1, 5, 5);
        let (y, o_out) = si_conv_forward(&x, &o, &ones_params(1, 1, 1)).unwrap();
        let interior = y.at(0, 0, 2, 2);
        assert_eq!(interior, 9.0 * c / (9.0 + EPS));
        assert!((interior - c).abs() < 1e-4);
        assert_eq!(o_out.density(), 1.0);
    }

    #[test]
    fn invalid_pixels_cannot_leak() {
        // Perturbing x where o = 0 leaves outputs and mask bit-identical.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let shape = Shape::new(1, 2, 6, 6);
        let x = Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0));
        let o = ValidityMask::new(Tensor::from_fn(Shape::new(1, 1, 6, 6), |_, _, _, _| {
            if rng.random_bool(0.3) {
                1.0
            } else {
                0.0
            }
        }))
        .unwrap();
        let w = Tensor::from_fn(Shape::new(3, 2, 3, 3), |_, _, _, _| {
            rng.random_range(-1.0..1.0)
        });
        let b = Tensor::from_fn(Shape::new(1, 3, 1, 1), |_, _, _, _| {
            rng.random_range(-1.0..1.0)
        });
        let p = SIConvParams::new(w, b, 1, 1, EPS).unwrap();
        let (y0, m0) = si_conv_forward(&x, &o, &p).unwrap();

        let mut x2 = x.clone();
        for b2 in 0..1 {
            for c in 0..2 {
                for h in 0..6 {
                    for w2 in 0..6 {
                        if o.tensor().at(b2, 0, h, w2) == 0.0 {
                            x2.set(b2, c, h, w2, rng.random_range(-100.0..100.0));
                        }
                    }
                }
            }
        }
        let (y1, m1) = si_conv_forward(&x2, &o, &p).unwrap();
        assert_eq!(y0, y1);
        assert_eq!(m0, m1);
    }

    #[test]
    fn mismatched_mask_is_rejected() {
        let x = Tensor::<f64>::zeros(Shape::new(1, 1, 4, 4));
        let o = ValidityMask::all_valid(1, 3, 3);
        assert!(si_conv_forward(&x, &o, &ones_params(1, 1, 1)).is_err());
    }

    #[test]
    fn strided_output_halves_even_extents() {
        let x = Tensor::<f64>::zeros(Shape::new(1, 1, 8, 12));
        let o = ValidityMask::all_valid(1, 8, 12);
        let (y, m) = si_conv_forward(&x, &o, &ones_params(1, 1, 2)).unwrap();
        assert_eq!(y.shape().spatial(), (4, 6));
        assert_eq!(m.shape().spatial(), (4, 6));
    }
}
