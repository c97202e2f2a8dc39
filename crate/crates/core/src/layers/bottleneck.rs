//! Sparsity-invariant residual bottleneck.
//!
//! Reduce with a plain 1x1 convolution, process with a 3x3
//! sparsity-invariant convolution (or a switch layer), expand with another
//! plain 1x1, then add the residual. The 1x1 convolutions stay plain
//! because a single-pixel window has no neighborhood to normalize over.
//!
//! The input features are gated by the validity mask on entry so that
//! neither the 1x1 path nor the residual can carry values from invalid
//! pixels; this is what makes the whole block exactly sparsity invariant.
//!
//! Validity propagation reuses the valid-tap counts the inner convolution
//! already computed for normalization, clamped to one. That map is
//! provably the max-pooled mask, and the equality is asserted in debug
//! builds and checked by tests.

use super::si_conv::{si_conv_mask, si_conv_with_counts, ConvNodes, SiConvHyper};
use super::sisl::{sisl_on_tape, SislHyper, SislNodes, SislParams};
use super::{SIConvParams, ValidityMask};
use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Wiring order of the activations around the three convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BottleneckVariant {
    /// conv/act/conv/act/conv, add residual, final activation.
    Plain,
    /// Activation before each convolution, no activation after the add.
    PreActivation,
    /// Final activation moved before the residual add.
    PreAddition,
}

/// The middle 3x3 operation.
#[derive(Clone, Debug)]
pub enum BottleneckInner<T> {
    SiConv(SIConvParams<T>),
    Sisl(SislParams<T>),
}

/// Owned parameters of one bottleneck block.
#[derive(Clone, Debug)]
pub struct BottleneckParams<T> {
    reduce_weight: Tensor<T>,
    reduce_bias: Tensor<T>,
    inner: BottleneckInner<T>,
    expand_weight: Tensor<T>,
    expand_bias: Tensor<T>,
    projection: Option<(Tensor<T>, Tensor<T>)>,
    variant: BottleneckVariant,
    width_ratio: f64,
}

impl<T: Scalar> BottleneckParams<T> {
    pub fn new(
        reduce_weight: Tensor<T>,
        reduce_bias: Tensor<T>,
        inner: BottleneckInner<T>,
        expand_weight: Tensor<T>,
        expand_bias: Tensor<T>,
        projection: Option<(Tensor<T>, Tensor<T>)>,
        variant: BottleneckVariant,
        width_ratio: f64,
    ) -> Result<Self> {
        let rs = reduce_weight.shape();
        let es = expand_weight.shape();
        let (in_ch, mid_ch, out_ch) = (rs.channels, rs.batch, es.batch);
        if rs.height != 1 || rs.width != 1 || es.height != 1 || es.width != 1 {
            return Err(Error::invalid("reduce and expand must be 1x1 convolutions"));
        }
        if es.channels != mid_ch {
            return Err(Error::shape(
                "bottleneck expand",
                format!("expand reads {} channels, inner width is {mid_ch}", es.channels),
            ));
        }
        if !(width_ratio > 0.0 && width_ratio <= 1.0) {
            return Err(Error::invalid("width_ratio must lie in (0, 1]"));
        }
        let expected_mid = ((width_ratio * out_ch as f64).round() as usize).max(1);
        if mid_ch != expected_mid {
            return Err(Error::invalid(format!(
                "inner width {mid_ch} does not match round({width_ratio} * {out_ch}) = {expected_mid}"
            )));
        }
        let (inner_in, inner_out, stride) = match &inner {
            BottleneckInner::SiConv(p) => (p.in_channels(), p.out_channels(), p.stride()),
            BottleneckInner::Sisl(p) => (
                p.base().in_channels(),
                p.base().out_channels(),
                p.base().stride(),
            ),
        };
        if inner_in != mid_ch || inner_out != mid_ch {
            return Err(Error::shape(
                "bottleneck inner",
                format!("inner is {inner_in}->{inner_out}, width is {mid_ch}"),
            ));
        }
        let needs_projection = in_ch != out_ch || stride > 1;
        match (&projection, needs_projection) {
            (None, true) => {
                return Err(Error::invalid(
                    "residual projection required when channels or resolution change",
                ))
            }
            (Some(_), false) => {
                return Err(Error::invalid(
                    "residual projection given but input already matches output",
                ))
            }
            (Some((pw, pb)), true) => {
                let ps = pw.shape();
                if ps.channels != in_ch || ps.batch != out_ch || ps.height != 1 || ps.width != 1 {
                    return Err(Error::shape(
                        "bottleneck projection",
                        format!("expected ({out_ch}, {in_ch}, 1, 1), got {ps}"),
                    ));
                }
                if pb.shape() != Shape::new(1, out_ch, 1, 1) {
                    return Err(Error::shape(
                        "bottleneck projection bias",
                        format!("{}", pb.shape()),
                    ));
                }
            }
            (None, false) => {}
        }
        Ok(BottleneckParams {
            reduce_weight,
            reduce_bias,
            inner,
            expand_weight,
            expand_bias,
            projection,
            variant,
            width_ratio,
        })
    }

    pub fn inner(&self) -> &BottleneckInner<T> {
        &self.inner
    }

    pub fn variant(&self) -> BottleneckVariant {
        self.variant
    }

    pub fn width_ratio(&self) -> f64 {
        self.width_ratio
    }

    pub fn hyper(&self) -> BottleneckHyper<T> {
        BottleneckHyper {
            inner: match &self.inner {
                BottleneckInner::SiConv(p) => InnerHyper::SiConv(p.hyper()),
                BottleneckInner::Sisl(p) => InnerHyper::Sisl(p.hyper()),
            },
            variant: self.variant,
        }
    }
}

/// Geometry of the inner operation.
#[derive(Clone, Copy, Debug)]
pub enum InnerHyper<T> {
    SiConv(SiConvHyper<T>),
    Sisl(SislHyper<T>),
}

impl<T: Scalar> InnerHyper<T> {
    fn stride(&self) -> usize {
        match self {
            InnerHyper::SiConv(h) => h.stride,
            InnerHyper::Sisl(h) => h.stride,
        }
    }
}

/// Geometry and wiring of one bottleneck, separate from parameter storage.
#[derive(Clone, Copy, Debug)]
pub struct BottleneckHyper<T> {
    pub inner: InnerHyper<T>,
    pub variant: BottleneckVariant,
}

/// Tape handles for the inner operation.
#[derive(Clone, Copy, Debug)]
pub enum InnerNodes {
    SiConv(ConvNodes),
    Sisl(SislNodes),
}

/// Tape handles for a whole bottleneck.
#[derive(Clone, Copy, Debug)]
pub struct BottleneckNodes {
    pub reduce: ConvNodes,
    pub inner: InnerNodes,
    pub expand: ConvNodes,
    pub projection: Option<ConvNodes>,
}

/// Bottleneck forward on a tape.
pub fn si_bottleneck_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    x: NodeId,
    o: &ValidityMask<T>,
    nodes: BottleneckNodes,
    hyper: BottleneckHyper<T>,
) -> Result<(NodeId, ValidityMask<T>)> {
    o.matches_features(tape.value(x))?;
    let stride = hyper.inner.stride();

    // Gate the input so invalid pixels cannot reach the output through the
    // 1x1 convolutions or the residual.
    let gated = tape.mul_const(x, o.tensor().clone())?;

    let pre_act = matches!(hyper.variant, BottleneckVariant::PreActivation);
    let main_in = if pre_act { tape.relu(gated) } else { gated };

    let mut t = tape.conv2d(main_in, nodes.reduce.weight, None, 1, 1, 0)?;
    t = tape.add_bias(t, nodes.reduce.bias)?;
    t = tape.relu(t);

    let (inner_out, o_out) = match (nodes.inner, hyper.inner) {
        (InnerNodes::SiConv(n), InnerHyper::SiConv(h)) => {
            let (y, _, counts) = si_conv_with_counts(tape, t, o, n, h)?;
            let from_counts = ValidityMask::from_binary(counts.map(|c| {
                if c >= T::one() {
                    T::one()
                } else {
                    T::zero()
                }
            }));
            debug_assert_eq!(
                from_counts.tensor(),
                si_conv_mask(o, h.half_kernel, h.dilation, h.stride)?.tensor(),
                "count-derived mask must equal the max-pooled mask"
            );
            (y, from_counts)
        }
        (InnerNodes::Sisl(n), InnerHyper::Sisl(h)) => sisl_on_tape(tape, t, o, n, h)?,
        _ => return Err(Error::invalid("inner nodes and hyper disagree")),
    };
    t = tape.relu(inner_out);

    t = tape.conv2d(t, nodes.expand.weight, None, 1, 1, 0)?;
    t = tape.add_bias(t, nodes.expand.bias)?;
    if matches!(hyper.variant, BottleneckVariant::PreAddition) {
        t = tape.relu(t);
    }

    let residual = match nodes.projection {
        Some(p) => {
            let r = tape.conv2d(gated, p.weight, None, stride, 1, 0)?;
            tape.add_bias(r, p.bias)?
        }
        None => gated,
    };
    let mut y = tape.add(t, residual)?;
    if matches!(hyper.variant, BottleneckVariant::Plain) {
        y = tape.relu(y);
    }
    Ok((y, o_out))
}

/// Bottleneck forward as a pure function.
pub fn si_bottleneck_forward<T: Scalar>(
    x: &Tensor<T>,
    o: &ValidityMask<T>,
    params: &BottleneckParams<T>,
) -> Result<(Tensor<T>, ValidityMask<T>)> {
    let mut tape = Tape::new();
    let xn = tape.leaf(x.clone(), false);
    let mut leaf = |t: &Tensor<T>| tape.leaf(t.clone(), false);
    let reduce = ConvNodes {
        weight: leaf(&params.reduce_weight),
        bias: leaf(&params.reduce_bias),
    };
    let expand = ConvNodes {
        weight: leaf(&params.expand_weight),
        bias: leaf(&params.expand_bias),
    };
    let projection = params.projection.as_ref().map(|(w, b)| ConvNodes {
        weight: leaf(w),
        bias: leaf(b),
    });
    let inner = match &params.inner {
        BottleneckInner::SiConv(p) => InnerNodes::SiConv(ConvNodes {
            weight: leaf(p.weight()),
            bias: leaf(p.bias()),
        }),
        BottleneckInner::Sisl(p) => {
            let undilated = ConvNodes {
                weight: leaf(p.branch(super::sisl::Branch::Undilated).weight()),
                bias: leaf(p.branch(super::sisl::Branch::Undilated).bias()),
            };
            let dilated = if p.share_weights() {
                undilated
            } else {
                ConvNodes {
                    weight: leaf(p.branch(super::sisl::Branch::Dilated).weight()),
                    bias: leaf(p.branch(super::sisl::Branch::Dilated).bias()),
                }
            };
            InnerNodes::Sisl(SislNodes { undilated, dilated })
        }
    };
    let nodes = BottleneckNodes {
        reduce,
        inner,
        expand,
        projection,
    };
    let (y, o_out) = si_bottleneck_on_tape(&mut tape, xn, o, nodes, params.hyper())?;
    Ok((tape.value(y).clone(), o_out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::max_pool_window;

    const EPS: f64 = 1e-5;

    fn rng_tensor(shape: Shape, seed: u64) -> Tensor<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0))
    }

    fn rng_mask(h: usize, w: usize, p: f64, seed: u64) -> ValidityMask<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        ValidityMask::new(Tensor::from_fn(Shape::new(1, 1, h, w), |_, _, _, _| {
            if rng.random_bool(p) {
                1.0
            } else {
                0.0
            }
        }))
        .unwrap()
    }

    /// Channels-equal block with random weights; `seed` controls them all.
    fn random_block(
        channels: usize,
        variant: BottleneckVariant,
        seed: u64,
    ) -> BottleneckParams<f64> {
        let mid = (channels as f64 * 0.5).round().max(1.0) as usize;
        let inner = SIConvParams::new(
            rng_tensor(Shape::new(mid, mid, 3, 3), seed),
            rng_tensor(Shape::new(1, mid, 1, 1), seed + 1),
            1,
            1,
            EPS,
        )
        .unwrap();
        BottleneckParams::new(
            rng_tensor(Shape::new(mid, channels, 1, 1), seed + 2),
            rng_tensor(Shape::new(1, mid, 1, 1), seed + 3),
            BottleneckInner::SiConv(inner),
            rng_tensor(Shape::new(channels, mid, 1, 1), seed + 4),
            rng_tensor(Shape::new(1, channels, 1, 1), seed + 5),
            None,
            variant,
            0.5,
        )
        .unwrap()
    }

    #[test]
    fn zero_weights_identity_residual_passes_input_through() {
        // With every convolution zeroed the main path vanishes and the
        // (mask-gated) residual carries non-negative, mask-consistent
        // inputs through unchanged; the mask follows window max pooling.
        let channels = 4;
        let mid = 2;
        let inner = SIConvParams::new(
            Tensor::zeros(Shape::new(mid, mid, 3, 3)),
            Tensor::zeros(Shape::new(1, mid, 1, 1)),
            1,
            1,
            EPS,
        )
        .unwrap();
        let params = BottleneckParams::new(
            Tensor::zeros(Shape::new(mid, channels, 1, 1)),
            Tensor::zeros(Shape::new(1, mid, 1, 1)),
            BottleneckInner::SiConv(inner),
            Tensor::zeros(Shape::new(channels, mid, 1, 1)),
            Tensor::zeros(Shape::new(1, channels, 1, 1)),
            None,
            BottleneckVariant::Plain,
            0.5,
        )
        .unwrap();
        let o = rng_mask(6, 6, 0.4, 1);
        // Non-negative input that is zero wherever the mask is zero.
        let x = Tensor::from_fn(Shape::new(1, channels, 6, 6), |_, c, h, w| {
            o.tensor().at(0, 0, h, w) * ((c + h + w) as f64)
        });
        let (y, o_out) = si_bottleneck_forward(&x, &o, &params).unwrap();
        assert_eq!(y, x);
        let expected_mask = max_pool_window(o.tensor(), 1, 1, 1, 1).unwrap();
        assert_eq!(o_out.tensor(), &expected_mask);
    }

    #[test]
    fn count_mask_equals_max_pooled_mask_on_random_masks() {
        for seed in 0..100 {
            let o = rng_mask(8, 8, 0.25, seed);
            let x = rng_tensor(Shape::new(1, 4, 8, 8), seed + 1000);
            let params = random_block(4, BottleneckVariant::Plain, seed + 2000);
            let (_, o_out) = si_bottleneck_forward(&x, &o, &params).unwrap();
            let pooled = max_pool_window(o.tensor(), 1, 1, 1, 1).unwrap();
            assert_eq!(o_out.tensor(), &pooled, "seed {seed}");
        }
    }

    #[test]
    fn sparsity_invariance_holds_for_all_variants() {
        use rand::{Rng, SeedableRng};
        for variant in [
            BottleneckVariant::Plain,
            BottleneckVariant::PreActivation,
            BottleneckVariant::PreAddition,
        ] {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
            let params = random_block(4, variant, 3000);
            let o = rng_mask(7, 7, 0.3, 78);
            let x = rng_tensor(Shape::new(1, 4, 7, 7), 79);
            let (y0, m0) = si_bottleneck_forward(&x, &o, &params).unwrap();
            let mut x2 = x.clone();
            for c in 0..4 {
                for h in 0..7 {
                    for w in 0..7 {
                        if o.tensor().at(0, 0, h, w) == 0.0 {
                            x2.set(0, c, h, w, rng.random_range(-100.0..100.0));
                        }
                    }
                }
            }
            let (y1, m1) = si_bottleneck_forward(&x2, &o, &params).unwrap();
            assert_eq!(y0, y1, "{variant:?}");
            assert_eq!(m0, m1, "{variant:?}");
        }
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let params = random_block(4, BottleneckVariant::Plain, 4000);
        let x = rng_tensor(Shape::new(1, 3, 6, 6), 1);
        let o = rng_mask(6, 6, 0.5, 2);
        assert!(si_bottleneck_forward(&x, &o, &params).is_err());
    }

    #[test]
    fn projection_rules_are_enforced() {
        // Channels change without a projection: rejected.
        let inner = SIConvParams::new(
            rng_tensor(Shape::new(2, 2, 3, 3), 1),
            rng_tensor(Shape::new(1, 2, 1, 1), 2),
            1,
            1,
            EPS,
        )
        .unwrap();
        let missing = BottleneckParams::new(
            rng_tensor(Shape::new(2, 3, 1, 1), 3),
            rng_tensor(Shape::new(1, 2, 1, 1), 4),
            BottleneckInner::SiConv(inner.clone()),
            rng_tensor(Shape::new(4, 2, 1, 1), 5),
            rng_tensor(Shape::new(1, 4, 1, 1), 6),
            None,
            BottleneckVariant::Plain,
            0.5,
        );
        assert!(missing.is_err());

        // Same channels with a useless projection: rejected too.
        let useless = BottleneckParams::new(
            rng_tensor(Shape::new(2, 4, 1, 1), 7),
            rng_tensor(Shape::new(1, 2, 1, 1), 8),
            BottleneckInner::SiConv(inner),
            rng_tensor(Shape::new(4, 2, 1, 1), 9),
            rng_tensor(Shape::new(1, 4, 1, 1), 10),
            Some((
                rng_tensor(Shape::new(4, 4, 1, 1), 11),
                rng_tensor(Shape::new(1, 4, 1, 1), 12),
            )),
            BottleneckVariant::Plain,
            0.5,
        );
        assert!(useless.is_err());
    }

    #[test]
    fn expanding_block_projects_the_residual() {
        let (in_ch, out_ch, mid) = (3, 6, 3);
        let inner = SIConvParams::new(
            rng_tensor(Shape::new(mid, mid, 3, 3), 20),
            rng_tensor(Shape::new(1, mid, 1, 1), 21),
            1,
            1,
            EPS,
        )
        .unwrap();
        let params = BottleneckParams::new(
            rng_tensor(Shape::new(mid, in_ch, 1, 1), 22),
            rng_tensor(Shape::new(1, mid, 1, 1), 23),
            BottleneckInner::SiConv(inner),
            rng_tensor(Shape::new(out_ch, mid, 1, 1), 24),
            rng_tensor(Shape::new(1, out_ch, 1, 1), 25),
            Some((
                rng_tensor(Shape::new(out_ch, in_ch, 1, 1), 26),
                rng_tensor(Shape::new(1, out_ch, 1, 1), 27),
            )),
            BottleneckVariant::Plain,
            0.5,
        )
        .unwrap();
        let x = rng_tensor(Shape::new(2, in_ch, 6, 6), 28);
        let o = rng_mask(6, 6, 0.5, 29);
        // Batch-2 mask.
        let o = ValidityMask::new(Tensor::from_fn(Shape::new(2, 1, 6, 6), |_, _, h, w| {
            o.tensor().at(0, 0, h, w)
        }))
        .unwrap();
        let (y, _) = si_bottleneck_forward(&x, &o, &params).unwrap();
        assert_eq!(y.shape(), Shape::new(2, out_ch, 6, 6));
    }
}
