//! Decoder fusion blocks.
//!
//! Both blocks are deliberately small concat-plus-1x1 designs: the encoder
//! fusion adds an average-pool pyramid for multi-scale context and halves
//! the channel count, and the skip fusion reintroduces the stage's binary
//! validity map as an extra channel.

use super::ValidityMask;
use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Pyramid scales of the encoder fusion context.
pub const SPP_SCALES: [usize; 3] = [2, 4, 8];

/// Parameters of the encoder-output fusion: a 1x1 convolution mapping the
/// concatenated features plus pyramid context down to half the concatenated
/// channel count.
#[derive(Clone, Debug)]
pub struct SppParams<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> SppParams<T> {
    /// Channel contract for two `channels`-wide encoder outputs: the 1x1
    /// reads the pair plus one pyramid copy per scale, and writes
    /// `channels` maps (the 2:1 reduction of the pair).
    pub fn expected_weight_shape(channels_each: usize) -> Shape {
        let concat = 2 * channels_each;
        Shape::new(concat / 2, concat * (1 + SPP_SCALES.len()), 1, 1)
    }

    pub fn new(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let ws = weight.shape();
        if ws.height != 1 || ws.width != 1 {
            return Err(Error::invalid("encoder fusion uses a 1x1 convolution"));
        }
        if bias.shape() != Shape::new(1, ws.batch, 1, 1) {
            return Err(Error::shape("spp bias", format!("{}", bias.shape())));
        }
        Ok(SppParams { weight, bias })
    }
}

/// Encoder fusion on a tape.
pub fn spp_fuse_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    f_img: NodeId,
    f_depth: NodeId,
    weight: NodeId,
    bias: NodeId,
) -> Result<NodeId> {
    let (si, sd) = (tape.shape(f_img), tape.shape(f_depth));
    if si != sd {
        return Err(Error::shape(
            "spp_fuse",
            format!("image features {si} vs depth features {sd}"),
        ));
    }
    let concat_channels = si.channels + sd.channels;
    if concat_channels % 2 != 0 {
        return Err(Error::invalid(
            "spp_fuse needs an even concatenated channel count",
        ));
    }
    let pair = tape.concat(&[f_img, f_depth])?;
    let mut parts = vec![pair];
    for scale in SPP_SCALES {
        parts.push(tape.pyramid_pool(pair, scale)?);
    }
    let stacked = tape.concat(&parts)?;
    let ws = tape.shape(weight);
    if ws.channels != tape.shape(stacked).channels || ws.batch != concat_channels / 2 {
        return Err(Error::shape(
            "spp_fuse weights",
            format!(
                "expected ({}, {}, 1, 1), got {ws}",
                concat_channels / 2,
                tape.shape(stacked).channels
            ),
        ));
    }
    let y = tape.conv2d(stacked, weight, None, 1, 1, 0)?;
    tape.add_bias(y, bias)
}

/// Encoder fusion as a pure function.
pub fn spp_fuse<T: Scalar>(
    f_img: &Tensor<T>,
    f_depth: &Tensor<T>,
    params: &SppParams<T>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let img = tape.leaf(f_img.clone(), false);
    let depth = tape.leaf(f_depth.clone(), false);
    let w = tape.leaf(params.weight.clone(), false);
    let b = tape.leaf(params.bias.clone(), false);
    let y = spp_fuse_on_tape(&mut tape, img, depth, w, b)?;
    Ok(tape.value(y).clone())
}

/// Parameters of the decoder skip fusion: a 1x1 convolution over
/// `(decoder features, skip features, validity)` back to the decoder width.
#[derive(Clone, Debug)]
pub struct FusionParams<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> FusionParams<T> {
    pub fn expected_weight_shape(decoder_channels: usize, skip_channels: usize) -> Shape {
        Shape::new(decoder_channels, decoder_channels + skip_channels + 1, 1, 1)
    }

    pub fn new(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let ws = weight.shape();
        if ws.height != 1 || ws.width != 1 {
            return Err(Error::invalid("skip fusion uses a 1x1 convolution"));
        }
        if bias.shape() != Shape::new(1, ws.batch, 1, 1) {
            return Err(Error::shape("fusion bias", format!("{}", bias.shape())));
        }
        Ok(FusionParams { weight, bias })
    }
}

/// Skip fusion on a tape. The validity map enters as a constant channel.
pub fn fusion_block_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    f_decoder: NodeId,
    f_skip: NodeId,
    o_stage: &ValidityMask<T>,
    weight: NodeId,
    bias: NodeId,
) -> Result<NodeId> {
    let (sd, ss) = (tape.shape(f_decoder), tape.shape(f_skip));
    let sm = o_stage.shape();
    if sd.spatial() != ss.spatial() || sd.spatial() != sm.spatial() || sd.batch != ss.batch {
        return Err(Error::shape(
            "fusion_block",
            format!("decoder {sd}, skip {ss}, mask {sm}"),
        ));
    }
    let mask_node = tape.leaf(o_stage.tensor().clone(), false);
    let stacked = tape.concat(&[f_decoder, f_skip, mask_node])?;
    let ws = tape.shape(weight);
    if ws.batch != sd.channels || ws.channels != sd.channels + ss.channels + 1 {
        return Err(Error::shape(
            "fusion_block weights",
            format!(
                "expected ({}, {}, 1, 1), got {ws}",
                sd.channels,
                sd.channels + ss.channels + 1
            ),
        ));
    }
    let y = tape.conv2d(stacked, weight, None, 1, 1, 0)?;
    tape.add_bias(y, bias)
}

/// Skip fusion as a pure function.
pub fn fusion_block<T: Scalar>(
    f_decoder: &Tensor<T>,
    f_skip: &Tensor<T>,
    o_stage: &ValidityMask<T>,
    params: &FusionParams<T>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let dec = tape.leaf(f_decoder.clone(), false);
    let skip = tape.leaf(f_skip.clone(), false);
    let w = tape.leaf(params.weight.clone(), false);
    let b = tape.leaf(params.bias.clone(), false);
    let y = fusion_block_on_tape(&mut tape, dec, skip, o_stage, w, b)?;
    Ok(tape.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng_tensor(shape: Shape, seed: u64) -> Tensor<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0))
    }

    fn spp_params(channels_each: usize, seed: u64) -> SppParams<f64> {
        let shape = SppParams::<f64>::expected_weight_shape(channels_each);
        SppParams::new(
            rng_tensor(shape, seed),
            rng_tensor(Shape::new(1, shape.batch, 1, 1), seed + 1),
        )
        .unwrap()
    }

    #[test]
    fn spp_halves_the_concatenated_channels() {
        let f_img = rng_tensor(Shape::new(1, 6, 8, 8), 1);
        let f_depth = rng_tensor(Shape::new(1, 6, 8, 8), 2);
        let y = spp_fuse(&f_img, &f_depth, &spp_params(6, 3)).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 6, 8, 8));
    }

    #[test]
    fn spp_preserves_spatial_shape_even_on_small_maps() {
        // Smaller than the largest pyramid scale.
        let f_img = rng_tensor(Shape::new(1, 4, 3, 5), 4);
        let f_depth = rng_tensor(Shape::new(1, 4, 3, 5), 5);
        let y = spp_fuse(&f_img, &f_depth, &spp_params(4, 6)).unwrap();
        assert_eq!(y.shape().spatial(), (3, 5));
    }

    #[test]
    fn spp_zero_inputs_give_bias_field() {
        let z = Tensor::<f64>::zeros(Shape::new(1, 4, 8, 8));
        let params = spp_params(4, 7);
        let y = spp_fuse(&z, &z, &params).unwrap();
        for c in 0..4 {
            let expect = params.bias.at(0, c, 0, 0);
            assert!(y.data()[y.shape().index(0, c, 0, 0)..y.shape().index(0, c, 7, 7) + 1]
                .iter()
                .take(64)
                .all(|&v| v == expect));
        }
    }

    #[test]
    fn spp_shape_mismatch_is_rejected() {
        let a = rng_tensor(Shape::new(1, 4, 8, 8), 8);
        let b = rng_tensor(Shape::new(1, 4, 4, 4), 9);
        assert!(spp_fuse(&a, &b, &spp_params(4, 10)).is_err());
    }

    fn fusion_params(dec: usize, skip: usize, seed: u64) -> FusionParams<f64> {
        let shape = FusionParams::<f64>::expected_weight_shape(dec, skip);
        FusionParams::new(
            rng_tensor(shape, seed),
            rng_tensor(Shape::new(1, shape.batch, 1, 1), seed + 1),
        )
        .unwrap()
    }

    #[test]
    fn fusion_keeps_decoder_width() {
        let dec = rng_tensor(Shape::new(1, 5, 6, 6), 11);
        let skip = rng_tensor(Shape::new(1, 3, 6, 6), 12);
        let o = ValidityMask::all_valid(1, 6, 6);
        let y = fusion_block(&dec, &skip, &o, &fusion_params(5, 3, 13)).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 5, 6, 6));
    }

    #[test]
    fn fusion_zero_weights_give_bias_field() {
        let dec = rng_tensor(Shape::new(1, 2, 4, 4), 14);
        let skip = rng_tensor(Shape::new(1, 2, 4, 4), 15);
        let o = ValidityMask::all_valid(1, 4, 4);
        let shape = FusionParams::<f64>::expected_weight_shape(2, 2);
        let params = FusionParams::new(
            Tensor::zeros(shape),
            rng_tensor(Shape::new(1, 2, 1, 1), 16),
        )
        .unwrap();
        let y = fusion_block(&dec, &skip, &o, &params).unwrap();
        for c in 0..2 {
            let expect = params.bias.at(0, c, 0, 0);
            for h in 0..4 {
                for w in 0..4 {
                    assert_eq!(y.at(0, c, h, w), expect);
                }
            }
        }
    }

    #[test]
    fn fusion_mask_channel_is_live() {
        let dec = rng_tensor(Shape::new(1, 3, 5, 5), 17);
        let skip = rng_tensor(Shape::new(1, 3, 5, 5), 18);
        let params = fusion_params(3, 3, 19);
        let dense = ValidityMask::all_valid(1, 5, 5);
        let empty = ValidityMask::all_invalid(1, 5, 5);
        let y_dense = fusion_block(&dec, &skip, &dense, &params).unwrap();
        let y_empty = fusion_block(&dec, &skip, &empty, &params).unwrap();
        assert_ne!(y_dense, y_empty);
    }
}
