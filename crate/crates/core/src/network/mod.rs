//! The depth-completion network: a dual encoder (sparse depth + dense
//! image), a pyramid-context fusion of the two encoder outputs, and a
//! single decoder with validity-aware skip fusion.
//!
//! The depth and image encoders are structurally identical; the depth
//! encoder differs only in that its first-stage bottlenecks may use the
//! switch layer and that it runs on the real validity mask, while the image
//! encoder sees an all-ones mask (a sparsity-invariant convolution over a
//! dense mask is an ordinary convolution).

mod checkpoint;

pub use checkpoint::{
    checkpoint_dtype, load_checkpoint, save_checkpoint, ScheduleState, TrainState,
};

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::layers::{
    si_bottleneck_on_tape, si_conv_mask, si_conv_on_tape, sisl_mask, BottleneckHyper,
    BottleneckNodes, BottleneckVariant, ConvNodes, InnerHyper, InnerNodes, SiConvHyper, SislHyper,
    SislNodes, ValidityMask,
};
use crate::tensor::{Scalar, Shape, Tensor};

/// Architecture knobs. The defaults reproduce the full-scale network; tests
/// shrink `channel_base`, `stages` and `bottlenecks_per_stage` to desk size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// Channel growth per encoder stage; stage `s` outputs `channel_base * s` maps.
    pub channel_base: usize,
    /// Encoder/decoder stage count; the input must be divisible by `2^stages`.
    pub stages: usize,
    /// Bottlenecks per encoder stage, counting the expanding one.
    pub bottlenecks_per_stage: usize,
    /// How many first-stage depth-encoder bottlenecks use the switch layer.
    pub sisl_count: usize,
    /// Inner width of every bottleneck as a fraction of its output channels.
    pub width_ratio: f64,
    /// Dilation of the switch layer's second branch.
    pub d_switch: usize,
    /// Batch-normalize the decoder's residual bottlenecks.
    pub batch_norm_decoder: bool,
    /// Metric depth is divided by this before entering the network and the
    /// prediction is scaled back up on the way out.
    pub depth_scale: f64,
    /// Normalization guard of the sparsity-invariant convolutions.
    pub epsilon: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            channel_base: 32,
            stages: 4,
            bottlenecks_per_stage: 6,
            sisl_count: 4,
            width_ratio: 0.5,
            d_switch: 2,
            batch_norm_decoder: true,
            depth_scale: 85.0,
            epsilon: 1e-5,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channel_base == 0 {
            return Err(Error::invalid("channel_base must be positive"));
        }
        if self.stages == 0 {
            return Err(Error::invalid("at least one stage is required"));
        }
        if self.bottlenecks_per_stage == 0 {
            return Err(Error::invalid("bottlenecks_per_stage must be positive"));
        }
        if !(self.width_ratio > 0.0 && self.width_ratio <= 1.0) {
            return Err(Error::invalid("width_ratio must lie in (0, 1]"));
        }
        if self.d_switch < 2 {
            return Err(Error::invalid("d_switch must be at least 2"));
        }
        if self.depth_scale <= 0.0 {
            return Err(Error::invalid("depth_scale must be positive"));
        }
        if self.epsilon <= 0.0 {
            return Err(Error::invalid("epsilon must be positive"));
        }
        Ok(())
    }

    /// Encoder output channels per stage: `channel_base * s`.
    pub fn encoder_channels(&self) -> Vec<usize> {
        (1..=self.stages).map(|s| self.channel_base * s).collect()
    }

    /// Decoder output channels per full stage, then the single final map.
    pub fn decoder_channels(&self) -> Vec<usize> {
        let mut out: Vec<usize> = (1..self.stages)
            .map(|s| self.channel_base * (self.stages - s))
            .collect();
        out.push(1);
        out
    }

    pub fn downsample_factor(&self) -> usize {
        1 << self.stages
    }

    fn bottleneck_mid(&self, out_ch: usize) -> usize {
        ((self.width_ratio * out_ch as f64).round() as usize).max(1)
    }
}

/// Index of a parameter in the registry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub trainable: bool,
}

/// Flat, deterministically ordered parameter store.
#[derive(Clone, Debug, Default)]
pub struct ParamRegistry<T> {
    params: Vec<Parameter<T>>,
}

impl<T: Scalar> ParamRegistry<T> {
    pub fn new() -> Self {
        ParamRegistry { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.params.iter().any(|p| p.name == name),
            "duplicate parameter name {name}"
        );
        self.params.push(Parameter {
            name,
            value,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.params
            .iter()
            .enumerate()
            .filter(|(_, p)| p.trainable)
            .map(|(i, _)| ParamId(i))
            .collect()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params
            .iter()
            .position(|p| p.name == name)
            .map(ParamId)
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.shape().count())
            .sum()
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvSpec {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
enum InnerSpec {
    SiConv(ConvSpec),
    Sisl { undilated: ConvSpec, dilated: ConvSpec },
}

#[derive(Clone, Debug)]
struct BottleneckSpec<T> {
    name: String,
    reduce: ConvSpec,
    inner: InnerSpec,
    expand: ConvSpec,
    projection: Option<ConvSpec>,
    hyper: BottleneckHyper<T>,
}

#[derive(Clone, Debug)]
struct DownsampleSpec<T> {
    conv: ConvSpec,
    hyper: SiConvHyper<T>,
}

#[derive(Clone, Debug)]
struct StageSpec<T> {
    expand: BottleneckSpec<T>,
    downsample: DownsampleSpec<T>,
    tail: Vec<BottleneckSpec<T>>,
}

#[derive(Clone, Copy, Debug)]
struct BnSpec {
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
}

#[derive(Clone, Debug)]
struct DenseBottleneckSpec {
    reduce: ConvSpec,
    reduce_bn: Option<BnSpec>,
    inner: ConvSpec,
    inner_bn: Option<BnSpec>,
    expand: ConvSpec,
    expand_bn: Option<BnSpec>,
}

#[derive(Clone, Debug)]
struct DecoderStageSpec {
    up: ConvSpec,
    fusion: ConvSpec,
    block: DenseBottleneckSpec,
}

/// Built model: configuration, parameter registry, and the layer wiring
/// expressed as registry references.
#[derive(Clone, Debug)]
pub struct DvmnModel<T: Scalar> {
    cfg: NetworkConfig,
    registry: ParamRegistry<T>,
    depth_encoder: Vec<StageSpec<T>>,
    image_encoder: Vec<StageSpec<T>>,
    spp: ConvSpec,
    decoder: Vec<DecoderStageSpec>,
    final_up: ConvSpec,
}

/// One propagated-mask observation from the depth encoder.
#[derive(Clone, Debug)]
pub struct MaskTraceEntry<T> {
    pub name: String,
    pub mask: ValidityMask<T>,
    pub density: f64,
}

/// Result of a recorded forward pass.
pub struct ForwardPass<T> {
    /// Completed depth in meters, shape `(batch, 1, H, W)`.
    pub output: NodeId,
    /// Tape leaves of the registry parameters, in registry order.
    pub param_nodes: Vec<NodeId>,
    /// Batch-norm running-statistic updates to apply after the step.
    pub buffer_updates: Vec<(ParamId, Tensor<T>)>,
}

struct ParamInit {
    rng: rand_chacha::ChaCha8Rng,
}

impl ParamInit {
    fn new(seed: u64) -> Self {
        use rand::SeedableRng;
        ParamInit {
            rng: rand_chacha::ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// He-normal weights: std = sqrt(2 / fan_in) with fan_in counted over
    /// the receptive field.
    fn conv_weight<T: Scalar>(&mut self, shape: Shape, fan_in: usize) -> Tensor<T> {
        use rand_distr::Distribution;
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = rand_distr::Normal::new(0.0, std).expect("normal distribution");
        Tensor::from_fn(shape, |_, _, _, _| T::of_f64(normal.sample(&mut self.rng)))
    }
}

impl<T: Scalar> DvmnModel<T> {
    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn registry(&self) -> &ParamRegistry<T> {
        &self.registry
    }

    pub fn registry_mut(&mut self) -> &mut ParamRegistry<T> {
        &mut self.registry
    }

    /// Total trainable scalar count.
    pub fn parameter_count(&self) -> usize {
        self.registry.trainable_count()
    }

    /// Insert every registry parameter as a tape leaf, in registry order.
    /// Trainable parameters receive gradients only when `train` is set.
    pub fn insert_leaves(&self, tape: &mut Tape<T>, train: bool) -> Vec<NodeId> {
        self.registry
            .iter()
            .map(|(_, p)| tape.leaf(p.value.clone(), train && p.trainable))
            .collect()
    }
}

/// Build the network with deterministic parameter initialization.
pub fn build_dvmn<T: Scalar>(cfg: &NetworkConfig, rng_seed: u64) -> Result<DvmnModel<T>> {
    cfg.validate()?;
    let mut registry = ParamRegistry::new();
    let mut init = ParamInit::new(rng_seed);

    let depth_encoder = build_encoder(cfg, &mut registry, &mut init, "depth", 1, cfg.sisl_count)?;
    let image_encoder = build_encoder(cfg, &mut registry, &mut init, "image", 3, 0)?;

    let enc_ch = cfg.channel_base * cfg.stages;
    let spp_in = 2 * enc_ch * 4;
    let spp = add_conv(
        &mut registry,
        &mut init,
        "fuse.spp",
        Shape::new(enc_ch, spp_in, 1, 1),
    );

    let mut decoder = Vec::new();
    let mut in_ch = enc_ch;
    for s in 1..cfg.stages {
        let out_ch = cfg.channel_base * (cfg.stages - s);
        let skip_ch = out_ch;
        let prefix = format!("decoder.s{s}");
        let up = add_tconv(
            &mut registry,
            &mut init,
            &format!("{prefix}.up"),
            Shape::new(in_ch, out_ch, 2, 2),
        );
        let fusion = add_conv(
            &mut registry,
            &mut init,
            &format!("{prefix}.fuse"),
            Shape::new(out_ch, out_ch + skip_ch + 1, 1, 1),
        );
        let block = build_dense_bottleneck(cfg, &mut registry, &mut init, &prefix, out_ch)?;
        decoder.push(DecoderStageSpec { up, fusion, block });
        in_ch = out_ch;
    }
    let final_up = add_tconv(
        &mut registry,
        &mut init,
        "decoder.final.up",
        Shape::new(in_ch, 1, 2, 2),
    );

    Ok(DvmnModel {
        cfg: cfg.clone(),
        registry,
        depth_encoder,
        image_encoder,
        spp,
        decoder,
        final_up,
    })
}

fn add_conv<T: Scalar>(
    registry: &mut ParamRegistry<T>,
    init: &mut ParamInit,
    prefix: &str,
    weight_shape: Shape,
) -> ConvSpec {
    let fan_in = weight_shape.channels * weight_shape.height * weight_shape.width;
    let weight = registry.add(
        format!("{prefix}.weight"),
        init.conv_weight(weight_shape, fan_in),
        true,
    );
    let bias = registry.add(
        format!("{prefix}.bias"),
        Tensor::zeros(Shape::new(1, weight_shape.batch, 1, 1)),
        true,
    );
    ConvSpec { weight, bias }
}

// Transposed-convolution weights are (in, out, kh, kw); bias is per out.
fn add_tconv<T: Scalar>(
    registry: &mut ParamRegistry<T>,
    init: &mut ParamInit,
    prefix: &str,
    weight_shape: Shape,
) -> ConvSpec {
    let fan_in = weight_shape.batch * weight_shape.height * weight_shape.width;
    let weight = registry.add(
        format!("{prefix}.weight"),
        init.conv_weight(weight_shape, fan_in),
        true,
    );
    let bias = registry.add(
        format!("{prefix}.bias"),
        Tensor::zeros(Shape::new(1, weight_shape.channels, 1, 1)),
        true,
    );
    ConvSpec { weight, bias }
}

fn add_bn<T: Scalar>(
    registry: &mut ParamRegistry<T>,
    prefix: &str,
    channels: usize,
) -> BnSpec {
    let shape = Shape::new(1, channels, 1, 1);
    BnSpec {
        gamma: registry.add(format!("{prefix}.bn.gamma"), Tensor::filled(shape, T::one()), true),
        beta: registry.add(format!("{prefix}.bn.beta"), Tensor::zeros(shape), true),
        running_mean: registry.add(format!("{prefix}.bn.running_mean"), Tensor::zeros(shape), false),
        running_var: registry.add(
            format!("{prefix}.bn.running_var"),
            Tensor::filled(shape, T::one()),
            false,
        ),
    }
}

fn build_bottleneck<T: Scalar>(
    cfg: &NetworkConfig,
    registry: &mut ParamRegistry<T>,
    init: &mut ParamInit,
    name: &str,
    in_ch: usize,
    out_ch: usize,
    use_sisl: bool,
) -> BottleneckSpec<T> {
    let mid = cfg.bottleneck_mid(out_ch);
    let eps = T::of_f64(cfg.epsilon);
    let reduce = add_conv(registry, init, &format!("{name}.reduce"), Shape::new(mid, in_ch, 1, 1));
    let expand = add_conv(registry, init, &format!("{name}.expand"), Shape::new(out_ch, mid, 1, 1));
    let (inner, inner_hyper) = if use_sisl {
        let undilated = add_conv(
            registry,
            init,
            &format!("{name}.switch.d1"),
            Shape::new(mid, mid, 3, 3),
        );
        let dilated = add_conv(
            registry,
            init,
            &format!("{name}.switch.d{}", cfg.d_switch),
            Shape::new(mid, mid, 3, 3),
        );
        (
            InnerSpec::Sisl { undilated, dilated },
            InnerHyper::Sisl(SislHyper {
                half_kernel: 1,
                d_switch: cfg.d_switch,
                stride: 1,
                epsilon: eps,
            }),
        )
    } else {
        let conv = add_conv(registry, init, &format!("{name}.si3x3"), Shape::new(mid, mid, 3, 3));
        (
            InnerSpec::SiConv(conv),
            InnerHyper::SiConv(SiConvHyper {
                half_kernel: 1,
                dilation: 1,
                stride: 1,
                epsilon: eps,
            }),
        )
    };
    let projection = (in_ch != out_ch).then(|| {
        add_conv(
            registry,
            init,
            &format!("{name}.project"),
            Shape::new(out_ch, in_ch, 1, 1),
        )
    });
    BottleneckSpec {
        name: name.to_string(),
        reduce,
        inner,
        expand,
        projection,
        hyper: BottleneckHyper {
            inner: inner_hyper,
            variant: BottleneckVariant::Plain,
        },
    }
}

fn build_encoder<T: Scalar>(
    cfg: &NetworkConfig,
    registry: &mut ParamRegistry<T>,
    init: &mut ParamInit,
    prefix: &str,
    input_channels: usize,
    sisl_count: usize,
) -> Result<Vec<StageSpec<T>>> {
    let eps = T::of_f64(cfg.epsilon);
    let mut stages = Vec::with_capacity(cfg.stages);
    let mut in_ch = input_channels;
    for s in 1..=cfg.stages {
        let out_ch = cfg.channel_base * s;
        // Switch layers sit in the first stage only; the expanding
        // bottleneck counts as that stage's first block.
        let use_sisl = |block_index: usize| s == 1 && block_index < sisl_count;
        let expand = build_bottleneck(
            cfg,
            registry,
            init,
            &format!("{prefix}.s{s}.expand"),
            in_ch,
            out_ch,
            use_sisl(0),
        );
        let down = add_conv(
            registry,
            init,
            &format!("{prefix}.s{s}.down"),
            Shape::new(out_ch, out_ch, 3, 3),
        );
        let downsample = DownsampleSpec {
            conv: down,
            hyper: SiConvHyper {
                half_kernel: 1,
                dilation: 1,
                stride: 2,
                epsilon: eps,
            },
        };
        let tail = (1..cfg.bottlenecks_per_stage)
            .map(|j| {
                build_bottleneck(
                    cfg,
                    registry,
                    init,
                    &format!("{prefix}.s{s}.b{j}"),
                    out_ch,
                    out_ch,
                    use_sisl(j),
                )
            })
            .collect();
        stages.push(StageSpec {
            expand,
            downsample,
            tail,
        });
        in_ch = out_ch;
    }
    Ok(stages)
}

fn build_dense_bottleneck<T: Scalar>(
    cfg: &NetworkConfig,
    registry: &mut ParamRegistry<T>,
    init: &mut ParamInit,
    prefix: &str,
    channels: usize,
) -> Result<DenseBottleneckSpec> {
    let mid = cfg.bottleneck_mid(channels);
    let reduce = add_conv(
        registry,
        init,
        &format!("{prefix}.block.reduce"),
        Shape::new(mid, channels, 1, 1),
    );
    let inner = add_conv(
        registry,
        init,
        &format!("{prefix}.block.conv3x3"),
        Shape::new(mid, mid, 3, 3),
    );
    let expand = add_conv(
        registry,
        init,
        &format!("{prefix}.block.expand"),
        Shape::new(channels, mid, 1, 1),
    );
    let (reduce_bn, inner_bn, expand_bn) = if cfg.batch_norm_decoder {
        (
            Some(add_bn(registry, &format!("{prefix}.block.reduce"), mid)),
            Some(add_bn(registry, &format!("{prefix}.block.conv3x3"), mid)),
            Some(add_bn(registry, &format!("{prefix}.block.expand"), channels)),
        )
    } else {
        (None, None, None)
    };
    Ok(DenseBottleneckSpec {
        reduce,
        reduce_bn,
        inner,
        inner_bn,
        expand,
        expand_bn,
    })
}

/// Forward-pass context: the tape plus the registry leaf nodes.
struct Runner<'m, T: Scalar> {
    model: &'m DvmnModel<T>,
    nodes: Vec<NodeId>,
    train: bool,
    bn_momentum: T,
    buffer_updates: Vec<(ParamId, Tensor<T>)>,
}

impl<'m, T: Scalar> Runner<'m, T> {
    fn conv_nodes(&self, spec: ConvSpec) -> ConvNodes {
        ConvNodes {
            weight: self.nodes[spec.weight.0],
            bias: self.nodes[spec.bias.0],
        }
    }

    fn bottleneck(
        &mut self,
        tape: &mut Tape<T>,
        spec: &BottleneckSpec<T>,
        x: NodeId,
        o: &ValidityMask<T>,
    ) -> Result<(NodeId, ValidityMask<T>)> {
        let inner = match spec.inner {
            InnerSpec::SiConv(c) => InnerNodes::SiConv(self.conv_nodes(c)),
            InnerSpec::Sisl { undilated, dilated } => InnerNodes::Sisl(SislNodes {
                undilated: self.conv_nodes(undilated),
                dilated: self.conv_nodes(dilated),
            }),
        };
        let nodes = BottleneckNodes {
            reduce: self.conv_nodes(spec.reduce),
            inner,
            expand: self.conv_nodes(spec.expand),
            projection: spec.projection.map(|p| self.conv_nodes(p)),
        };
        si_bottleneck_on_tape(tape, x, o, nodes, spec.hyper)
    }

    fn encoder(
        &mut self,
        tape: &mut Tape<T>,
        stages: &'m [StageSpec<T>],
        mut x: NodeId,
        mut o: ValidityMask<T>,
    ) -> Result<Vec<(NodeId, ValidityMask<T>)>> {
        let mut outputs = Vec::with_capacity(stages.len());
        for stage in stages {
            let (y, m) = self.bottleneck(tape, &stage.expand, x, &o)?;
            x = y;
            o = m;
            let down = self.conv_nodes(stage.downsample.conv);
            let (y, m) = si_conv_on_tape(tape, x, &o, down, stage.downsample.hyper)?;
            x = y;
            o = m;
            for block in &stage.tail {
                let (y, m) = self.bottleneck(tape, block, x, &o)?;
                x = y;
                o = m;
            }
            outputs.push((x, o.clone()));
        }
        Ok(outputs)
    }

    fn batch_norm(
        &mut self,
        tape: &mut Tape<T>,
        spec: BnSpec,
        x: NodeId,
    ) -> Result<NodeId> {
        let eps = T::of_f64(1e-5);
        if self.train {
            let gamma = self.nodes[spec.gamma.0];
            let beta = self.nodes[spec.beta.0];
            let (y, mean, var) = tape.batch_norm(x, gamma, beta, eps)?;
            let m = self.bn_momentum;
            let keep = T::one() - m;
            let rm = &self.model.registry.get(spec.running_mean).value;
            let rv = &self.model.registry.get(spec.running_var).value;
            let channels = mean.len();
            let new_rm = Tensor::new(
                Shape::new(1, channels, 1, 1),
                rm.data()
                    .iter()
                    .zip(&mean)
                    .map(|(&r, &b)| r * keep + b * m)
                    .collect(),
            )?;
            let new_rv = Tensor::new(
                Shape::new(1, channels, 1, 1),
                rv.data()
                    .iter()
                    .zip(&var)
                    .map(|(&r, &b)| r * keep + b * m)
                    .collect(),
            )?;
            self.buffer_updates.push((spec.running_mean, new_rm));
            self.buffer_updates.push((spec.running_var, new_rv));
            Ok(y)
        } else {
            // Fold the running statistics into a per-channel affine map.
            let rm = &self.model.registry.get(spec.running_mean).value;
            let rv = &self.model.registry.get(spec.running_var).value;
            let gamma = &self.model.registry.get(spec.gamma).value;
            let beta = &self.model.registry.get(spec.beta).value;
            let channels = rm.shape().channels;
            let mut scale = Vec::with_capacity(channels);
            let mut shift = Vec::with_capacity(channels);
            for c in 0..channels {
                let inv = T::one() / (rv.data()[c] + eps).sqrt();
                let g = gamma.data()[c] * inv;
                scale.push(g);
                shift.push(beta.data()[c] - rm.data()[c] * g);
            }
            let scale = Tensor::new(Shape::new(1, channels, 1, 1), scale)?;
            let shift = Tensor::new(Shape::new(1, channels, 1, 1), shift)?;
            let y = tape.mul_const(x, scale)?;
            tape.add_const(y, shift)
        }
    }

    fn dense_bottleneck(
        &mut self,
        tape: &mut Tape<T>,
        spec: &DenseBottleneckSpec,
        x: NodeId,
    ) -> Result<NodeId> {
        let reduce = self.conv_nodes(spec.reduce);
        let mut t = tape.conv2d(x, reduce.weight, None, 1, 1, 0)?;
        t = tape.add_bias(t, reduce.bias)?;
        if let Some(bn) = spec.reduce_bn {
            t = self.batch_norm(tape, bn, t)?;
        }
        t = tape.relu(t);
        let inner = self.conv_nodes(spec.inner);
        t = tape.conv2d(t, inner.weight, None, 1, 1, 1)?;
        t = tape.add_bias(t, inner.bias)?;
        if let Some(bn) = spec.inner_bn {
            t = self.batch_norm(tape, bn, t)?;
        }
        t = tape.relu(t);
        let expand = self.conv_nodes(spec.expand);
        t = tape.conv2d(t, expand.weight, None, 1, 1, 0)?;
        t = tape.add_bias(t, expand.bias)?;
        if let Some(bn) = spec.expand_bn {
            t = self.batch_norm(tape, bn, t)?;
        }
        let y = tape.add(t, x)?;
        Ok(tape.relu(y))
    }
}

impl<T: Scalar> DvmnModel<T> {
    /// Record a full forward pass on `tape`.
    ///
    /// `depth` is metric depth `(batch, 1, H, W)` with zeros at unobserved
    /// pixels, `image` is a `(batch, 3, H, W)` guidance image in `[0, 1]`.
    /// `H` and `W` must be divisible by `2^stages`.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<T>,
        depth: &Tensor<T>,
        mask: &ValidityMask<T>,
        image: &Tensor<T>,
        train: bool,
    ) -> Result<ForwardPass<T>> {
        let ds = depth.shape();
        let is = image.shape();
        if ds.channels != 1 {
            return Err(Error::shape("forward depth", format!("{ds}")));
        }
        if is.channels != 3 || is.batch != ds.batch || is.spatial() != ds.spatial() {
            return Err(Error::shape(
                "forward image",
                format!("image {is} for depth {ds}"),
            ));
        }
        mask.matches_features(depth)?;
        let factor = self.cfg.downsample_factor();
        if ds.height % factor != 0 || ds.width % factor != 0 {
            let pad_h = (factor - ds.height % factor) % factor;
            let pad_w = (factor - ds.width % factor) % factor;
            return Err(Error::invalid(format!(
                "spatial size {}x{} not divisible by {factor}; pad by {pad_h} rows and {pad_w} columns",
                ds.height, ds.width
            )));
        }

        let param_nodes = self.insert_leaves(tape, train);
        let mut runner = Runner {
            model: self,
            nodes: param_nodes.clone(),
            train,
            bn_momentum: T::of_f64(0.1),
            buffer_updates: Vec::new(),
        };

        let depth_leaf = tape.leaf(depth.clone(), false);
        let image_leaf = tape.leaf(image.clone(), false);
        let depth_in = tape.scale(depth_leaf, T::of_f64(1.0 / self.cfg.depth_scale));

        let depth_stages = runner.encoder(tape, &self.depth_encoder, depth_in, mask.clone())?;
        let dense = ValidityMask::all_valid(is.batch, is.height, is.width);
        let image_stages = runner.encoder(tape, &self.image_encoder, image_leaf, dense)?;

        let spp_nodes = runner.conv_nodes(self.spp);
        let (depth_top, _) = depth_stages[self.cfg.stages - 1];
        let (image_top, _) = image_stages[self.cfg.stages - 1];
        let mut y = crate::layers::spp_fuse_on_tape(
            tape,
            image_top,
            depth_top,
            spp_nodes.weight,
            spp_nodes.bias,
        )?;

        for (s, stage) in self.decoder.iter().enumerate() {
            let up = runner.conv_nodes(stage.up);
            y = tape.transposed_conv2d(y, up.weight, Some(up.bias), 2, 0)?;
            let skip_index = self.cfg.stages - (s + 1) - 1;
            let (skip, skip_mask) = &depth_stages[skip_index];
            let fuse = runner.conv_nodes(stage.fusion);
            y = crate::layers::fusion_block_on_tape(
                tape,
                y,
                *skip,
                skip_mask,
                fuse.weight,
                fuse.bias,
            )?;
            y = runner.dense_bottleneck(tape, &stage.block, y)?;
        }
        let up = runner.conv_nodes(self.final_up);
        y = tape.transposed_conv2d(y, up.weight, Some(up.bias), 2, 0)?;
        let output = tape.scale(y, T::of_f64(self.cfg.depth_scale));
        Ok(ForwardPass {
            output,
            param_nodes,
            buffer_updates: runner.buffer_updates,
        })
    }

    /// Inference: completed metric depth of the input size.
    pub fn forward(
        &self,
        depth: &Tensor<T>,
        mask: &ValidityMask<T>,
        image: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let pass = self.forward_on_tape(&mut tape, depth, mask, image, false)?;
        Ok(tape.value(pass.output).clone())
    }

    /// Propagate a validity mask through the depth encoder alone, reporting
    /// the mask and its density after every mask-transforming layer in
    /// execution order.
    pub fn layer_mask_trace(&self, mask: &ValidityMask<T>) -> Result<Vec<MaskTraceEntry<T>>> {
        let mut entries = Vec::new();
        let mut o = mask.clone();
        let mut push = |name: String, m: &ValidityMask<T>| {
            entries.push(MaskTraceEntry {
                name,
                mask: m.clone(),
                density: m.density(),
            });
        };
        for (si, stage) in self.depth_encoder.iter().enumerate() {
            let s = si + 1;
            o = propagate_bottleneck_mask(&stage.expand, &o)?;
            push(format!("depth.s{s}.expand"), &o);
            o = si_conv_mask(
                &o,
                stage.downsample.hyper.half_kernel,
                stage.downsample.hyper.dilation,
                stage.downsample.hyper.stride,
            )?;
            push(format!("depth.s{s}.down"), &o);
            for (j, block) in stage.tail.iter().enumerate() {
                o = propagate_bottleneck_mask(block, &o)?;
                push(format!("depth.s{s}.b{}", j + 1), &o);
            }
        }
        Ok(entries)
    }
}

fn propagate_bottleneck_mask<T: Scalar>(
    spec: &BottleneckSpec<T>,
    o: &ValidityMask<T>,
) -> Result<ValidityMask<T>> {
    match spec.hyper.inner {
        InnerHyper::SiConv(h) => si_conv_mask(o, h.half_kernel, h.dilation, h.stride),
        InnerHyper::Sisl(h) => sisl_mask(o, h.half_kernel, h.d_switch, h.stride),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk_config() -> NetworkConfig {
        NetworkConfig {
            channel_base: 4,
            stages: 3,
            bottlenecks_per_stage: 2,
            sisl_count: 2,
            batch_norm_decoder: true,
            ..NetworkConfig::default()
        }
    }

    fn scan_mask(h: usize, w: usize, every: usize, seed: u64) -> ValidityMask<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        ValidityMask::new(Tensor::from_fn(Shape::new(1, 1, h, w), |_, _, hh, _| {
            if hh % every == every / 2 && rng.random_bool(0.4) {
                1.0
            } else {
                0.0
            }
        }))
        .unwrap()
    }

    #[test]
    fn channel_schedules_match_the_architecture() {
        let cfg = NetworkConfig::default();
        assert_eq!(cfg.encoder_channels(), vec![32, 64, 96, 128]);
        assert_eq!(cfg.decoder_channels(), vec![96, 64, 32, 1]);
    }

    #[test]
    fn zero_stage_config_is_rejected() {
        let cfg = NetworkConfig {
            stages: 0,
            ..NetworkConfig::default()
        };
        assert!(build_dvmn::<f64>(&cfg, 0).is_err());
    }

    #[test]
    fn same_seed_builds_identical_parameters() {
        let cfg = desk_config();
        let a = build_dvmn::<f64>(&cfg, 7).unwrap();
        let b = build_dvmn::<f64>(&cfg, 7).unwrap();
        for ((_, pa), (_, pb)) in a.registry.iter().zip(b.registry.iter()) {
            assert_eq!(pa.name, pb.name);
            assert_eq!(pa.value, pb.value);
        }
        let c = build_dvmn::<f64>(&cfg, 8).unwrap();
        let differs = a
            .registry
            .iter()
            .zip(c.registry.iter())
            .any(|((_, pa), (_, pc))| pa.value != pc.value);
        assert!(differs);
    }

    #[test]
    fn parameter_names_are_unique() {
        let model = build_dvmn::<f64>(&desk_config(), 0).unwrap();
        let mut names: Vec<&str> = model.registry.iter().map(|(_, p)| p.name.as_str()).collect();
        let total = names.len();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), total);
    }

    #[test]
    fn encoders_share_structure_after_stage_one() {
        // Parameter-shape multisets of stages 2.. are identical across the
        // two encoders (stage 1 differs by switch layers and input width).
        let model = build_dvmn::<f64>(&desk_config(), 0).unwrap();
        let shapes = |prefix: &str| {
            let mut v: Vec<String> = model
                .registry
                .iter()
                .filter(|(_, p)| p.name.starts_with(prefix))
                .map(|(_, p)| format!("{}", p.value.shape()))
                .collect();
            v.sort();
            v
        };
        for s in 2..=3 {
            assert_eq!(shapes(&format!("depth.s{s}.")), shapes(&format!("image.s{s}.")));
        }
    }

    #[test]
    fn forward_produces_full_resolution_depth() {
        let model = build_dvmn::<f64>(&desk_config(), 1).unwrap();
        let (h, w) = (16, 24);
        let mask = scan_mask(h, w, 4, 2);
        let depth = Tensor::from_fn(Shape::new(1, 1, h, w), |_, _, hh, ww| {
            mask.tensor().at(0, 0, hh, ww) * (5.0 + hh as f64 * 0.1 + ww as f64 * 0.05)
        });
        let image = Tensor::filled(Shape::new(1, 3, h, w), 0.5);
        let out = model.forward(&depth, &mask, &image).unwrap();
        assert_eq!(out.shape(), Shape::new(1, 1, h, w));
        assert!(out.is_finite());
    }

    #[test]
    fn indivisible_input_reports_required_padding() {
        let model = build_dvmn::<f64>(&desk_config(), 1).unwrap();
        let depth = Tensor::<f64>::zeros(Shape::new(1, 1, 15, 24));
        let mask = ValidityMask::all_invalid(1, 15, 24);
        let image = Tensor::zeros(Shape::new(1, 3, 15, 24));
        let err = model.forward(&depth, &mask, &image).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("pad by 1 rows"), "message was: {msg}");
    }

    #[test]
    fn all_zero_mask_still_finite() {
        let model = build_dvmn::<f64>(&desk_config(), 3).unwrap();
        let (h, w) = (8, 16);
        let depth = Tensor::<f64>::zeros(Shape::new(1, 1, h, w));
        let mask = ValidityMask::all_invalid(1, h, w);
        let image = Tensor::filled(Shape::new(1, 3, h, w), 0.25);
        let out = model.forward(&depth, &mask, &image).unwrap();
        assert!(out.is_finite());
    }

    #[test]
    fn end_to_end_sparsity_invariance() {
        use rand::{Rng, SeedableRng};
        let model = build_dvmn::<f64>(&desk_config(), 4).unwrap();
        let (h, w) = (16, 16);
        let mask = scan_mask(h, w, 4, 5);
        let depth = Tensor::from_fn(Shape::new(1, 1, h, w), |_, _, hh, ww| {
            mask.tensor().at(0, 0, hh, ww) * (4.0 + hh as f64 * 0.2)
        });
        let image = Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, hh, ww| {
            ((c + hh + ww) % 7) as f64 / 7.0
        });
        let base = model.forward(&depth, &mask, &image).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let mut perturbed = depth.clone();
        for hh in 0..h {
            for ww in 0..w {
                if mask.tensor().at(0, 0, hh, ww) == 0.0 {
                    perturbed.set(0, 0, hh, ww, rng.random_range(-30.0..30.0));
                }
            }
        }
        let out = model.forward(&perturbed, &mask, &image).unwrap();
        assert_eq!(base, out);
    }

    #[test]
    fn mask_trace_is_dense_for_dense_input() {
        let model = build_dvmn::<f64>(&desk_config(), 7).unwrap();
        let mask = ValidityMask::all_valid(1, 16, 16);
        let trace = model.layer_mask_trace(&mask).unwrap();
        assert!(!trace.is_empty());
        for entry in trace {
            assert_eq!(entry.density, 1.0, "{}", entry.name);
        }
    }

    #[test]
    fn mask_trace_density_never_decreases_at_stride_one() {
        let model = build_dvmn::<f64>(&desk_config(), 8).unwrap();
        let mask = scan_mask(16, 32, 5, 9);
        let trace = model.layer_mask_trace(&mask).unwrap();
        let mut prev = mask.density();
        for entry in &trace {
            if !entry.name.contains(".down") {
                assert!(
                    entry.density >= prev,
                    "{} density {} fell below {prev}",
                    entry.name,
                    entry.density
                );
            }
            prev = entry.density;
        }
    }

    #[test]
    fn parameter_count_scales_roughly_quadratically_in_width() {
        let small = build_dvmn::<f64>(&desk_config(), 0).unwrap().parameter_count();
        let doubled = build_dvmn::<f64>(
            &NetworkConfig {
                channel_base: 8,
                ..desk_config()
            },
            0,
        )
        .unwrap()
        .parameter_count();
        let ratio = doubled as f64 / small as f64;
        assert!(
            (3.0..5.0).contains(&ratio),
            "doubling channels gave ratio {ratio}"
        );
    }

    #[test]
    fn full_config_lands_near_the_published_size() {
        let model = build_dvmn::<f64>(&NetworkConfig::default(), 0).unwrap();
        let count = model.parameter_count();
        assert!(
            (1_000_000..=4_000_000).contains(&count),
            "parameter count {count}"
        );
    }
}
