//! Declarative model configurations and the networks built from them.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{feasible_depth, UnitSpec, WConv, WConvSpec, WaveletUnit};
use crate::nn::{BatchNorm, Conv, Ctx, Module, ParamKind};
use crate::ops::{same_padding, SignConvention};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Operator column of an architecture table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Operator {
    /// 3×3 stem convolution + BN + ReLU6.
    Conv,
    /// A run of wavelet units.
    Block,
    /// 1×1 convolution; the final row is the classifier, any other row is a
    /// head convolution followed by BN + ReLU6.
    Conv2d,
    Avgpool,
}

/// One row of an architecture table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub operator: Operator,
    #[serde(default, rename = "C")]
    pub channels: usize,
    #[serde(default = "one")]
    pub repeat: usize,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default)]
    pub kappa1: u32,
    #[serde(default)]
    pub kappa2: u32,
    #[serde(default)]
    pub kappa3: u32,
    /// Expansion ratio override for this row.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t: Option<usize>,
}

fn one() -> usize {
    1
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KappaMode {
    Strict,
    #[default]
    Clamp,
}

/// How the 1×1 head row that carries depths is realised.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    #[default]
    Dense,
    Wconv,
}

impl std::str::FromStr for HeadKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(HeadKind::Dense),
            "wconv" => Ok(HeadKind::Wconv),
            other => Err(Error::Config(format!("unknown head kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub name: String,
    pub input_resolution: usize,
    #[serde(default = "three")]
    pub in_channels: usize,
    pub classes: usize,
    #[serde(default = "unit_width")]
    pub width_mult: f64,
    /// Default expansion ratio `t`.
    #[serde(default = "six")]
    pub expansion: usize,
    pub stages: Vec<StageConfig>,
    #[serde(default)]
    pub kappa_mode: KappaMode,
    #[serde(default)]
    pub head: HeadKind,
    #[serde(default)]
    pub ablate_dfwt: bool,
    #[serde(default)]
    pub sign: SignConvention,
}

fn three() -> usize {
    3
}
fn six() -> usize {
    6
}
fn unit_width() -> f64 {
    1.0
}

/// `c · width` rounded to the nearest multiple of 8 (ties up), at least 8.
pub fn round_channels(channels: usize, width: f64) -> usize {
    (((channels as f64 * width) / 8.0).round() as usize * 8).max(8)
}

fn block(c: usize, repeat: usize, stride: usize, kappa: u32) -> StageConfig {
    StageConfig {
        operator: Operator::Block,
        channels: c,
        repeat,
        stride,
        kappa1: 0,
        kappa2: kappa,
        kappa3: kappa,
        t: None,
    }
}

fn simple(operator: Operator, c: usize, stride: usize) -> StageConfig {
    StageConfig {
        operator,
        channels: c,
        repeat: 1,
        stride,
        kappa1: 0,
        kappa2: 0,
        kappa3: 0,
        t: None,
    }
}

impl ModelConfig {
    /// The ImageNet network: 224² input, seven block stages, 1280-wide head.
    pub fn imagenet(width_mult: f64, kappa: u32, expansion: usize) -> Self {
        let mut first = block(16, 1, 1, kappa);
        first.t = Some(1);
        let mut head = simple(Operator::Conv2d, 1280, 1);
        head.kappa2 = kappa;
        head.kappa3 = kappa;
        ModelConfig {
            name: "imagenet".into(),
            input_resolution: 224,
            in_channels: 3,
            classes: 1000,
            width_mult,
            expansion,
            stages: vec![
                simple(Operator::Conv, 32, 2),
                first,
                block(24, 2, 2, kappa),
                block(32, 3, 2, kappa),
                block(64, 4, 2, kappa),
                block(96, 3, 1, kappa),
                block(160, 3, 2, kappa),
                block(320, 1, 1, kappa),
                head,
                simple(Operator::Avgpool, 0, 1),
                simple(Operator::Conv2d, 1000, 1),
            ],
            kappa_mode: KappaMode::Clamp,
            head: HeadKind::Dense,
            ablate_dfwt: false,
            sign: SignConvention::default(),
        }
    }

    /// The CIFAR network: three stages of `m` units at widths 16/32/64.
    pub fn cifar(m: usize, width_mult: f64) -> Self {
        ModelConfig {
            name: "cifar".into(),
            input_resolution: 32,
            in_channels: 3,
            classes: 10,
            width_mult,
            expansion: 6,
            stages: vec![
                simple(Operator::Conv, 16, 1),
                block(16, m, 1, 3),
                block(32, m, 2, 3),
                block(64, m, 2, 3),
                simple(Operator::Avgpool, 0, 1),
                simple(Operator::Conv2d, 10, 1),
            ],
            kappa_mode: KappaMode::Clamp,
            head: HeadKind::Dense,
            ablate_dfwt: false,
            sign: SignConvention::default(),
        }
    }

    /// Desk-scale network: stem, one stage of `units` units, classifier.
    pub fn toy(
        resolution: usize,
        width: usize,
        units: usize,
        expansion: usize,
        classes: usize,
    ) -> Self {
        ModelConfig {
            name: "toy".into(),
            input_resolution: resolution,
            in_channels: 3,
            classes,
            width_mult: 1.0,
            expansion,
            stages: vec![
                simple(Operator::Conv, width, 1),
                block(width, units, 1, 3),
                simple(Operator::Avgpool, 0, 1),
                simple(Operator::Conv2d, classes, 1),
            ],
            kappa_mode: KappaMode::Strict,
            head: HeadKind::Dense,
            ablate_dfwt: false,
            sign: SignConvention::default(),
        }
    }

    pub fn with_kappas(mut self, kappas: (u32, u32, u32)) -> Self {
        for s in self
            .stages
            .iter_mut()
            .filter(|s| s.operator == Operator::Block)
        {
            (s.kappa1, s.kappa2, s.kappa3) = kappas;
        }
        self
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_owned(),
            source,
        })?;
        Self::from_json(&text)
    }

    /// FNV-1a digest of the canonical JSON form.
    pub fn digest(&self) -> u64 {
        let text = serde_json::to_string(self).expect("config serializes");
        text.bytes().fold(0xcbf29ce484222325u64, |h, b| {
            (h ^ b as u64).wrapping_mul(0x100000001b3)
        })
    }

    /// Depths requested by the block rows, `(κ1, κ2, κ3)` of the first block.
    pub fn kappas(&self) -> (u32, u32, u32) {
        self.stages
            .iter()
            .find(|s| s.operator == Operator::Block)
            .map_or((0, 0, 0), |s| (s.kappa1, s.kappa2, s.kappa3))
    }
}

/// A clamp applied while building, located by layer name.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClampRecord {
    pub layer: String,
    pub stage: String,
    pub requested: u32,
    pub applied: u32,
}

/// Resolved layer sequence of a model.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum LayerDesc {
    Stem {
        name: String,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        in_res: usize,
        out_res: usize,
    },
    Unit {
        name: String,
        spec: UnitSpec,
        in_res: usize,
        out_res: usize,
    },
    Head {
        name: String,
        spec: WConvSpec,
        res: usize,
    },
    Pool {
        name: String,
        channels: usize,
        in_res: usize,
    },
    Classifier {
        name: String,
        in_channels: usize,
        classes: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Architecture {
    pub config: ModelConfig,
    pub layers: Vec<LayerDesc>,
    pub clamps: Vec<ClampRecord>,
}

impl Architecture {
    /// Spatial extent after every layer, starting with the input.
    pub fn spatial_progression(&self) -> Vec<usize> {
        let mut out = vec![self.config.input_resolution];
        for l in &self.layers {
            let r = match l {
                LayerDesc::Stem { out_res, .. } | LayerDesc::Unit { out_res, .. } => *out_res,
                LayerDesc::Head { res, .. } => *res,
                LayerDesc::Pool { .. } | LayerDesc::Classifier { .. } => 1,
            };
            out.push(r);
        }
        out
    }

    /// Convolutions counted as network layers (stem, three or two per unit,
    /// head, classifier).
    pub fn conv_layer_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                LayerDesc::Stem { .. } | LayerDesc::Head { .. } | LayerDesc::Classifier { .. } => 1,
                LayerDesc::Unit { spec, .. } => 2 + spec.has_expansion() as usize,
                LayerDesc::Pool { .. } => 0,
            })
            .sum()
    }

    pub fn units(&self) -> impl Iterator<Item = &UnitSpec> {
        self.layers.iter().filter_map(|l| match l {
            LayerDesc::Unit { spec, .. } => Some(spec),
            _ => None,
        })
    }

    pub fn classes(&self) -> usize {
        self.config.classes
    }
}

fn resolve_depth(
    mode: KappaMode,
    requested: u32,
    channels: &[usize],
    layer: &str,
    stage: &str,
    clamps: &mut Vec<ClampRecord>,
) -> Result<u32> {
    let applied = feasible_depth(requested, channels);
    if applied != requested {
        if mode == KappaMode::Strict {
            let channels = *channels
                .iter()
                .find(|&&c| c % (1usize << requested) != 0)
                .expect("some channel count is not divisible");
            return Err(Error::Divisibility {
                channels,
                depth: requested,
            });
        }
        clamps.push(ClampRecord {
            layer: layer.into(),
            stage: stage.into(),
            requested,
            applied,
        });
    }
    Ok(applied)
}

/// Resolves a configuration into concrete layers.
pub fn build(config: &ModelConfig) -> Result<Architecture> {
    if config.stages.is_empty() {
        return Err(Error::Config("model has no stages".into()));
    }
    if !(config.width_mult > 0.0) {
        return Err(Error::Config(format!(
            "width multiplier must be positive, got {}",
            config.width_mult
        )));
    }
    let w = config.width_mult;
    let mut layers = Vec::new();
    let mut clamps = Vec::new();
    let mut channels = config.in_channels;
    let mut res = config.input_resolution;
    let last = config.stages.len() - 1;
    let mut unit_index = 0;
    for (row, stage) in config.stages.iter().enumerate() {
        match stage.operator {
            Operator::Conv => {
                let out = round_channels(stage.channels, w);
                let (out_res, _) = same_padding(res, 3, stage.stride);
                layers.push(LayerDesc::Stem {
                    name: format!("stem{row}"),
                    in_channels: channels,
                    out_channels: out,
                    kernel: 3,
                    stride: stage.stride,
                    in_res: res,
                    out_res,
                });
                channels = out;
                res = out_res;
            }
            Operator::Block => {
                let out = round_channels(stage.channels, w);
                let t = stage.t.unwrap_or(config.expansion);
                for r in 0..stage.repeat {
                    let stride = if r == 0 { stage.stride } else { 1 };
                    let name = format!("unit{unit_index}");
                    let hidden = channels * t;
                    let k1 = if t == 1 {
                        stage.kappa1
                    } else {
                        resolve_depth(
                            config.kappa_mode,
                            stage.kappa1,
                            &[channels, hidden],
                            &name,
                            "expand",
                            &mut clamps,
                        )?
                    };
                    if stage.kappa2 != stage.kappa3 {
                        return Err(Error::Config(format!(
                            "row {row}: kappa2 ({}) must equal kappa3 ({})",
                            stage.kappa2, stage.kappa3
                        )));
                    }
                    let k23 = resolve_depth(
                        config.kappa_mode,
                        stage.kappa3,
                        &[hidden, out],
                        &name,
                        "dfwt+project",
                        &mut clamps,
                    )?;
                    let spec = UnitSpec::new(channels, out, t, (k1, k23, k23), stride)?
                        .with_sign(config.sign);
                    let (out_res, _) = same_padding(res, 3, stride);
                    layers.push(LayerDesc::Unit {
                        name,
                        spec,
                        in_res: res,
                        out_res,
                    });
                    unit_index += 1;
                    channels = out;
                    res = out_res;
                }
            }
            Operator::Conv2d if row == last => {
                layers.push(LayerDesc::Classifier {
                    name: "classifier".into(),
                    in_channels: channels,
                    classes: stage.channels,
                });
                channels = stage.channels;
            }
            Operator::Conv2d => {
                let out = round_channels(stage.channels, w);
                let name = format!("head{row}");
                let depth = match config.head {
                    HeadKind::Dense => 0,
                    HeadKind::Wconv => resolve_depth(
                        config.kappa_mode,
                        stage.kappa3,
                        &[channels, out],
                        &name,
                        "head",
                        &mut clamps,
                    )?,
                };
                layers.push(LayerDesc::Head {
                    name,
                    spec: WConvSpec::pointwise(channels, out, depth)?,
                    res,
                });
                channels = out;
            }
            Operator::Avgpool => {
                layers.push(LayerDesc::Pool {
                    name: "avgpool".into(),
                    channels,
                    in_res: res,
                });
                res = 1;
            }
        }
    }
    match layers.last() {
        Some(LayerDesc::Classifier { .. }) => {}
        _ => {
            return Err(Error::Config(
                "the final row must be the conv2d classifier".into(),
            ))
        }
    }
    if channels != config.classes {
        return Err(Error::Config(format!(
            "classifier emits {channels} classes but the model declares {}",
            config.classes
        )));
    }
    if !layers.iter().any(|l| matches!(l, LayerDesc::Pool { .. })) {
        return Err(Error::Config(
            "the classifier must follow an avgpool row".into(),
        ));
    }
    Ok(Architecture {
        config: config.clone(),
        layers,
        clamps,
    })
}

pub fn build_imagenet(width_mult: f64, kappa: u32, expansion: usize) -> Result<Architecture> {
    build(&ModelConfig::imagenet(width_mult, kappa, expansion))
}

pub fn build_cifar(m: usize, width_mult: f64) -> Result<Architecture> {
    if m == 0 {
        return Err(Error::Config("M must be at least 1".into()));
    }
    build(&ModelConfig::cifar(m, width_mult))
}

/// The same architecture with every DFWT replaced by identity.
pub fn build_ablation(config: &ModelConfig) -> Result<Architecture> {
    let mut c = config.clone();
    c.ablate_dfwt = true;
    build(&c)
}

/// Trainable instance of an [`Architecture`].
#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    pub arch: Architecture,
    pub seed: u64,
    stem: (Conv<T>, BatchNorm<T>),
    units: Vec<WaveletUnit<T>>,
    head: Option<(WConv<T>, BatchNorm<T>)>,
    classifier: Conv<T>,
}

impl<T: Scalar> Network<T> {
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stem = None;
        let mut units = Vec::new();
        let mut head = None;
        let mut classifier = None;
        for l in &arch.layers {
            match l {
                LayerDesc::Stem {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    ..
                } => {
                    if stem.is_some() {
                        return Err(Error::Unsupported("more than one stem convolution".into()));
                    }
                    stem = Some((
                        Conv::init(*kernel, *in_channels, *out_channels, *stride, &mut rng),
                        BatchNorm::new(*out_channels),
                    ));
                }
                LayerDesc::Unit { spec, .. } => units.push(WaveletUnit::init(*spec, &mut rng)?),
                LayerDesc::Head { spec, .. } => {
                    head = Some((
                        WConv::init(*spec, &mut rng),
                        BatchNorm::new(spec.out_channels),
                    ));
                }
                LayerDesc::Pool { .. } => {}
                LayerDesc::Classifier {
                    in_channels,
                    classes,
                    ..
                } => {
                    classifier = Some(Conv::init(1, *in_channels, *classes, 1, &mut rng));
                }
            }
        }
        let stem =
            stem.ok_or_else(|| Error::Unsupported("networks need a stem convolution".into()))?;
        Ok(Network {
            arch,
            seed,
            stem,
            units,
            head,
            classifier: classifier.expect("build guarantees a classifier"),
        })
    }

    pub fn units(&self) -> &[WaveletUnit<T>] {
        &self.units
    }

    pub fn ablated(&self) -> bool {
        self.arch.config.ablate_dfwt
    }

    /// Same weights, DFWT stages toggled.
    pub fn with_ablation(&self, ablate: bool) -> Self {
        let mut n = self.clone();
        n.arch.config.ablate_dfwt = ablate;
        n
    }

    pub fn input_shape(&self, batch: usize) -> Shape {
        let c = &self.arch.config;
        Shape::new(batch, c.input_resolution, c.input_resolution, c.in_channels)
    }

    /// Records the network and returns `[B, 1, 1, classes]` logits.
    pub fn record(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let with_dfwt = !self.ablated();
        let mut h = self.stem.0.record(ctx, x)?;
        h = self.stem.1.record(ctx, h)?;
        h = ctx.tape.relu6(h)?;
        for unit in &self.units {
            h = unit.record(ctx, h, with_dfwt)?;
        }
        if let Some((conv, bn)) = &self.head {
            h = conv.record(ctx, h)?;
            h = bn.record(ctx, h)?;
            h = ctx.tape.relu6(h)?;
        }
        h = ctx.tape.global_avg_pool(h)?;
        self.classifier.record(ctx, h)
    }

    /// Inference-mode logits.
    pub fn logits(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        let mut ctx = Ctx::bind_frozen(&mut tape, self, false);
        let y = self.record(&mut ctx, x)?;
        drop(ctx);
        Ok(tape.value(y)?.clone())
    }

    /// Conversion to another scalar type with identical (rounded) weights.
    pub fn cast<U: Scalar>(&self) -> Network<U> {
        let mut out = Network::<U>::init(self.arch.clone(), self.seed)
            .expect("architecture already validated");
        for (dst, src) in out.parameters_mut().into_iter().zip(self.parameters()) {
            *dst = src.1.cast();
        }
        for (dst, src) in out.batch_norms_mut().into_iter().zip(self.batch_norms()) {
            dst.running_mean = src.running_mean.iter().map(|v| U::of(v.as_f64())).collect();
            dst.running_var = src.running_var.iter().map(|v| U::of(v.as_f64())).collect();
        }
        out
    }

    fn batch_norms(&self) -> Vec<&BatchNorm<T>> {
        let mut out = vec![&self.stem.1];
        for u in &self.units {
            if let Some((_, bn)) = &u.expand {
                out.push(bn);
            }
            out.push(&u.bn_depthwise);
            out.push(&u.bn_project);
        }
        if let Some((_, bn)) = &self.head {
            out.push(bn);
        }
        out
    }
}

impl<T: Scalar> Module<T> for Network<T> {
    fn parameters(&self) -> Vec<(ParamKind, &Tensor<T>)> {
        let mut out = self.stem.0.parameters();
        out.extend(self.stem.1.parameters());
        for u in &self.units {
            out.extend(u.parameters());
        }
        if let Some((conv, bn)) = &self.head {
            out.extend(conv.parameters());
            out.extend(bn.parameters());
        }
        out.extend(self.classifier.parameters());
        out
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = self.stem.0.parameters_mut();
        out.extend(self.stem.1.parameters_mut());
        for u in &mut self.units {
            out.extend(u.parameters_mut());
        }
        if let Some((conv, bn)) = &mut self.head {
            out.extend(conv.parameters_mut());
            out.extend(bn.parameters_mut());
        }
        out.extend(self.classifier.parameters_mut());
        out
    }

    fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm<T>> {
        let mut out = vec![&mut self.stem.1];
        for u in &mut self.units {
            out.extend(u.batch_norms_mut());
        }
        if let Some((_, bn)) = &mut self.head {
            out.push(bn);
        }
        out
    }
}
