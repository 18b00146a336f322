//! Wavelet convolution, the depthwise fast wavelet transform, and the
//! inverted-residual unit built from them.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{
    evaluate_frozen, truncated_normal, BatchNorm, Ctx, DepthwiseConv, Module, ParamKind,
};
use crate::ops;
pub use crate::ops::SignConvention;
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

fn divisible(channels: usize, depth: u32) -> bool {
    depth < usize::BITS && channels.is_multiple_of(1usize << depth)
}

fn check_divisible(channels: usize, depth: u32) -> Result<()> {
    if divisible(channels, depth) {
        Ok(())
    } else {
        Err(Error::Divisibility { channels, depth })
    }
}

/// Largest depth `<= depth` such that `2^depth` divides every channel count.
pub fn feasible_depth(depth: u32, channels: &[usize]) -> u32 {
    (0..=depth)
        .rev()
        .find(|&d| channels.iter().all(|&c| divisible(c, d)))
        .unwrap_or(0)
}

/// Dyadic input pieces `{D/2, D/4, ..., D/2^κ, D/2^κ}`; `{D}` for `κ = 0`.
pub fn wconv_partition_in(channels: usize, depth: u32) -> Result<Vec<usize>> {
    check_divisible(channels, depth)?;
    if depth == 0 {
        return Ok(vec![channels]);
    }
    let mut pieces: Vec<usize> = (1..=depth).map(|i| channels >> i).collect();
    pieces.push(channels >> depth);
    Ok(pieces)
}

/// Output pieces in reverse-size alignment `{D'/2^κ, D'/2^κ, D'/2^(κ-1), ..., D'/2}`.
pub fn wconv_partition_out(channels: usize, depth: u32) -> Result<Vec<usize>> {
    let mut pieces = wconv_partition_in(channels, depth)?;
    pieces.reverse();
    Ok(pieces)
}

/// Hyperparameters of a wavelet convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub depth: u32,
    pub kernel_size: usize,
    pub stride: usize,
}

/// One aligned (input piece, output piece) pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PiecePair {
    pub in_start: usize,
    pub in_len: usize,
    pub out_start: usize,
    pub out_len: usize,
}

impl WConvSpec {
    /// Strict constructor: `2^depth` must divide both channel counts.
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        depth: u32,
        kernel_size: usize,
        stride: usize,
    ) -> Result<Self> {
        check_divisible(in_channels, depth)?;
        check_divisible(out_channels, depth)?;
        if kernel_size.is_multiple_of(2) || stride == 0 {
            return Err(Error::Config(format!(
                "kernel size must be odd and stride positive, got K={kernel_size} stride={stride}"
            )));
        }
        Ok(WConvSpec {
            in_channels,
            out_channels,
            depth,
            kernel_size,
            stride,
        })
    }

    pub fn pointwise(in_channels: usize, out_channels: usize, depth: u32) -> Result<Self> {
        Self::new(in_channels, out_channels, depth, 1, 1)
    }

    pub fn pieces(&self) -> Vec<PiecePair> {
        let ins = wconv_partition_in(self.in_channels, self.depth).expect("validated");
        let outs = wconv_partition_out(self.out_channels, self.depth).expect("validated");
        let (mut is, mut os) = (0, 0);
        ins.into_iter()
            .zip(outs)
            .map(|(il, ol)| {
                let p = PiecePair {
                    in_start: is,
                    in_len: il,
                    out_start: os,
                    out_len: ol,
                };
                is += il;
                os += ol;
                p
            })
            .collect()
    }

    /// Exact weight count: `K² Σ in_i · out_i` over the aligned pieces.
    pub fn param_count(&self) -> usize {
        let k2 = self.kernel_size * self.kernel_size;
        self.pieces()
            .iter()
            .map(|p| k2 * p.in_len * p.out_len)
            .sum()
    }
}

/// Wavelet convolution: one dense convolution per aligned piece pair.
#[derive(Clone, Debug, PartialEq)]
pub struct WConv<T> {
    spec: WConvSpec,
    pieces: Vec<Tensor<T>>,
}

impl<T: Scalar> WConv<T> {
    /// Wraps per-piece weights `[K, K, in_i, out_i]`.
    pub fn new(spec: WConvSpec, pieces: Vec<Tensor<T>>) -> Result<Self> {
        let pairs = spec.pieces();
        if pairs.len() != pieces.len() {
            return Err(Error::Config(format!(
                "WConv depth {} needs {} weight pieces, got {}",
                spec.depth,
                pairs.len(),
                pieces.len()
            )));
        }
        for (pair, w) in pairs.iter().zip(&pieces) {
            let want = Shape::new(
                spec.kernel_size,
                spec.kernel_size,
                pair.in_len,
                pair.out_len,
            );
            if w.shape() != want {
                return Err(Error::ShapeMismatch {
                    op: "wconv piece",
                    left: want,
                    right: w.shape(),
                });
            }
        }
        Ok(WConv { spec, pieces })
    }

    pub fn init<R: Rng + ?Sized>(spec: WConvSpec, rng: &mut R) -> Self {
        let k = spec.kernel_size;
        let pieces = spec
            .pieces()
            .iter()
            .map(|p| truncated_normal(Shape::new(k, k, p.in_len, p.out_len), k * k * p.in_len, rng))
            .collect();
        WConv { spec, pieces }
    }

    pub fn spec(&self) -> &WConvSpec {
        &self.spec
    }

    pub fn pieces(&self) -> &[Tensor<T>] {
        &self.pieces
    }

    pub fn pieces_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.pieces
    }

    pub fn record(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let c = ctx.tape.value(x)?.shape().channels();
        if c != self.spec.in_channels {
            return Err(Error::ChannelMismatch {
                op: "wconv",
                expected: self.spec.in_channels,
                got: c,
            });
        }
        if self.spec.depth == 0 {
            let w = ctx.next_param();
            return ctx.tape.conv2d(x, w, self.spec.stride);
        }
        let mut outs = Vec::with_capacity(self.pieces.len());
        for pair in self.spec.pieces() {
            let w = ctx.next_param();
            let xs = ctx.tape.slice_channels(x, pair.in_start, pair.in_len)?;
            outs.push(ctx.tape.conv2d(xs, w, self.spec.stride)?);
        }
        ctx.tape.concat_channels(&outs)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        evaluate_frozen(self, x, false, |ctx, v| self.record(ctx, v))
    }
}

impl<T: Scalar> Module<T> for WConv<T> {
    fn parameters(&self) -> Vec<(ParamKind, &Tensor<T>)> {
        self.pieces.iter().map(|p| (ParamKind::Weight, p)).collect()
    }
    fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.pieces.iter_mut().collect()
    }
}

/// Wavelet convolution of `x` with per-piece `weights`.
pub fn wconv_forward<T: Scalar>(
    x: &Tensor<T>,
    spec: WConvSpec,
    weights: &[Tensor<T>],
) -> Result<Tensor<T>> {
    WConv::new(spec, weights.to_vec())?.forward(x)
}

/// Hyperparameters of the depthwise fast wavelet transform.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DfwtSpec {
    pub channels: usize,
    pub depth: u32,
    #[serde(default)]
    pub sign: SignConvention,
}

impl DfwtSpec {
    pub fn new(channels: usize, depth: u32, sign: SignConvention) -> Result<Self> {
        check_divisible(channels, depth)?;
        Ok(DfwtSpec {
            channels,
            depth,
            sign,
        })
    }

    /// Output block sizes; identical to [`wconv_partition_in`] at the same depth.
    pub fn blocks(&self) -> Vec<usize> {
        wconv_partition_in(self.channels, self.depth).expect("validated")
    }
}

/// Parameter-free channel transform: at each of `depth` steps the current
/// channels split into halves, `high - low` is emitted and `high + low`
/// carries on; the final sums close the output.
pub fn dfwt_forward<T: Scalar>(x: &Tensor<T>, spec: DfwtSpec) -> Result<Tensor<T>> {
    let c = x.shape().channels();
    if c != spec.channels {
        return Err(Error::ChannelMismatch {
            op: "dfwt",
            expected: spec.channels,
            got: c,
        });
    }
    ops::dfwt(x, spec.depth, spec.sign)
}

/// Hyperparameters of one inverted-residual unit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub expansion: usize,
    pub kappa1: u32,
    pub kappa2: u32,
    pub kappa3: u32,
    pub stride: usize,
    #[serde(default)]
    pub sign: SignConvention,
}

/// Record of a depth reduced to satisfy divisibility.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DepthClamp {
    pub stage: String,
    pub requested: u32,
    pub applied: u32,
}

impl UnitSpec {
    pub const DEFAULT_KAPPAS: (u32, u32, u32) = (0, 3, 3);
    pub const KERNEL: usize = 3;

    /// Strict constructor.
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        expansion: usize,
        (kappa1, kappa2, kappa3): (u32, u32, u32),
        stride: usize,
    ) -> Result<Self> {
        let spec = UnitSpec {
            in_channels,
            out_channels,
            expansion,
            kappa1,
            kappa2,
            kappa3,
            stride,
            sign: SignConvention::default(),
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Like [`UnitSpec::new`] but lowers depths to the largest feasible values.
    pub fn clamped(
        in_channels: usize,
        out_channels: usize,
        expansion: usize,
        (kappa1, kappa2, kappa3): (u32, u32, u32),
        stride: usize,
    ) -> Result<(Self, Vec<DepthClamp>)> {
        let hidden = in_channels * expansion;
        let mut clamps = Vec::new();
        let k1 = if expansion == 1 {
            kappa1
        } else {
            feasible_depth(kappa1, &[in_channels, hidden])
        };
        if k1 != kappa1 {
            clamps.push(DepthClamp {
                stage: "expand".into(),
                requested: kappa1,
                applied: k1,
            });
        }
        if kappa2 != kappa3 {
            return Err(Error::Config(format!(
                "unit requires kappa2 == kappa3, got {kappa2} and {kappa3}"
            )));
        }
        let k23 = feasible_depth(kappa3, &[hidden, out_channels]);
        for (stage, req) in [("dfwt", kappa2), ("project", kappa3)] {
            if req != k23 {
                clamps.push(DepthClamp {
                    stage: stage.into(),
                    requested: req,
                    applied: k23,
                });
            }
        }
        Ok((
            Self::new(in_channels, out_channels, expansion, (k1, k23, k23), stride)?,
            clamps,
        ))
    }

    pub fn with_sign(mut self, sign: SignConvention) -> Self {
        self.sign = sign;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.expansion == 0
            || self.stride == 0
            || self.in_channels == 0
            || self.out_channels == 0
        {
            return Err(Error::Config(format!("degenerate unit {self:?}")));
        }
        if self.kappa2 != self.kappa3 {
            return Err(Error::Config(format!(
                "unit requires kappa2 == kappa3, got {} and {}",
                self.kappa2, self.kappa3
            )));
        }
        let hidden = self.hidden();
        if self.has_expansion() {
            check_divisible(self.in_channels, self.kappa1)?;
            check_divisible(hidden, self.kappa1)?;
        }
        check_divisible(hidden, self.kappa2)?;
        check_divisible(hidden, self.kappa3)?;
        check_divisible(self.out_channels, self.kappa3)
    }

    pub fn hidden(&self) -> usize {
        self.in_channels * self.expansion
    }

    /// The expansion convolution is omitted when `t = 1`.
    pub fn has_expansion(&self) -> bool {
        self.expansion != 1
    }

    pub fn residual(&self) -> bool {
        self.stride == 1 && self.in_channels == self.out_channels
    }

    pub fn expand_spec(&self) -> Option<WConvSpec> {
        self.has_expansion().then(|| {
            WConvSpec::pointwise(self.in_channels, self.hidden(), self.kappa1).expect("validated")
        })
    }

    pub fn project_spec(&self) -> WConvSpec {
        WConvSpec::pointwise(self.hidden(), self.out_channels, self.kappa3).expect("validated")
    }

    pub fn dfwt_spec(&self) -> DfwtSpec {
        DfwtSpec::new(self.hidden(), self.kappa2, self.sign).expect("validated")
    }
}

/// Expansion WConv(κ1) → BN → ReLU6 → 3×3 depthwise → BN → ReLU6 → DFWT(κ2)
/// → projection WConv(κ3) → BN, plus the identity shortcut when shapes allow.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveletUnit<T> {
    pub spec: UnitSpec,
    pub expand: Option<(WConv<T>, BatchNorm<T>)>,
    pub depthwise: DepthwiseConv<T>,
    pub bn_depthwise: BatchNorm<T>,
    pub project: WConv<T>,
    pub bn_project: BatchNorm<T>,
}

impl<T: Scalar> WaveletUnit<T> {
    pub fn init<R: Rng + ?Sized>(spec: UnitSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let hidden = spec.hidden();
        let expand = spec
            .expand_spec()
            .map(|s| (WConv::init(s, rng), BatchNorm::new(hidden)));
        Ok(WaveletUnit {
            spec,
            expand,
            depthwise: DepthwiseConv::init(UnitSpec::KERNEL, hidden, spec.stride, rng),
            bn_depthwise: BatchNorm::new(hidden),
            project: WConv::init(spec.project_spec(), rng),
            bn_project: BatchNorm::new(spec.out_channels),
        })
    }

    /// Records the unit; `with_dfwt = false` gives the ablated variant.
    pub fn record(&self, ctx: &mut Ctx<'_, T>, x: Var, with_dfwt: bool) -> Result<Var> {
        let mut h = x;
        if let Some((conv, bn)) = &self.expand {
            h = conv.record(ctx, h)?;
            h = bn.record(ctx, h)?;
            h = ctx.tape.relu6(h)?;
        }
        h = self.depthwise.record(ctx, h)?;
        h = self.bn_depthwise.record(ctx, h)?;
        h = ctx.tape.relu6(h)?;
        if with_dfwt && self.spec.kappa2 > 0 {
            h = ctx.tape.dfwt(h, self.spec.kappa2, self.spec.sign)?;
        }
        h = self.project.record(ctx, h)?;
        h = self.bn_project.record(ctx, h)?;
        if self.spec.residual() {
            h = ctx.tape.add(h, x)?;
        }
        Ok(h)
    }

    /// Inference-mode forward pass.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        evaluate_frozen(self, x, false, |ctx, v| self.record(ctx, v, true))
    }

    /// Inference-mode forward pass with the DFWT stage replaced by identity.
    pub fn forward_ablated(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        evaluate_frozen(self, x, false, |ctx, v| self.record(ctx, v, false))
    }
}

impl<T: Scalar> Module<T> for WaveletUnit<T> {
    fn parameters(&self) -> Vec<(ParamKind, &Tensor<T>)> {
        let mut out = Vec::new();
        if let Some((conv, bn)) = &self.expand {
            out.extend(conv.parameters());
            out.extend(bn.parameters());
        }
        out.extend(self.depthwise.parameters());
        out.extend(self.bn_depthwise.parameters());
        out.extend(self.project.parameters());
        out.extend(self.bn_project.parameters());
        out
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        if let Some((conv, bn)) = &mut self.expand {
            out.extend(conv.parameters_mut());
            out.extend(bn.parameters_mut());
        }
        out.extend(self.depthwise.parameters_mut());
        out.extend(self.bn_depthwise.parameters_mut());
        out.extend(self.project.parameters_mut());
        out.extend(self.bn_project.parameters_mut());
        out
    }

    fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm<T>> {
        let mut out = Vec::new();
        if let Some((_, bn)) = &mut self.expand {
            out.push(bn);
        }
        out.push(&mut self.bn_depthwise);
        out.push(&mut self.bn_project);
        out
    }
}

pub fn waveletnet_unit_forward<T: Scalar>(
    x: &Tensor<T>,
    unit: &WaveletUnit<T>,
) -> Result<Tensor<T>> {
    unit.forward(x)
}

pub fn ablation_unit_forward<T: Scalar>(x: &Tensor<T>, unit: &WaveletUnit<T>) -> Result<Tensor<T>> {
    unit.forward_ablated(x)
}
