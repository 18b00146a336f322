//! Exact parameter and multiply-accumulate accounting.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{DfwtSpec, WConvSpec};
use crate::models::{build, Architecture, ClampRecord, HeadKind, LayerDesc, ModelConfig};
use crate::ops::same_padding;

/// Version tag embedded in serialized reports.
pub const REPORT_SCHEMA: &str = "waveletnet.complexity/v1";

/// A single countable layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LayerSpec {
    Conv {
        kernel: usize,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
    },
    GroupConv {
        in_channels: usize,
        out_channels: usize,
        groups: usize,
    },
    Depthwise {
        kernel: usize,
        channels: usize,
        stride: usize,
    },
    WConv(WConvSpec),
    Dfwt(DfwtSpec),
    BatchNorm {
        channels: usize,
    },
    AvgPool {
        channels: usize,
    },
    Classifier {
        in_channels: usize,
        classes: usize,
    },
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv { kernel: 1, .. } => "conv1x1",
            LayerSpec::Conv { .. } => "conv3x3",
            LayerSpec::GroupConv { .. } => "gconv1x1",
            LayerSpec::Depthwise { .. } => "dwconv3x3",
            LayerSpec::WConv(s) if s.depth == 0 => "conv1x1",
            LayerSpec::WConv(_) => "wconv1x1",
            LayerSpec::Dfwt(_) => "dfwt",
            LayerSpec::BatchNorm { .. } => "batchnorm",
            LayerSpec::AvgPool { .. } => "avgpool",
            LayerSpec::Classifier { .. } => "classifier",
        }
    }

    fn channels(&self) -> (usize, usize) {
        match *self {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                ..
            }
            | LayerSpec::GroupConv {
                in_channels,
                out_channels,
                ..
            } => (in_channels, out_channels),
            LayerSpec::Depthwise { channels, .. }
            | LayerSpec::BatchNorm { channels }
            | LayerSpec::AvgPool { channels } => (channels, channels),
            LayerSpec::WConv(s) => (s.in_channels, s.out_channels),
            LayerSpec::Dfwt(s) => (s.channels, s.channels),
            LayerSpec::Classifier {
                in_channels,
                classes,
            } => (in_channels, classes),
        }
    }

    fn stride(&self) -> usize {
        match *self {
            LayerSpec::Conv { stride, .. } | LayerSpec::Depthwise { stride, .. } => stride,
            LayerSpec::WConv(s) => s.stride,
            _ => 1,
        }
    }

    fn kernel(&self) -> usize {
        match *self {
            LayerSpec::Conv { kernel, .. } | LayerSpec::Depthwise { kernel, .. } => kernel,
            LayerSpec::WConv(s) => s.kernel_size,
            _ => 1,
        }
    }

    /// Output spatial extent for an `n × n` input.
    pub fn out_extent(&self, n: usize) -> usize {
        match self {
            LayerSpec::AvgPool { .. } => 1,
            _ => same_padding(n, self.kernel(), self.stride()).0,
        }
    }
}

/// Exact trainable scalar count.
pub fn count_params(layer: &LayerSpec) -> u64 {
    let p = match *layer {
        LayerSpec::Conv {
            kernel,
            in_channels,
            out_channels,
            ..
        } => kernel * kernel * in_channels * out_channels,
        LayerSpec::GroupConv {
            in_channels,
            out_channels,
            groups,
        } => in_channels * out_channels / groups,
        LayerSpec::Depthwise {
            kernel, channels, ..
        } => kernel * kernel * channels,
        LayerSpec::WConv(s) => s.param_count(),
        LayerSpec::Dfwt(_) | LayerSpec::AvgPool { .. } => 0,
        LayerSpec::BatchNorm { channels } => 2 * channels,
        LayerSpec::Classifier {
            in_channels,
            classes,
        } => in_channels * classes,
    };
    p as u64
}

/// Multiply-accumulates for an `n × n` input; BN, pooling and DFWT count zero.
pub fn count_macs(layer: &LayerSpec, n: usize) -> u64 {
    match layer {
        LayerSpec::BatchNorm { .. } | LayerSpec::AvgPool { .. } | LayerSpec::Dfwt(_) => 0,
        _ => {
            let out = layer.out_extent(n) as u64;
            count_params(layer) * out * out
        }
    }
}

/// Rows of the reference complexity table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClosedFormKind {
    Dwconv3x3,
    Conv1x1,
    Gconv1x1,
    Wconv1x1,
    Wconv1x1Max,
}

impl FromStr for ClosedFormKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "dwconv3x3" => ClosedFormKind::Dwconv3x3,
            "conv1x1" => ClosedFormKind::Conv1x1,
            "gconv1x1" => ClosedFormKind::Gconv1x1,
            "wconv1x1" => ClosedFormKind::Wconv1x1,
            "wconv1x1_max" => ClosedFormKind::Wconv1x1Max,
            other => return Err(Error::UnknownKind(other.into())),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClosedForm {
    pub macs: f64,
    pub params: f64,
}

/// Reference closed-form counts. `extra` is κ for WConv rows and g for
/// grouped convolutions; `n` is the output spatial extent.
pub fn closed_form(
    kind: ClosedFormKind,
    n: usize,
    d: usize,
    d_out: usize,
    extra: u32,
) -> Result<ClosedForm> {
    let (n2, d, dp) = ((n * n) as f64, d as f64, d_out as f64);
    let params = match kind {
        ClosedFormKind::Dwconv3x3 => 9.0 * d,
        ClosedFormKind::Conv1x1 => d * dp,
        ClosedFormKind::Gconv1x1 => {
            if extra == 0 {
                return Err(Error::Config("group count must be positive".into()));
            }
            d * dp / extra as f64
        }
        ClosedFormKind::Wconv1x1 => d * dp * (extra as f64 + 1.0) / 2f64.powi(extra as i32),
        ClosedFormKind::Wconv1x1Max => d * dp.log2(),
    };
    let macs = match kind {
        ClosedFormKind::Dwconv3x3 => 9.0 * n2 * dp,
        _ => n2 * params,
    };
    Ok(ClosedForm { macs, params })
}

/// Exact WConv parameter count `DD'(κ+3)/2^{κ+2}` for κ ≥ 1 and `DD'` at κ = 0.
pub fn wconv_exact_formula(d: usize, d_out: usize, kappa: u32) -> u64 {
    let dd = (d * d_out) as u64;
    if kappa == 0 {
        dd
    } else {
        (dd * (kappa as u64 + 3)) >> (kappa + 2)
    }
}

fn closed_form_of(layer: &LayerSpec, n_out: usize) -> Option<(ClosedFormKind, ClosedForm)> {
    let (d, dp) = layer.channels();
    let (kind, extra) = match *layer {
        LayerSpec::Conv { kernel: 1, .. } | LayerSpec::Classifier { .. } => {
            (ClosedFormKind::Conv1x1, 0)
        }
        LayerSpec::WConv(s) if s.kernel_size == 1 && s.depth == 0 => (ClosedFormKind::Conv1x1, 0),
        LayerSpec::WConv(s) if s.kernel_size == 1 => (ClosedFormKind::Wconv1x1, s.depth),
        LayerSpec::GroupConv { groups, .. } => (ClosedFormKind::Gconv1x1, groups as u32),
        LayerSpec::Depthwise { kernel: 3, .. } => (ClosedFormKind::Dwconv3x3, 0),
        _ => return None,
    };
    closed_form(kind, n_out, d, dp, extra)
        .ok()
        .map(|c| (kind, c))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub name: String,
    pub kind: String,
    /// `[height, width, channels]`.
    pub in_shape: [usize; 3],
    pub out_shape: [usize; 3],
    pub params: u64,
    pub macs: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub closed_form: Option<ClosedForm>,
}

impl LayerRecord {
    pub fn of(name: impl Into<String>, layer: &LayerSpec, n: usize) -> Self {
        let (cin, cout) = layer.channels();
        let out = layer.out_extent(n);
        let depth = match layer {
            LayerSpec::WConv(s) => Some(s.depth),
            LayerSpec::Dfwt(s) => Some(s.depth),
            _ => None,
        };
        LayerRecord {
            name: name.into(),
            kind: layer.kind().into(),
            in_shape: [n, n, cin],
            out_shape: [out, out, cout],
            params: count_params(layer),
            macs: count_macs(layer, n),
            depth,
            closed_form: closed_form_of(layer, out).map(|(_, c)| c),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Discrepancy {
    pub layer: String,
    pub kind: String,
    pub exact_params: u64,
    pub closed_form_params: f64,
    pub exact_macs: u64,
    pub closed_form_macs: f64,
    /// Exact over closed-form parameter count.
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadReading {
    pub head: HeadKind,
    pub total_params: u64,
    pub total_macs: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub schema: String,
    pub model: String,
    pub width_mult: f64,
    pub kappas: [u32; 3],
    pub head: HeadKind,
    pub input_resolution: usize,
    pub total_params: u64,
    pub total_macs: u64,
    pub conv_layers: usize,
    pub layers: Vec<LayerRecord>,
    pub discrepancies: Vec<Discrepancy>,
    pub clamped: Vec<ClampRecord>,
    /// Totals under every head reading, the configured one first.
    pub head_readings: Vec<HeadReading>,
}

impl ComplexityReport {
    pub fn layer_param_sum(&self) -> u64 {
        self.layers.iter().map(|l| l.params).sum()
    }

    pub fn layer_mac_sum(&self) -> u64 {
        self.layers.iter().map(|l| l.macs).sum()
    }
}

/// Flattened countable layers with their input extents.
pub fn layer_specs(arch: &Architecture) -> Vec<(String, LayerSpec, usize)> {
    let mut out = Vec::new();
    for l in &arch.layers {
        match l {
            LayerDesc::Stem {
                name,
                in_channels,
                out_channels,
                kernel,
                stride,
                in_res,
                out_res,
            } => {
                out.push((
                    format!("{name}.conv"),
                    LayerSpec::Conv {
                        kernel: *kernel,
                        in_channels: *in_channels,
                        out_channels: *out_channels,
                        stride: *stride,
                    },
                    *in_res,
                ));
                out.push((
                    format!("{name}.bn"),
                    LayerSpec::BatchNorm {
                        channels: *out_channels,
                    },
                    *out_res,
                ));
            }
            LayerDesc::Unit {
                name,
                spec,
                in_res,
                out_res,
            } => {
                let hidden = spec.hidden();
                if let Some(e) = spec.expand_spec() {
                    out.push((format!("{name}.expand"), LayerSpec::WConv(e), *in_res));
                    out.push((
                        format!("{name}.expand_bn"),
                        LayerSpec::BatchNorm { channels: hidden },
                        *in_res,
                    ));
                }
                out.push((
                    format!("{name}.depthwise"),
                    LayerSpec::Depthwise {
                        kernel: 3,
                        channels: hidden,
                        stride: spec.stride,
                    },
                    *in_res,
                ));
                out.push((
                    format!("{name}.depthwise_bn"),
                    LayerSpec::BatchNorm { channels: hidden },
                    *out_res,
                ));
                if spec.kappa2 > 0 && !arch.config.ablate_dfwt {
                    out.push((
                        format!("{name}.dfwt"),
                        LayerSpec::Dfwt(spec.dfwt_spec()),
                        *out_res,
                    ));
                }
                out.push((
                    format!("{name}.project"),
                    LayerSpec::WConv(spec.project_spec()),
                    *out_res,
                ));
                out.push((
                    format!("{name}.project_bn"),
                    LayerSpec::BatchNorm {
                        channels: spec.out_channels,
                    },
                    *out_res,
                ));
            }
            LayerDesc::Head { name, spec, res } => {
                out.push((format!("{name}.conv"), LayerSpec::WConv(*spec), *res));
                out.push((
                    format!("{name}.bn"),
                    LayerSpec::BatchNorm {
                        channels: spec.out_channels,
                    },
                    *res,
                ));
            }
            LayerDesc::Pool {
                name,
                channels,
                in_res,
            } => {
                out.push((
                    name.clone(),
                    LayerSpec::AvgPool {
                        channels: *channels,
                    },
                    *in_res,
                ));
            }
            LayerDesc::Classifier {
                name,
                in_channels,
                classes,
            } => {
                out.push((
                    name.clone(),
                    LayerSpec::Classifier {
                        in_channels: *in_channels,
                        classes: *classes,
                    },
                    1,
                ));
            }
        }
    }
    out
}

/// Exact/closed-form disagreements, one per differing layer.
pub fn reconcile(report: &ComplexityReport) -> Vec<Discrepancy> {
    report
        .layers
        .iter()
        .filter_map(|l| {
            let c = l.closed_form?;
            let differs =
                (l.params as f64 - c.params).abs() > 1e-9 || (l.macs as f64 - c.macs).abs() > 1e-9;
            differs.then(|| Discrepancy {
                layer: l.name.clone(),
                kind: l.kind.clone(),
                exact_params: l.params,
                closed_form_params: c.params,
                exact_macs: l.macs,
                closed_form_macs: c.macs,
                ratio: l.params as f64 / c.params,
            })
        })
        .collect()
}

/// Report for a single architecture; `head_readings` holds only its own totals.
pub fn report(arch: &Architecture) -> ComplexityReport {
    let layers: Vec<LayerRecord> = layer_specs(arch)
        .into_iter()
        .map(|(name, spec, n)| LayerRecord::of(name, &spec, n))
        .collect();
    let total_params = layers.iter().map(|l| l.params).sum();
    let total_macs = layers.iter().map(|l| l.macs).sum();
    let (k1, k2, k3) = arch.config.kappas();
    let mut r = ComplexityReport {
        schema: REPORT_SCHEMA.into(),
        model: arch.config.name.clone(),
        width_mult: arch.config.width_mult,
        kappas: [k1, k2, k3],
        head: arch.config.head,
        input_resolution: arch.config.input_resolution,
        total_params,
        total_macs,
        conv_layers: arch.conv_layer_count(),
        layers,
        discrepancies: Vec::new(),
        clamped: arch.clamps.clone(),
        head_readings: vec![HeadReading {
            head: arch.config.head,
            total_params,
            total_macs,
        }],
    };
    r.discrepancies = reconcile(&r);
    r
}

/// Report for a configuration, with totals under both head readings.
pub fn report_config(config: &ModelConfig) -> Result<ComplexityReport> {
    let mut r = report(&build(config)?);
    for other in [HeadKind::Dense, HeadKind::Wconv] {
        if other == config.head {
            continue;
        }
        let mut c = config.clone();
        c.head = other;
        let alt = report(&build(&c)?);
        r.head_readings.push(HeadReading {
            head: other,
            total_params: alt.total_params,
            total_macs: alt.total_macs,
        });
    }
    Ok(r)
}

pub fn model_params(arch: &Architecture) -> u64 {
    layer_specs(arch)
        .iter()
        .map(|(_, s, _)| count_params(s))
        .sum()
}

pub fn model_macs(arch: &Architecture) -> u64 {
    layer_specs(arch)
        .iter()
        .map(|(_, s, n)| count_macs(s, *n))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_and_depthwise() {
        let conv = LayerSpec::Conv {
            kernel: 1,
            in_channels: 8,
            out_channels: 8,
            stride: 1,
        };
        assert_eq!(count_params(&conv), 64);
        let dw = LayerSpec::Depthwise {
            kernel: 3,
            channels: 32,
            stride: 1,
        };
        assert_eq!(count_params(&dw), 288);
        let wide = LayerSpec::Conv {
            kernel: 1,
            in_channels: 8,
            out_channels: 16,
            stride: 1,
        };
        assert_eq!(count_macs(&wide, 4), 2048);
        let g = LayerSpec::GroupConv {
            in_channels: 16,
            out_channels: 16,
            groups: 4,
        };
        assert_eq!(count_macs(&g, 4), 1024);
    }

    #[test]
    fn wconv_exact_versus_closed_form() {
        let w = LayerSpec::WConv(WConvSpec::pointwise(8, 8, 3).unwrap());
        assert_eq!(count_params(&w), 12);
        assert_eq!(count_macs(&w, 1), 12);
        let reference = closed_form(ClosedFormKind::Wconv1x1, 1, 8, 8, 3).unwrap();
        assert_eq!(reference.params, 32.0);
        assert_eq!(wconv_exact_formula(8, 8, 3), 12);
    }

    #[test]
    fn closed_forms() {
        assert_eq!(
            closed_form(ClosedFormKind::Conv1x1, 1, 8, 8, 0)
                .unwrap()
                .params,
            64.0
        );
        assert_eq!(
            closed_form(ClosedFormKind::Wconv1x1Max, 1, 256, 256, 0)
                .unwrap()
                .params,
            2048.0
        );
        assert!(matches!(
            "shuffle".parse::<ClosedFormKind>(),
            Err(Error::UnknownKind(_))
        ));
    }

    #[test]
    fn reconcile_flags_only_wconv() {
        let layers = [
            (
                "dense",
                LayerSpec::Conv {
                    kernel: 1,
                    in_channels: 8,
                    out_channels: 8,
                    stride: 1,
                },
            ),
            (
                "dw",
                LayerSpec::Depthwise {
                    kernel: 3,
                    channels: 8,
                    stride: 1,
                },
            ),
            (
                "w",
                LayerSpec::WConv(WConvSpec::pointwise(8, 8, 3).unwrap()),
            ),
        ];
        let records = layers
            .iter()
            .map(|(n, s)| LayerRecord::of(*n, s, 4))
            .collect();
        let r = ComplexityReport {
            schema: REPORT_SCHEMA.into(),
            model: "t".into(),
            width_mult: 1.0,
            kappas: [0, 3, 3],
            head: HeadKind::Dense,
            input_resolution: 4,
            total_params: 0,
            total_macs: 0,
            conv_layers: 3,
            layers: records,
            discrepancies: vec![],
            clamped: vec![],
            head_readings: vec![],
        };
        let d = reconcile(&r);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].layer, "w");
        assert_eq!(d[0].exact_params, 12);
        assert!((d[0].ratio - 0.375).abs() < 1e-12);
    }
}
