//! Self-checking property suites behind the `verify` command.

use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::autograd::{Tape, Var};
use crate::connectivity::{
    adjacency_of_dfwt, adjacency_of_wconv, compose, haar_matrix, minimality_exhaustive,
    minimality_lower_bound, AdjacencyMatrix, HaarMatrix,
};
use crate::error::{Error, Result};
use crate::layers::{dfwt_forward, DfwtSpec, UnitSpec, WConv, WConvSpec, WaveletUnit};
use crate::nn::{copy_parameters, Ctx, Module};
use crate::ops::{self, SignConvention};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

pub const VERIFY_SCHEMA: &str = "waveletnet.verify/v1";

/// Adjacency of the 8-channel depth-3 wavelet convolution, as tabulated.
pub const REFERENCE_ADJACENCY_8: [[u8; 8]; 8] = [
    [1, 1, 1, 1, 0, 0, 0, 0],
    [0, 0, 0, 0, 1, 1, 0, 0],
    [0, 0, 0, 0, 0, 0, 1, 0],
    [0, 0, 0, 0, 0, 0, 1, 0],
    [0, 0, 0, 0, 0, 0, 0, 1],
    [0, 0, 0, 0, 0, 0, 0, 1],
    [0, 0, 0, 0, 0, 0, 0, 1],
    [0, 0, 0, 0, 0, 0, 0, 1],
];

/// The tabulated 8×8 modified Haar matrix.
pub const REFERENCE_HAAR_8: [[i8; 8]; 8] = [
    [1, 0, 0, 0, -1, 0, 0, 0],
    [0, 1, 0, 0, 0, -1, 0, 0],
    [0, 0, 1, 0, 0, 0, -1, 0],
    [0, 0, 0, 1, 0, 0, 0, -1],
    [1, 0, -1, 0, 1, 0, -1, 0],
    [0, 1, 0, -1, 0, 1, 0, -1],
    [1, -1, 1, -1, 1, -1, 1, -1],
    [1, 1, 1, 1, 1, 1, 1, 1],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Connectivity,
    Oracle,
    Gradients,
    All,
}

impl FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "connectivity" => Ok(Suite::Connectivity),
            "oracle" => Ok(Suite::Oracle),
            "gradients" => Ok(Suite::Gradients),
            "all" => Ok(Suite::All),
            other => Err(Error::Config(format!("unknown suite `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct VerifyOptions {
    /// Perturbs entry `(row, col)` of every generated 8×8 Haar matrix.
    pub corrupt_haar: Option<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropertyResult {
    pub suite: String,
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failing_case: Option<Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub schema: String,
    pub suite: Suite,
    pub passed: bool,
    pub seconds: f64,
    pub properties: Vec<PropertyResult>,
}

type Check = std::result::Result<String, (String, Value)>;

struct Runner {
    suite: &'static str,
    out: Vec<PropertyResult>,
}

impl Runner {
    fn check(&mut self, name: &str, f: impl FnOnce() -> Result<Check>) {
        let t = Instant::now();
        let (passed, detail, failing_case) = match f() {
            Ok(Ok(detail)) => (true, detail, None),
            Ok(Err((detail, case))) => (false, detail, Some(case)),
            Err(e) => (false, format!("error: {e}"), None),
        };
        self.out.push(PropertyResult {
            suite: self.suite.into(),
            name: name.into(),
            passed,
            detail,
            seconds: t.elapsed().as_secs_f64(),
            failing_case,
        });
    }
}

pub fn run_suite(suite: Suite, opts: &VerifyOptions) -> VerifyReport {
    let t = Instant::now();
    let mut properties = Vec::new();
    if matches!(suite, Suite::Connectivity | Suite::All) {
        properties.extend(connectivity_suite());
    }
    if matches!(suite, Suite::Oracle | Suite::All) {
        properties.extend(oracle_suite(opts));
    }
    if matches!(suite, Suite::Gradients | Suite::All) {
        properties.extend(gradient_suite());
    }
    VerifyReport {
        schema: VERIFY_SCHEMA.into(),
        suite,
        passed: properties.iter().all(|p| p.passed),
        seconds: t.elapsed().as_secs_f64(),
        properties,
    }
}

/// Wavelet-convolution adjacency for `D = 2^k` at full depth, generated
/// directly from its set description: row 0 reads the first half, rows
/// `[D/2, D)` read the last input, and level `p` rows `[2^(p-1), 2^p)` read
/// inputs `[D − D/2^p, D − D/2^(p+1))`.
pub fn set_form_adjacency(k: u32) -> AdjacencyMatrix {
    let d = 1usize << k;
    let mut m = AdjacencyMatrix::empty(d, d);
    for j in 0..d / 2 {
        m.set(0, j, true);
    }
    for i in d / 2..d {
        m.set(i, d - 1, true);
    }
    for p in 1..k {
        for i in 1usize << (p - 1)..1usize << p {
            for j in d - (d >> p)..d - (d >> (p + 1)) {
                m.set(i, j, true);
            }
        }
    }
    m
}

fn connectivity_suite() -> Vec<PropertyResult> {
    let mut r = Runner {
        suite: "connectivity",
        out: Vec::new(),
    };
    r.check("wconv_dfwt_composition_full", || {
        let mut cases = 0;
        for k in 2..=8u32 {
            let d = 1usize << k;
            for kappa in 1..=k {
                let full = compose(
                    &adjacency_of_wconv(d, d, kappa)?,
                    &adjacency_of_dfwt(d, kappa)?,
                )?
                .is_full();
                if !full {
                    return Ok(Err((
                        "composition is not full".into(),
                        json!({"d": d, "kappa": kappa}),
                    )));
                }
                cases += 1;
            }
        }
        Ok(Ok(format!("{cases} (D, κ) pairs full")))
    });
    r.check("wconv_adjacency_nnz", || {
        for k in 2..=8u32 {
            let d = 1usize << k;
            let got = adjacency_of_wconv(d, d, k)?.nnz();
            let want = d + d / 4 * (k as usize - 1);
            if got != want {
                return Ok(Err((
                    "nnz differs".into(),
                    json!({"d": d, "got": got, "want": want}),
                )));
            }
        }
        Ok(Ok("nnz = D + (D/4)(log2 D − 1) for D = 4..256".into()))
    });
    r.check("wconv_adjacency_set_form", || {
        for k in 2..=8u32 {
            let d = 1usize << k;
            if adjacency_of_wconv(d, d, k)? != set_form_adjacency(k) {
                return Ok(Err((
                    "structural and set-form adjacency differ".into(),
                    json!({"d": d}),
                )));
            }
        }
        Ok(Ok("identical for D = 4..256".into()))
    });
    r.check("wconv_adjacency_reference_d8", || {
        let got = adjacency_of_wconv(8, 8, 3)?;
        let want = AdjacencyMatrix::from_rows(&REFERENCE_ADJACENCY_8);
        Ok(if got == want {
            Ok("entry-for-entry equal".into())
        } else {
            Err((
                "differs from the reference".into(),
                json!({"got": got.to_rows()}),
            ))
        })
    });
    r.check("exhaustive_minimality_d4", || {
        let ex = minimality_exhaustive(4)?;
        let dfwt = adjacency_of_dfwt(4, 2)?.nnz();
        let bound = minimality_lower_bound(&adjacency_of_wconv(4, 4, 2)?);
        let ok = ex.minimum == 12 && dfwt == 12 && bound == 12 && ex.full_by_weight[11] == 0;
        let detail = format!(
            "minimum {}, transform {dfwt}, bound {bound}, minimizers {}",
            ex.minimum, ex.minimizers
        );
        Ok(if ok {
            Ok(detail)
        } else {
            Err((detail, json!(ex)))
        })
    });
    r.check("lower_bound_d8", || {
        let bound = minimality_lower_bound(&adjacency_of_wconv(8, 8, 3)?);
        let dfwt = adjacency_of_dfwt(8, 3)?.nnz();
        Ok(if bound == 32 && dfwt == 32 {
            Ok("bound 32 = nnz |H_8|".into())
        } else {
            Err((
                "bound mismatch".into(),
                json!({"bound": bound, "dfwt": dfwt}),
            ))
        })
    });
    r.check("haar_rows_orthogonal", || {
        for k in 0..=8u32 {
            let d = 1usize << k;
            for kappa in 0..=k {
                let g = haar_matrix(d, kappa, SignConvention::Algorithm2)?.gram();
                let bad = (0..d)
                    .flat_map(|i| (0..d).map(move |j| (i, j)))
                    .find(|&(i, j)| i != j && g[i][j] != 0);
                if let Some((i, j)) = bad {
                    return Ok(Err((
                        "rows not orthogonal".into(),
                        json!({"d": d, "kappa": kappa, "rows": [i, j]}),
                    )));
                }
            }
        }
        Ok(Ok("all D ≤ 256, κ ≤ log2 D".into()))
    });
    r.check("haar_support_sign_invariant", || {
        for k in 1..=6u32 {
            let d = 1usize << k;
            for kappa in 0..=k {
                let a = haar_matrix(d, kappa, SignConvention::Algorithm2)?.support();
                let b = haar_matrix(d, kappa, SignConvention::Matrix)?.support();
                if a != b {
                    return Ok(Err((
                        "support depends on sign".into(),
                        json!({"d": d, "kappa": kappa}),
                    )));
                }
            }
        }
        Ok(Ok("support identical under both conventions".into()))
    });
    r.check("ablation_projection_not_full", || {
        for (hidden, out) in [(8, 8), (48, 8), (96, 16), (96, 24)] {
            let a = compose(
                &adjacency_of_wconv(hidden, out, 3)?,
                &AdjacencyMatrix::identity(hidden),
            )?;
            if a.is_full() {
                return Ok(Err((
                    "projection alone is full".into(),
                    json!({"hidden": hidden, "out": out}),
                )));
            }
        }
        Ok(Ok("never full without the transform".into()))
    });
    r.out
}

fn normal_tensor<T: Scalar>(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        T::of(z)
    })
}

fn maybe_corrupt(mut h: HaarMatrix, opts: &VerifyOptions) -> HaarMatrix {
    if let Some((i, j)) = opts.corrupt_haar {
        if h.size() == 8 && i < 8 && j < 8 {
            let v = h.get(i, j);
            h.set(i, j, if v == 0 { 1 } else { 0 });
        }
    }
    h
}

/// Direct nested-loop convolution in `f64` with its own padding arithmetic.
pub fn naive_conv2d(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    stride: usize,
    depthwise: bool,
) -> Tensor<f64> {
    let [b, h, wd, c] = x.shape().0;
    let [k, _, _, wo] = w.shape().0;
    let out_c = if depthwise { c } else { wo };
    let oh = h.div_ceil(stride);
    let ow = wd.div_ceil(stride);
    let pad_h = ((oh - 1) * stride + k).saturating_sub(h) / 2;
    let pad_w = ((ow - 1) * stride + k).saturating_sub(wd) / 2;
    Tensor::from_fn(Shape::new(b, oh, ow, out_c), |[n, y, xx, o]| {
        let mut acc = 0.0;
        for ky in 0..k {
            for kx in 0..k {
                let iy = (y * stride + ky) as isize - pad_h as isize;
                let ix = (xx * stride + kx) as isize - pad_w as isize;
                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                    continue;
                }
                let (iy, ix) = (iy as usize, ix as usize);
                if depthwise {
                    acc += x.at(n, iy, ix, o) * w.at(ky, kx, 0, o);
                } else {
                    for i in 0..c {
                        acc += x.at(n, iy, ix, i) * w.at(ky, kx, i, o);
                    }
                }
            }
        }
        acc
    })
}

fn max_diff_f32_f64(a: &Tensor<f32>, b: &Tensor<f64>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&p, &q)| (p as f64 - q).abs())
        .fold(0.0, f64::max)
}

/// The dense weight matrix (`[1,1,D,D']`) a wavelet convolution is equal to.
pub fn scatter_dense<T: Scalar>(conv: &WConv<T>) -> Tensor<T> {
    let s = conv.spec();
    let mut dense = Tensor::zeros(Shape::new(1, 1, s.in_channels, s.out_channels));
    for (pair, piece) in s.pieces().iter().zip(conv.pieces()) {
        for i in 0..pair.in_len {
            for o in 0..pair.out_len {
                *dense.at_mut(0, 0, pair.in_start + i, pair.out_start + o) = piece.at(0, 0, i, o);
            }
        }
    }
    dense
}

fn random_running_stats<T: Scalar>(unit: &mut WaveletUnit<T>, rng: &mut ChaCha8Rng) {
    for bn in unit.batch_norms_mut() {
        for v in bn.running_mean.iter_mut() {
            *v = T::of(rng.random_range(-0.5..0.5));
        }
        for v in bn.running_var.iter_mut() {
            *v = T::of(rng.random_range(0.5..2.0));
        }
        for v in bn.gamma.data_mut() {
            *v = T::of(rng.random_range(0.5..1.5));
        }
        for v in bn.beta.data_mut() {
            *v = T::of(rng.random_range(-0.5..0.5));
        }
    }
}

/// Inverted-residual block assembled from the raw kernels, with the
/// unit's weights: dense expand, depthwise, dense project, residual add.
pub fn reference_inverted_residual<T: Scalar>(
    unit: &WaveletUnit<T>,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    let bn = |h: &Tensor<T>, b: &crate::nn::BatchNorm<T>| -> Result<Tensor<T>> {
        Ok(ops::batch_norm_eval(h, &b.gamma, &b.beta, &b.running_mean, &b.running_var)?.0)
    };
    let mut h = x.clone();
    if let Some((conv, b)) = &unit.expand {
        h = ops::relu6(&bn(&ops::conv2d_forward(&h, &scatter_dense(conv), 1)?, b)?);
    }
    h = ops::depthwise_conv2d(&h, &unit.depthwise.weight, unit.spec.stride)?;
    h = ops::relu6(&bn(&h, &unit.bn_depthwise)?);
    h = bn(
        &ops::conv2d_forward(&h, &scatter_dense(&unit.project), 1)?,
        &unit.bn_project,
    )?;
    if unit.spec.residual() {
        for (a, b) in h.data_mut().iter_mut().zip(x.data()) {
            *a += *b;
        }
    }
    Ok(h)
}

/// Parameter count of a depth-zero unit from the dense closed forms.
pub fn dense_unit_param_count(spec: &UnitSpec) -> usize {
    let (d, hid, dp) = (spec.in_channels, spec.hidden(), spec.out_channels);
    let expand = if spec.has_expansion() {
        d * hid + 2 * hid
    } else {
        0
    };
    expand + 9 * hid + 2 * hid + hid * dp + 2 * dp
}

fn oracle_suite(opts: &VerifyOptions) -> Vec<PropertyResult> {
    let mut r = Runner {
        suite: "oracle",
        out: Vec::new(),
    };
    r.check("haar_reference_d8", || {
        let h = maybe_corrupt(haar_matrix(8, 3, SignConvention::Matrix)?, opts);
        let want: Vec<Vec<i8>> = REFERENCE_HAAR_8.iter().map(|r| r.to_vec()).collect();
        Ok(if h.rows() == want {
            Ok("integer-equal to the tabulated matrix".into())
        } else {
            Err((
                "differs from the tabulated matrix".into(),
                json!({"got": h.rows()}),
            ))
        })
    });
    r.check("dfwt_hand_trace", || {
        let x = Tensor::<f32>::from_vec(Shape::new(1, 1, 1, 4), vec![1.0, 2.0, 3.0, 4.0])?;
        let y = dfwt_forward(&x, DfwtSpec::new(4, 2, SignConvention::Algorithm2)?)?;
        Ok(if y.data() == [2.0, 2.0, 2.0, 10.0] {
            Ok("[1,2,3,4] → [2,2,2,10]".into())
        } else {
            Err(("unexpected transform".into(), json!({"got": y.data()})))
        })
    });
    r.check("dfwt_fast_vs_dense", || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut worst = 0.0f64;
        for d in [4usize, 8, 16, 64] {
            for kappa in 0..=d.trailing_zeros() {
                for sign in [SignConvention::Algorithm2, SignConvention::Matrix] {
                    let h = maybe_corrupt(haar_matrix(d, kappa, sign)?, opts);
                    let x: Tensor<f32> = uniform_tensor(Shape::new(100, 1, 1, d), &mut rng);
                    let y = dfwt_forward(&x, DfwtSpec::new(d, kappa, sign)?)?;
                    for (xp, yp) in x.data().chunks_exact(d).zip(y.data().chunks_exact(d)) {
                        let xd: Vec<f64> = xp.iter().map(|&v| v as f64).collect();
                        let dense = h.apply(&xd);
                        let diff = dense
                            .iter()
                            .zip(yp)
                            .map(|(a, &b)| (a - b as f64).abs())
                            .fold(0.0, f64::max);
                        worst = worst.max(diff);
                        if diff > 1e-6 {
                            return Ok(Err((
                                format!("max abs diff {diff:.3e} > 1e-6"),
                                json!({"d": d, "kappa": kappa, "sign": sign, "input": xp}),
                            )));
                        }
                    }
                }
            }
        }
        Ok(Ok(format!(
            "max abs diff {worst:.3e} over D ∈ {{4,8,16,64}}, 100 inputs each"
        )))
    });
    r.check("dfwt_inverse", || {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut worst = 0.0f64;
        for d in [4usize, 8, 16, 64] {
            let kappa = d.trailing_zeros();
            let h = haar_matrix(d, kappa, SignConvention::Algorithm2)?;
            let x: Tensor<f32> = uniform_tensor(Shape::new(20, 1, 1, d), &mut rng);
            let y = dfwt_forward(&x, DfwtSpec::new(d, kappa, SignConvention::Algorithm2)?)?;
            for (xp, yp) in x.data().chunks_exact(d).zip(y.data().chunks_exact(d)) {
                let yd: Vec<f64> = yp.iter().map(|&v| v as f64).collect();
                let back = h.invert(&yd);
                let diff = back
                    .iter()
                    .zip(xp)
                    .map(|(a, &b)| (a - b as f64).abs())
                    .fold(0.0, f64::max);
                worst = worst.max(diff);
            }
        }
        Ok(if worst <= 1e-5 {
            Ok(format!("max abs diff {worst:.3e}"))
        } else {
            Err((
                format!("max abs diff {worst:.3e} > 1e-5"),
                json!({"worst": worst}),
            ))
        })
    });
    r.check("conv2d_vs_naive", || {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (mut worst64, mut worst32) = (0.0f64, 0.0f64);
        for n in 1..=8usize {
            for (k, stride) in [(1, 1), (3, 1), (3, 2), (1, 2)] {
                let (cin, cout) = (rng.random_range(1..=16), rng.random_range(1..=16));
                let x: Tensor<f64> = normal_tensor(Shape::new(2, n, n, cin), &mut rng);
                let w: Tensor<f64> = normal_tensor(Shape::new(k, k, cin, cout), &mut rng);
                let slow = naive_conv2d(&x, &w, stride, false);
                let fast = ops::conv2d_forward(&x, &w, stride)?;
                if fast.shape() != slow.shape() {
                    return Ok(Err((
                        "shape mismatch".into(),
                        json!({"n": n, "k": k, "stride": stride}),
                    )));
                }
                worst64 = worst64.max(fast.max_abs_diff(&slow));
                let xu: Tensor<f64> = uniform_tensor(x.shape(), &mut rng);
                let wu: Tensor<f64> = uniform_tensor(w.shape(), &mut rng);
                let fast32 = ops::conv2d_forward(&xu.cast::<f32>(), &wu.cast::<f32>(), stride)?;
                worst32 = worst32.max(max_diff_f32_f64(
                    &fast32,
                    &naive_conv2d(&xu, &wu, stride, false),
                ));
            }
        }
        let detail =
            format!("max abs diff {worst64:.3e} (f64), {worst32:.3e} (f32, uniform inputs)");
        Ok(if worst64 <= 1e-5 && worst32 <= 1e-5 {
            Ok(detail)
        } else {
            Err((detail, json!({"f64": worst64, "f32": worst32})))
        })
    });
    r.check("depthwise_vs_naive", || {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let (mut worst64, mut worst32) = (0.0f64, 0.0f64);
        for n in 1..=8usize {
            for stride in [1, 2] {
                let c = rng.random_range(1..=16);
                let x: Tensor<f64> = normal_tensor(Shape::new(2, n, n, c), &mut rng);
                let w: Tensor<f64> = normal_tensor(Shape::new(3, 3, 1, c), &mut rng);
                let slow = naive_conv2d(&x, &w, stride, true);
                worst64 = worst64.max(ops::depthwise_conv2d(&x, &w, stride)?.max_abs_diff(&slow));
                let fast32 = ops::depthwise_conv2d(&x.cast::<f32>(), &w.cast::<f32>(), stride)?;
                worst32 = worst32.max(max_diff_f32_f64(&fast32, &slow));
            }
        }
        let detail = format!("max abs diff {worst64:.3e} (f64), {worst32:.3e} (f32)");
        Ok(if worst64 <= 1e-5 && worst32 <= 1e-5 {
            Ok(detail)
        } else {
            Err((detail, json!({"f64": worst64, "f32": worst32})))
        })
    });
    r.check("wconv_vs_dense_scatter", || {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut worst = 0.0f64;
        for (d, dp, kappa) in [(8, 8, 3), (8, 16, 2), (16, 8, 3), (16, 16, 4), (32, 64, 3)] {
            let conv = WConv::<f32>::init(WConvSpec::pointwise(d, dp, kappa)?, &mut rng);
            let x: Tensor<f32> = normal_tensor(Shape::new(2, 3, 3, d), &mut rng);
            let y = conv.forward(&x)?;
            let dense =
                ops::conv2d_forward(&x.cast::<f64>(), &scatter_dense(&conv).cast::<f64>(), 1)?;
            worst = worst.max(max_diff_f32_f64(&y, &dense));
        }
        Ok(if worst <= 1e-6 {
            Ok(format!("max abs diff {worst:.3e}"))
        } else {
            Err((
                format!("max abs diff {worst:.3e} > 1e-6"),
                json!({"worst": worst}),
            ))
        })
    });
    r.check("unit_depth_zero_is_inverted_residual", || {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let mut worst = 0.0f64;
        for (d, dp, t, stride) in [(8, 8, 6, 1), (16, 24, 6, 2), (16, 16, 1, 1), (24, 32, 4, 1)] {
            let spec = UnitSpec::new(d, dp, t, (0, 0, 0), stride)?;
            let mut unit = WaveletUnit::<f32>::init(spec, &mut rng)?;
            random_running_stats(&mut unit, &mut rng);
            if unit.param_count() != dense_unit_param_count(&spec) {
                return Ok(Err((
                    "parameter count differs from dense closed forms".into(),
                    json!({"d": d, "t": t}),
                )));
            }
            let x: Tensor<f32> = normal_tensor(Shape::new(2, 5, 5, d), &mut rng);
            let y = unit.forward(&x)?;
            let want = reference_inverted_residual(&unit, &x)?;
            worst = worst.max(y.max_abs_diff(&want) as f64);
        }
        Ok(if worst <= 1e-6 {
            Ok(format!("max abs diff {worst:.3e}; parameter counts match"))
        } else {
            Err((
                format!("max abs diff {worst:.3e} > 1e-6"),
                json!({"worst": worst}),
            ))
        })
    });
    r.out
}

fn uniform_tensor<T: Scalar>(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of(rng.random_range(-1.0..1.0)))
}

/// A computation whose leaves are checked against finite differences.
#[derive(Clone, Debug, PartialEq)]
pub enum ProbeKind {
    Conv2d { stride: usize },
    Depthwise { stride: usize },
    BatchNormTrain,
    Relu6,
    AvgPool,
    SoftmaxCe { labels: Vec<usize> },
    SliceConcat,
    Dfwt(DfwtSpec),
    WConv(WConvSpec),
    Unit(UnitSpec),
}

/// Leaves (input first) plus the recipe combining them.
#[derive(Clone, Debug, PartialEq)]
pub struct GradProbe {
    pub name: String,
    pub kind: ProbeKind,
    pub leaves: Vec<Tensor<f64>>,
}

impl GradProbe {
    fn record<T: Scalar>(&self, tape: &mut Tape<T>, vars: &[Var]) -> Result<Var> {
        let x = vars[0];
        match &self.kind {
            ProbeKind::Conv2d { stride } => tape.conv2d(x, vars[1], *stride),
            ProbeKind::Depthwise { stride } => tape.depthwise_conv2d(x, vars[1], *stride),
            ProbeKind::BatchNormTrain => Ok(tape.batch_norm_train(x, vars[1], vars[2])?.0),
            ProbeKind::Relu6 => tape.relu6(x),
            ProbeKind::AvgPool => tape.global_avg_pool(x),
            ProbeKind::SoftmaxCe { labels } => tape.softmax_cross_entropy(x, labels),
            ProbeKind::SliceConcat => {
                let c = tape.value(x)?.shape().channels();
                let a = tape.slice_channels(x, 0, c / 2)?;
                let b = tape.slice_channels(x, c / 2, c - c / 2)?;
                tape.concat_channels(&[b, a, b])
            }
            ProbeKind::Dfwt(spec) => tape.dfwt(x, spec.depth, spec.sign),
            ProbeKind::WConv(spec) => {
                let shell = WConv::<T>::init(*spec, &mut ChaCha8Rng::seed_from_u64(0));
                let mut ctx = Ctx::from_vars(tape, vars[1..].to_vec(), true);
                shell.record(&mut ctx, x)
            }
            ProbeKind::Unit(spec) => {
                let shell = WaveletUnit::<T>::init(*spec, &mut ChaCha8Rng::seed_from_u64(0))?;
                let mut ctx = Ctx::from_vars(tape, vars[1..].to_vec(), true);
                shell.record(&mut ctx, x, true)
            }
        }
    }

    fn output<T: Scalar>(
        &self,
        leaves: &[Tensor<f64>],
        params: bool,
    ) -> Result<(Tape<T>, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = leaves
            .iter()
            .map(|l| {
                if params {
                    tape.param(l.cast())
                } else {
                    tape.constant(l.cast())
                }
            })
            .collect();
        let y = self.record(&mut tape, &vars)?;
        Ok((tape, vars, y))
    }

    pub fn conv(seed: u64, n: usize, k: usize, cin: usize, cout: usize, stride: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GradProbe {
            name: format!("conv{k}x{k}_s{stride}"),
            kind: ProbeKind::Conv2d { stride },
            leaves: vec![
                normal_tensor(Shape::new(2, n, n, cin), &mut rng),
                normal_tensor(Shape::new(k, k, cin, cout), &mut rng),
            ],
        }
    }

    pub fn depthwise(seed: u64, n: usize, c: usize, stride: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GradProbe {
            name: format!("depthwise_s{stride}"),
            kind: ProbeKind::Depthwise { stride },
            leaves: vec![
                normal_tensor(Shape::new(2, n, n, c), &mut rng),
                normal_tensor(Shape::new(3, 3, 1, c), &mut rng),
            ],
        }
    }

    pub fn batch_norm(seed: u64, c: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GradProbe {
            name: "batch_norm".into(),
            kind: ProbeKind::BatchNormTrain,
            leaves: vec![
                normal_tensor(Shape::new(2, 3, 3, c), &mut rng),
                uniform_tensor::<f64>(Shape::new(1, 1, 1, c), &mut rng).map(|v| v + 1.5),
                normal_tensor(Shape::new(1, 1, 1, c), &mut rng),
            ],
        }
    }

    /// Inputs kept at least 0.05 away from the clamp points.
    pub fn relu6(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_fn(Shape::new(2, 3, 3, 4), |_| loop {
            let v: f64 = rng.random_range(-2.0..8.0);
            if (v.abs() > 0.05) && ((v - 6.0).abs() > 0.05) {
                break v;
            }
        });
        GradProbe {
            name: "relu6".into(),
            kind: ProbeKind::Relu6,
            leaves: vec![x],
        }
    }

    pub fn avg_pool(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GradProbe {
            name: "global_avg_pool".into(),
            kind: ProbeKind::AvgPool,
            leaves: vec![normal_tensor(Shape::new(2, 3, 3, 5), &mut rng)],
        }
    }

    pub fn softmax_ce(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GradProbe {
            name: "softmax_cross_entropy".into(),
            kind: ProbeKind::SoftmaxCe {
                labels: vec![3, 0, 9],
            },
            leaves: vec![normal_tensor(Shape::new(3, 1, 1, 10), &mut rng)],
        }
    }

    pub fn slice_concat(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GradProbe {
            name: "slice_concat".into(),
            kind: ProbeKind::SliceConcat,
            leaves: vec![normal_tensor(Shape::new(2, 2, 2, 7), &mut rng)],
        }
    }

    pub fn dfwt(seed: u64, channels: usize, depth: u32, sign: SignConvention) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(GradProbe {
            name: format!("dfwt_d{channels}_k{depth}"),
            kind: ProbeKind::Dfwt(DfwtSpec::new(channels, depth, sign)?),
            leaves: vec![normal_tensor(Shape::new(2, 3, 3, channels), &mut rng)],
        })
    }

    pub fn wconv(seed: u64, d: usize, dp: usize, depth: u32) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = WConvSpec::pointwise(d, dp, depth)?;
        let conv = WConv::<f64>::init(spec, &mut rng);
        let mut leaves = vec![normal_tensor(Shape::new(2, 3, 3, d), &mut rng)];
        leaves.extend(conv.pieces().iter().cloned());
        Ok(GradProbe {
            name: format!("wconv_{d}x{dp}_k{depth}"),
            kind: ProbeKind::WConv(spec),
            leaves,
        })
    }

    pub fn unit(seed: u64, spec: UnitSpec) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut unit = WaveletUnit::<f64>::init(spec, &mut rng)?;
        for bn in unit.batch_norms_mut() {
            for v in bn.gamma.data_mut() {
                *v = rng.random_range(0.5..1.5);
            }
            for v in bn.beta.data_mut() {
                *v = rng.random_range(0.5..1.5);
            }
        }
        let mut shadow = WaveletUnit::<f64>::init(spec, &mut rng)?;
        copy_parameters(&unit, &mut shadow)?;
        let mut leaves = vec![normal_tensor(
            Shape::new(2, 4, 4, spec.in_channels),
            &mut rng,
        )];
        leaves.extend(shadow.parameters().into_iter().map(|(_, p)| p.clone()));
        Ok(GradProbe {
            name: format!(
                "unit_{}to{}_t{}_k{}{}{}",
                spec.in_channels,
                spec.out_channels,
                spec.expansion,
                spec.kappa1,
                spec.kappa2,
                spec.kappa3
            ),
            kind: ProbeKind::Unit(spec),
            leaves,
        })
    }
}

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub name: String,
    /// Largest per-leaf `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`
    /// over coordinates whose difference stencil stays on one linear piece
    /// of every clamp.
    pub max_rel_error: f64,
    /// The same metric over all coordinates.
    pub raw_rel_error: f64,
    pub worst_leaf: usize,
    pub scalars: usize,
    /// Coordinates whose `±eps` evaluations see different clamp regions.
    pub kink_crossings: usize,
}

impl GradCheck {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

fn rel_error(a: &[f64], n: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut a.iter().zip(n).map(|(x, y)| x - y));
    let scale = norm(&mut a.iter().copied()).max(norm(&mut n.iter().copied()));
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Compares `f32` reverse-mode gradients of `Σ r ⊙ f(leaves)` (random fixed
/// `r`) against central differences evaluated in `f64`.
pub fn gradient_check(probe: &GradProbe, eps: f64, seed: u64) -> Result<GradCheck> {
    let (tape64, _, y64) = probe.output::<f64>(&probe.leaves, false)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights: Tensor<f64> = normal_tensor(tape64.value(y64)?.shape(), &mut rng);
    let base_pattern = tape64.activation_pattern();
    drop(tape64);

    let (mut tape, vars, y) = probe.output::<f32>(&probe.leaves, true)?;
    let loss = tape.dot(y, &weights.cast())?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| {
            Ok(tape
                .grad(v)?
                .expect("leaf gradient")
                .iter()
                .map(|&g| g as f64)
                .collect())
        })
        .collect::<Result<_>>()?;

    let eval = |leaves: &[Tensor<f64>]| -> Result<(f64, Vec<u8>)> {
        let (t, _, y) = probe.output::<f64>(leaves, false)?;
        let loss = t
            .value(y)?
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a * b)
            .sum();
        Ok((loss, t.activation_pattern()))
    };
    let mut leaves = probe.leaves.clone();
    let (mut worst, mut raw, mut worst_leaf, mut scalars, mut crossings) =
        (0.0f64, 0.0f64, 0, 0, 0);
    for li in 0..leaves.len() {
        let (mut a_kept, mut n_kept, mut n_all) = (Vec::new(), Vec::new(), Vec::new());
        for e in 0..leaves[li].numel() {
            let orig = leaves[li].data()[e];
            leaves[li].data_mut()[e] = orig + eps;
            let (plus, pp) = eval(&leaves)?;
            leaves[li].data_mut()[e] = orig - eps;
            let (minus, pm) = eval(&leaves)?;
            leaves[li].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            n_all.push(numeric);
            if pp == base_pattern && pm == base_pattern {
                a_kept.push(analytic[li][e]);
                n_kept.push(numeric);
            } else {
                crossings += 1;
            }
        }
        scalars += n_all.len();
        raw = raw.max(rel_error(&analytic[li], &n_all));
        let rel = rel_error(&a_kept, &n_kept);
        if rel > worst {
            worst = rel;
            worst_leaf = li;
        }
    }
    Ok(GradCheck {
        name: probe.name.clone(),
        max_rel_error: worst,
        raw_rel_error: raw,
        worst_leaf,
        scalars,
        kink_crossings: crossings,
    })
}

pub const GRAD_EPS: f64 = 1e-3;
pub const GRAD_TOL: f64 = 1e-3;

/// Probes covering every primitive, the two layers and one full unit.
pub fn standard_probes() -> Result<Vec<GradProbe>> {
    let mut p = vec![
        GradProbe::conv(1, 4, 3, 3, 4, 1),
        GradProbe::conv(2, 5, 3, 2, 3, 2),
        GradProbe::conv(3, 3, 1, 4, 5, 1),
        GradProbe::depthwise(4, 4, 3, 1),
        GradProbe::depthwise(5, 5, 2, 2),
        GradProbe::batch_norm(6, 4),
        GradProbe::relu6(7),
        GradProbe::avg_pool(8),
        GradProbe::softmax_ce(9),
        GradProbe::slice_concat(10),
    ];
    for kappa in [0, 1, 3] {
        p.push(GradProbe::wconv(20 + kappa as u64, 8, 8, kappa)?);
    }
    p.push(GradProbe::dfwt(30, 8, 3, SignConvention::Algorithm2)?);
    p.push(GradProbe::dfwt(31, 8, 3, SignConvention::Matrix)?);
    p.push(GradProbe::unit(40, UnitSpec::new(8, 8, 6, (0, 3, 3), 1)?)?);
    p.push(GradProbe::unit(41, UnitSpec::new(8, 16, 4, (1, 2, 2), 2)?)?);
    Ok(p)
}

fn gradient_suite() -> Vec<PropertyResult> {
    let mut r = Runner {
        suite: "gradients",
        out: Vec::new(),
    };
    let probes = match standard_probes() {
        Ok(p) => p,
        Err(e) => {
            r.check("probe_construction", || Err(e));
            return r.out;
        }
    };
    for (i, probe) in probes.iter().enumerate() {
        r.check(&format!("finite_difference_{}", probe.name), || {
            let c = gradient_check(probe, GRAD_EPS, 100 + i as u64)?;
            let detail = format!(
                "relative error {:.3e} over {} scalars ({} straddle a clamp kink; {:.3e} including them)",
                c.max_rel_error,
                c.scalars - c.kink_crossings,
                c.kink_crossings,
                c.raw_rel_error
            );
            Ok(if c.passed(GRAD_TOL) { Ok(detail) } else { Err((detail, json!(c))) })
        });
    }
    r.out
}
