//! Reference implementations shared by the integration tests. Everything
//! here is written from first principles and avoids the crate's kernels.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use waveletnet::{Shape, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Output extent and leading pad for zero "same" padding.
pub fn same(n: usize, k: usize, s: usize) -> (usize, usize) {
    let out = n.div_ceil(s);
    let total = ((out - 1) * s + k).saturating_sub(n);
    (out, total / 2)
}

/// Plain nested-loop convolution, weights `[K, K, Cin, Cout]`.
pub fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize) -> Tensor<f64> {
    let [n, h, wd, cin] = x.shape().0;
    let [k, _, wcin, cout] = w.shape().0;
    assert_eq!(cin, wcin);
    let (oh, ph) = same(h, k, stride);
    let (ow, pw) = same(wd, k, stride);
    let mut out = Tensor::zeros(Shape::new(n, oh, ow, cout));
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for co in 0..cout {
                    let mut acc = 0.0;
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - ph as isize;
                            let ix = (ox * stride + kx) as isize - pw as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                acc += x.at(b, iy as usize, ix as usize, ci) * w.at(ky, kx, ci, co);
                            }
                        }
                    }
                    *out.at_mut(b, oy, ox, co) = acc;
                }
            }
        }
    }
    out
}

/// Depthwise convolution as a dense convolution with a diagonal kernel.
pub fn naive_depthwise(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize) -> Tensor<f64> {
    let [k, _, _, c] = w.shape().0;
    let dense = Tensor::from_fn(Shape::new(k, k, c, c), |[ky, kx, ci, co]| {
        if ci == co {
            w.at(ky, kx, 0, co)
        } else {
            0.0
        }
    });
    naive_conv(x, &dense, stride)
}

/// Dyadic pieces `[D/2, D/4, ..., D/2^κ, D/2^κ]`.
pub fn pieces(d: usize, kappa: u32) -> Vec<usize> {
    if kappa == 0 {
        return vec![d];
    }
    let mut p: Vec<usize> = (1..=kappa).map(|i| d >> i).collect();
    p.push(d >> kappa);
    p
}

/// Block-sparse dense kernel: input piece `i` feeds output piece `i` of the
/// reversed output partition.
pub fn scatter(d: usize, dp: usize, kappa: u32, k: usize, blocks: &[Tensor<f64>]) -> Tensor<f64> {
    let ins = pieces(d, kappa);
    let mut outs = pieces(dp, kappa);
    outs.reverse();
    let mut dense = Tensor::zeros(Shape::new(k, k, d, dp));
    let (mut i0, mut o0) = (0, 0);
    for ((il, ol), b) in ins.iter().zip(&outs).zip(blocks) {
        for ky in 0..k {
            for kx in 0..k {
                for ci in 0..*il {
                    for co in 0..*ol {
                        *dense.at_mut(ky, kx, i0 + ci, o0 + co) = b.at(ky, kx, ci, co);
                    }
                }
            }
        }
        i0 += il;
        o0 += ol;
    }
    dense
}

/// The transform on one vector: halves are paired, differences emitted per
/// level, the running sum last.
pub fn ref_dfwt(x: &[f64], kappa: u32, hi_minus_lo: bool) -> Vec<f64> {
    let mut t = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for _ in 0..kappa {
        let h = t.len() / 2;
        let (lo, hi) = t.split_at(h);
        out.extend(
            lo.iter()
                .zip(hi)
                .map(|(l, h)| if hi_minus_lo { h - l } else { l - h }),
        );
        t = lo.iter().zip(hi).map(|(l, h)| l + h).collect();
    }
    out.extend(t);
    out
}

/// Column `j` of the dense matrix is the transform of basis vector `e_j`.
pub fn ref_haar(d: usize, kappa: u32, hi_minus_lo: bool) -> Vec<Vec<i8>> {
    let mut m = vec![vec![0i8; d]; d];
    for j in 0..d {
        let mut e = vec![0.0; d];
        e[j] = 1.0;
        for (i, v) in ref_dfwt(&e, kappa, hi_minus_lo).into_iter().enumerate() {
            m[i][j] = v as i8;
        }
    }
    m
}

/// WConv(D, D, log2 D) adjacency from explicit row sets.
pub fn set_form(k: u32) -> Vec<Vec<u8>> {
    let d = 1usize << k;
    let mut a = vec![vec![0u8; d]; d];
    a[0][..d / 2].iter_mut().for_each(|v| *v = 1);
    for row in a.iter_mut().skip(d / 2) {
        row[d - 1] = 1;
    }
    for p in 1..k as usize {
        let cols = d - (d >> p)..d - (d >> (p + 1));
        for row in a.iter_mut().take(1 << p).skip(1 << (p - 1)) {
            row[cols.clone()].iter_mut().for_each(|v| *v = 1);
        }
    }
    a
}

pub fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
