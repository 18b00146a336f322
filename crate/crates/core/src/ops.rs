//! Forward and backward kernels on plain tensors.
//!
//! Every function here is a pure function of its arguments. The autograd
//! tape records which kernel produced a value and calls the matching
//! backward kernel; layers and oracles may also call these directly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

pub const BN_EPS: f64 = 1e-5;

/// Output extent and leading pad of a "same" convolution.
///
/// The output extent is `ceil(n / stride)`; any odd total padding goes to the
/// trailing edge.
pub fn same_padding(n: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out = n.div_ceil(stride);
    let total = ((out - 1) * stride + kernel).saturating_sub(n);
    (out, total / 2)
}

/// Dense K×K convolution filter bank, weights laid out `[K, K, in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvKernel<T> {
    weights: Tensor<T>,
    stride: usize,
}

impl<T: Scalar> ConvKernel<T> {
    pub fn new(weights: Tensor<T>, stride: usize) -> Result<Self> {
        let [kh, kw, _, _] = weights.shape().0;
        if kh != kw || kh % 2 == 0 {
            return Err(Error::Config(format!(
                "kernel must be square with odd size, got {kh}x{kw}"
            )));
        }
        if stride == 0 {
            return Err(Error::Config("stride must be at least 1".into()));
        }
        Ok(ConvKernel { weights, stride })
    }

    pub fn zeros(
        kernel_size: usize,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
    ) -> Result<Self> {
        Self::new(
            Tensor::zeros(Shape::new(
                kernel_size,
                kernel_size,
                in_channels,
                out_channels,
            )),
            stride,
        )
    }

    pub fn kernel_size(&self) -> usize {
        self.weights.shape().0[0]
    }
    pub fn in_channels(&self) -> usize {
        self.weights.shape().0[2]
    }
    pub fn out_channels(&self) -> usize {
        self.weights.shape().0[3]
    }
    pub fn stride(&self) -> usize {
        self.stride
    }
    /// Leading zero-padding applied for stride-1 "same" output.
    pub fn padding(&self) -> usize {
        (self.kernel_size() - 1) / 2
    }
    pub fn weights(&self) -> &Tensor<T> {
        &self.weights
    }
    pub fn weights_mut(&mut self) -> &mut Tensor<T> {
        &mut self.weights
    }
    pub fn param_count(&self) -> usize {
        self.weights.numel()
    }
}

/// Standard cross-correlation with "same" zero padding.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, kernel: &ConvKernel<T>) -> Result<Tensor<T>> {
    conv2d_forward(x, kernel.weights(), kernel.stride())
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    stride: usize,
    out_h: usize,
    out_w: usize,
    pad_top: usize,
    pad_left: usize,
}

impl Geometry {
    fn new(input: Shape, k: usize, stride: usize) -> Self {
        let (out_h, pad_top) = same_padding(input.height(), k, stride);
        let (out_w, pad_left) = same_padding(input.width(), k, stride);
        Geometry {
            stride,
            out_h,
            out_w,
            pad_top,
            pad_left,
        }
    }

    /// Input coordinate for output `o` and tap `t`, if inside the image.
    #[inline]
    fn source(o: usize, t: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
        let i = (o * stride + t).checked_sub(pad)?;
        (i < extent).then_some(i)
    }
}

pub fn conv2d_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, stride: usize) -> Result<Tensor<T>> {
    let xs = x.shape();
    let [k, _, cin, cout] = w.shape().0;
    if xs.channels() != cin {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            left: xs,
            right: w.shape(),
        });
    }
    let g = Geometry::new(xs, k, stride);
    let os = Shape::new(xs.batch(), g.out_h, g.out_w, cout);
    let mut out = Tensor::zeros(os);
    let wd = w.data();
    let xd = x.data();
    let od = out.data_mut();
    for b in 0..xs.batch() {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let o0 = os.index(b, oy, ox, 0);
                let opx = &mut od[o0..o0 + cout];
                for ky in 0..k {
                    let Some(iy) = Geometry::source(oy, ky, g.stride, g.pad_top, xs.height())
                    else {
                        continue;
                    };
                    for kx in 0..k {
                        let Some(ix) = Geometry::source(ox, kx, g.stride, g.pad_left, xs.width())
                        else {
                            continue;
                        };
                        let i0 = xs.index(b, iy, ix, 0);
                        let xpx = &xd[i0..i0 + cin];
                        let wtap = &wd[(ky * k + kx) * cin * cout..][..cin * cout];
                        for (ci, &xv) in xpx.iter().enumerate() {
                            let wrow = &wtap[ci * cout..(ci + 1) * cout];
                            for (o, &wv) in opx.iter_mut().zip(wrow) {
                                *o += xv * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d_forward`] with respect to input and weights.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let xs = x.shape();
    let [k, _, cin, cout] = w.shape().0;
    let g = Geometry::new(xs, k, stride);
    let os = grad_out.shape();
    let mut gx = Tensor::zeros(xs);
    let mut gw = Tensor::zeros(w.shape());
    let (wd, xd, gd) = (w.data(), x.data(), grad_out.data());
    let gxd = gx.data_mut();
    let gwd = gw.data_mut();
    for b in 0..xs.batch() {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let o0 = os.index(b, oy, ox, 0);
                let gpx = &gd[o0..o0 + cout];
                for ky in 0..k {
                    let Some(iy) = Geometry::source(oy, ky, g.stride, g.pad_top, xs.height())
                    else {
                        continue;
                    };
                    for kx in 0..k {
                        let Some(ix) = Geometry::source(ox, kx, g.stride, g.pad_left, xs.width())
                        else {
                            continue;
                        };
                        let i0 = xs.index(b, iy, ix, 0);
                        let tap = (ky * k + kx) * cin * cout;
                        for ci in 0..cin {
                            let xv = xd[i0 + ci];
                            let wrow = &wd[tap + ci * cout..tap + (ci + 1) * cout];
                            let gwrow = &mut gwd[tap + ci * cout..tap + (ci + 1) * cout];
                            let mut acc = T::zero();
                            for ((gwv, &wv), &gv) in gwrow.iter_mut().zip(wrow).zip(gpx) {
                                acc += gv * wv;
                                *gwv += xv * gv;
                            }
                            gxd[i0 + ci] += acc;
                        }
                    }
                }
            }
        }
    }
    (gx, gw)
}

/// Per-channel K×K convolution; `w` has shape `[K, K, 1, C]`.
pub fn depthwise_conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
) -> Result<Tensor<T>> {
    let xs = x.shape();
    let [k, kw, one, c] = w.shape().0;
    if one != 1 || k != kw {
        return Err(Error::ShapeMismatch {
            op: "depthwise_conv2d",
            left: xs,
            right: w.shape(),
        });
    }
    if c != xs.channels() {
        return Err(Error::ChannelMismatch {
            op: "depthwise_conv2d",
            expected: xs.channels(),
            got: c,
        });
    }
    if stride == 0 {
        return Err(Error::Config("stride must be at least 1".into()));
    }
    let g = Geometry::new(xs, k, stride);
    let os = Shape::new(xs.batch(), g.out_h, g.out_w, c);
    let mut out = Tensor::zeros(os);
    let (wd, xd) = (w.data(), x.data());
    let od = out.data_mut();
    for b in 0..xs.batch() {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let o0 = os.index(b, oy, ox, 0);
                for ky in 0..k {
                    let Some(iy) = Geometry::source(oy, ky, g.stride, g.pad_top, xs.height())
                    else {
                        continue;
                    };
                    for kx in 0..k {
                        let Some(ix) = Geometry::source(ox, kx, g.stride, g.pad_left, xs.width())
                        else {
                            continue;
                        };
                        let i0 = xs.index(b, iy, ix, 0);
                        let wtap = &wd[(ky * k + kx) * c..][..c];
                        for ((o, &xv), &wv) in
                            od[o0..o0 + c].iter_mut().zip(&xd[i0..i0 + c]).zip(wtap)
                        {
                            *o += xv * wv;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn depthwise_conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let xs = x.shape();
    let [k, _, _, c] = w.shape().0;
    let g = Geometry::new(xs, k, stride);
    let os = grad_out.shape();
    let mut gx = Tensor::zeros(xs);
    let mut gw = Tensor::zeros(w.shape());
    let (wd, xd, gd) = (w.data(), x.data(), grad_out.data());
    let gxd = gx.data_mut();
    let gwd = gw.data_mut();
    for b in 0..xs.batch() {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let o0 = os.index(b, oy, ox, 0);
                for ky in 0..k {
                    let Some(iy) = Geometry::source(oy, ky, g.stride, g.pad_top, xs.height())
                    else {
                        continue;
                    };
                    for kx in 0..k {
                        let Some(ix) = Geometry::source(ox, kx, g.stride, g.pad_left, xs.width())
                        else {
                            continue;
                        };
                        let i0 = xs.index(b, iy, ix, 0);
                        let tap = (ky * k + kx) * c;
                        for ch in 0..c {
                            let gv = gd[o0 + ch];
                            gxd[i0 + ch] += gv * wd[tap + ch];
                            gwd[tap + ch] += gv * xd[i0 + ch];
                        }
                    }
                }
            }
        }
    }
    (gx, gw)
}

fn check_affine<T: Scalar>(op: &'static str, x: &Tensor<T>, p: &Tensor<T>) -> Result<()> {
    if p.numel() != x.shape().channels() {
        return Err(Error::ChannelMismatch {
            op,
            expected: x.shape().channels(),
            got: p.numel(),
        });
    }
    Ok(())
}

/// Statistics saved by a training-mode batch norm for its backward pass.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance over the batch.
    pub var: Vec<T>,
    pub inv_std: Vec<T>,
    pub count: usize,
}

/// Training-mode batch norm over all (batch, y, x) positions.
pub fn batch_norm_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<(Tensor<T>, BatchStats<T>)> {
    check_affine("batch_norm", x, gamma)?;
    check_affine("batch_norm", x, beta)?;
    let c = x.shape().channels();
    let n = x.shape().positions();
    let nf = T::of(n as f64);
    let mut mean = vec![T::zero(); c];
    for px in x.data().chunks_exact(c) {
        for (m, &v) in mean.iter_mut().zip(px) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= nf);
    let mut var = vec![T::zero(); c];
    for px in x.data().chunks_exact(c) {
        for ((s, &v), &m) in var.iter_mut().zip(px).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s /= nf);
    let eps = T::of(BN_EPS);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let (g, bt) = (gamma.data(), beta.data());
    let mut y = x.clone();
    for px in y.data_mut().chunks_exact_mut(c) {
        for ch in 0..c {
            px[ch] = (px[ch] - mean[ch]) * inv_std[ch] * g[ch] + bt[ch];
        }
    }
    Ok((
        y,
        BatchStats {
            mean,
            var,
            inv_std,
            count: n,
        },
    ))
}

/// Gradients (input, gamma, beta) of a training-mode batch norm.
pub fn batch_norm_train_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    stats: &BatchStats<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let c = x.shape().channels();
    let nf = T::of(stats.count as f64);
    let mut gbeta = vec![T::zero(); c];
    let mut ggamma = vec![T::zero(); c];
    for (px, gpx) in x
        .data()
        .chunks_exact(c)
        .zip(grad_out.data().chunks_exact(c))
    {
        for ch in 0..c {
            let xhat = (px[ch] - stats.mean[ch]) * stats.inv_std[ch];
            gbeta[ch] += gpx[ch];
            ggamma[ch] += gpx[ch] * xhat;
        }
    }
    let g = gamma.data();
    let mut gx = Tensor::zeros(x.shape());
    for ((gxp, px), gpx) in gx
        .data_mut()
        .chunks_exact_mut(c)
        .zip(x.data().chunks_exact(c))
        .zip(grad_out.data().chunks_exact(c))
    {
        for ch in 0..c {
            let xhat = (px[ch] - stats.mean[ch]) * stats.inv_std[ch];
            gxp[ch] =
                g[ch] * stats.inv_std[ch] / nf * (nf * gpx[ch] - gbeta[ch] - xhat * ggamma[ch]);
        }
    }
    let shape = gamma.shape();
    (
        gx,
        Tensor::from_vec(shape, ggamma).expect("gamma shape"),
        Tensor::from_vec(shape, gbeta).expect("beta shape"),
    )
}

/// Inference-mode batch norm with fixed statistics. Returns the output and
/// the per-channel scale `gamma / sqrt(var + eps)`.
pub fn batch_norm_eval<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &[T],
    running_var: &[T],
) -> Result<(Tensor<T>, Vec<T>)> {
    check_affine("batch_norm", x, gamma)?;
    check_affine("batch_norm", x, beta)?;
    let c = x.shape().channels();
    if running_mean.len() != c || running_var.len() != c {
        return Err(Error::ChannelMismatch {
            op: "batch_norm",
            expected: c,
            got: running_mean.len().min(running_var.len()),
        });
    }
    let eps = T::of(BN_EPS);
    let scale: Vec<T> = gamma
        .data()
        .iter()
        .zip(running_var)
        .map(|(&g, &v)| g / (v + eps).sqrt())
        .collect();
    let mut y = x.clone();
    for px in y.data_mut().chunks_exact_mut(c) {
        for ch in 0..c {
            px[ch] = (px[ch] - running_mean[ch]) * scale[ch] + beta.data()[ch];
        }
    }
    Ok((y, scale))
}

pub fn relu6<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let six = T::of(6.0);
    x.map(|v| v.max(T::zero()).min(six))
}

pub fn relu6_backward<T: Scalar>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let six = T::of(6.0);
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| {
            if v > T::zero() && v < six {
                g
            } else {
                T::zero()
            }
        })
        .collect();
    Tensor::from_vec(x.shape(), data).expect("same shape")
}

/// Mean over the spatial extent: `[B, H, W, C] -> [B, 1, 1, C]`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let c = s.channels();
    let hw = s.height() * s.width();
    let inv = T::one() / T::of(hw as f64);
    let mut out = Tensor::zeros(Shape::new(s.batch(), 1, 1, c));
    for (b, chunk) in x.data().chunks_exact(hw * c).enumerate() {
        let o = &mut out.data_mut()[b * c..(b + 1) * c];
        for px in chunk.chunks_exact(c) {
            for (ov, &v) in o.iter_mut().zip(px) {
                *ov += v;
            }
        }
        o.iter_mut().for_each(|v| *v *= inv);
    }
    out
}

pub fn global_avg_pool_backward<T: Scalar>(input: Shape, grad_out: &Tensor<T>) -> Tensor<T> {
    let c = input.channels();
    let hw = input.height() * input.width();
    let inv = T::one() / T::of(hw as f64);
    let mut gx = Tensor::zeros(input);
    for (b, chunk) in gx.data_mut().chunks_exact_mut(hw * c).enumerate() {
        let g = &grad_out.data()[b * c..(b + 1) * c];
        for px in chunk.chunks_exact_mut(c) {
            for (v, &gv) in px.iter_mut().zip(g) {
                *v = gv * inv;
            }
        }
    }
    gx
}

/// Row-wise softmax of `[B, 1, 1, K]` logits.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let k = logits.shape().channels();
    let mut p = logits.clone();
    for row in p.data_mut().chunks_exact_mut(k) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    p
}

/// Mean softmax cross-entropy over the batch; also returns the probabilities.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(T, Tensor<T>)> {
    let s = logits.shape();
    if s.height() != 1 || s.width() != 1 || s.batch() != labels.len() {
        return Err(Error::Config(format!(
            "softmax_cross_entropy expects [B,1,1,K] logits with B labels, got {s} and {} labels",
            labels.len()
        )));
    }
    let k = s.channels();
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Config(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    let mut loss = T::zero();
    for (row, &label) in logits.data().chunks_exact(k).zip(labels) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&v| (v - m).exp()).sum::<T>().ln() + m;
        loss += lse - row[label];
    }
    Ok((loss / T::of(labels.len() as f64), softmax(logits)))
}

pub fn softmax_cross_entropy_backward<T: Scalar>(
    probs: &Tensor<T>,
    labels: &[usize],
    grad_loss: T,
) -> Tensor<T> {
    let k = probs.shape().channels();
    let scale = grad_loss / T::of(labels.len() as f64);
    let mut g = probs.clone();
    for (row, &label) in g.data_mut().chunks_exact_mut(k).zip(labels) {
        row[label] -= T::one();
        row.iter_mut().for_each(|v| *v *= scale);
    }
    g
}

/// Sign of the difference blocks emitted by the fast wavelet transform.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SignConvention {
    /// `high - low`, the orientation used by the transform's procedure.
    #[default]
    Algorithm2,
    /// `low - high`, the orientation of the tabulated matrix.
    Matrix,
}

impl std::str::FromStr for SignConvention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "algorithm2" => Ok(Self::Algorithm2),
            "matrix" => Ok(Self::Matrix),
            other => Err(Error::Config(format!("unknown sign convention `{other}`"))),
        }
    }
}

/// Fast transform of one channel vector. `scratch` must hold `input.len()`.
fn dfwt_vector<T: Scalar>(
    input: &[T],
    out: &mut [T],
    depth: u32,
    sign: SignConvention,
    scratch: &mut [T],
) {
    scratch.copy_from_slice(input);
    let mut n = input.len();
    let mut offset = 0;
    for _ in 0..depth {
        let h = n / 2;
        for j in 0..h {
            let (lo, hi) = (scratch[j], scratch[j + h]);
            out[offset + j] = match sign {
                SignConvention::Algorithm2 => hi - lo,
                SignConvention::Matrix => lo - hi,
            };
            scratch[j] = lo + hi;
        }
        offset += h;
        n = h;
    }
    out[offset..].copy_from_slice(&scratch[..n]);
}

/// Transpose of [`dfwt_vector`].
fn dfwt_vector_transpose<T: Scalar>(
    grad_out: &[T],
    grad_in: &mut [T],
    depth: u32,
    sign: SignConvention,
) {
    let d = grad_out.len();
    let tail = d >> depth;
    let mut offset = d - tail;
    grad_in[..tail].copy_from_slice(&grad_out[offset..]);
    let mut h = tail;
    for _ in 0..depth {
        offset -= h;
        for j in 0..h {
            let (gs, gd) = (grad_in[j], grad_out[offset + j]);
            let (glo, ghi) = match sign {
                SignConvention::Algorithm2 => (gs - gd, gs + gd),
                SignConvention::Matrix => (gs + gd, gs - gd),
            };
            grad_in[j] = glo;
            grad_in[j + h] = ghi;
        }
        h *= 2;
    }
}

fn check_dfwt(channels: usize, depth: u32) -> Result<()> {
    if depth >= usize::BITS || !channels.is_multiple_of(1usize << depth) {
        return Err(Error::Divisibility { channels, depth });
    }
    Ok(())
}

/// Depthwise fast wavelet transform over the channel axis, `O(D)` additions
/// per spatial position.
pub fn dfwt<T: Scalar>(x: &Tensor<T>, depth: u32, sign: SignConvention) -> Result<Tensor<T>> {
    let c = x.shape().channels();
    check_dfwt(c, depth)?;
    let mut out = Tensor::zeros(x.shape());
    let mut scratch = vec![T::zero(); c];
    for (src, dst) in x
        .data()
        .chunks_exact(c)
        .zip(out.data_mut().chunks_exact_mut(c))
    {
        dfwt_vector(src, dst, depth, sign, &mut scratch);
    }
    Ok(out)
}

pub fn dfwt_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    depth: u32,
    sign: SignConvention,
) -> Tensor<T> {
    let c = grad_out.shape().channels();
    let mut gx = Tensor::zeros(grad_out.shape());
    for (src, dst) in grad_out
        .data()
        .chunks_exact(c)
        .zip(gx.data_mut().chunks_exact_mut(c))
    {
        dfwt_vector_transpose(src, dst, depth, sign);
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: [usize; 4], data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(Shape(shape), data).unwrap()
    }

    #[test]
    fn same_padding_progression() {
        assert_eq!(same_padding(224, 3, 2), (112, 0));
        assert_eq!(same_padding(7, 3, 2), (4, 1));
        assert_eq!(same_padding(8, 3, 1), (8, 1));
        assert_eq!(same_padding(5, 1, 1), (5, 0));
    }

    #[test]
    fn conv_identity_embedding() {
        let x = Tensor::from_fn(Shape::new(1, 4, 4, 3), |[_, y, x, c]| {
            (y * 12 + x * 3 + c) as f64
        });
        let w = Tensor::from_fn(
            Shape::new(1, 1, 3, 3),
            |[_, _, i, o]| if i == o { 1.0 } else { 0.0 },
        );
        let k = ConvKernel::new(w, 1).unwrap();
        assert_eq!(conv2d(&x, &k).unwrap(), x);
    }

    #[test]
    fn conv_sums_channels() {
        let x = Tensor::<f32>::ones(Shape::new(1, 2, 2, 2));
        let k = ConvKernel::new(Tensor::ones(Shape::new(1, 1, 2, 1)), 1).unwrap();
        let y = conv2d(&x, &k).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 2, 2, 1));
        assert!(y.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn conv_channel_mismatch_names_shapes() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 2, 2, 3));
        let k = ConvKernel::zeros(1, 4, 2, 1).unwrap();
        let err = conv2d(&x, &k).unwrap_err().to_string();
        assert!(err.contains("1x2x2x3") && err.contains("1x1x4x2"), "{err}");
    }

    #[test]
    fn depthwise_center_tap_is_identity() {
        let x = Tensor::from_fn(Shape::new(2, 3, 3, 4), |[b, y, x, c]| {
            (b + 2 * y + 3 * x) as f64 - c as f64
        });
        let w = Tensor::from_fn(Shape::new(3, 3, 1, 4), |[ky, kx, _, _]| {
            if ky == 1 && kx == 1 {
                1.0
            } else {
                0.0
            }
        });
        assert_eq!(depthwise_conv2d(&x, &w, 1).unwrap(), x);
        assert_eq!(w.numel(), 36);
    }

    #[test]
    fn depthwise_rejects_channel_mismatch() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 3, 3, 4));
        let w = Tensor::zeros(Shape::new(3, 3, 1, 5));
        assert!(matches!(
            depthwise_conv2d(&x, &w, 1),
            Err(Error::ChannelMismatch {
                expected: 4,
                got: 5,
                ..
            })
        ));
    }

    #[test]
    fn relu6_clamps() {
        let x = t([1, 1, 1, 3], vec![-1.0, 3.0, 9.0]);
        assert_eq!(relu6(&x).data(), &[0.0, 3.0, 6.0]);
    }

    #[test]
    fn batch_norm_on_standardized_input_is_identity() {
        // Two positions per channel at +-1: zero mean, unit variance.
        let x = t([2, 1, 1, 2], vec![1.0, -1.0, -1.0, 1.0]);
        let g = Tensor::ones(Shape::new(1, 1, 1, 2));
        let b = Tensor::zeros(Shape::new(1, 1, 1, 2));
        let (y, _) = batch_norm_train(&x, &g, &b).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-4);
        let bad = Tensor::zeros(Shape::new(1, 1, 1, 3));
        assert!(batch_norm_train(&x, &bad, &b).is_err());
    }

    #[test]
    fn uniform_logits_give_ln_classes() {
        let logits = Tensor::<f64>::zeros(Shape::new(3, 1, 1, 10));
        let (loss, _) = softmax_cross_entropy(&logits, &[0, 4, 9]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        assert!(softmax_cross_entropy(&logits, &[0, 4, 10]).is_err());
    }

    #[test]
    fn dfwt_hand_trace() {
        let x = t([1, 1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(
            dfwt(&x, 2, SignConvention::Algorithm2).unwrap().data(),
            &[2.0, 2.0, 2.0, 10.0]
        );
        assert_eq!(
            dfwt(&x, 2, SignConvention::Matrix).unwrap().data(),
            &[-2.0, -2.0, -2.0, 10.0]
        );
        assert_eq!(dfwt(&x, 0, SignConvention::Algorithm2).unwrap(), x);
        assert!(matches!(
            dfwt(&x, 3, SignConvention::Algorithm2),
            Err(Error::Divisibility { .. })
        ));
    }

    #[test]
    fn dfwt_backward_is_transpose() {
        // <dfwt(x), g> == <x, dfwt^T(g)> for basis vectors.
        for sign in [SignConvention::Algorithm2, SignConvention::Matrix] {
            for depth in 0..=3 {
                for i in 0..8 {
                    for j in 0..8 {
                        let e = |k: usize| {
                            t(
                                [1, 1, 1, 8],
                                (0..8).map(|c| if c == k { 1.0 } else { 0.0 }).collect(),
                            )
                        };
                        let fwd = dfwt(&e(j), depth, sign).unwrap().data()[i];
                        let bwd = dfwt_backward(&e(i), depth, sign).data()[j];
                        assert_eq!(fwd, bwd, "depth {depth} ({i},{j})");
                    }
                }
            }
        }
    }
}
