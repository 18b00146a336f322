//! Parameterized building blocks recorded onto an autograd [`Tape`].

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops::BatchStats;
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Whether a parameter is a convolution weight (decayed) or a batch-norm
/// affine parameter (not decayed).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Affine,
}

/// State threaded through a forward pass: the tape, the parameter leaves in
/// visiting order, and batch statistics collected in training mode.
pub struct Ctx<'t, T: Scalar> {
    pub tape: &'t mut Tape<T>,
    params: Vec<Var>,
    next: usize,
    training: bool,
    stats: Vec<BatchStats<T>>,
}

impl<'t, T: Scalar> Ctx<'t, T> {
    /// Registers every parameter of `module` as a tape leaf.
    pub fn bind<M: Module<T> + ?Sized>(tape: &'t mut Tape<T>, module: &M, training: bool) -> Self {
        let params = module
            .parameters()
            .into_iter()
            .map(|(_, p)| tape.param(p.clone()))
            .collect();
        Ctx {
            tape,
            params,
            next: 0,
            training,
            stats: Vec::new(),
        }
    }

    /// Like [`Ctx::bind`] but parameters are constants (no gradient).
    pub fn bind_frozen<M: Module<T> + ?Sized>(
        tape: &'t mut Tape<T>,
        module: &M,
        training: bool,
    ) -> Self {
        let params = module
            .parameters()
            .into_iter()
            .map(|(_, p)| tape.constant(p.clone()))
            .collect();
        Ctx {
            tape,
            params,
            next: 0,
            training,
            stats: Vec::new(),
        }
    }

    /// Uses existing tape values as the parameters, in visiting order.
    pub fn from_vars(tape: &'t mut Tape<T>, params: Vec<Var>, training: bool) -> Self {
        Ctx {
            tape,
            params,
            next: 0,
            training,
            stats: Vec::new(),
        }
    }

    pub fn next_param(&mut self) -> Var {
        let v = self.params[self.next];
        self.next += 1;
        v
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn param_vars(&self) -> &[Var] {
        &self.params
    }

    pub fn into_stats(self) -> Vec<BatchStats<T>> {
        self.stats
    }
}

/// A component owning trainable tensors.
///
/// `parameters`, `parameters_mut` and `batch_norms_mut` must visit items in
/// the same order the component consumes them while recording.
pub trait Module<T: Scalar> {
    fn parameters(&self) -> Vec<(ParamKind, &Tensor<T>)>;
    fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>>;
    fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm<T>> {
        Vec::new()
    }

    fn param_count(&self) -> usize {
        self.parameters().iter().map(|(_, p)| p.numel()).sum()
    }
}

/// Copies parameter values between modules of identical structure,
/// converting the scalar type.
pub fn copy_parameters<T: Scalar, U: Scalar>(
    src: &impl Module<T>,
    dst: &mut impl Module<U>,
) -> Result<()> {
    let from = src.parameters();
    let to = dst.parameters_mut();
    if from.len() != to.len() {
        return Err(Error::Config(format!(
            "{} source parameters but {} targets",
            from.len(),
            to.len()
        )));
    }
    for ((_, s), d) in from.into_iter().zip(to) {
        if s.shape() != d.shape() {
            return Err(Error::ShapeMismatch {
                op: "copy_parameters",
                left: s.shape(),
                right: d.shape(),
            });
        }
        *d = s.cast();
    }
    Ok(())
}

/// He-style initializer: normal with std `sqrt(2 / fan_in)`, resampled
/// outside two standard deviations.
pub fn truncated_normal<T: Scalar, R: Rng + ?Sized>(
    shape: Shape,
    fan_in: usize,
    rng: &mut R,
) -> Tensor<T> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let data = (0..shape.numel())
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * std {
                break T::of(v);
            }
        })
        .collect();
    Tensor::from_vec(shape, data).expect("numel matches")
}

/// Per-channel batch normalization with running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

impl<T: Scalar> BatchNorm<T> {
    pub const MOMENTUM: f64 = 0.1;

    pub fn new(channels: usize) -> Self {
        let s = Shape::new(1, 1, 1, channels);
        BatchNorm {
            gamma: Tensor::ones(s),
            beta: Tensor::zeros(s),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    pub fn record(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let gamma = ctx.next_param();
        let beta = ctx.next_param();
        if ctx.training {
            let (y, stats) = ctx.tape.batch_norm_train(x, gamma, beta)?;
            ctx.stats.push(stats);
            Ok(y)
        } else {
            ctx.tape
                .batch_norm_eval(x, gamma, beta, &self.running_mean, &self.running_var)
        }
    }

    /// Exponential update of the running estimates from one batch.
    pub fn update_running(&mut self, stats: &BatchStats<T>) {
        let m = T::of(Self::MOMENTUM);
        let n = stats.count as f64;
        let unbias = T::of(if n > 1.0 { n / (n - 1.0) } else { 1.0 });
        for ch in 0..self.channels() {
            self.running_mean[ch] = (T::one() - m) * self.running_mean[ch] + m * stats.mean[ch];
            self.running_var[ch] =
                (T::one() - m) * self.running_var[ch] + m * stats.var[ch] * unbias;
        }
    }
}

impl<T: Scalar> Module<T> for BatchNorm<T> {
    fn parameters(&self) -> Vec<(ParamKind, &Tensor<T>)> {
        vec![
            (ParamKind::Affine, &self.gamma),
            (ParamKind::Affine, &self.beta),
        ]
    }
    fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.gamma, &mut self.beta]
    }
    fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm<T>> {
        vec![self]
    }
}

/// Dense K×K convolution without bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv<T> {
    pub weight: Tensor<T>,
    pub stride: usize,
}

impl<T: Scalar> Conv<T> {
    pub fn init<R: Rng + ?Sized>(
        kernel: usize,
        cin: usize,
        cout: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        Conv {
            weight: truncated_normal(
                Shape::new(kernel, kernel, cin, cout),
                kernel * kernel * cin,
                rng,
            ),
            stride,
        }
    }

    pub fn record(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.next_param();
        ctx.tape.conv2d(x, w, self.stride)
    }
}

impl<T: Scalar> Module<T> for Conv<T> {
    fn parameters(&self) -> Vec<(ParamKind, &Tensor<T>)> {
        vec![(ParamKind::Weight, &self.weight)]
    }
    fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.weight]
    }
}

/// One K×K filter per channel, weights `[K, K, 1, C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthwiseConv<T> {
    pub weight: Tensor<T>,
    pub stride: usize,
}

impl<T: Scalar> DepthwiseConv<T> {
    pub fn init<R: Rng + ?Sized>(
        kernel: usize,
        channels: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        DepthwiseConv {
            weight: truncated_normal(
                Shape::new(kernel, kernel, 1, channels),
                kernel * kernel,
                rng,
            ),
            stride,
        }
    }

    pub fn new(weight: Tensor<T>, stride: usize) -> Result<Self> {
        let [k, kw, one, _] = weight.shape().0;
        if k != kw || one != 1 || stride == 0 {
            return Err(Error::Config(format!(
                "depthwise weights must be [K,K,1,C] with stride >= 1, got {} stride {stride}",
                weight.shape()
            )));
        }
        Ok(DepthwiseConv { weight, stride })
    }

    pub fn record(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.next_param();
        ctx.tape.depthwise_conv2d(x, w, self.stride)
    }
}

impl<T: Scalar> Module<T> for DepthwiseConv<T> {
    fn parameters(&self) -> Vec<(ParamKind, &Tensor<T>)> {
        vec![(ParamKind::Weight, &self.weight)]
    }
    fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.weight]
    }
}

/// Runs `f` on a throwaway tape with `module`'s parameters frozen and
/// returns the resulting value.
pub fn evaluate_frozen<T, M, F>(
    module: &M,
    input: &Tensor<T>,
    training: bool,
    f: F,
) -> Result<Tensor<T>>
where
    T: Scalar,
    M: Module<T> + ?Sized,
    F: FnOnce(&mut Ctx<'_, T>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let mut ctx = Ctx::bind_frozen(&mut tape, module, training);
    let y = f(&mut ctx, x)?;
    drop(ctx);
    Ok(tape.value(y)?.clone())
}
