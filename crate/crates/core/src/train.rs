//! SGD with momentum, learning-rate schedules and the desk-scale training loop.

use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::data::{augment, shuffled, synth_dataset_with, Augment, Dataset, Split, SynthConfig};
use crate::error::{Error, Result};
use crate::models::{build, ModelConfig, Network};
use crate::nn::{Ctx, Module, ParamKind};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Schedule {
    Constant,
    /// 0.1 until epoch 82, then 0.01.
    CifarStep,
    /// `base · (1 − e / total)`.
    ImagenetLinear {
        total_epochs: usize,
    },
}

impl Schedule {
    pub fn lr(&self, base: f64, epoch: usize) -> f64 {
        match *self {
            Schedule::Constant => base,
            Schedule::CifarStep => {
                if epoch < 82 {
                    base
                } else {
                    base * 0.1
                }
            }
            Schedule::ImagenetLinear { total_epochs } => {
                base * (1.0 - epoch as f64 / total_epochs as f64).max(0.0)
            }
        }
    }
}

impl FromStr for Schedule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Schedule::Constant),
            "cifar-step" => Ok(Schedule::CifarStep),
            "imagenet-linear" => Ok(Schedule::ImagenetLinear { total_epochs: 120 }),
            other => Err(Error::Config(format!("unknown schedule `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stops after this many optimizer steps even mid-epoch.
    pub max_steps: Option<usize>,
    pub schedule: Schedule,
    /// Seeds data order and augmentation; weights are seeded separately.
    pub seed: u64,
    pub augment: Augment,
    /// Recomputes batch-norm population statistics over the training set
    /// before each evaluation.
    #[serde(default)]
    pub recalibrate_bn: bool,
}

impl TrainConfig {
    /// The CIFAR recipe: batch 128, momentum 0.9, decay 2e-4, 164 epochs.
    pub fn cifar(seed: u64) -> Self {
        TrainConfig {
            base_lr: 0.1,
            momentum: 0.9,
            weight_decay: 2e-4,
            batch_size: 128,
            epochs: 164,
            max_steps: None,
            schedule: Schedule::CifarStep,
            seed,
            augment: Augment::STANDARD,
            recalibrate_bn: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr >= 0.0) || !self.base_lr.is_finite() {
            return Err(Error::Config(format!(
                "learning rate must be non-negative, got {}",
                self.base_lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(
                "batch size must be at least 2 for batch norm".into(),
            ));
        }
        Ok(())
    }
}

/// Momentum SGD: `v ← μv + g`, `w ← w(1 − lr·λ) − lr·v`, decay on weights only.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn step<M: Module<T> + ?Sized>(
        &mut self,
        module: &mut M,
        grads: &[Tensor<T>],
        lr: f64,
    ) -> Result<()> {
        let kinds: Vec<ParamKind> = module.parameters().iter().map(|(k, _)| *k).collect();
        let params = module.parameters_mut();
        if params.len() != grads.len() {
            return Err(Error::Config(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
        }
        let (mu, lr_t) = (T::of(self.momentum), T::of(lr));
        for (((p, g), v), kind) in params
            .into_iter()
            .zip(grads)
            .zip(&mut self.velocity)
            .zip(kinds)
        {
            let decay = match kind {
                ParamKind::Weight => T::one() - T::of(lr * self.weight_decay),
                ParamKind::Affine => T::one(),
            };
            for ((w, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                *vi = mu * *vi + gi;
                *w = *w * decay - lr_t * *vi;
            }
        }
        Ok(())
    }
}

/// One record per epoch of the JSON-lines log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_err: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub step_losses: Vec<f64>,
}

impl TrainLog {
    pub fn steps(&self) -> usize {
        self.step_losses.len()
    }

    pub fn initial_loss(&self) -> Option<f64> {
        self.step_losses.first().copied()
    }

    /// Mean loss of the last `window` steps.
    pub fn final_loss(&self, window: usize) -> Option<f64> {
        let n = self.step_losses.len();
        if n == 0 {
            return None;
        }
        let tail = &self.step_losses[n - window.clamp(1, n)..];
        Some(tail.iter().sum::<f64>() / tail.len() as f64)
    }

    /// Whether the smoothed final loss is at most half the first-step loss.
    pub fn halved(&self) -> bool {
        match (self.initial_loss(), self.final_loss(HALVING_WINDOW)) {
            (Some(a), Some(b)) => b <= 0.5 * a,
            _ => false,
        }
    }

    /// Whether epoch-mean losses never increase.
    pub fn monotone(&self) -> bool {
        self.epochs
            .windows(2)
            .all(|w| w[1].train_loss <= w[0].train_loss)
    }

    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|e| serde_json::to_string(e).expect("log serializes") + "\n")
            .collect()
    }
}

pub const HALVING_WINDOW: usize = 25;

/// Anything that assigns a class to each image of a batch.
pub trait Predictor {
    fn predict(&self, images: &Tensor<f32>) -> Result<Vec<usize>>;
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

impl<T: Scalar> Predictor for Network<T> {
    fn predict(&self, images: &Tensor<f32>) -> Result<Vec<usize>> {
        let logits = self.logits(&images.cast())?;
        Ok(logits
            .data()
            .chunks_exact(self.arch.classes())
            .map(argmax)
            .collect())
    }
}

/// Top-1 error in percent.
pub fn evaluate<P: Predictor + ?Sized>(model: &P, data: &Dataset, batch: usize) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut wrong = 0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (images, labels) = data.gather(chunk);
        let pred = model.predict(&images)?;
        wrong += pred.iter().zip(&labels).filter(|(p, l)| p != l).count();
    }
    Ok(100.0 * wrong as f64 / data.len() as f64)
}

/// Replaces every batch norm's running statistics with the exact
/// population mean and variance of its input over `data`.
pub fn recalibrate_batch_norm<T: Scalar>(
    net: &mut Network<T>,
    data: &Dataset,
    batch: usize,
) -> Result<()> {
    // Per batch norm: count, Σ x, Σ x².
    let mut acc: Vec<(f64, Vec<f64>, Vec<f64>)> = Vec::new();
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch.max(2)) {
        let (images, _) = data.gather(chunk);
        let mut tape = Tape::new();
        let x = tape.constant(images.cast());
        let mut ctx = Ctx::bind_frozen(&mut tape, &*net, true);
        net.record(&mut ctx, x)?;
        let stats = ctx.into_stats();
        if acc.is_empty() {
            acc = stats
                .iter()
                .map(|s| (0.0, vec![0.0; s.mean.len()], vec![0.0; s.mean.len()]))
                .collect();
        }
        for ((n, m, q), s) in acc.iter_mut().zip(&stats) {
            let k = s.count as f64;
            *n += k;
            for c in 0..s.mean.len() {
                let mean = s.mean[c].as_f64();
                m[c] += k * mean;
                q[c] += k * (s.var[c].as_f64() + mean * mean);
            }
        }
    }
    for (bn, (n, m, q)) in net.batch_norms_mut().into_iter().zip(&acc) {
        for c in 0..m.len() {
            let mean = m[c] / n;
            bn.running_mean[c] = T::of(mean);
            bn.running_var[c] = T::of((q[c] / n - mean * mean).max(0.0));
        }
    }
    Ok(())
}

/// Forward, backward and optimizer update on one batch; returns the loss and
/// the number of correct predictions.
pub fn train_step<T: Scalar>(
    net: &mut Network<T>,
    opt: &mut Sgd<T>,
    images: &Tensor<f32>,
    labels: &[usize],
    lr: f64,
) -> Result<(f64, usize)> {
    let mut tape = Tape::new();
    let x = tape.constant(images.cast());
    let mut ctx = Ctx::bind(&mut tape, &*net, true);
    let logits = net.record(&mut ctx, x)?;
    let loss = ctx.tape.softmax_cross_entropy(logits, labels)?;
    let params = ctx.param_vars().to_vec();
    let stats = ctx.into_stats();
    let classes = net.arch.classes();
    let correct = tape
        .value(logits)?
        .data()
        .chunks_exact(classes)
        .zip(labels)
        .filter(|(row, l)| argmax(row) == **l)
        .count();
    let loss_value = tape.value(loss)?.data()[0].as_f64();
    tape.backward(loss)?;
    let grads = params
        .iter()
        .map(|&p| {
            tape.take_grad(p)
                .map(|g| g.expect("parameters always receive a gradient"))
        })
        .collect::<Result<Vec<_>>>()?;
    opt.step(net, &grads, lr)?;
    for (bn, s) in net.batch_norms_mut().into_iter().zip(&stats) {
        bn.update_running(s);
    }
    Ok((loss_value, correct))
}

/// Runs the configured number of epochs (or steps), calling `on_epoch`
/// after each completed epoch.
pub fn train<T: Scalar>(
    net: &mut Network<T>,
    train_set: &Dataset,
    test_set: Option<&Dataset>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainLog> {
    cfg.validate()?;
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xa11_9e57);
    let mut log = TrainLog::default();
    let max_steps = cfg.max_steps.unwrap_or(usize::MAX);
    let mut epoch = 0;
    while (cfg.max_steps.is_some() || epoch < cfg.epochs) && log.steps() < max_steps {
        let lr = cfg.schedule.lr(cfg.base_lr, epoch);
        let order = shuffled(train_set.len(), &mut order_rng);
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0, 0);
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 || log.steps() >= max_steps {
                break;
            }
            let (images, labels) = train_set.gather(chunk);
            let images = augment(&images, cfg.augment, &mut aug_rng);
            let (loss, ok) = train_step(net, &mut opt, &images, &labels, lr)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    step: log.steps(),
                    loss,
                });
            }
            log.step_losses.push(loss);
            loss_sum += loss * chunk.len() as f64;
            correct += ok;
            seen += chunk.len();
        }
        if seen == 0 {
            break;
        }
        if cfg.recalibrate_bn {
            recalibrate_batch_norm(net, train_set, 256)?;
        }
        let test_err = test_set.map(|t| evaluate(&*net, t, 256)).transpose()?;
        let record = EpochLog {
            epoch,
            lr,
            train_loss: loss_sum / seen as f64,
            train_acc: 100.0 * correct as f64 / seen as f64,
            test_err,
        };
        on_epoch(&record);
        log.epochs.push(record);
        epoch += 1;
    }
    Ok(log)
}

/// A complete desk-scale experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyProfile {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: SynthConfig,
    pub test_n: usize,
}

impl ToyProfile {
    /// Three width-16 units on 8×8 synthetic blobs, 500 steps.
    pub fn synth(seed: u64) -> Self {
        let mut data = SynthConfig::new(2000, 10, 8, 3);
        data.signal = TOY_SIGNAL;
        data.noise = TOY_NOISE;
        ToyProfile {
            model: ModelConfig::toy(8, 16, 3, 6, 10),
            train: TrainConfig {
                base_lr: 0.05,
                momentum: 0.9,
                weight_decay: 2e-4,
                batch_size: 32,
                epochs: 8,
                max_steps: Some(500),
                schedule: Schedule::Constant,
                seed,
                augment: Augment::NONE,
                recalibrate_bn: true,
            },
            data,
            test_n: 1000,
        }
    }

    /// Same network on 32×32 images.
    pub fn cifar(seed: u64) -> Self {
        let mut p = Self::synth(seed);
        p.model = ModelConfig::toy(32, 16, 3, 6, 10);
        p.data.size = 32;
        p.train.augment = Augment::STANDARD;
        p
    }

    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        let train = synth_dataset_with(self.train.seed, &self.data, Split::Train)?;
        let mut test_cfg = self.data;
        test_cfg.n = self.test_n;
        let test =
            synth_dataset_with(self.train.seed.wrapping_add(0x7e57), &test_cfg, Split::Test)?;
        Ok((train, test))
    }
}

pub const TOY_SIGNAL: f32 = 0.35;
pub const TOY_NOISE: f32 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub ablate_dfwt: bool,
    pub seed: u64,
    pub log: TrainLog,
    pub test_err: f64,
}

/// Initializes from `seed`, trains and evaluates.
pub fn run(
    model: &ModelConfig,
    cfg: &TrainConfig,
    train_set: &Dataset,
    test_set: &Dataset,
    seed: u64,
) -> Result<RunResult> {
    let mut net = Network::<f32>::init(build(model)?, seed)?;
    let log = train(&mut net, train_set, Some(test_set), cfg, |_| {})?;
    let test_err = evaluate(&net, test_set, 256)?;
    Ok(RunResult {
        ablate_dfwt: model.ablate_dfwt,
        seed,
        log,
        test_err,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairResult {
    pub seed: u64,
    pub with_dfwt_err: f64,
    pub without_dfwt_err: f64,
    /// `without − with`, positive when the transform helps.
    pub gap: f64,
    pub with_dfwt: TrainLog,
    pub without_dfwt: TrainLog,
}

/// Trains the network and its DFWT-free twin from identical initial weights
/// on identical data order.
pub fn ablation_pair(
    model: &ModelConfig,
    cfg: &TrainConfig,
    train_set: &Dataset,
    test_set: &Dataset,
    seed: u64,
) -> Result<PairResult> {
    let mut with = model.clone();
    with.ablate_dfwt = false;
    let mut without = model.clone();
    without.ablate_dfwt = true;
    let a = run(&with, cfg, train_set, test_set, seed)?;
    let b = run(&without, cfg, train_set, test_set, seed)?;
    Ok(PairResult {
        seed,
        with_dfwt_err: a.test_err,
        without_dfwt_err: b.test_err,
        gap: b.test_err - a.test_err,
        with_dfwt: a.log,
        without_dfwt: b.log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Conv;

    #[test]
    fn schedules() {
        assert_eq!(Schedule::CifarStep.lr(0.1, 81), 0.1);
        assert!((Schedule::CifarStep.lr(0.1, 82) - 0.01).abs() < 1e-15);
        let lin: Schedule = "imagenet-linear".parse().unwrap();
        assert!((lin.lr(0.1, 60) - 0.05).abs() < 1e-15);
        assert!("cosine".parse::<Schedule>().is_err());
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut conv = Conv::<f32>::init(1, 4, 4, 1, &mut rng);
        let before = conv.clone();
        let g = vec![Tensor::full(conv.weight.shape(), 1.0)];
        Sgd::new(0.9, 2e-4).step(&mut conv, &g, 0.0).unwrap();
        assert_eq!(conv, before);
    }

    #[test]
    fn decay_with_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut conv = Conv::<f64>::init(1, 2, 2, 1, &mut rng);
        let before = conv.weight.clone();
        let g = vec![Tensor::zeros(conv.weight.shape())];
        Sgd::new(0.9, 0.5).step(&mut conv, &g, 0.1).unwrap();
        for (a, b) in conv.weight.data().iter().zip(before.data()) {
            assert_eq!(*a, b * (1.0 - 0.1 * 0.5));
        }
    }

    #[test]
    fn rejects_bad_momentum() {
        let mut c = TrainConfig::cifar(0);
        c.momentum = 1.0;
        assert!(c.validate().is_err());
    }
}
