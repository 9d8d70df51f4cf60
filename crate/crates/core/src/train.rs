//! Loss, optimizer and the epoch loop.
//!
//! The network emits one logit per class channel. Each channel goes through
//! its own sigmoid and is scored one-vs-rest with binary cross-entropy plus a
//! smoothed Dice term. Channel order is `[clean ice, debris, background]`.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geodata::{LabelMask, BACKGROUND, CLEAN_ICE, DEBRIS};
use crate::sampling::Patch;
use crate::tensor::{Real, Shape, Tensor};
use crate::unet::{
    forward_with_trace, init_params, save_checkpoint, unet_backward, Mode, ModelParams, UNetConfig, UNetError,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("mask code {0} is not a class code")]
    InvalidCode(u8),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("invalid training config: {0}")]
    ConfigInvalid(String),
    #[error(transparent)]
    UNet(#[from] UNetError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub bce_weight: f64,
    pub dice_weight: f64,
    pub dice_smooth: f64,
    pub clamp_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { bce_weight: 1.0, dice_weight: 1.0, dice_smooth: 1.0, clamp_eps: 1e-7 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let ok = self.bce_weight >= 0.0
            && self.dice_weight >= 0.0
            && self.bce_weight + self.dice_weight > 0.0
            && self.dice_smooth > 0.0
            && self.clamp_eps > 0.0
            && self.clamp_eps < 0.5
            && [self.bce_weight, self.dice_weight, self.dice_smooth].iter().all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(TrainError::ConfigInvalid(format!("{self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Coefficient of the additive gradient `λ·w`, applied to kernels only.
    pub l2_lambda: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, l2_lambda: 5e-4 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.l2_lambda >= 0.0
            && self.lr.is_finite()
            && self.l2_lambda.is_finite();
        if ok {
            Ok(())
        } else {
            Err(TrainError::ConfigInvalid(format!("{self:?}")))
        }
    }
}

/// Moment accumulators shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: ModelParams<f32>,
    pub v: ModelParams<f32>,
    pub t: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ModelParams<f32>) -> Self {
        Self { config, m: params.zeros_like(), v: params.zeros_like(), t: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub patch_size: usize,
    /// Write a checkpoint every this many epochs; the last epoch is always saved.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 50, batch_size: 4, seed: 0, patch_size: 64, checkpoint_every: 10 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 || self.batch_size == 0 || self.patch_size == 0 || self.checkpoint_every == 0 {
            return Err(TrainError::ConfigInvalid(format!("all of {self:?} must be positive")));
        }
        Ok(())
    }
}

/// Mean training loss per epoch, epochs numbered from 1.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossCurve {
    pub points: Vec<(usize, f64)>,
}

impl LossCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss\n");
        for (epoch, loss) in &self.points {
            out.push_str(&format!("{epoch},{loss}\n"));
        }
        out
    }
}

/// Channel index of each class code.
pub fn class_channel(code: u8) -> Result<usize, TrainError> {
    match code {
        CLEAN_ICE => Ok(0),
        DEBRIS => Ok(1),
        BACKGROUND => Ok(2),
        other => Err(TrainError::InvalidCode(other)),
    }
}

/// Targets of shape `(1, 3, h, w)` with a single 1 per pixel.
pub fn one_hot<T: Real>(mask: &LabelMask) -> Result<Tensor<T>, TrainError> {
    let (w, h) = (mask.width(), mask.height());
    let mut out = Tensor::zeros(Shape::new(1, 3, h, w));
    for (i, &code) in mask.values().iter().enumerate() {
        let c = class_channel(code)?;
        out.plane_mut(0, c)[i] = T::one();
    }
    Ok(out)
}

pub fn sigmoid<T: Real>(z: T) -> T {
    // Branching keeps exp from overflowing for large |z|.
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid_probs<T: Real>(logits: &Tensor<T>) -> Tensor<T> {
    logits.map(sigmoid)
}

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<(), TrainError> {
    if a.shape() != b.shape() {
        return Err(TrainError::ShapeMismatch(format!("{} vs {}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Mean binary cross-entropy over every element, with probabilities clamped
/// to `[clamp_eps, 1 − clamp_eps]`.
pub fn bce_loss<T: Real>(probs: &Tensor<T>, target: &Tensor<T>, clamp_eps: f64) -> Result<f64, TrainError> {
    same_shape(probs, target)?;
    let mut sum = 0.0;
    for (&p, &t) in probs.data().iter().zip(target.data()) {
        let p = p.to_f64().unwrap_or(f64::NAN).clamp(clamp_eps, 1.0 - clamp_eps);
        let t = t.to_f64().unwrap_or(f64::NAN);
        sum -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
    }
    Ok(sum / probs.len() as f64)
}

/// Per-channel `(Σ p·t, Σ p, Σ t)`, summed over batch and pixels.
fn dice_sums<T: Real>(probs: &Tensor<T>, target: &Tensor<T>) -> Vec<(f64, f64, f64)> {
    let s = probs.shape();
    let mut sums = vec![(0.0, 0.0, 0.0); s.c];
    for n in 0..s.n {
        for (c, acc) in sums.iter_mut().enumerate() {
            for (&p, &t) in probs.plane(n, c).iter().zip(target.plane(n, c)) {
                let (p, t) = (p.to_f64().unwrap_or(f64::NAN), t.to_f64().unwrap_or(f64::NAN));
                acc.0 += p * t;
                acc.1 += p;
                acc.2 += t;
            }
        }
    }
    sums
}

/// `1 − mean_c (2·Σpt + s) / (Σp + Σt + s)`.
pub fn dice_loss<T: Real>(probs: &Tensor<T>, target: &Tensor<T>, smooth: f64) -> Result<f64, TrainError> {
    same_shape(probs, target)?;
    let sums = dice_sums(probs, target);
    let mean: f64 = sums.iter().map(|(i, p, t)| (2.0 * i + smooth) / (p + t + smooth)).sum::<f64>() / sums.len() as f64;
    Ok(1.0 - mean)
}

/// Combined loss and its gradient with respect to the logits.
pub fn combined_loss_and_grad<T: Real>(
    logits: &Tensor<T>,
    target: &Tensor<T>,
    config: &LossConfig,
) -> Result<(f64, Tensor<T>), TrainError> {
    same_shape(logits, target)?;
    let probs = sigmoid_probs(logits);
    let bce = if config.bce_weight > 0.0 { bce_loss(&probs, target, config.clamp_eps)? } else { 0.0 };
    let sums = dice_sums(&probs, target);
    let s = config.dice_smooth;
    let channels = sums.len() as f64;
    let dice = 1.0 - sums.iter().map(|(i, p, t)| (2.0 * i + s) / (p + t + s)).sum::<f64>() / channels;
    let loss = config.bce_weight * bce + config.dice_weight * dice;

    let shape = logits.shape();
    let m = logits.len() as f64;
    let (lo, hi) = (config.clamp_eps, 1.0 - config.clamp_eps);
    let mut grad = Tensor::zeros(shape);
    for n in 0..shape.n {
        for (c, &(inter, psum, tsum)) in sums.iter().enumerate() {
            let denom = psum + tsum + s;
            let numer = 2.0 * inter + s;
            let probs_plane = probs.plane(n, c);
            let target_plane = target.plane(n, c);
            for (i, g) in grad.plane_mut(n, c).iter_mut().enumerate() {
                let p = probs_plane[i].to_f64().unwrap_or(f64::NAN);
                let t = target_plane[i].to_f64().unwrap_or(f64::NAN);
                let dp = p * (1.0 - p);
                // Clamped probabilities are constant in the logit.
                let d_bce = if p > lo && p < hi { (p - t) / m } else { 0.0 };
                let d_dice = -(2.0 * t * denom - numer) / (denom * denom) / channels * dp;
                *g = T::from_f64_lossy(config.bce_weight * d_bce + config.dice_weight * d_dice);
            }
        }
    }
    Ok((loss, grad))
}

/// One Adam update with `λ·w` added to kernel gradients.
pub fn adam_step(
    params: &mut ModelParams<f32>,
    grads: &ModelParams<f32>,
    state: &mut AdamState,
) -> Result<(), TrainError> {
    let conforms = params.blocks.len() == grads.blocks.len()
        && params.blocks.len() == state.m.blocks.len()
        && params.blocks.iter().zip(&grads.blocks).zip(&state.m.blocks).all(|((p, g), m)| {
            p.kernel.shape() == g.kernel.shape()
                && p.kernel.shape() == m.kernel.shape()
                && p.bias.len() == g.bias.len()
                && p.bias.len() == m.bias.len()
        });
    if !conforms {
        return Err(TrainError::ShapeMismatch("params, grads and optimizer state differ in layout".into()));
    }
    let c = &state.config;
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    let update = |w: &mut f32, g: f32, m: &mut f32, v: &mut f32, decay: f64| {
        let g = g as f64 + decay * *w as f64;
        let m_new = c.beta1 * *m as f64 + (1.0 - c.beta1) * g;
        let v_new = c.beta2 * *v as f64 + (1.0 - c.beta2) * g * g;
        *m = m_new as f32;
        *v = v_new as f32;
        let step = c.lr * (m_new / bc1) / ((v_new / bc2).sqrt() + c.eps);
        *w = (*w as f64 - step) as f32;
    };
    for (((p, g), m), v) in
        params.blocks.iter_mut().zip(&grads.blocks).zip(&mut state.m.blocks).zip(&mut state.v.blocks)
    {
        let it = p.kernel.data_mut().iter_mut().zip(g.kernel.data()).zip(m.kernel.data_mut()).zip(v.kernel.data_mut());
        for (((w, &g), m), v) in it {
            update(w, g, m, v, c.l2_lambda);
        }
        for (((w, &g), m), v) in p.bias.iter_mut().zip(&g.bias).zip(&mut m.bias).zip(&mut v.bias) {
            update(w, g, m, v, 0.0);
        }
    }
    Ok(())
}

/// Loss and parameter gradients for one batch.
pub fn batch_loss_and_grads<T: Real, R: rand::Rng + ?Sized>(
    unet: &UNetConfig,
    params: &ModelParams<T>,
    x: &Tensor<T>,
    target: &Tensor<T>,
    loss: &LossConfig,
    mode: Mode,
    rng: &mut R,
) -> Result<(f64, ModelParams<T>), TrainError> {
    let (logits, _, trace) = forward_with_trace(unet, params, x, mode, &[], rng)?;
    let (value, grad_logits) = combined_loss_and_grad(&logits, target, loss)?;
    let grads = unet_backward(unet, params, &trace, &grad_logits)?;
    Ok((value, grads))
}

/// Stacked inputs and one-hot targets for the given patches.
pub fn make_batch(patches: &[&Patch]) -> Result<(Tensor<f32>, Tensor<f32>), TrainError> {
    let inputs: Vec<&Tensor<f32>> = patches.iter().map(|p| &p.input).collect();
    let x = Tensor::stack(&inputs).map_err(|e| TrainError::ShapeMismatch(e.to_string()))?;
    let targets = patches.iter().map(|p| one_hot(&p.mask)).collect::<Result<Vec<_>, _>>()?;
    let y = Tensor::stack(&targets.iter().collect::<Vec<_>>()).map_err(|e| TrainError::ShapeMismatch(e.to_string()))?;
    Ok((x, y))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams<f32>,
    pub curve: LossCurve,
    /// Loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
    pub checkpoints: Vec<PathBuf>,
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("ckpt_epoch_{epoch}.glck")
}

/// Trains from seeded initial weights. Each epoch reshuffles the patches and
/// takes one Adam step per batch; the last batch may be short. Checkpoints go
/// to `checkpoint_dir` when given.
pub fn train(
    patches: &[Patch],
    train_config: &TrainConfig,
    loss_config: &LossConfig,
    adam_config: &AdamConfig,
    unet: &UNetConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    train_config.validate()?;
    loss_config.validate()?;
    adam_config.validate()?;
    unet.validate()?;
    if patches.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    let expected = Shape::new(1, unet.in_channels, train_config.patch_size, train_config.patch_size);
    if let Some(bad) = patches.iter().find(|p| p.input.shape() != expected) {
        return Err(TrainError::ShapeMismatch(format!(
            "patch {} has input {}, expected {}",
            bad.spec.id,
            bad.input.shape(),
            expected
        )));
    }

    let mut params = init_params(unet, train_config.seed)?;
    let mut state = AdamState::new(adam_config.clone(), &params);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(train_config.seed);
    shuffle_rng.set_stream(1);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(train_config.seed);
    dropout_rng.set_stream(2);

    let mut order: Vec<usize> = (0..patches.len()).collect();
    let mut curve = LossCurve::default();
    let mut step_losses = Vec::new();
    let mut checkpoints = Vec::new();
    for epoch in 1..=train_config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut weighted = 0.0;
        for chunk in order.chunks(train_config.batch_size) {
            let batch: Vec<&Patch> = chunk.iter().map(|&i| &patches[i]).collect();
            let (x, y) = make_batch(&batch)?;
            let (loss, grads) =
                batch_loss_and_grads(unet, &params, &x, &y, loss_config, Mode::Train, &mut dropout_rng)?;
            adam_step(&mut params, &grads, &mut state)?;
            weighted += loss * chunk.len() as f64;
            step_losses.push(loss);
        }
        let mean = weighted / patches.len() as f64;
        log::info!("epoch {epoch}/{}: loss {mean:.6}", train_config.epochs);
        curve.points.push((epoch, mean));

        if let Some(dir) = checkpoint_dir {
            if epoch % train_config.checkpoint_every == 0 || epoch == train_config.epochs {
                let path = dir.join(checkpoint_name(epoch));
                save_checkpoint(&path, unet, &params)?;
                checkpoints.push(path);
            }
        }
    }
    Ok(TrainOutcome { params, curve, step_losses, checkpoints })
}
