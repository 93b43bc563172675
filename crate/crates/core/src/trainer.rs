//! Overfitting-regression training: Adam, cosine annealing, L2 loss.
//!
//! One epoch walks the training frames in index order (batch size one, no
//! shuffling), does a full forward/backward per frame and applies one Adam
//! step per frame. Interpolation mode trains on the odd-numbered frames only
//! and leaves the even-numbered ones as a held-out set. Everything is
//! deterministic given the model seed; the loop itself draws no randomness.

use crate::error::{Error, Result};
use crate::model::{PNeRVModel, ParamId};
use crate::tape::Tape;
use crate::tensor::Tensor3;
use crate::video::VideoClip;
use serde::{Deserialize, Serialize};
use std::io::Write;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Fit every frame.
    Regression,
    /// Fit odd-numbered frames; even-numbered frames are held out.
    Interpolation,
}

impl TrainMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            TrainMode::Regression => "regression",
            TrainMode::Interpolation => "interpolation",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub mode: TrainMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            lr_max: 5e-4,
            lr_min: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.0,
            mode: TrainMode::Regression,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        if !(self.lr_max >= self.lr_min && self.lr_min >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "need lr_max >= lr_min >= 0, got {} / {}",
                self.lr_max, self.lr_min
            )));
        }
        Ok(())
    }
}

// ---- losses and schedule -----------------------------------------------------

/// Mean squared error over all entries.
pub fn l2_loss(pred: &Tensor3, target: &Tensor3) -> Result<f64> {
    if !pred.same_shape(target) {
        return Err(Error::shape(
            "l2_loss",
            format!("{:?}", target.shape()),
            format!("{:?}", pred.shape()),
        ));
    }
    let n = pred.len() as f64;
    Ok(pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// `lr_min + 0.5 (lr_max - lr_min) (1 + cos(pi t / total))`.
pub fn cosine_lr(t: usize, total: usize, lr_max: f64, lr_min: f64) -> f64 {
    let frac = if total == 0 { 1.0 } else { t as f64 / total as f64 };
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}

// ---- Adam -------------------------------------------------------------------

pub const ADAM_EPS: f64 = 1e-8;

/// First/second moment tensors mirroring the parameter list, plus the shared
/// step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<Tensor3>,
    pub v: Vec<Tensor3>,
    pub step: u64,
}

impl AdamState {
    pub fn for_params<'a>(params: impl Iterator<Item = &'a Tensor3>) -> Self {
        let m: Vec<Tensor3> = params
            .map(|p| Tensor3::zeros(p.channels(), p.height(), p.width()))
            .collect();
        AdamState { v: m.clone(), m, step: 0 }
    }
}

/// One bias-corrected Adam update over aligned parameter/gradient lists.
pub fn adam_step(
    params: &mut [&mut Tensor3],
    grads: &[&Tensor3],
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    weight_decay: f64,
) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - beta1.powf(t);
    let bc2 = 1.0 - beta2.powf(t);
    for i in 0..params.len() {
        let p = params[i].data_mut();
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for j in 0..p.len() {
            let grad = g[j] + weight_decay * p[j];
            m[j] = beta1 * m[j] + (1.0 - beta1) * grad;
            v[j] = beta2 * v[j] + (1.0 - beta2) * grad * grad;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
}

// ---- protocol frame splits ---------------------------------------------------

/// 1-based frame indices that receive gradients under `mode`.
pub fn train_frames(mode: TrainMode, frame_count: usize) -> Vec<usize> {
    match mode {
        TrainMode::Regression => (1..=frame_count).collect(),
        TrainMode::Interpolation => (1..=frame_count).step_by(2).collect(),
    }
}

/// 1-based frame indices evaluation should score under `mode`.
pub fn eval_frames(mode: TrainMode, frame_count: usize) -> Vec<usize> {
    match mode {
        TrainMode::Regression => (1..=frame_count).collect(),
        TrainMode::Interpolation => (2..=frame_count).step_by(2).collect(),
    }
}

// ---- training loop -----------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub psnr: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    /// 1-based indices that contributed gradients.
    pub trained_frames: Vec<usize>,
}

impl TrainReport {
    pub fn final_loss(&self) -> f64 {
        self.epochs.last().map(|e| e.loss).unwrap_or(f64::NAN)
    }

    pub fn initial_loss(&self) -> f64 {
        self.epochs.first().map(|e| e.loss).unwrap_or(f64::NAN)
    }

    pub fn final_psnr(&self) -> f64 {
        self.epochs.last().map(|e| e.psnr).unwrap_or(f64::NAN)
    }

    /// `epoch,loss,psnr,lr` rows.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "epoch,loss,psnr,lr")?;
        for e in &self.epochs {
            writeln!(w, "{},{:.17e},{:.6},{:.10e}", e.epoch, e.loss, e.psnr, e.lr)?;
        }
        Ok(())
    }
}

fn psnr_of_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        99.0
    } else {
        (10.0 * (1.0 / mse).log10()).min(99.0)
    }
}

/// Fit `model` to `clip` in place. The learning rate follows the cosine
/// schedule per epoch; Adam steps once per frame.
pub fn train(model: &mut PNeRVModel, clip: &VideoClip, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if cfg.mode == TrainMode::Interpolation && clip.frame_count() < 2 {
        return Err(Error::InvalidConfig(
            "interpolation mode needs at least two frames".into(),
        ));
    }
    let frames = train_frames(cfg.mode, clip.frame_count());

    let trainable: Vec<ParamId> = model
        .store()
        .iter()
        .filter(|(_, e)| e.trainable)
        .map(|(id, _)| id)
        .collect();
    let mut adam = AdamState::for_params(
        model
            .store()
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(_, e)| &e.value),
    );

    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.epochs, cfg.lr_max, cfg.lr_min);
        let mut loss_sum = 0.0;
        for &t in &frames {
            let mut tape = Tape::new();
            let (loss, vars, bn_updates) = model.training_loss(&mut tape, clip, t)?;
            loss_sum += tape.scalar(loss)?;
            tape.backward(loss)?;

            let grads: Vec<Tensor3> = vars
                .pairs()
                .map(|(pid, var)| {
                    tape.grad(var).cloned().unwrap_or_else(|| {
                        let s = model.store().value(pid).shape();
                        Tensor3::zeros(s.0, s.1, s.2)
                    })
                })
                .collect();
            model.apply_bn_updates(&bn_updates);

            if lr > 0.0 {
                adam.step += 1;
                let step = adam.step as f64;
                let bc1 = 1.0 - cfg.beta1.powf(step);
                let bc2 = 1.0 - cfg.beta2.powf(step);
                for (slot, pid) in trainable.iter().enumerate() {
                    let g = grads[slot].data();
                    let m = adam.m[slot].data_mut();
                    let v = adam.v[slot].data_mut();
                    let p = model.store_mut().value_mut(*pid).data_mut();
                    for j in 0..p.len() {
                        let grad = g[j] + cfg.weight_decay * p[j];
                        m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * grad;
                        v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * grad * grad;
                        p[j] -= lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        let mean_loss = loss_sum / frames.len() as f64;
        log.push(EpochLog { epoch, loss: mean_loss, psnr: psnr_of_mse(mean_loss), lr });
    }

    Ok(TrainReport { epochs: log, trained_frames: frames })
}
