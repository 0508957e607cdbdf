//! Minimal CNN engine: forward pass, manual backpropagation, SGD with momentum.

mod cnn;
mod kernels;

pub use cnn::{argmax, CnnArch, IMAGE_PIXELS, IMAGE_SIDE, NUM_CLASSES};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mnist::LabeledSet;
use crate::rng::DetRng;
use crate::tensor::{ModelParams, Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("parameter layout does not match the architecture: {0}")]
    ParamLayout(String),
    #[error("batch must have shape [n, 1, 28, 28], got {0:?}")]
    BatchShape(Vec<usize>),
    #[error("{labels} labels supplied for {rows} rows")]
    LabelCount { rows: usize, labels: usize },
    #[error("label {0} is outside 0..=9")]
    LabelOutOfRange(u8),
    #[error("empty batch")]
    EmptyBatch,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Local optimizer settings. Defaults: lr 0.01, momentum 0.5, batch 64, one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.5,
            batch_size: 64,
            local_epochs: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        // lr = 0 is accepted: it is the "no learning" control run.
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(NnError::InvalidConfig(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(NnError::InvalidConfig(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.batch_size == 0 {
            return Err(NnError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.local_epochs == 0 {
            return Err(NnError::InvalidConfig("local_epochs must be >= 1".into()));
        }
        Ok(())
    }
}

/// One heavy-ball step: `v <- momentum * v + g`, then `w <- w - lr * v`.
pub fn sgd_momentum_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    velocity: &mut ModelParams,
    cfg: &TrainConfig,
) -> Result<(), NnError> {
    params.check_layout(grads)?;
    params.check_layout(velocity)?;
    let (lr, m) = (cfg.learning_rate, cfg.momentum);
    for ((w, g), v) in params
        .tensors_mut()
        .zip(grads.entries().iter().map(|(_, t)| t))
        .zip(velocity.tensors_mut())
    {
        for ((wi, gi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vi = m * *vi + gi;
            *wi -= lr * *vi;
        }
    }
    Ok(())
}

/// Runs `local_epochs` of shuffled mini-batch SGD from `params`, with a fresh
/// zero velocity. The final batch of an epoch may be short. Returns the trained
/// parameters and the number of samples trained on.
pub fn train_local(
    arch: &CnnArch,
    params: &ModelParams,
    data: &LabeledSet,
    cfg: &TrainConfig,
) -> Result<(ModelParams, usize), NnError> {
    cfg.validate()?;
    arch.check_params(params)?;
    if data.is_empty() {
        return Err(NnError::EmptyDataset);
    }
    let n = data.len();
    let mut rng = DetRng::new(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut params = params.clone();
    let mut velocity = params.zeros_like();
    let mut images = Vec::with_capacity(cfg.batch_size * IMAGE_PIXELS);
    let mut labels = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.local_epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            images.clear();
            labels.clear();
            for &i in chunk {
                images.extend_from_slice(data.image(i));
                labels.push(data.labels()[i]);
            }
            let (_, grads) = arch.loss_and_gradients_raw(&params, &images, &labels);
            sgd_momentum_step(&mut params, &grads, &mut velocity, cfg)?;
        }
    }
    Ok((params, n))
}

const EVAL_CHUNK: usize = 500;

/// Fraction of rows whose argmax prediction (ties to the lowest class) equals the label.
pub fn evaluate_accuracy(
    arch: &CnnArch,
    params: &ModelParams,
    test: &LabeledSet,
) -> Result<f64, NnError> {
    arch.check_params(params)?;
    if test.is_empty() {
        return Err(NnError::EmptyDataset);
    }
    let mut correct = 0usize;
    let all = test.images().data();
    for start in (0..test.len()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(test.len());
        let images = &all[start * IMAGE_PIXELS..end * IMAGE_PIXELS];
        let cache = arch.forward_cached(params, images, end - start);
        correct += cache
            .logp
            .chunks(NUM_CLASSES)
            .zip(&test.labels()[start..end])
            .filter(|(row, &l)| argmax(row) == l as usize)
            .count();
    }
    Ok(correct as f64 / test.len() as f64)
}

/// Batch tensor view helper for callers outside the training loop.
pub fn batch_tensor(images: Vec<f64>) -> Result<Tensor, TensorError> {
    let n = images.len() / IMAGE_PIXELS;
    Tensor::new(vec![n, 1, IMAGE_SIDE, IMAGE_SIDE], images)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar(v: f64) -> ModelParams {
        ModelParams::new(vec![("w".into(), Tensor::full(&[1], v))]).unwrap()
    }

    fn cfg(lr: f64, m: f64) -> TrainConfig {
        TrainConfig {
            learning_rate: lr,
            momentum: m,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn one_momentum_step_by_hand() {
        // v' = 0.5*0 + 0.5 = 0.5 ; w' = 1 - 0.01*0.5 = 0.995
        let mut w = scalar(1.0);
        let mut v = scalar(0.0);
        sgd_momentum_step(&mut w, &scalar(0.5), &mut v, &cfg(0.01, 0.5)).unwrap();
        assert!((v.flatten()[0] - 0.5).abs() < 1e-15);
        assert!((w.flatten()[0] - 0.995).abs() < 1e-15);
    }

    #[test]
    fn two_momentum_steps_by_hand() {
        // v1 = 1, w1 = -0.01 ; v2 = 0.5 + 1 = 1.5, w2 = -0.01 - 0.015 = -0.025
        let mut w = scalar(0.0);
        let mut v = scalar(0.0);
        let c = cfg(0.01, 0.5);
        sgd_momentum_step(&mut w, &scalar(1.0), &mut v, &c).unwrap();
        sgd_momentum_step(&mut w, &scalar(1.0), &mut v, &c).unwrap();
        assert!((v.flatten()[0] - 1.5).abs() < 1e-15);
        assert!((w.flatten()[0] + 0.025).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let arch = CnnArch::shrunken();
        let p0 = arch.init_params(3);
        let mut p = p0.clone();
        let mut v = p.zeros_like();
        sgd_momentum_step(&mut p, &p0.zeros_like(), &mut v, &TrainConfig::default()).unwrap();
        assert!(p.bit_eq(&p0));
    }

    #[test]
    fn step_rejects_layout_mismatch() {
        let mut w = scalar(0.0);
        let mut v = CnnArch::shrunken().zero_params();
        assert!(sgd_momentum_step(&mut w, &scalar(1.0), &mut v, &TrainConfig::default()).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(cfg(-0.1, 0.5).validate().is_err());
        assert!(TrainConfig {
            batch_size: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            local_epochs: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
