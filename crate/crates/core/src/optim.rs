//! Optimizers: momentum SGD with a cosine-to-zero learning-rate schedule
//! for network weights, and bias-corrected adaptive moments for mixture
//! logits.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{Tensor, WdMode, WeightStore};

/// Learning-rate schedule. Only the cosine decay is implemented; the enum
/// exists so configs name it explicitly.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Cosine,
}

/// Training hyperparameters for one schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f32,
    pub weight_decay: f32,
    pub schedule: Schedule,
    pub seed: u64,
}

impl TrainHyper {
    /// Standalone (ground-truth) schedule.
    pub fn oracle(seed: u64) -> Self {
        Self {
            epochs: 150,
            batch_size: 128,
            lr0: 0.025,
            momentum: 0.9,
            weight_decay: 3e-4,
            schedule: Schedule::Cosine,
            seed,
        }
    }

    /// Root supernet schedule.
    pub fn supernet_root(seed: u64) -> Self {
        Self {
            epochs: 300,
            weight_decay: 1e-4,
            ..Self::oracle(seed)
        }
    }

    /// Transferred-child fine-tuning schedule.
    pub fn supernet_child(seed: u64) -> Self {
        Self {
            epochs: 50,
            ..Self::supernet_root(seed)
        }
    }

    pub fn validate(&self, train_size: usize) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "lr0 must be positive, got {}",
                self.lr0
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if self.batch_size > train_size {
            return Err(Error::InvalidConfig(format!(
                "batch_size {} exceeds train split size {}",
                self.batch_size, train_size
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// lr at step `t` of `total`: lr0 * 0.5 * (1 + cos(pi t / total)), evaluated
/// in f64 and truncated to f32 so every build agrees on the value.
pub fn cosine_lr(lr0: f64, t: usize, total: usize) -> f32 {
    debug_assert!(t < total, "step {t} outside horizon {total}");
    (lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t as f64 / total as f64).cos())) as f32
}

/// Momentum buffers, created lazily so an update only ever touches the
/// tensors it saw gradients for.
#[derive(Debug, Clone, Default)]
pub struct OptState {
    momentum: BTreeMap<String, Tensor>,
}

impl OptState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn buffers(&self) -> &BTreeMap<String, Tensor> {
        &self.momentum
    }

    pub fn insert(&mut self, name: String, buf: Tensor) {
        self.momentum.insert(name, buf);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.momentum.get(name)
    }

    fn buffer(&mut self, name: &str, shape: &[usize]) -> &mut Tensor {
        self.momentum
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(shape.to_vec()))
    }
}

/// One momentum-SGD step over every tensor present in `grads`:
/// v <- mu v + g + wd w; w <- w - lr v. Weight decay is masked per tensor
/// by its WdMode (diag scales skip it entirely, affine maps skip the bias
/// column).
pub fn sgd_apply(
    weights: &mut WeightStore,
    state: &mut OptState,
    grads: &BTreeMap<String, Tensor>,
    wd_modes: &BTreeMap<String, WdMode>,
    lr: f32,
    momentum: f32,
    weight_decay: f32,
) -> Result<()> {
    for (name, g) in grads {
        let mode = *wd_modes
            .get(name)
            .ok_or_else(|| Error::MissingTensor { name: name.clone() })?;
        let w = weights.get_mut(name).ok_or_else(|| Error::MissingTensor {
            name: name.clone(),
        })?;
        if w.shape != g.shape {
            return Err(Error::ShapeMismatch {
                name: name.clone(),
                expected: w.shape.clone(),
                got: g.shape.clone(),
            });
        }
        let v = state.buffer(name, &w.shape);
        sgd_tensor(w, v, g, mode, lr, momentum, weight_decay);
    }
    Ok(())
}

fn sgd_tensor(
    w: &mut Tensor,
    v: &mut Tensor,
    g: &Tensor,
    mode: WdMode,
    lr: f32,
    momentum: f32,
    weight_decay: f32,
) {
    let cols = match mode {
        WdMode::SkipLastColumn => *w.shape.last().unwrap(),
        _ => 0,
    };
    for idx in 0..w.data.len() {
        let wd = match mode {
            WdMode::Full => weight_decay,
            WdMode::None => 0.0,
            WdMode::SkipLastColumn => {
                if idx % cols == cols - 1 {
                    0.0
                } else {
                    weight_decay
                }
            }
        };
        let vn = momentum * v.data[idx] + g.data[idx] + wd * w.data[idx];
        v.data[idx] = vn;
        w.data[idx] -= lr * vn;
    }
}

pub const ALPHA_LR: f32 = 3e-4;
pub const ALPHA_BETA1: f32 = 0.5;
pub const ALPHA_BETA2: f32 = 0.999;
pub const ALPHA_WD: f32 = 1e-3;
pub const ALPHA_EPS: f32 = 1e-8;

/// Adaptive-moment state for the mixture logits, shaped like alpha.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaAdam {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub t: u64,
}

impl AlphaAdam {
    pub fn new(alpha: &[Vec<f32>]) -> Self {
        Self {
            m: alpha.iter().map(|a| vec![0.0; a.len()]).collect(),
            v: alpha.iter().map(|a| vec![0.0; a.len()]).collect(),
            t: 0,
        }
    }

    /// One update: g <- grad + wd alpha (decay folded into the gradient),
    /// bias-corrected first/second moments, alpha <- alpha - lr m^ / (sqrt(v^) + eps).
    pub fn step(&mut self, alpha: &mut [Vec<f32>], grad: &[Vec<f32>]) {
        self.t += 1;
        let c1 = (1.0 - f64::from(ALPHA_BETA1).powi(self.t as i32)) as f32;
        let c2 = (1.0 - f64::from(ALPHA_BETA2).powi(self.t as i32)) as f32;
        for (k, a) in alpha.iter_mut().enumerate() {
            for (o, av) in a.iter_mut().enumerate() {
                let g = grad[k][o] + ALPHA_WD * *av;
                let m = ALPHA_BETA1 * self.m[k][o] + (1.0 - ALPHA_BETA1) * g;
                let v = ALPHA_BETA2 * self.v[k][o] + (1.0 - ALPHA_BETA2) * g * g;
                self.m[k][o] = m;
                self.v[k][o] = v;
                let mhat = m / c1;
                let vhat = v / c2;
                *av -= ALPHA_LR * mhat / (vhat.sqrt() + ALPHA_EPS);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        let lr0 = 0.025;
        assert_eq!(cosine_lr(lr0, 0, 100), lr0 as f32);
        let tail = cosine_lr(lr0, 99_999, 100_000);
        assert!(tail > 0.0 && tail < 1e-8, "tail lr {tail}");
        let mid = cosine_lr(lr0, 50, 100);
        assert!((f64::from(mid) - lr0 * 0.5).abs() < 1e-9);
    }

    #[test]
    fn cosine_monotone_decreasing() {
        let mut last = f32::INFINITY;
        for t in 0..200 {
            let lr = cosine_lr(0.025, t, 200);
            assert!(lr < last);
            last = lr;
        }
    }

    #[test]
    fn single_step_matches_hand_computation() {
        // Quadratic L = w^2 / 2 at w = 2: g = 2. One step with v0 = 0.
        let mut w = Tensor {
            shape: vec![1],
            data: vec![2.0],
        };
        let mut v = Tensor::zeros(vec![1]);
        let g = Tensor {
            shape: vec![1],
            data: vec![2.0],
        };
        let (lr, mu, wd) = (0.025f32, 0.9f32, 0.01f32);
        sgd_tensor(&mut w, &mut v, &g, WdMode::Full, lr, mu, wd);
        let v_expect = mu * 0.0 + 2.0 + wd * 2.0;
        let w_expect = 2.0 - lr * v_expect;
        assert_eq!(v.data[0], v_expect);
        assert_eq!(w.data[0], w_expect);

        // Second step: the buffer now carries history.
        let w1 = w.data[0];
        sgd_tensor(&mut w, &mut v, &g, WdMode::Full, lr, mu, wd);
        let v2 = mu * v_expect + 2.0 + wd * w1;
        assert_eq!(v.data[0], v2);
        assert_eq!(w.data[0], w1 - lr * v2);
    }

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let mut w = Tensor {
            shape: vec![2, 2],
            data: vec![1.0, -2.0, 3.5, 0.25],
        };
        let before = w.data.clone();
        let mut v = Tensor::zeros(vec![2, 2]);
        let g = Tensor::zeros(vec![2, 2]);
        sgd_tensor(&mut w, &mut v, &g, WdMode::Full, 0.025, 0.9, 0.0);
        assert_eq!(w.data, before);
        assert!(v.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn bias_column_skips_decay() {
        // Shape (2, 3): last column is the bias.
        let mut w = Tensor {
            shape: vec![2, 3],
            data: vec![1.0; 6],
        };
        let mut v = Tensor::zeros(vec![2, 3]);
        let g = Tensor::zeros(vec![2, 3]);
        sgd_tensor(&mut w, &mut v, &g, WdMode::SkipLastColumn, 1.0, 0.0, 0.1);
        for r in 0..2 {
            assert_eq!(w.data[r * 3], 0.9);
            assert_eq!(w.data[r * 3 + 1], 0.9);
            assert_eq!(w.data[r * 3 + 2], 1.0);
        }
    }

    #[test]
    fn decay_mode_none_leaves_weights() {
        let mut w = Tensor {
            shape: vec![3],
            data: vec![1.0, 2.0, 3.0],
        };
        let mut v = Tensor::zeros(vec![3]);
        let g = Tensor::zeros(vec![3]);
        sgd_tensor(&mut w, &mut v, &g, WdMode::None, 1.0, 0.0, 0.5);
        assert_eq!(w.data, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let mut alpha = vec![vec![0.0f32, 0.0]];
        let mut opt = AlphaAdam::new(&alpha);
        let grad = vec![vec![2.0f32, -0.5]];
        opt.step(&mut alpha, &grad);
        // With zero alpha the decay term vanishes; bias correction makes the
        // first update lr * g / (|g| + eps) = roughly lr * sign(g).
        assert!((alpha[0][0] + ALPHA_LR).abs() < 1e-9, "got {}", alpha[0][0]);
        assert!((alpha[0][1] - ALPHA_LR).abs() < 1e-9, "got {}", alpha[0][1]);
        assert_eq!(opt.t, 1);
    }

    #[test]
    fn hyper_validation() {
        let h = TrainHyper::oracle(0);
        assert!(h.validate(2048).is_ok());
        assert!(h.validate(100).is_err());
        let mut bad = h;
        bad.lr0 = 0.0;
        assert!(bad.validate(2048).is_err());
        bad = h;
        bad.batch_size = 0;
        assert!(bad.validate(2048).is_err());
        bad = h;
        bad.momentum = 1.0;
        assert!(bad.validate(2048).is_err());
        bad = h;
        bad.weight_decay = -0.1;
        assert!(bad.validate(2048).is_err());
    }

    #[test]
    fn default_schedules() {
        let o = TrainHyper::oracle(7);
        assert_eq!((o.epochs, o.batch_size), (150, 128));
        assert_eq!(o.lr0, 0.025);
        assert_eq!(o.weight_decay, 3e-4);
        let r = TrainHyper::supernet_root(7);
        assert_eq!(r.epochs, 300);
        assert_eq!(r.weight_decay, 1e-4);
        let c = TrainHyper::supernet_child(7);
        assert_eq!(c.epochs, 50);
        assert_eq!(c.weight_decay, 1e-4);
        assert_eq!(c.seed, 7);
    }
}
