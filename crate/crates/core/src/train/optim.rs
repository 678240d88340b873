use std::f64::consts::PI;

use patchfm_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Optimization and masking hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub grad_clip: f64,
    pub mask_ratio: f64,
    pub n_cpm: usize,
    pub seed: u64,
    /// Steps between checkpoints; `None` means `max(1, total_steps / 20)`.
    pub checkpoint_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 100_000,
            batch_size: 32,
            peak_lr: 3e-4,
            min_lr: 1e-5,
            warmup_fraction: 0.1,
            weight_decay: 0.1,
            betas: [0.9, 0.95],
            eps: 1e-8,
            grad_clip: 1.0,
            mask_ratio: 0.4,
            n_cpm: 8,
            seed: 0,
            checkpoint_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_lr > 0.0 && self.min_lr <= self.peak_lr) {
            return Err(Error::config("train.min_lr", "need 0 < min_lr <= peak_lr"));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::config("train.mask_ratio", "must lie in (0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::config("train.warmup_fraction", "must lie in [0, 1]"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if self.n_cpm == 0 {
            return Err(Error::config("train.n_cpm", "must be positive"));
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return Err(Error::config("train.betas", "must lie in [0, 1)"));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::config("train.grad_clip", "must be positive"));
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> usize {
        (self.warmup_fraction * self.total_steps as f64).round() as usize
    }

    pub fn checkpoint_interval(&self) -> usize {
        self.checkpoint_every
            .unwrap_or(self.total_steps / 20)
            .max(1)
    }
}

/// Linear warmup from 0 to `peak_lr`, then cosine decay to `min_lr` at
/// `total_steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    let warmup = cfg.warmup_steps();
    let step = step.min(cfg.total_steps);
    if step < warmup {
        return cfg.peak_lr * step as f64 / warmup as f64;
    }
    let span = cfg.total_steps - warmup;
    if span == 0 {
        return cfg.peak_lr;
    }
    let progress = (step - warmup) as f64 / span as f64;
    cfg.min_lr + 0.5 * (cfg.peak_lr - cfg.min_lr) * (1.0 + (PI * progress).cos())
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> Result<f64> {
    let sq: f64 = grads.iter().map(Tensor::sq_norm).sum();
    let norm = sq.sqrt();
    if !norm.is_finite() {
        return Err(Error::Numeric(format!("gradient norm is {norm}")));
    }
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    Ok(norm)
}

/// Moment accumulators of the adaptive optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(shapes: &[&[usize]]) -> Self {
        Self {
            step: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }
}

/// One bias-corrected adaptive-moment update with decoupled weight decay.
///
/// `decay[i]` selects which parameters are decayed (`w ← w - lr·wd·w`,
/// applied before and independently of the gradient step).
pub fn optimizer_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    decay: &[bool],
    state: &mut OptimizerState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    let n = params.len();
    if grads.len() != n || decay.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::Shape(format!(
            "{n} parameters but {} grads, {} decay flags, {} moments",
            grads.len(),
            decay.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let [b1, b2] = cfg.betas;
    let bc1 = 1.0 - b1.powi(state.step as i32);
    let bc2 = 1.0 - b2.powi(state.step as i32);
    for i in 0..n {
        let p = &mut *params[i];
        if p.shape() != grads[i].shape() || p.shape() != state.m[i].shape() {
            return Err(Error::Shape(format!(
                "parameter {i}: {:?} vs grad {:?}",
                p.shape(),
                grads[i].shape()
            )));
        }
        let shrink = if decay[i] { 1.0 - lr * cfg.weight_decay } else { 1.0 };
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        for (mj, gj) in m.iter_mut().zip(g) {
            *mj = b1 * *mj + (1.0 - b1) * gj;
        }
        let v = state.v[i].data_mut();
        for (vj, gj) in v.iter_mut().zip(g) {
            *vj = b2 * *vj + (1.0 - b2) * gj * gj;
        }
        let m = state.m[i].data();
        let v = state.v[i].data();
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + cfg.eps);
            *w = *w * shrink - lr * update;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> TrainConfig {
        TrainConfig {
            total_steps: 1000,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn schedule_landmarks() {
        let c = cfg();
        assert_eq!(lr_at(0, &c), 0.0);
        assert_eq!(lr_at(100, &c), 3e-4);
        assert!((lr_at(1000, &c) - 1e-5).abs() < 1e-18);
        assert!((lr_at(50, &c) - 1.5e-4).abs() < 1e-18);
    }

    #[test]
    fn schedule_continuous_and_monotone_after_warmup() {
        let c = cfg();
        let w = c.warmup_steps();
        assert!((lr_at(w - 1, &c) - lr_at(w, &c)).abs() <= c.peak_lr / w as f64 + 1e-18);
        for s in w..c.total_steps {
            assert!(lr_at(s + 1, &c) <= lr_at(s, &c));
        }
    }

    #[test]
    fn clipping() {
        let mut g = vec![Tensor::from_vec(vec![2.0f64.sqrt(), 0.0]), Tensor::from_vec(vec![2.0f64.sqrt()])];
        let n = clip_grad_norm(&mut g, 1.0).unwrap();
        assert!((n - 2.0).abs() < 1e-15);
        assert!((g[0].data()[0] - 2.0f64.sqrt() / 2.0).abs() < 1e-15);
        let post: f64 = g.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
        assert!((post - 1.0).abs() < 1e-12);

        let mut small = vec![Tensor::from_vec(vec![0.3, 0.4])];
        assert!((clip_grad_norm(&mut small, 1.0).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(small[0].data(), &[0.3, 0.4]);

        let mut bad = vec![Tensor::from_vec(vec![f64::NAN])];
        assert!(matches!(clip_grad_norm(&mut bad, 1.0), Err(Error::Numeric(_))));
    }

    #[test]
    fn zero_grads_without_decay_leave_weights() {
        let c = TrainConfig { weight_decay: 0.0, ..cfg() };
        let mut w = Tensor::from_vec(vec![1.0, -2.0]);
        let mut st = OptimizerState::new(&[&[2]]);
        optimizer_step(&mut [&mut w], &[Tensor::zeros(&[2])], &[true], &mut st, 0.01, &c).unwrap();
        assert_eq!(w.data(), &[1.0, -2.0]);
    }

    #[test]
    fn decoupled_decay_in_isolation() {
        let c = TrainConfig { weight_decay: 0.1, ..cfg() };
        let mut w = Tensor::from_vec(vec![1.0, -2.0]);
        let mut st = OptimizerState::new(&[&[2]]);
        optimizer_step(&mut [&mut w], &[Tensor::zeros(&[2])], &[true], &mut st, 0.01, &c).unwrap();
        assert_eq!(w.data(), &[1.0 * (1.0 - 0.001), -2.0 * (1.0 - 0.001)]);
    }

    #[test]
    fn identical_inputs_identical_update() {
        let c = cfg();
        let run = || {
            let mut w = Tensor::from_vec(vec![0.3, -0.7, 1.1]);
            let mut st = OptimizerState::new(&[&[3]]);
            for i in 0..5 {
                let g = Tensor::from_vec(vec![0.1 * i as f64, -0.2, 0.05]);
                optimizer_step(&mut [&mut w], &[g], &[true], &mut st, 1e-3, &c).unwrap();
            }
            (w, st)
        };
        assert_eq!(run(), run());
    }
}
