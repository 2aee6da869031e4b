//! Learning-rate schedules, SGD and Adam.
//!
//! Weight decay is L2, folded into the gradient before the step.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("schedule index must be >= 1, got {0}")]
    Domain(u64),
    #[error("parameter and gradient lengths differ ({params} vs {grads})")]
    Shape { params: usize, grads: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum ScheduleMode {
    Constant,
    /// `lr / sqrt(t)`
    InverseSqrt,
    /// Multiply by `factor` once `t` has passed each milestone.
    EpochDecay { milestones: Vec<u64>, factor: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    /// Run configs replace this with their own `lr`.
    #[serde(default)]
    pub base_lr: f64,
    #[serde(flatten)]
    pub mode: ScheduleMode,
}

impl Schedule {
    pub fn constant(base_lr: f64) -> Self {
        Self {
            base_lr,
            mode: ScheduleMode::Constant,
        }
    }

    pub fn inverse_sqrt(base_lr: f64) -> Self {
        Self {
            base_lr,
            mode: ScheduleMode::InverseSqrt,
        }
    }

    /// Tenfold decay after epochs 6 and 9.
    pub fn epoch_decay_default(base_lr: f64) -> Self {
        Self {
            base_lr,
            mode: ScheduleMode::EpochDecay {
                milestones: vec![6, 9],
                factor: 0.1,
            },
        }
    }

    /// Learning rate at step or epoch `t` (1-based).
    pub fn lr_at(&self, t: u64) -> Result<f64, OptimError> {
        if t < 1 {
            return Err(OptimError::Domain(t));
        }
        Ok(match &self.mode {
            ScheduleMode::Constant => self.base_lr,
            ScheduleMode::InverseSqrt => self.base_lr / (t as f64).sqrt(),
            ScheduleMode::EpochDecay { milestones, factor } => {
                let passed = milestones.iter().filter(|&&m| t > m).count();
                self.base_lr * factor.powi(passed as i32)
            }
        })
    }
}

fn check_shape(params: &[f64], grads: &[f64]) -> Result<(), OptimError> {
    if params.len() != grads.len() {
        return Err(OptimError::Shape {
            params: params.len(),
            grads: grads.len(),
        });
    }
    Ok(())
}

/// `p <- p - lr * (g + weight_decay * p)`
pub fn sgd_step(
    params: &mut [f64],
    grads: &[f64],
    lr: f64,
    weight_decay: f64,
) -> Result<(), OptimError> {
    check_shape(params, grads)?;
    for (p, &g) in params.iter_mut().zip(grads) {
        *p -= lr * (g + weight_decay * *p);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Self {
            config,
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// Bias-corrected Adam with L2 weight decay added to the gradient.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut [f64],
    grads: &[f64],
    lr: f64,
    weight_decay: f64,
) -> Result<(), OptimError> {
    check_shape(params, grads)?;
    if state.len() != params.len() {
        return Err(OptimError::Shape {
            params: params.len(),
            grads: state.len(),
        });
    }
    state.step += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);
    for i in 0..params.len() {
        let g = grads[i] + weight_decay * params[i];
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Optimizer for rows that only exist for the duration of one batch.
///
/// Embedding rows and their step sizes are not kept in full precision between
/// batches, so Adam moments for them are scoped to the batch as well: each
/// call is a fresh first Adam step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RowOptimizer {
    Sgd,
    Adam,
}

impl RowOptimizer {
    pub fn step(
        self,
        params: &mut [f64],
        grads: &[f64],
        lr: f64,
        weight_decay: f64,
        adam: AdamConfig,
    ) -> Result<(), OptimError> {
        match self {
            RowOptimizer::Sgd => sgd_step(params, grads, lr, weight_decay),
            RowOptimizer::Adam => {
                let mut state = AdamState::new(params.len(), adam);
                adam_step(&mut state, params, grads, lr, weight_decay)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        let s = Schedule::inverse_sqrt(1.0);
        assert_eq!(s.lr_at(4).unwrap(), 0.5);
        assert_eq!(s.lr_at(1).unwrap(), 1.0);
        assert_eq!(s.lr_at(0), Err(OptimError::Domain(0)));
        let e = Schedule::epoch_decay_default(0.001);
        assert_eq!(e.lr_at(6).unwrap(), 0.001);
        assert!((e.lr_at(7).unwrap() - 0.0001).abs() < 1e-18);
        assert!((e.lr_at(9).unwrap() - 0.0001).abs() < 1e-18);
        assert!((e.lr_at(10).unwrap() - 0.00001).abs() < 1e-18);
        assert!((e.lr_at(15).unwrap() - 0.00001).abs() < 1e-18);
        assert_eq!(Schedule::constant(0.3).lr_at(1000).unwrap(), 0.3);
    }

    #[test]
    fn inverse_sqrt_partial_sums() {
        let s = Schedule::inverse_sqrt(1.0);
        let mut sum = 0.0;
        let mut next_check = 1u64;
        for t in 1..=1_000_000u64 {
            sum += s.lr_at(t).unwrap();
            if t == next_check {
                assert!(sum <= 2.0 * (t as f64).sqrt(), "t={t} sum={sum}");
                next_check *= 10;
            }
        }
        assert!(sum <= 2.0 * 1000.0);
    }

    #[test]
    fn sgd_examples() {
        let mut p = [1.0];
        sgd_step(&mut p, &[2.0], 0.5, 0.0).unwrap();
        assert_eq!(p[0], 0.0);
        let mut p = [1.0];
        sgd_step(&mut p, &[0.0], 0.5, 1.0).unwrap();
        assert_eq!(p[0], 0.5);
        let eta = 0.25;
        let mut p = [0.8];
        sgd_step(&mut p, &[2.0 * (0.8 - 0.5)], eta, 0.0).unwrap();
        assert!((p[0] - (0.8 - eta * 2.0 * 0.3)).abs() < 1e-15);
        assert!(sgd_step(&mut p, &[1.0, 2.0], 0.1, 0.0).is_err());
    }

    #[test]
    fn adam_first_step() {
        // Scalar oracle of the recurrence: m = 0.1 * g, v = 0.001 * g^2,
        // m_hat = g, v_hat = g^2, update = lr * g / (|g| + eps).
        let g = 0.1f64;
        let lr = 0.001;
        let expected = -lr * g / (g + 1e-8);
        let mut st = AdamState::new(1, AdamConfig::default());
        let mut p = [0.0];
        adam_step(&mut st, &mut p, &[g], lr, 0.0).unwrap();
        assert!((p[0] - expected).abs() < 1e-15, "{} vs {expected}", p[0]);
        assert!(p[0] < 0.0 && p[0] > -0.001);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut st = AdamState::new(3, AdamConfig::default());
        let mut p = [0.3, -0.2, 1.0];
        for _ in 0..10 {
            adam_step(&mut st, &mut p, &[0.0; 3], 0.01, 0.0).unwrap();
        }
        assert_eq!(p, [0.3, -0.2, 1.0]);
    }

    #[test]
    fn adam_first_step_is_bounded_and_opposes_gradient() {
        for &g in &[1e-6, -1e-3, 0.5, -7.0, 1e6] {
            let mut st = AdamState::new(1, AdamConfig::default());
            let mut p = [0.0];
            adam_step(&mut st, &mut p, &[g], 0.01, 0.0).unwrap();
            assert!(p[0].abs() <= 0.01 * (1.0 + 1e-12));
            assert!(p[0].signum() == -g.signum());
        }
    }

    #[test]
    fn row_optimizer_adam_is_fresh_each_call() {
        let mut a = [0.0];
        RowOptimizer::Adam
            .step(&mut a, &[0.3], 0.01, 0.0, AdamConfig::default())
            .unwrap();
        let first = a[0];
        RowOptimizer::Adam
            .step(&mut a, &[0.3], 0.01, 0.0, AdamConfig::default())
            .unwrap();
        assert!((a[0] - 2.0 * first).abs() < 1e-15);
    }
}
