//! AdamW with decoupled weight decay, cosine learning-rate annealing,
//! global gradient clipping, and a finite-difference gradient oracle.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::params::{GradSet, ParamSet};
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

/// Optimizer hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr0: f64,
    /// Floor of the cosine schedule.
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub max_grad_norm: f64,
    pub total_steps: u64,
}

impl OptimConfig {
    pub fn new(lr0: f64, total_steps: u64) -> Self {
        Self {
            lr0,
            lr_min: lr0 / 100.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            max_grad_norm: 1.0,
            total_steps,
        }
    }
}

/// Per-parameter moment accumulators plus the step counter.
#[derive(Debug, Clone)]
pub struct OptimState {
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
    step: u64,
    pub config: OptimConfig,
}

impl OptimState {
    pub fn new(params: &ParamSet, config: OptimConfig) -> Self {
        let first = params
            .iter()
            .map(|(n, t)| (n.clone(), Tensor::zeros(t.rows(), t.cols())))
            .collect();
        let second = params
            .iter()
            .map(|(n, t)| (n.clone(), Tensor::zeros(t.rows(), t.cols())))
            .collect();
        Self {
            first,
            second,
            step: 0,
            config,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Learning rate the next `step` call will use.
    pub fn current_lr(&self) -> f64 {
        cosine_lr(
            self.step,
            self.config.total_steps,
            self.config.lr0,
            self.config.lr_min,
        )
    }

    /// One AdamW update over all parameters; returns the learning rate used.
    pub fn step(&mut self, params: &mut ParamSet, grads: &GradSet) -> Result<f64> {
        let lr = self.current_lr();
        self.step_with_lr(params, grads, lr)?;
        Ok(lr)
    }

    /// AdamW update with an explicit learning rate: decoupled weight decay,
    /// bias-corrected first/second moments, step counter incremented.
    pub fn step_with_lr(&mut self, params: &mut ParamSet, grads: &GradSet, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(t as i32);
        let bc2 = 1.0 - c.beta2.powi(t as i32);

        let names: Vec<String> = params.names().cloned().collect();
        for name in names {
            let grad = grads.get(&name).ok_or_else(|| {
                Error::Contract(format!("no gradient for parameter `{name}`"))
            })?;
            let m = self.first.get_mut(&name).ok_or_else(|| {
                Error::Contract(format!("optimizer state missing `{name}`"))
            })?;
            let v = self.second.get_mut(&name).ok_or_else(|| {
                Error::Contract(format!("optimizer state missing `{name}`"))
            })?;
            let theta = params.get_mut(&name).expect("name from params");
            if theta.shape() != grad.shape() {
                return Err(Error::Dimension(format!(
                    "gradient shape {:?} vs parameter shape {:?} for `{name}`",
                    grad.shape(),
                    theta.shape()
                )));
            }
            for i in 0..theta.len() {
                let g = grad.data()[i];
                let mi = c.beta1 * m.data()[i] + (1.0 - c.beta1) * g;
                let vi = c.beta2 * v.data()[i] + (1.0 - c.beta2) * g * g;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                let p = theta.data()[i];
                theta.data_mut()[i] =
                    p - lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * p);
            }
        }
        Ok(())
    }
}

/// Cosine-annealed learning rate. Steps past `total_steps` clamp to `lr_min`.
pub fn cosine_lr(step: u64, total_steps: u64, lr0: f64, lr_min: f64) -> f64 {
    if total_steps == 0 || step >= total_steps {
        return lr_min;
    }
    let frac = step as f64 / total_steps as f64;
    lr_min + (lr0 - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos()) / 2.0
}

/// Scale all gradients by max_norm / ||g||_2 when the global norm exceeds
/// max_norm. Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut GradSet, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        let factor = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            g.scale_assign(factor);
        }
    }
    norm
}

/// Central finite-difference comparison against an analytic gradient route.
///
/// `f` must deterministically return the scalar objective together with its
/// analytic gradients (typically via a tape backward pass). Returns the
/// maximum relative error over every scalar coordinate, with the denominator
/// max(|analytic|, |numeric|, 1e-8).
pub fn grad_check<F>(f: F, params: &ParamSet, eps: f64) -> Result<f64>
where
    F: Fn(&ParamSet) -> Result<(f64, GradSet)>,
{
    if eps <= 0.0 {
        return Err(Error::Contract("grad_check requires eps > 0".into()));
    }
    let (_, analytic) = f(params)?;
    let mut probe = params.clone();
    let mut max_rel: f64 = 0.0;
    let names: Vec<String> = params.names().cloned().collect();
    for name in &names {
        let len = params.get(name).expect("known name").len();
        for i in 0..len {
            let original = probe.get(name).unwrap().data()[i];
            probe.get_mut(name).unwrap().data_mut()[i] = original + eps;
            let f_plus = f(&probe)?.0;
            probe.get_mut(name).unwrap().data_mut()[i] = original - eps;
            let f_minus = f(&probe)?.0;
            probe.get_mut(name).unwrap().data_mut()[i] = original;

            let numeric = (f_plus - f_minus) / (2.0 * eps);
            let ana = analytic
                .get(name)
                .map(|t| t.data()[i])
                .unwrap_or(0.0);
            let denom = ana.abs().max(numeric.abs()).max(1e-8);
            max_rel = max_rel.max((numeric - ana).abs() / denom);
        }
    }
    Ok(max_rel)
}
