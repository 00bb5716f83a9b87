//! Feature enhancement and mean prediction: a stack of channel-gated
//! residual units followed by a lightweight linear head.
//!
//! Each unit runs a two-layer transform with a learnable ELU/Tanh mixture
//! activation, fuses it with the input through a sigmoid gate, and
//! recalibrates channels with the same squeeze-style gate the encoder uses.
//! Channel width is preserved through every unit.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Bound, ParamSpec, Tape, Var};
use crate::encoder::{gate_hidden_width, Pooling};
use crate::error::{Error, Result};

/// Stack dimensions. `layers: 0` degenerates to a linear model on the
/// encoded channels, which is useful in tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackConfig {
    pub layers: usize,
    pub hidden: usize,
    pub ca_reduction: usize,
}

impl Default for StackConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            hidden: 64,
            ca_reduction: 8,
        }
    }
}

impl StackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers > 0 && self.hidden == 0 {
            return Err(Error::Config("stack hidden width must be positive".into()));
        }
        if self.ca_reduction == 0 {
            return Err(Error::Config("ca_reduction must be positive".into()));
        }
        Ok(())
    }

    /// Width of the head input: stack width, or the raw channel count when
    /// the stack is empty.
    pub fn head_input(&self, channels: usize) -> usize {
        if self.layers > 0 {
            self.hidden
        } else {
            channels
        }
    }
}

/// Trainable-parameter shapes for the stack and head. `channels` is the
/// encoder output width M.
pub fn param_specs(cfg: &StackConfig, channels: usize) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    let d = cfg.hidden;
    if cfg.layers > 0 {
        specs.push(ParamSpec::uniform("proj/w", channels, d));
        specs.push(ParamSpec::zero("proj/b", 1, d));
    }
    let gate_hidden = gate_hidden_width(d, cfg.ca_reduction);
    for l in 0..cfg.layers {
        specs.push(ParamSpec::uniform(format!("unit{l}/w1"), d, d));
        specs.push(ParamSpec::zero(format!("unit{l}/b1"), 1, d));
        specs.push(ParamSpec::uniform(format!("unit{l}/w2"), d, d));
        specs.push(ParamSpec::zero(format!("unit{l}/b2"), 1, d));
        specs.push(ParamSpec::uniform(format!("unit{l}/wg"), d, d));
        specs.push(ParamSpec::zero(format!("unit{l}/bg"), 1, d));
        // alpha = sigmoid(logit); zero keeps the mixture neutral at 0.5
        specs.push(ParamSpec::zero(format!("unit{l}/alpha"), 1, 1));
        specs.push(ParamSpec::uniform(format!("unit{l}/ca_w1"), d, gate_hidden));
        specs.push(ParamSpec::zero(format!("unit{l}/ca_b1"), 1, gate_hidden));
        specs.push(ParamSpec::uniform(format!("unit{l}/ca_w2"), gate_hidden, d));
        specs.push(ParamSpec::zero(format!("unit{l}/ca_b2"), 1, d));
    }
    specs.push(ParamSpec::uniform("head/w", cfg.head_input(channels), 1));
    specs.push(ParamSpec::zero("head/b", 1, 1));
    specs
}

/// Scalar reference for the learnable mixture activation:
/// alpha * ELU(u) + (1 - alpha) * Tanh(u).
pub fn learnable_activation(u: f64, alpha: f64) -> f64 {
    alpha * Activation::Elu.apply(u) + (1.0 - alpha) * Activation::Tanh.apply(u)
}

/// Mixture activation on the tape; `alpha` is a 1x1 node in (0,1).
fn mixture_activation(tape: &mut Tape, u: Var, alpha: Var) -> Result<Var> {
    let elu = tape.act(u, Activation::Elu);
    let tanh = tape.act(u, Activation::Tanh);
    let one = tape.constant(crate::autodiff::Tensor::scalar(1.0));
    let complement = tape.sub(one, alpha)?;
    let a_part = tape.mul_scalar(elu, alpha)?;
    let t_part = tape.mul_scalar(tanh, complement)?;
    tape.add(a_part, t_part)
}

/// Gated residual: r = (1 - gamma) . h + gamma . phi_alpha(f) computed as
/// h + gamma . (phi - h), with f the two-layer transform of h.
fn gated_residual(tape: &mut Tape, bound: &Bound, l: usize, h: Var) -> Result<Var> {
    let w1 = bound.var(&format!("unit{l}/w1"));
    let b1 = bound.var(&format!("unit{l}/b1"));
    let w2 = bound.var(&format!("unit{l}/w2"));
    let b2 = bound.var(&format!("unit{l}/b2"));
    let wg = bound.var(&format!("unit{l}/wg"));
    let bg = bound.var(&format!("unit{l}/bg"));
    let alpha_logit = bound.var(&format!("unit{l}/alpha"));

    let pre = tape.affine(h, w1, b1)?;
    let inner = tape.act(pre, Activation::Elu);
    let f = tape.affine(inner, w2, b2)?;

    let gamma_pre = tape.affine(h, wg, bg)?;
    let gamma = tape.act(gamma_pre, Activation::Sigmoid);

    let alpha = tape.act(alpha_logit, Activation::Sigmoid);
    let phi = mixture_activation(tape, f, alpha)?;

    let delta = tape.sub(phi, h)?;
    let gated = tape.mul(gamma, delta)?;
    tape.add(h, gated)
}

/// One full unit: gated residual then per-layer channel recalibration.
pub fn unit_forward(
    tape: &mut Tape,
    bound: &Bound,
    l: usize,
    h: Var,
    pooling: &mut Pooling,
) -> Result<Var> {
    let r = gated_residual(tape, bound, l, h)?;
    let z = pooling.pooled(tape, l + 1, r)?;
    let hidden = tape.affine(
        z,
        bound.var(&format!("unit{l}/ca_w1")),
        bound.var(&format!("unit{l}/ca_b1")),
    )?;
    let hidden = tape.act(hidden, Activation::Relu);
    let gate_pre = tape.affine(
        hidden,
        bound.var(&format!("unit{l}/ca_w2")),
        bound.var(&format!("unit{l}/ca_b2")),
    )?;
    let gate = tape.act(gate_pre, Activation::Sigmoid);
    tape.mul_row(r, gate)
}

/// Stack forward to the per-sample mean: projection (when layers >= 1),
/// the units in sequence, then the linear head.
pub fn forward_mean(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &StackConfig,
    encoded: Var,
    pooling: &mut Pooling,
) -> Result<Var> {
    let mut h = if cfg.layers > 0 {
        tape.affine(encoded, bound.var("proj/w"), bound.var("proj/b"))?
    } else {
        encoded
    };
    for l in 0..cfg.layers {
        h = unit_forward(tape, bound, l, h, pooling)?;
    }
    tape.affine(h, bound.var("head/w"), bound.var("head/b"))
}
