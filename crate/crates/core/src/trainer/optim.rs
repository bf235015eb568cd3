//! SGD with momentum, the learning-rate schedule and parameter averaging.

use crate::autodiff::Tensor;
use crate::model::Network;
use crate::{Error, Result};

/// `α·cos(7πt / 16T)`, with `t` clamped to `T`.
pub fn cosine_lr(step: u64, total: u64, base: f64) -> f64 {
    if total == 0 {
        return base;
    }
    let t = step.min(total) as f64;
    base * (7.0 * std::f64::consts::PI * t / (16.0 * total as f64)).cos()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdSettings {
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
}

/// One SGD update of every parameter.
///
/// Weights (not biases) are first shrunk by `1 − lr·weight_decay`. The
/// momentum buffer follows `v ← μv + g`, and the step direction is
/// `g + μv` with Nesterov momentum or `v` without.
pub fn sgd_step(
    net: &mut Network,
    velocity: &mut [Tensor],
    grads: &[Tensor],
    lr: f64,
    opts: SgdSettings,
) -> Result<()> {
    let count = net.params().count();
    if velocity.len() != count || grads.len() != count {
        return Err(Error::shape(
            "sgd_step",
            &[count],
            &[velocity.len(), grads.len()],
        ));
    }
    for (i, ((p, v), g)) in net
        .params_mut()
        .zip(velocity.iter_mut())
        .zip(grads)
        .enumerate()
    {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(Error::shape("sgd_step", p.shape(), g.shape()));
        }
        let is_weight = i % 2 == 0;
        let shrink = if is_weight {
            1.0 - lr * opts.weight_decay
        } else {
            1.0
        };
        for ((pj, vj), &gj) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vj = opts.momentum * *vj + gj;
            let dir = if opts.nesterov {
                gj + opts.momentum * *vj
            } else {
                *vj
            };
            *pj = *pj * shrink - lr * dir;
        }
    }
    Ok(())
}

/// `ema ← m·ema + (1 − m)·params`, componentwise.
pub fn ema_update(ema: &mut Network, params: &Network, decay: f64) -> Result<()> {
    if !(0.0..1.0).contains(&decay) {
        return Err(Error::Config(format!("EMA decay {decay} outside [0, 1)")));
    }
    if ema.architecture() != params.architecture() {
        return Err(Error::Architecture("EMA and model differ in layout".into()));
    }
    for (e, p) in ema.params_mut().zip(params.params()) {
        for (ej, &pj) in e.data_mut().iter_mut().zip(p.data()) {
            *ej = decay * *ej + (1.0 - decay) * pj;
        }
    }
    Ok(())
}
