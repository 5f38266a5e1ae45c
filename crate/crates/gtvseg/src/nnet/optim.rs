//! SGD with Nesterov momentum under a polynomial learning-rate schedule.

use super::Tensor;
use crate::error::{Error, Result};

/// lr(t) = lr0 * (1 - t / total_steps)^power
#[derive(Debug, Clone, Copy)]
pub struct PolySchedule {
    pub lr0: f64,
    pub power: f64,
    pub total_steps: usize,
}

impl PolySchedule {
    pub fn lr(&self, t: usize) -> f64 {
        self.lr0 * (1.0 - t as f64 / self.total_steps as f64).powf(self.power)
    }
}

/// Per-parameter velocity buffers plus the schedule.
#[derive(Debug, Clone)]
pub struct OptState {
    pub velocity: Vec<Vec<f32>>,
    pub momentum: f64,
    pub schedule: PolySchedule,
}

impl OptState {
    pub fn new(params: &[&Tensor], momentum: f64, schedule: PolySchedule) -> Self {
        OptState {
            velocity: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            momentum,
            schedule,
        }
    }
}

/// One Nesterov update at step `t`:
/// v <- mu*v - lr*g;  p <- p + mu*v - lr*g
pub fn sgd_nesterov_step(
    params: &mut [&mut Tensor],
    state: &mut OptState,
    t: usize,
) -> Result<()> {
    if t >= state.schedule.total_steps {
        return Err(Error::InvalidParameter(format!(
            "step {t} is past the schedule's total_steps {}",
            state.schedule.total_steps
        )));
    }
    assert_eq!(params.len(), state.velocity.len(), "optimizer state mismatch");
    let lr = state.schedule.lr(t) as f32;
    let mu = state.momentum as f32;
    for (p, v) in params.iter_mut().zip(state.velocity.iter_mut()) {
        let g = p
            .grad
            .as_ref()
            .expect("parameter missing gradient in sgd step");
        debug_assert_eq!(g.len(), v.len());
        for i in 0..v.len() {
            let vi = mu * v[i] - lr * g[i];
            v[i] = vi;
            p.data[i] += mu * vi - lr * g[i];
        }
    }
    Ok(())
}
