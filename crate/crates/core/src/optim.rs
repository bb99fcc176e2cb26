//! RMSprop with a momentum buffer, decoupled weight decay, and a step
//! learning-rate schedule.

use crate::config::{OptimizerConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const RMS_EPS: f64 = 1e-10;

/// Running mean-square accumulators and momentum buffers, one pair per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub acc: Vec<Tensor>,
    pub buf: Vec<Tensor>,
}

impl OptimState {
    pub fn zeros_like<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let acc: Vec<Tensor> = params
            .into_iter()
            .map(|p| Tensor::zeros(p.shape()))
            .collect();
        OptimState {
            buf: acc.clone(),
            acc,
        }
    }
}

/// Base rate divided by 10 for every milestone already reached.
pub fn lr_schedule(iteration: usize, config: &TrainConfig) -> f64 {
    let passed = config
        .milestones()
        .iter()
        .filter(|&&m| iteration >= m)
        .count();
    config.optimizer.base_lr / 10f64.powi(passed as i32)
}

/// One in-place RMSprop update:
///
/// ```text
/// acc ← ρ·acc + (1−ρ)·g²
/// buf ← μ·buf + lr·g / √(acc + 1e-10)
/// p   ← p − buf − lr·λ·p
/// ```
pub fn rmsprop_step(
    param: &mut Tensor,
    grad: &Tensor,
    acc: &mut Tensor,
    buf: &mut Tensor,
    lr: f64,
    config: &OptimizerConfig,
) -> Result<()> {
    if param.shape() != grad.shape() || acc.shape() != grad.shape() || buf.shape() != grad.shape() {
        return Err(Error::dim("rmsprop_step", param.shape(), grad.shape()));
    }
    let (rho, mu, decay) = (config.rho, config.momentum, config.weight_decay);
    let g = grad.data();
    let a = acc.data_mut();
    for (a, &g) in a.iter_mut().zip(g) {
        *a = rho * *a + (1.0 - rho) * g * g;
    }
    let a = acc.data();
    for ((b, &g), &a) in buf.data_mut().iter_mut().zip(g).zip(a) {
        *b = mu * *b + lr * g / (a + RMS_EPS).sqrt();
    }
    for (p, &b) in param.data_mut().iter_mut().zip(buf.data()) {
        *p = *p - b - lr * decay * *p;
    }
    Ok(())
}
