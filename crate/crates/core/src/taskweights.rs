//! Dynamic task weights.
//!
//! A linear layer over the trunk features Z followed by a softmax produces
//! one weight per task. Its parameters Ψ = (ψ, b) are trained on
//! `L4 = Σ w_i / L_i` with the task losses held constant, which moves weight
//! mass toward the task whose loss is currently largest. The naive baseline
//! instead descends `Σ w_i L_i`, which moves mass toward the easiest task.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossVector;
use crate::numerics::{softmax, Tape, Tensor, Var};

/// Losses at or below this value are clamped before entering `1 / L_i`.
pub const LOSS_FLOOR: f64 = 1e-8;

/// Parameters Ψ of the weight-generating layer. Never part of the network.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightModuleState {
    /// One row ψ_i per task, `T × d_z`.
    pub psi: Tensor,
    /// One bias b_i per task.
    pub bias: Tensor,
    pub learning_rate: f64,
    /// When false only ψ moves; b stays at its initial value.
    pub update_bias: bool,
}

impl WeightModuleState {
    /// All-zero initialization, giving uniform weights.
    pub fn zeros(num_tasks: usize, z_dim: usize, learning_rate: f64) -> Result<Self> {
        if num_tasks == 0 || z_dim == 0 {
            return Err(Error::Argument(
                "weight module needs at least one task and feature".into(),
            ));
        }
        if !(learning_rate > 0.0) {
            return Err(Error::Argument(format!(
                "weight-module learning rate {learning_rate} must be positive"
            )));
        }
        Ok(WeightModuleState {
            psi: Tensor::zeros(&[num_tasks, z_dim]),
            bias: Tensor::zeros(&[num_tasks]),
            learning_rate,
            update_bias: true,
        })
    }

    pub fn num_tasks(&self) -> usize {
        self.psi.shape()[0]
    }

    pub fn z_dim(&self) -> usize {
        self.psi.shape()[1]
    }

    pub fn is_zero(&self) -> bool {
        self.psi
            .data()
            .iter()
            .chain(self.bias.data())
            .all(|&x| x == 0.0)
    }

    pub fn checksum(&self) -> u64 {
        self.psi.checksum().rotate_left(17) ^ self.bias.checksum()
    }

    fn descend(&self, grad: &WeightGrad) -> Result<Self> {
        let mut next = self.clone();
        next.psi = self.psi.sub(&grad.psi.scale(self.learning_rate))?;
        if self.update_bias {
            next.bias = self.bias.sub(&grad.bias.scale(self.learning_rate))?;
        }
        Ok(next)
    }
}

/// Which gradient of L4 drives the dynamic scheduler.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientForm {
    /// Exact gradient through the full softmax Jacobian.
    #[default]
    Full,
    /// Per-task form `(1/L_i) w_i (1 − w_i) z`, dropping softmax cross-terms.
    Diagonal,
}

#[derive(Clone, Debug, PartialEq)]
pub enum SchedulerKind {
    Static(Vec<f64>),
    DynamicL4(GradientForm),
    NaiveDynamic,
}

/// Gradient with respect to Ψ.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightGrad {
    pub psi: Tensor,
    pub bias: Tensor,
}

/// Reduces a batch of features to the single vector the weight layer sees.
///
/// The layer is linear, so averaging features equals averaging logits.
pub fn feature_vector(z: &Tensor, state: &WeightModuleState) -> Result<Tensor> {
    let v = match z.rank() {
        1 => z.clone(),
        2 => z.mean_rows()?,
        _ => return Err(Error::dim("weight_logits", z.shape(), state.psi.shape())),
    };
    if v.len() != state.z_dim() {
        return Err(Error::dim("weight_logits", z.shape(), state.psi.shape()));
    }
    Ok(v)
}

/// `f_i = ψ_i · z + b_i`, with no rectification.
pub fn weight_logits(z: &Tensor, state: &WeightModuleState) -> Result<Tensor> {
    let z = feature_vector(z, state)?;
    let d = state.z_dim();
    let logits = (0..state.num_tasks())
        .map(|i| {
            let row = &state.psi.data()[i * d..(i + 1) * d];
            row.iter().zip(z.data()).map(|(p, x)| p * x).sum::<f64>() + state.bias.data()[i]
        })
        .collect();
    Ok(Tensor::vector(logits))
}

pub fn task_weights(z: &Tensor, state: &WeightModuleState) -> Result<Tensor> {
    softmax(&weight_logits(z, state)?)
}

fn floored(losses: &LossVector) -> Vec<f64> {
    losses
        .values()
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            if l <= LOSS_FLOOR {
                warn!(
                    "task {} loss {l} clamped to {LOSS_FLOOR} in the weight update",
                    i + 1
                );
                LOSS_FLOOR
            } else {
                l
            }
        })
        .collect()
}

/// `L4 = Σ w_i / L_i`.
pub fn l4_loss(weights: &Tensor, losses: &LossVector) -> Result<f64> {
    if weights.len() != losses.len() {
        return Err(Error::Argument(format!(
            "{} weights but {} losses",
            weights.len(),
            losses.len()
        )));
    }
    if (weights.sum() - 1.0).abs() > 1e-9 {
        return Err(Error::Argument(format!(
            "weights sum to {}, not 1",
            weights.sum()
        )));
    }
    Ok(weights
        .data()
        .iter()
        .zip(floored(losses))
        .map(|(w, l)| w / l)
        .sum())
}

fn outer(coef: &[f64], z: &Tensor) -> Result<WeightGrad> {
    let mut psi = Vec::with_capacity(coef.len() * z.len());
    for &c in coef {
        psi.extend(z.data().iter().map(|x| c * x));
    }
    Ok(WeightGrad {
        psi: Tensor::matrix(coef.len(), z.len(), psi)?,
        bias: Tensor::vector(coef.to_vec()),
    })
}

fn prepare(
    z: &Tensor,
    state: &WeightModuleState,
    losses: &LossVector,
) -> Result<(Tensor, Vec<f64>)> {
    if losses.len() != state.num_tasks() {
        return Err(Error::Argument(format!(
            "{} losses for {} tasks",
            losses.len(),
            state.num_tasks()
        )));
    }
    let zv = feature_vector(z, state)?;
    let w = task_weights(&zv, state)?.into_data();
    Ok((zv, w))
}

/// `∇ψ_i = (1/L_i) w_i (1 − w_i) z`: the per-task gradient used in the
/// closed-form analysis. It ignores how ψ_i moves the other tasks' weights.
pub fn grad_l4_diagonal(
    z: &Tensor,
    state: &WeightModuleState,
    losses: &LossVector,
) -> Result<WeightGrad> {
    let (zv, w) = prepare(z, state, losses)?;
    let coef: Vec<f64> = w
        .iter()
        .zip(floored(losses))
        .map(|(w, l)| w * (1.0 - w) / l)
        .collect();
    outer(&coef, &zv)
}

/// Exact gradient of L4: `∇ψ_i = w_i (1/L_i − Σ_j w_j/L_j) z`.
pub fn grad_l4_full(
    z: &Tensor,
    state: &WeightModuleState,
    losses: &LossVector,
) -> Result<WeightGrad> {
    let (zv, w) = prepare(z, state, losses)?;
    let inv: Vec<f64> = floored(losses).iter().map(|l| 1.0 / l).collect();
    let mean: f64 = w.iter().zip(&inv).map(|(w, r)| w * r).sum();
    let coef: Vec<f64> = w.iter().zip(&inv).map(|(w, r)| w * (r - mean)).collect();
    outer(&coef, &zv)
}

/// Gradient of `Σ w_i L_i` with respect to Ψ, losses constant.
pub fn grad_weighted_total(
    z: &Tensor,
    state: &WeightModuleState,
    losses: &LossVector,
) -> Result<WeightGrad> {
    let (zv, w) = prepare(z, state, losses)?;
    let l = losses.values();
    let mean: f64 = w.iter().zip(l).map(|(w, l)| w * l).sum();
    let coef: Vec<f64> = w.iter().zip(l).map(|(w, l)| w * (l - mean)).collect();
    outer(&coef, &zv)
}

/// Closed-form `w_1 / w_2` after one diagonal-gradient step from zero
/// initialization: `exp(η (1/L_2 − 1/L_1) · ¼ · (z·z + [bias trained]))`.
///
/// With zero parameters `a_1 = a_2 = 1`, so the softmax factor is ¼.
pub fn two_task_ratio(
    loss1: f64,
    loss2: f64,
    z: &Tensor,
    state: &WeightModuleState,
) -> Result<f64> {
    if state.num_tasks() != 2 {
        return Err(Error::Usage(format!(
            "two_task_ratio needs 2 tasks, state has {}",
            state.num_tasks()
        )));
    }
    if !state.is_zero() {
        return Err(Error::Usage(
            "two_task_ratio is only valid from a zero-initialized state".into(),
        ));
    }
    let l = floored(&LossVector::new(vec![loss1, loss2])?);
    let zv = feature_vector(z, state)?;
    let zz = zv.dot(&zv)? + if state.update_bias { 1.0 } else { 0.0 };
    Ok((state.learning_rate * (1.0 / l[1] - 1.0 / l[0]) * 0.25 * zz).exp())
}

/// One scheduler update. Returns the new state and the weights it produces for `z`.
pub fn scheduler_step(
    kind: &SchedulerKind,
    z: &Tensor,
    state: &WeightModuleState,
    losses: &LossVector,
) -> Result<(WeightModuleState, Tensor)> {
    match kind {
        SchedulerKind::Static(w) => {
            validate_static(w, losses.len())?;
            Ok((state.clone(), Tensor::vector(w.clone())))
        }
        SchedulerKind::DynamicL4(form) => {
            let grad = match form {
                GradientForm::Full => grad_l4_full(z, state, losses)?,
                GradientForm::Diagonal => grad_l4_diagonal(z, state, losses)?,
            };
            let next = state.descend(&grad)?;
            let w = task_weights(z, &next)?;
            Ok((next, w))
        }
        SchedulerKind::NaiveDynamic => {
            let next = state.descend(&grad_weighted_total(z, state, losses)?)?;
            let w = task_weights(z, &next)?;
            Ok((next, w))
        }
    }
}

pub fn validate_static(weights: &[f64], num_tasks: usize) -> Result<()> {
    if weights.len() != num_tasks {
        return Err(Error::Argument(format!(
            "{} static weights for {num_tasks} tasks",
            weights.len()
        )));
    }
    if weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::Argument("static weights must be nonnegative".into()));
    }
    let s: f64 = weights.iter().sum();
    if (s - 1.0).abs() > 1e-12 {
        return Err(Error::Argument(format!("static weights sum to {s}, not 1")));
    }
    Ok(())
}

/// Records `L4(ψ, b)` on a tape for a fixed feature vector and constant losses.
pub fn record_l4(
    tape: &mut Tape,
    psi: Var,
    bias: Var,
    z: &Tensor,
    losses: &LossVector,
) -> Result<Var> {
    let inv = Tensor::vector(floored(losses).iter().map(|l| 1.0 / l).collect());
    record_weighted(tape, psi, bias, z, inv)
}

/// Records `Σ w_i(ψ, b) L_i` on a tape, losses constant.
pub fn record_weighted_total(
    tape: &mut Tape,
    psi: Var,
    bias: Var,
    z: &Tensor,
    losses: &LossVector,
) -> Result<Var> {
    record_weighted(tape, psi, bias, z, Tensor::vector(losses.values().to_vec()))
}

fn record_weighted(tape: &mut Tape, psi: Var, bias: Var, z: &Tensor, coef: Tensor) -> Result<Var> {
    let z = if z.rank() == 2 {
        z.mean_rows()?
    } else {
        z.clone()
    };
    let n = z.len();
    let zc = tape.constant(z.reshape(&[n, 1])?);
    let f = tape.matmul(psi, zc)?;
    let t = tape.value(f).len();
    let f = tape.reshape(f, vec![t])?;
    let f = tape.add(f, bias)?;
    let w = tape.softmax(f)?;
    let terms = tape.mul_const(w, coef)?;
    tape.sum(terms)
}
