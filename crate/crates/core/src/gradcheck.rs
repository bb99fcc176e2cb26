//! Finite-difference verification of every differentiable operation.
//!
//! Each registered case builds a scalar from random inputs on a fresh tape.
//! Reverse-mode gradients are compared with central differences of the same
//! scalar, input by input.

use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::losses::{
    center_loss_batch, cross_entropy_batch, CenterBank, CenterLossForm, LossVector,
};
use crate::network::{Activation, Architecture, ModelParams};
use crate::numerics::{finite_diff, relative_error, Tape, Tensor, Var};
use crate::rng::seeded;
use crate::taskweights::{
    grad_l4_full, grad_weighted_total, record_l4, record_weighted_total, WeightGrad,
    WeightModuleState,
};

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckOptions {
    pub instances: usize,
    pub eps: f64,
    pub threshold: f64,
    /// Tolerance for the closed-form weight-module gradients against the tape.
    pub closed_form_threshold: f64,
    /// Fault injection: perturbs the analytic gradient of the named case.
    pub corrupt: Option<String>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            instances: 100,
            eps: 1e-5,
            threshold: 1e-5,
            closed_form_threshold: 1e-12,
            corrupt: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpReport {
    pub name: String,
    pub instances: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub ops: Vec<OpReport>,
    pub threshold: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.ops.iter().all(|o| o.passed)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.ops
            .iter()
            .filter(|o| !o.passed)
            .map(|o| o.name.as_str())
            .collect()
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for o in &self.ops {
            let verdict = if o.passed { "pass" } else { "FAIL" };
            writeln!(
                f,
                "{:<28} {:>4} instances  max rel err {:.3e}  {verdict}",
                o.name, o.instances, o.max_rel_error
            )?;
        }
        let n_fail = self.failures().len();
        write!(
            f,
            "{} ops checked, {n_fail} failed (threshold {:.0e})",
            self.ops.len(),
            self.threshold
        )
    }
}

type Forward = Box<dyn Fn(&mut Tape, &[Tensor]) -> Result<(Var, Vec<Var>)>>;

struct Case {
    name: &'static str,
    inputs: Vec<Tensor>,
    forward: Forward,
}

fn gauss(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Values in [0.5, 2]: safe for ln, sqrt and recip.
fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(0.5..2.0)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Magnitudes in [0.1, 1.1] with random sign, clear of the relu kink.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 } * rng.random_range(0.1..1.1))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

fn labels(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..k)).collect()
}

fn params(tape: &mut Tape, xs: &[Tensor]) -> Vec<Var> {
    xs.iter().map(|x| tape.param(x.clone())).collect()
}

/// Contracts a tensor output with fixed random coefficients so that every
/// output element contributes to the checked scalar.
fn contract(tape: &mut Tape, out: Var, coef: &Tensor) -> Result<Var> {
    if tape.value(out).rank() == 0 {
        return Ok(out);
    }
    let c = coef.reshape(tape.value(out).shape())?;
    let m = tape.mul_const(out, c)?;
    tape.sum(m)
}

fn unary(
    name: &'static str,
    x: Tensor,
    coef: Tensor,
    op: fn(&mut Tape, Var) -> Result<Var>,
) -> Case {
    Case {
        name,
        inputs: vec![x],
        forward: Box::new(move |tape, xs| {
            let v = params(tape, xs);
            let out = op(tape, v[0])?;
            Ok((contract(tape, out, &coef)?, v))
        }),
    }
}

fn binary(
    name: &'static str,
    a: Tensor,
    b: Tensor,
    coef: Tensor,
    op: fn(&mut Tape, Var, Var) -> Result<Var>,
) -> Case {
    Case {
        name,
        inputs: vec![a, b],
        forward: Box::new(move |tape, xs| {
            let v = params(tape, xs);
            let out = op(tape, v[0], v[1])?;
            Ok((contract(tape, out, &coef)?, v))
        }),
    }
}

fn primitive_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let n = rng.random_range(1..5);
    let m = rng.random_range(1..5);
    let k = rng.random_range(1..5);
    let mut cases = vec![
        binary(
            "matmul",
            gauss(rng, &[n, k]),
            gauss(rng, &[k, m]),
            gauss(rng, &[n * m]),
            |t, a, b| t.matmul(a, b),
        ),
        binary(
            "add_bias",
            gauss(rng, &[n, m]),
            gauss(rng, &[m]),
            gauss(rng, &[n * m]),
            |t, a, b| t.add_bias(a, b),
        ),
        binary(
            "add",
            gauss(rng, &[n, m]),
            gauss(rng, &[n, m]),
            gauss(rng, &[n * m]),
            |t, a, b| t.add(a, b),
        ),
        binary(
            "sub",
            gauss(rng, &[n, m]),
            gauss(rng, &[n, m]),
            gauss(rng, &[n * m]),
            |t, a, b| t.sub(a, b),
        ),
        binary(
            "mul",
            gauss(rng, &[n, m]),
            gauss(rng, &[n, m]),
            gauss(rng, &[n * m]),
            |t, a, b| t.mul(a, b),
        ),
    ];
    let c: f64 = StandardNormal.sample(rng);
    let shift = gauss(rng, &[n, m]);
    let factor = gauss(rng, &[n, m]);
    let coef = gauss(rng, &[n * m]);
    let x = gauss(rng, &[n, m]);
    let (coef2, coef3) = (coef.clone(), coef.clone());
    cases.push(Case {
        name: "scale",
        inputs: vec![x.clone()],
        forward: Box::new(move |tape, xs| {
            let v = params(tape, xs);
            let out = tape.scale(v[0], c)?;
            Ok((contract(tape, out, &coef)?, v))
        }),
    });
    cases.push(Case {
        name: "add_const",
        inputs: vec![x.clone()],
        forward: Box::new(move |tape, xs| {
            let v = params(tape, xs);
            let out = tape.add_const(v[0], shift.clone())?;
            Ok((contract(tape, out, &coef2)?, v))
        }),
    });
    cases.push(Case {
        name: "mul_const",
        inputs: vec![x],
        forward: Box::new(move |tape, xs| {
            let v = params(tape, xs);
            let out = tape.mul_const(v[0], factor.clone())?;
            Ok((contract(tape, out, &coef3)?, v))
        }),
    });
    let c = |rng: &mut ChaCha8Rng| gauss(rng, &[n * m]);
    cases.extend([
        unary("relu", away_from_zero(rng, &[n, m]), c(rng), |t, a| {
            t.relu(a)
        }),
        unary("tanh", gauss(rng, &[n, m]), c(rng), |t, a| t.tanh(a)),
        unary("exp", gauss(rng, &[n, m]), c(rng), |t, a| t.exp(a)),
        unary("ln", positive(rng, &[n, m]), c(rng), |t, a| t.ln(a)),
        unary("sqrt", positive(rng, &[n, m]), c(rng), |t, a| t.sqrt(a)),
        unary("recip", positive(rng, &[n, m]), c(rng), |t, a| t.recip(a)),
        unary("square", gauss(rng, &[n, m]), c(rng), |t, a| t.square(a)),
        unary("sum", gauss(rng, &[n, m]), c(rng), |t, a| t.sum(a)),
        unary("row_sums", gauss(rng, &[n, m]), gauss(rng, &[n]), |t, a| {
            t.row_sums(a)
        }),
        unary(
            "mean_rows",
            gauss(rng, &[n, m]),
            gauss(rng, &[m]),
            |t, a| t.mean_rows(a),
        ),
        unary("softmax", gauss(rng, &[n, m]), c(rng), |t, a| t.softmax(a)),
        unary("log_softmax", gauss(rng, &[n, m]), c(rng), |t, a| {
            t.log_softmax(a)
        }),
        unary("reshape", gauss(rng, &[n, m]), c(rng), |t, a| {
            let len = t.value(a).len();
            t.reshape(a, vec![len])
        }),
    ]);
    let n_rows = rng.random_range(1..6);
    let rows = labels(rng, n_rows, n);
    let coef = gauss(rng, &[rows.len() * m]);
    cases.push(Case {
        name: "gather_rows",
        inputs: vec![gauss(rng, &[n, m])],
        forward: Box::new(move |tape, xs| {
            let v = params(tape, xs);
            let out = tape.gather_rows(v[0], rows.clone())?;
            Ok((contract(tape, out, &coef)?, v))
        }),
    });
    let cols = labels(rng, n, m);
    let coef = gauss(rng, &[n]);
    cases.push(Case {
        name: "pick_per_row",
        inputs: vec![gauss(rng, &[n, m])],
        forward: Box::new(move |tape, xs| {
            let v = params(tape, xs);
            let out = tape.pick_per_row(v[0], cols.clone())?;
            Ok((contract(tape, out, &coef)?, v))
        }),
    });
    cases
}

fn random_state(rng: &mut ChaCha8Rng, t: usize, d: usize) -> WeightModuleState {
    WeightModuleState {
        psi: gauss(rng, &[t, d]).scale(0.5),
        bias: gauss(rng, &[t]).scale(0.5),
        learning_rate: 1.0,
        update_bias: true,
    }
}

fn random_losses(rng: &mut ChaCha8Rng, t: usize) -> LossVector {
    LossVector::new((0..t).map(|_| rng.random_range(0.2..3.0)).collect()).expect("positive losses")
}

fn composite_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let n = rng.random_range(1..6);
    let k = rng.random_range(2..5);
    let d = rng.random_range(1..4);
    let mut cases = Vec::new();

    let ys = labels(rng, n, k);
    let y = ys.clone();
    cases.push(Case {
        name: "cross_entropy",
        inputs: vec![gauss(rng, &[n, k])],
        forward: Box::new(move |tape, xs| {
            let v = params(tape, xs);
            Ok((cross_entropy_batch(tape, v[0], &y)?, v))
        }),
    });
    for (name, form) in [
        ("center_loss.squared_halved", CenterLossForm::SquaredHalved),
        ("center_loss.literal_norm", CenterLossForm::LiteralNorm),
    ] {
        let bank = CenterBank {
            centers: gauss(rng, &[k, d]),
            rate: 0.5,
        };
        let y = ys.clone();
        cases.push(Case {
            name,
            inputs: vec![gauss(rng, &[n, d])],
            forward: Box::new(move |tape, xs| {
                let v = params(tape, xs);
                Ok((center_loss_batch(tape, v[0], &bank, &y, form)?, v))
            }),
        });
    }
    let bank = CenterBank {
        centers: gauss(rng, &[k, d]),
        rate: 0.5,
    };
    let alpha = rng.random_range(0.001..1.0);
    let y = ys.clone();
    cases.push(Case {
        name: "verification_loss",
        inputs: vec![gauss(rng, &[n, d]), gauss(rng, &[d, k])],
        forward: Box::new(move |tape, xs| {
            let v = params(tape, xs);
            let logits = tape.matmul(v[0], v[1])?;
            let ce = cross_entropy_batch(tape, logits, &y)?;
            let c = center_loss_batch(tape, v[0], &bank, &y, CenterLossForm::SquaredHalved)?;
            let c = tape.scale(c, alpha)?;
            Ok((tape.add(ce, c)?, v))
        }),
    });

    let t = rng.random_range(2..5);
    for (name, naive) in [("l4", false), ("weighted_total", true)] {
        let state = random_state(rng, t, d);
        let rows = rng.random_range(1..4);
        let z = gauss(rng, &[rows, d]);
        let losses = random_losses(rng, t);
        cases.push(Case {
            name,
            inputs: vec![state.psi, state.bias],
            forward: Box::new(move |tape, xs| {
                let v = params(tape, xs);
                let out = if naive {
                    record_weighted_total(tape, v[0], v[1], &z, &losses)?
                } else {
                    record_l4(tape, v[0], v[1], &z, &losses)?
                };
                Ok((out, v))
            }),
        });
    }

    let arch = Architecture {
        input_dim: rng.random_range(1..4),
        trunk: vec![rng.random_range(1..4)],
        branch_hidden: vec![rng.random_range(1..4)],
        bottleneck: d,
        classes: vec![k, k],
        activation: Activation::Tanh,
        dropout_rate: 0.0,
    };
    let template = ModelParams::new(&arch, rng.random()).expect("valid architecture");
    let x = gauss(rng, &[n, arch.input_dim]);
    let bank = CenterBank {
        centers: gauss(rng, &[k, d]),
        rate: 0.5,
    };
    let weights = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
    let y = ys;
    cases.push(Case {
        name: "network",
        inputs: template
            .named_tensors()
            .into_iter()
            .map(|(_, t)| t.clone())
            .collect(),
        forward: Box::new(move |tape, xs| {
            let mut model = template.clone();
            for (p, x) in model.tensors_mut().into_iter().zip(xs) {
                *p = x.clone();
            }
            let vars = model.register(tape);
            let input = tape.constant(x.clone());
            let z = model.forward_trunk(tape, &vars, input, false, 0)?;
            let mut total = None;
            for (task, w) in weights.iter().enumerate() {
                let head = model.forward_branch(tape, &vars, task, z, false, 0)?;
                let mut loss = cross_entropy_batch(tape, head.logits, &y)?;
                if task == 0 {
                    let c = center_loss_batch(
                        tape,
                        head.embedding,
                        &bank,
                        &y,
                        CenterLossForm::SquaredHalved,
                    )?;
                    loss = tape.add(loss, c)?;
                }
                let term = tape.scale(loss, *w)?;
                total = Some(match total {
                    None => term,
                    Some(acc) => tape.add(acc, term)?,
                });
            }
            Ok((total.expect("two heads"), vars.flat()))
        }),
    });
    cases
}

/// Names of every registered case, primitives first.
pub fn registered_ops() -> Vec<&'static str> {
    let mut rng = seeded(0, 0);
    let mut names: Vec<&'static str> = primitive_cases(&mut rng).iter().map(|c| c.name).collect();
    names.extend(composite_cases(&mut rng).iter().map(|c| c.name));
    names.push("l4.closed_form");
    names.push("weighted_total.closed_form");
    names
}

fn check_case(case: &Case, opts: &GradcheckOptions) -> Result<f64> {
    let mut tape = Tape::new();
    let (out, vars) = (case.forward)(&mut tape, &case.inputs)?;
    let grads = tape.backward(out)?;
    let mut worst = 0.0f64;
    for (i, x) in case.inputs.iter().enumerate() {
        let mut analytic = grads.wrt(vars[i]).clone();
        if i == 0 && opts.corrupt.as_deref() == Some(case.name) {
            analytic.data_mut()[0] += 1e-3;
        }
        let numeric = finite_diff(
            |probe| {
                let mut inputs = case.inputs.clone();
                inputs[i] = probe.clone();
                let mut t = Tape::new();
                let (out, _) = (case.forward)(&mut t, &inputs)?;
                t.value(out).item()
            },
            x,
            opts.eps,
        )?;
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

fn stack(g: &WeightGrad) -> Tensor {
    let mut v = g.psi.data().to_vec();
    v.extend_from_slice(g.bias.data());
    Tensor::vector(v)
}

/// Closed-form weight-module gradients against reverse mode through the tape.
fn check_closed_form(rng: &mut ChaCha8Rng, naive: bool, opts: &GradcheckOptions) -> Result<f64> {
    let t = rng.random_range(2..6);
    let d = rng.random_range(1..6);
    let state = random_state(rng, t, d);
    let rows = rng.random_range(1..5);
    let z = gauss(rng, &[rows, d]);
    let losses = random_losses(rng, t);
    let mut tape = Tape::new();
    let psi = tape.param(state.psi.clone());
    let bias = tape.param(state.bias.clone());
    let (out, mut closed) = if naive {
        (
            record_weighted_total(&mut tape, psi, bias, &z, &losses)?,
            stack(&grad_weighted_total(&z, &state, &losses)?),
        )
    } else {
        (
            record_l4(&mut tape, psi, bias, &z, &losses)?,
            stack(&grad_l4_full(&z, &state, &losses)?),
        )
    };
    let name = if naive {
        "weighted_total.closed_form"
    } else {
        "l4.closed_form"
    };
    if opts.corrupt.as_deref() == Some(name) {
        closed.data_mut()[0] += 1e-3;
    }
    let g = tape.backward(out)?;
    let reverse = stack(&WeightGrad {
        psi: g.wrt(psi).clone(),
        bias: g.wrt(bias).clone(),
    });
    Ok(relative_error(&closed, &reverse))
}

/// Runs every registered case `opts.instances` times.
pub fn run_gradcheck(seed: u64, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    if opts.instances == 0 {
        return Err(Error::Argument(
            "gradcheck needs at least one instance".into(),
        ));
    }
    let names = registered_ops();
    let mut worst = vec![0.0f64; names.len()];
    for inst in 0..opts.instances {
        let mut rng = seeded(seed, inst as u64);
        let mut cases = primitive_cases(&mut rng);
        cases.extend(composite_cases(&mut rng));
        for (w, case) in worst.iter_mut().zip(&cases) {
            let err = check_case(case, opts)
                .map_err(|e| Error::Numeric(format!("{}: {e}", case.name)))?;
            *w = w.max(err);
        }
        let n = cases.len();
        worst[n] = worst[n].max(check_closed_form(&mut rng, false, opts)?);
        worst[n + 1] = worst[n + 1].max(check_closed_form(&mut rng, true, opts)?);
    }
    let closed = [names.len() - 2, names.len() - 1];
    let ops = names
        .iter()
        .zip(worst)
        .enumerate()
        .map(|(i, (name, err))| {
            let limit = if closed.contains(&i) {
                opts.closed_form_threshold
            } else {
                opts.threshold
            };
            OpReport {
                name: name.to_string(),
                instances: opts.instances,
                max_rel_error: err,
                passed: err <= limit,
            }
        })
        .collect();
    Ok(GradcheckReport {
        ops,
        threshold: opts.threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::PRIMITIVES;

    #[test]
    fn every_primitive_is_registered() {
        let names = registered_ops();
        for p in PRIMITIVES {
            assert!(names.contains(p), "primitive `{p}` has no gradcheck case");
        }
    }

    #[test]
    fn primitive_cases_record_their_op() {
        let mut rng = seeded(3, 0);
        for case in primitive_cases(&mut rng) {
            let mut tape = Tape::new();
            (case.forward)(&mut tape, &case.inputs).unwrap();
            assert!(tape.primitives_used().contains(&case.name), "{}", case.name);
        }
    }

    #[test]
    fn small_run_passes() {
        let opts = GradcheckOptions {
            instances: 5,
            ..Default::default()
        };
        let report = run_gradcheck(11, &opts).unwrap();
        assert!(report.passed(), "{report}");
        assert_eq!(report.ops.len(), registered_ops().len());
    }

    #[test]
    fn corrupted_gradient_is_named() {
        for target in ["tanh", "network", "l4.closed_form"] {
            let opts = GradcheckOptions {
                instances: 2,
                corrupt: Some(target.into()),
                ..Default::default()
            };
            let report = run_gradcheck(5, &opts).unwrap();
            assert_eq!(report.failures(), vec![target]);
            assert!(report.to_string().contains(target));
        }
    }
}
