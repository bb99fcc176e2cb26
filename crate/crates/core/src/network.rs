//! Hard-parameter-sharing network: one fully connected trunk feeding one
//! branch per task. Each branch ends in a linear bottleneck embedding and a
//! linear classifier on top of that embedding.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::rng::seeded;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn code(self) -> f64 {
        match self {
            Activation::Relu => 0.0,
            Activation::Tanh => 1.0,
            Activation::Identity => 2.0,
        }
    }

    pub fn from_code(code: f64) -> Option<Self> {
        match code as i64 {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Tanh),
            2 => Some(Activation::Identity),
            _ => None,
        }
    }

    fn apply(self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Identity => Ok(x),
        }
    }
}

/// Uniform Xavier/Glorot initialization of a `fan_in × fan_out` weight matrix.
pub fn xavier_init(fan_in: usize, fan_out: usize, seed: u64) -> Result<Tensor> {
    if fan_in == 0 || fan_out == 0 {
        return Err(Error::Argument(format!(
            "xavier_init needs positive fans, got {fan_in}x{fan_out}"
        )));
    }
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit).map_err(|e| Error::Argument(e.to_string()))?;
    let mut rng = seeded(seed, 0x5a41);
    let data = (0..fan_in * fan_out)
        .map(|_| dist.sample(&mut rng))
        .collect();
    Tensor::matrix(fan_in, fan_out, data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    pub fn new(fan_in: usize, fan_out: usize, seed: u64) -> Result<Self> {
        Ok(Dense {
            weight: xavier_init(fan_in, fan_out, seed)?,
            bias: Tensor::zeros(&[fan_out]),
        })
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Branch {
    pub hidden: Vec<Dense>,
    pub bottleneck: Dense,
    pub classifier: Dense,
}

impl Branch {
    pub fn num_classes(&self) -> usize {
        self.classifier.fan_out()
    }

    pub fn embedding_dim(&self) -> usize {
        self.bottleneck.fan_out()
    }

    fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.hidden
            .iter()
            .chain([&self.bottleneck, &self.classifier])
    }
}

/// Layer widths for [`ModelParams::new`].
#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub input_dim: usize,
    pub trunk: Vec<usize>,
    pub branch_hidden: Vec<usize>,
    pub bottleneck: usize,
    /// Number of classes per task; its length is the task count.
    pub classes: Vec<usize>,
    pub activation: Activation,
    pub dropout_rate: f64,
}

/// Network parameters Θ: the shared trunk and one branch per task.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub trunk: Vec<Dense>,
    pub branches: Vec<Branch>,
    pub activation: Activation,
    pub dropout_rate: f64,
    input_dim: usize,
}

/// Tape handles for every parameter, in [`ModelParams::named_tensors`] order.
#[derive(Clone, Debug)]
pub struct ParamVars {
    trunk: Vec<(Var, Var)>,
    branches: Vec<BranchVars>,
}

#[derive(Clone, Debug)]
struct BranchVars {
    hidden: Vec<(Var, Var)>,
    bottleneck: (Var, Var),
    classifier: (Var, Var),
}

impl ParamVars {
    pub fn flat(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for (w, b) in &self.trunk {
            out.extend([*w, *b]);
        }
        for br in &self.branches {
            for (w, b) in br.hidden.iter().chain([&br.bottleneck, &br.classifier]) {
                out.extend([*w, *b]);
            }
        }
        out
    }

    pub fn trunk_vars(&self) -> Vec<Var> {
        self.trunk.iter().flat_map(|(w, b)| [*w, *b]).collect()
    }

    pub fn branch_vars(&self, task: usize) -> Vec<Var> {
        let br = &self.branches[task];
        br.hidden
            .iter()
            .chain([&br.bottleneck, &br.classifier])
            .flat_map(|(w, b)| [*w, *b])
            .collect()
    }
}

/// Output of one branch: bottleneck embedding and class logits, one row per sample.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    pub embedding: Var,
    pub logits: Var,
}

#[derive(Clone, Debug)]
pub struct ForwardResult {
    /// Trunk output Z, one row per sample.
    pub z: Var,
    /// One entry per task; `None` for tasks not requested.
    pub heads: Vec<Option<HeadOutput>>,
}

impl ModelParams {
    pub fn new(arch: &Architecture, seed: u64) -> Result<Self> {
        if arch.classes.is_empty() {
            return Err(Error::Argument(
                "at least one task branch is required".into(),
            ));
        }
        if !(0.0..1.0).contains(&arch.dropout_rate) {
            return Err(Error::Argument(format!(
                "dropout rate {} outside [0,1)",
                arch.dropout_rate
            )));
        }
        let mut layer_seed = 0u64;
        let mut next = |fan_in, fan_out| {
            layer_seed += 1;
            Dense::new(fan_in, fan_out, crate::rng::derive_seed(seed, layer_seed))
        };
        let mut trunk = Vec::new();
        let mut width = arch.input_dim;
        for &w in &arch.trunk {
            trunk.push(next(width, w)?);
            width = w;
        }
        let z_dim = width;
        let mut branches = Vec::new();
        for &k in &arch.classes {
            let mut hidden = Vec::new();
            let mut width = z_dim;
            for &w in &arch.branch_hidden {
                hidden.push(next(width, w)?);
                width = w;
            }
            let bottleneck = next(width, arch.bottleneck)?;
            let classifier = next(arch.bottleneck, k)?;
            branches.push(Branch {
                hidden,
                bottleneck,
                classifier,
            });
        }
        Self::from_parts(
            trunk,
            branches,
            arch.activation,
            arch.dropout_rate,
            arch.input_dim,
        )
    }

    /// Assembles a model from existing layers, checking that the widths chain.
    pub fn from_parts(
        trunk: Vec<Dense>,
        branches: Vec<Branch>,
        activation: Activation,
        dropout_rate: f64,
        input_dim: usize,
    ) -> Result<Self> {
        let mut width = input_dim;
        for layer in &trunk {
            if layer.fan_in() != width || layer.bias.len() != layer.fan_out() {
                return Err(Error::dim("trunk", &[width], layer.weight.shape()));
            }
            width = layer.fan_out();
        }
        for br in &branches {
            let mut w = width;
            for layer in br.layers() {
                if layer.fan_in() != w || layer.bias.len() != layer.fan_out() {
                    return Err(Error::dim("branch", &[w], layer.weight.shape()));
                }
                w = layer.fan_out();
            }
        }
        Ok(ModelParams {
            trunk,
            branches,
            activation,
            dropout_rate,
            input_dim,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn z_dim(&self) -> usize {
        self.trunk.last().map_or(self.input_dim, Dense::fan_out)
    }

    pub fn num_tasks(&self) -> usize {
        self.branches.len()
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (l, d) in self.trunk.iter().enumerate() {
            out.push((format!("trunk.{l}.weight"), &d.weight));
            out.push((format!("trunk.{l}.bias"), &d.bias));
        }
        for (t, br) in self.branches.iter().enumerate() {
            for (l, d) in br.hidden.iter().enumerate() {
                out.push((format!("branch.{t}.hidden.{l}.weight"), &d.weight));
                out.push((format!("branch.{t}.hidden.{l}.bias"), &d.bias));
            }
            out.push((
                format!("branch.{t}.bottleneck.weight"),
                &br.bottleneck.weight,
            ));
            out.push((format!("branch.{t}.bottleneck.bias"), &br.bottleneck.bias));
            out.push((
                format!("branch.{t}.classifier.weight"),
                &br.classifier.weight,
            ));
            out.push((format!("branch.{t}.classifier.bias"), &br.classifier.bias));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for d in &mut self.trunk {
            out.extend([&mut d.weight, &mut d.bias]);
        }
        for br in &mut self.branches {
            for d in br
                .hidden
                .iter_mut()
                .chain([&mut br.bottleneck, &mut br.classifier])
            {
                out.extend([&mut d.weight, &mut d.bias]);
            }
        }
        out
    }

    pub fn checksum(&self) -> u64 {
        self.named_tensors()
            .iter()
            .fold(0u64, |h, (_, t)| h.rotate_left(7) ^ t.checksum())
    }

    /// Records every parameter on `tape` as a differentiable leaf.
    pub fn register(&self, tape: &mut Tape) -> ParamVars {
        let mut reg = |d: &Dense| (tape.param(d.weight.clone()), tape.param(d.bias.clone()));
        let trunk = self.trunk.iter().map(&mut reg).collect();
        let branches = self
            .branches
            .iter()
            .map(|br| BranchVars {
                hidden: br.hidden.iter().map(&mut reg).collect(),
                bottleneck: reg(&br.bottleneck),
                classifier: reg(&br.classifier),
            })
            .collect();
        ParamVars { trunk, branches }
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Result<()> {
        let shape = tape.value(x).shape();
        if shape.len() != 2 || shape[1] != self.input_dim {
            return Err(Error::dim("forward", shape, &[0, self.input_dim]));
        }
        Ok(())
    }

    /// Shared trunk: `x` (rows = samples) to Z.
    pub fn forward_trunk(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        x: Var,
        train_mode: bool,
        seed: u64,
    ) -> Result<Var> {
        self.check_input(tape, x)?;
        let mut h = x;
        for (l, (w, b)) in vars.trunk.iter().enumerate() {
            h = tape.matmul(h, *w)?;
            h = tape.add_bias(h, *b)?;
            h = self.activation.apply(tape, h)?;
            h = self.dropout(tape, h, train_mode, seed, l as u64)?;
        }
        Ok(h)
    }

    /// One task branch applied to rows of Z.
    pub fn forward_branch(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        task: usize,
        z: Var,
        train_mode: bool,
        seed: u64,
    ) -> Result<HeadOutput> {
        let br = vars
            .branches
            .get(task)
            .ok_or_else(|| Error::Argument(format!("task {task} has no branch")))?;
        let mut h = z;
        for (l, (w, b)) in br.hidden.iter().enumerate() {
            h = tape.matmul(h, *w)?;
            h = tape.add_bias(h, *b)?;
            h = self.activation.apply(tape, h)?;
            h = self.dropout(
                tape,
                h,
                train_mode,
                seed,
                1000 * (task as u64 + 1) + l as u64,
            )?;
        }
        let e = tape.matmul(h, br.bottleneck.0)?;
        let embedding = tape.add_bias(e, br.bottleneck.1)?;
        let l = tape.matmul(embedding, br.classifier.0)?;
        let logits = tape.add_bias(l, br.classifier.1)?;
        Ok(HeadOutput { embedding, logits })
    }

    /// Trunk once, then every requested branch from the same Z.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        x: Var,
        task_set: &[usize],
        train_mode: bool,
        seed: u64,
    ) -> Result<ForwardResult> {
        if task_set.is_empty() {
            return Err(Error::Argument("forward needs at least one task".into()));
        }
        let z = self.forward_trunk(tape, vars, x, train_mode, seed)?;
        let mut heads = vec![None; self.num_tasks()];
        for &t in task_set {
            heads[t] = Some(self.forward_branch(tape, vars, t, z, train_mode, seed)?);
        }
        Ok(ForwardResult { z, heads })
    }

    /// Evaluation-mode forward of one branch: (embeddings, logits).
    pub fn infer(&self, x: &Tensor, task: usize) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let vars = self.register_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let z = self.forward_trunk(&mut tape, &vars, xv, false, 0)?;
        let head = self.forward_branch(&mut tape, &vars, task, z, false, 0)?;
        Ok((
            tape.value(head.embedding).clone(),
            tape.value(head.logits).clone(),
        ))
    }

    /// Evaluation-mode trunk output.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.register_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let z = self.forward_trunk(&mut tape, &vars, xv, false, 0)?;
        Ok(tape.value(z).clone())
    }

    fn register_frozen(&self, tape: &mut Tape) -> ParamVars {
        let mut reg = |d: &Dense| {
            (
                tape.constant(d.weight.clone()),
                tape.constant(d.bias.clone()),
            )
        };
        let trunk = self.trunk.iter().map(&mut reg).collect();
        let branches = self
            .branches
            .iter()
            .map(|br| BranchVars {
                hidden: br.hidden.iter().map(&mut reg).collect(),
                bottleneck: reg(&br.bottleneck),
                classifier: reg(&br.classifier),
            })
            .collect();
        ParamVars { trunk, branches }
    }

    fn dropout(
        &self,
        tape: &mut Tape,
        h: Var,
        train_mode: bool,
        seed: u64,
        layer: u64,
    ) -> Result<Var> {
        if !train_mode || self.dropout_rate == 0.0 {
            return Ok(h);
        }
        let keep = 1.0 - self.dropout_rate;
        let shape = tape.value(h).shape().to_vec();
        let mut rng = seeded(seed, 0xd0_0000 + layer);
        let n: usize = shape.iter().product();
        let mask = (0..n)
            .map(|_| {
                if rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        tape.mul_const(h, Tensor::new(shape, mask)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arch(dropout: f64) -> Architecture {
        Architecture {
            input_dim: 5,
            trunk: vec![8, 6],
            branch_hidden: vec![4],
            bottleneck: 3,
            classes: vec![4, 5, 6],
            activation: Activation::Relu,
            dropout_rate: dropout,
        }
    }

    fn input(rows: usize) -> Tensor {
        let data = (0..rows * 5)
            .map(|i| ((i * 37 % 11) as f64 - 5.0) / 3.0)
            .collect();
        Tensor::matrix(rows, 5, data).unwrap()
    }

    #[test]
    fn xavier_is_deterministic_and_bounded() {
        let a = xavier_init(3, 3, 9).unwrap();
        assert_eq!(a, xavier_init(3, 3, 9).unwrap());
        assert_ne!(a, xavier_init(3, 3, 10).unwrap());
        assert!(a.data().iter().all(|x| x.abs() <= 1.0));
        assert!(xavier_init(0, 3, 1).is_err());
    }

    #[test]
    fn xavier_variance_matches_uniform_moment() {
        let t = xavier_init(200, 500, 4).unwrap();
        let n = t.len() as f64;
        let mean = t.sum() / n;
        let var = t.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let expected = 2.0 / 700.0;
        assert!((var / expected - 1.0).abs() < 0.05, "{var} vs {expected}");
    }

    #[test]
    fn biases_start_at_zero() {
        let m = ModelParams::new(&arch(0.0), 1).unwrap();
        for (name, t) in m.named_tensors() {
            if name.ends_with("bias") {
                assert!(t.data().iter().all(|&x| x == 0.0), "{name}");
            }
        }
    }

    #[test]
    fn eval_mode_ignores_dropout_seed() {
        let m = ModelParams::new(&arch(0.5), 1).unwrap();
        let run = |seed| {
            let mut tape = Tape::new();
            let v = m.register(&mut tape);
            let x = tape.constant(input(4));
            let r = m.forward(&mut tape, &v, x, &[0, 1], false, seed).unwrap();
            tape.value(r.heads[1].unwrap().logits).clone()
        };
        assert_eq!(run(1), run(2));
    }

    #[test]
    fn identity_trunk_passes_input_through() {
        let trunk = vec![Dense {
            weight: Tensor::identity(5),
            bias: Tensor::zeros(&[5]),
        }];
        let br = Branch {
            hidden: vec![],
            bottleneck: Dense::new(5, 2, 1).unwrap(),
            classifier: Dense::new(2, 3, 2).unwrap(),
        };
        let m = ModelParams::from_parts(trunk, vec![br], Activation::Identity, 0.0, 5).unwrap();
        let x = input(3);
        assert_eq!(m.features(&x).unwrap(), x);
    }

    #[test]
    fn requested_branches_share_one_z() {
        let m = ModelParams::new(&arch(0.0), 3).unwrap();
        let mut tape = Tape::new();
        let v = m.register(&mut tape);
        let x = tape.constant(input(4));
        let before = tape.len();
        let r = m.forward(&mut tape, &v, x, &[0, 2], true, 0).unwrap();
        assert!(r.heads[1].is_none());
        // One trunk evaluation: z is recorded before either branch starts.
        assert!(r.z.index() >= before && r.z.index() < r.heads[0].unwrap().embedding.index());
        let (_, l0) = m.infer(&input(4), 0).unwrap();
        assert_eq!(tape.value(r.heads[0].unwrap().logits), &l0);
    }

    #[test]
    fn width_mismatch_is_reported() {
        let m = ModelParams::new(&arch(0.0), 3).unwrap();
        let bad = Tensor::zeros(&[2, 4]);
        assert!(matches!(m.infer(&bad, 0), Err(Error::Dimension { .. })));
    }

    #[test]
    fn gradients_are_isolated_per_branch() {
        let m = ModelParams::new(&arch(0.0), 11).unwrap();
        let mut tape = Tape::new();
        let v = m.register(&mut tape);
        let x = tape.constant(input(6));
        let r = m.forward(&mut tape, &v, x, &[0, 1, 2], false, 0).unwrap();
        let loss = tape.sum(r.heads[1].unwrap().logits).unwrap();
        let sq = tape.square(loss).unwrap();
        let g = tape.backward(sq).unwrap();
        for t in [0, 2] {
            for var in v.branch_vars(t) {
                assert!(g.wrt(var).data().iter().all(|&x| x == 0.0));
            }
        }
        assert!(v.trunk_vars().iter().any(|&var| g.wrt(var).max_abs() > 0.0));
        assert!(v
            .branch_vars(1)
            .iter()
            .any(|&var| g.wrt(var).max_abs() > 0.0));
    }

    #[test]
    fn dropout_preserves_expectation() {
        let m = ModelParams::new(
            &Architecture {
                trunk: vec![16],
                ..arch(0.5)
            },
            5,
        )
        .unwrap();
        let x = input(1);
        let clean = m.features(&x).unwrap();
        let seeds = 4000;
        let mut mean = vec![0.0; clean.len()];
        for s in 0..seeds {
            let mut tape = Tape::new();
            let v = m.register(&mut tape);
            let xv = tape.constant(x.clone());
            let z = m.forward_trunk(&mut tape, &v, xv, true, s).unwrap();
            for (a, b) in mean.iter_mut().zip(tape.value(z).data()) {
                *a += b / seeds as f64;
            }
        }
        for (got, want) in mean.iter().zip(clean.data()) {
            // Inverted dropout: per-seed value is 0 or 2*want, so the std error is want/sqrt(seeds).
            assert!((got - want).abs() <= 4.0 * want.abs() / (seeds as f64).sqrt() + 1e-12);
        }
    }
}
