//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every primitive applied through a [`Tape`] is appended as a node holding
//! its operand indices and its forward value. [`Tape::backward`] walks the
//! nodes once, in reverse recording order, and accumulates adjoints.

use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::{log_softmax_slice, softmax_slice, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a particular tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

/// Names of every differentiable primitive a tape can record.
pub const PRIMITIVES: &[&str] = &[
    "matmul",
    "add_bias",
    "add",
    "sub",
    "mul",
    "scale",
    "add_const",
    "mul_const",
    "relu",
    "tanh",
    "exp",
    "ln",
    "sqrt",
    "recip",
    "square",
    "sum",
    "row_sums",
    "mean_rows",
    "gather_rows",
    "softmax",
    "log_softmax",
    "pick_per_row",
    "reshape",
];

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    AddBias(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddConst(usize, Tensor),
    MulConst(usize, Tensor),
    Relu(usize),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Recip(usize),
    Square(usize),
    Sum(usize),
    RowSums(usize),
    MeanRows(usize),
    GatherRows(usize, Vec<usize>),
    Softmax(usize),
    LogSoftmax(usize),
    PickPerRow(usize, Vec<usize>),
    Reshape(usize, Vec<usize>),
}

impl Op {
    fn name(&self) -> Option<&'static str> {
        use Op::*;
        Some(match self {
            Leaf => return None,
            MatMul(..) => "matmul",
            AddBias(..) => "add_bias",
            Add(..) => "add",
            Sub(..) => "sub",
            Mul(..) => "mul",
            Scale(..) => "scale",
            AddConst(..) => "add_const",
            MulConst(..) => "mul_const",
            Relu(..) => "relu",
            Tanh(..) => "tanh",
            Exp(..) => "exp",
            Log(..) => "ln",
            Sqrt(..) => "sqrt",
            Recip(..) => "recip",
            Square(..) => "square",
            Sum(..) => "sum",
            RowSums(..) => "row_sums",
            MeanRows(..) => "mean_rows",
            GatherRows(..) => "gather_rows",
            Softmax(..) => "softmax",
            LogSoftmax(..) => "log_softmax",
            PickPerRow(..) => "pick_per_row",
            Reshape(..) => "reshape",
        })
    }

    fn operands(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | AddBias(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) => vec![*a, *b],
            Scale(a, _)
            | AddConst(a, _)
            | MulConst(a, _)
            | Relu(a)
            | Tanh(a)
            | Exp(a)
            | Log(a)
            | Sqrt(a)
            | Recip(a)
            | Square(a)
            | Sum(a)
            | RowSums(a)
            | MeanRows(a)
            | GatherRows(a, _)
            | Softmax(a)
            | LogSoftmax(a)
            | PickPerRow(a, _)
            | Reshape(a, _) => {
                vec![*a]
            }
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    trainable: bool,
    needs_grad: bool,
}

/// Ordered record of the primitives applied during one forward pass.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`. Every trainable leaf has one (zero when off the path).
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(Option::as_ref)
    }

    /// Gradient of a trainable leaf; panics if `v` is not one.
    pub fn wrt(&self, v: Var) -> &Tensor {
        self.get(v)
            .expect("gradient requested for a non-trainable value")
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a constant input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    /// Records a differentiable parameter.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// Primitive names recorded on this tape, in recording order, without repeats.
    pub fn primitives_used(&self) -> Vec<&'static str> {
        let mut out: Vec<&'static str> = Vec::new();
        for name in self.nodes.iter().filter_map(|n| n.op.name()) {
            if !out.contains(&name) {
                out.push(name);
            }
        }
        out
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.check(v).expect("variable from another tape");
        &self.nodes[v.index].value
    }

    fn push_leaf(&mut self, value: Tensor, trainable: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            trainable,
            needs_grad: trainable,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Usage(format!(
                "value {} is not recorded on this tape",
                v.index
            )));
        }
        Ok(v.index)
    }

    fn record(&mut self, op: Op) -> Result<Var> {
        let value = eval(&op, |i| &self.nodes[i].value)?;
        let needs_grad = op.operands().iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node {
            op,
            value,
            trainable: false,
            needs_grad,
        });
        Ok(Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.check(a)?, self.check(b)?);
        self.record(Op::MatMul(a, b))
    }

    /// Adds a bias vector to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (a, b) = (self.check(a)?, self.check(bias)?);
        self.record(Op::AddBias(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.check(a)?, self.check(b)?);
        self.record(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.check(a)?, self.check(b)?);
        self.record(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.check(a)?, self.check(b)?);
        self.record(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let a = self.check(a)?;
        self.record(Op::Scale(a, c))
    }

    pub fn add_const(&mut self, a: Var, c: Tensor) -> Result<Var> {
        let a = self.check(a)?;
        self.record(Op::AddConst(a, c))
    }

    /// Elementwise product with a constant (dropout masks, detached weights).
    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Result<Var> {
        let a = self.check(a)?;
        self.record(Op::MulConst(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let a = self.check(a)?;
        self.record(Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let a = self.check(a)?;
        self.record(Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let a = self.check(a)?;
        self.record(Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let a = self.check(a)?;
        self.record(Op::Log(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let a = self.check(a)?;
        self.record(Op::Sqrt(a))
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        let a = self.check(a)?;
        self.record(Op::Recip(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let a = self.check(a)?;
        self.record(Op::Square(a))
    }

    /// Sum of all entries, as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let a = self.check(a)?;
        self.record(Op::Sum(a))
    }

    /// Per-row sums of a matrix, giving a vector with one entry per row.
    pub fn row_sums(&mut self, a: Var) -> Result<Var> {
        let a = self.check(a)?;
        self.record(Op::RowSums(a))
    }

    /// Column-wise mean over the rows of a matrix.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let a = self.check(a)?;
        self.record(Op::MeanRows(a))
    }

    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        let a = self.check(a)?;
        self.record(Op::GatherRows(a, idx))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let a = self.check(a)?;
        self.record(Op::Softmax(a))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let a = self.check(a)?;
        self.record(Op::LogSoftmax(a))
    }

    /// Picks `a[r, cols[r]]` for each row `r`.
    pub fn pick_per_row(&mut self, a: Var, cols: Vec<usize>) -> Result<Var> {
        let a = self.check(a)?;
        self.record(Op::PickPerRow(a, cols))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let a = self.check(a)?;
        self.record(Op::Reshape(a, shape))
    }

    /// Recomputes every recorded value from the leaves.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match node.op {
                Op::Leaf => node.value.clone(),
                ref op => eval(op, |i| &values[i])?,
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Reverse-mode gradient of the single-element value `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.check(output)?;
        if self.nodes[out].value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar output, got shape {:?}",
                self.nodes[out].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[out] = Some(Tensor::full(self.nodes[out].value.shape(), 1.0));
        for i in (0..=out).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.trainable && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let y = &self.nodes[i].value;
        let val = |k: usize| &self.nodes[k].value;
        let wants = |k: usize| self.nodes[k].needs_grad;
        let mut push = |k: usize, delta: Tensor| -> Result<()> {
            if !self.nodes[k].needs_grad {
                return Ok(());
            }
            grads[k] = Some(match grads[k].take() {
                Some(acc) => acc.add(&delta)?,
                None => delta,
            });
            Ok(())
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if wants(*a) {
                    push(*a, g.matmul(&val(*b).transpose()?)?)?;
                }
                if wants(*b) {
                    push(*b, val(*a).transpose()?.matmul(g)?)?;
                }
            }
            Op::AddBias(a, b) => {
                push(*a, g.clone())?;
                if wants(*b) {
                    let (_, c) = g.rows_cols("add_bias")?;
                    let mut db = vec![0.0; c];
                    for row in g.data().chunks(c) {
                        for (d, x) in db.iter_mut().zip(row) {
                            *d += x;
                        }
                    }
                    push(*b, Tensor::new(val(*b).shape().to_vec(), db)?)?;
                }
            }
            Op::Add(a, b) => {
                push(*a, g.clone())?;
                push(*b, g.clone())?;
            }
            Op::Sub(a, b) => {
                push(*a, g.clone())?;
                push(*b, g.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    push(*a, g.mul(val(*b))?)?;
                }
                if wants(*b) {
                    push(*b, g.mul(val(*a))?)?;
                }
            }
            Op::Scale(a, c) => push(*a, g.scale(*c))?,
            Op::AddConst(a, _) => push(*a, g.clone())?,
            Op::MulConst(a, c) => push(*a, g.mul(c)?)?,
            Op::Relu(a) => push(
                *a,
                g.zip_map(val(*a), "relu", |g, x| if x > 0.0 { g } else { 0.0 })?,
            )?,
            Op::Tanh(a) => push(*a, g.zip_map(y, "tanh", |g, t| g * (1.0 - t * t))?)?,
            Op::Exp(a) => push(*a, g.mul(y)?)?,
            Op::Log(a) => push(*a, g.zip_map(val(*a), "ln", |g, x| g / x)?)?,
            Op::Sqrt(a) => push(*a, g.zip_map(y, "sqrt", |g, s| g / (2.0 * s))?)?,
            Op::Recip(a) => push(*a, g.zip_map(y, "recip", |g, r| -g * r * r)?)?,
            Op::Square(a) => push(*a, g.zip_map(val(*a), "square", |g, x| 2.0 * g * x)?)?,
            Op::Sum(a) => {
                let gs = g.item()?;
                push(*a, Tensor::full(val(*a).shape(), gs))?;
            }
            Op::RowSums(a) => {
                let (r, c) = val(*a).dims2("row_sums")?;
                let mut d = Vec::with_capacity(r * c);
                for &gr in g.data() {
                    d.extend(std::iter::repeat_n(gr, c));
                }
                push(*a, Tensor::matrix(r, c, d)?)?;
            }
            Op::MeanRows(a) => {
                let (r, c) = val(*a).dims2("mean_rows")?;
                let inv = 1.0 / r as f64;
                let mut d = Vec::with_capacity(r * c);
                for _ in 0..r {
                    d.extend(g.data().iter().map(|x| x * inv));
                }
                push(*a, Tensor::matrix(r, c, d)?)?;
            }
            Op::GatherRows(a, idx) => {
                let (_, c) = g.dims2("gather_rows")?;
                let mut d = Tensor::zeros(val(*a).shape());
                for (k, &row) in idx.iter().enumerate() {
                    let dst = &mut d.data_mut()[row * c..(row + 1) * c];
                    for (o, x) in dst.iter_mut().zip(&g.data()[k * c..(k + 1) * c]) {
                        *o += x;
                    }
                }
                push(*a, d)?;
            }
            Op::Softmax(a) => {
                let (_, c) = y.rows_cols("softmax")?;
                let mut d = Vec::with_capacity(y.len());
                for (yr, gr) in y.data().chunks(c).zip(g.data().chunks(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    d.extend(yr.iter().zip(gr).map(|(p, q)| p * (q - dot)));
                }
                push(*a, Tensor::new(y.shape().to_vec(), d)?)?;
            }
            Op::LogSoftmax(a) => {
                let (_, c) = y.rows_cols("log_softmax")?;
                let mut d = Vec::with_capacity(y.len());
                for (yr, gr) in y.data().chunks(c).zip(g.data().chunks(c)) {
                    let total: f64 = gr.iter().sum();
                    d.extend(yr.iter().zip(gr).map(|(ly, q)| q - ly.exp() * total));
                }
                push(*a, Tensor::new(y.shape().to_vec(), d)?)?;
            }
            Op::PickPerRow(a, cols) => {
                let (_, c) = val(*a).dims2("pick_per_row")?;
                let mut d = Tensor::zeros(val(*a).shape());
                for (r, (&col, &gr)) in cols.iter().zip(g.data()).enumerate() {
                    d.data_mut()[r * c + col] += gr;
                }
                push(*a, d)?;
            }
            Op::Reshape(a, _) => push(*a, g.reshape(val(*a).shape())?)?,
        }
        Ok(())
    }
}

fn eval<'a>(op: &Op, get: impl Fn(usize) -> &'a Tensor) -> Result<Tensor> {
    Ok(match op {
        Op::Leaf => unreachable!("leaves carry their own value"),
        Op::MatMul(a, b) => get(*a).matmul(get(*b))?,
        Op::AddBias(a, b) => {
            let (a, b) = (get(*a), get(*b));
            let (_, c) = a.rows_cols("add_bias")?;
            if b.rank() != 1 || b.len() != c {
                return Err(Error::dim("add_bias", a.shape(), b.shape()));
            }
            let mut out = a.data().to_vec();
            for row in out.chunks_mut(c) {
                for (o, x) in row.iter_mut().zip(b.data()) {
                    *o += x;
                }
            }
            Tensor::new(a.shape().to_vec(), out)?
        }
        Op::Add(a, b) => get(*a).add(get(*b))?,
        Op::Sub(a, b) => get(*a).sub(get(*b))?,
        Op::Mul(a, b) => get(*a).mul(get(*b))?,
        Op::Scale(a, c) => get(*a).scale(*c),
        Op::AddConst(a, c) => get(*a).add(c)?,
        Op::MulConst(a, c) => get(*a).mul(c)?,
        Op::Relu(a) => get(*a).map(|x| x.max(0.0)),
        Op::Tanh(a) => get(*a).map(f64::tanh),
        Op::Exp(a) => get(*a).map(f64::exp),
        Op::Log(a) => get(*a).map(f64::ln),
        Op::Sqrt(a) => get(*a).map(f64::sqrt),
        Op::Recip(a) => get(*a).map(f64::recip),
        Op::Square(a) => get(*a).map(|x| x * x),
        Op::Sum(a) => Tensor::scalar(get(*a).sum()),
        Op::RowSums(a) => {
            let t = get(*a);
            let (_, c) = t.dims2("row_sums")?;
            Tensor::vector(t.data().chunks(c).map(|r| r.iter().sum()).collect())
        }
        Op::MeanRows(a) => {
            let t = get(*a);
            t.dims2("mean_rows")?;
            t.mean_rows()?
        }
        Op::GatherRows(a, idx) => get(*a).gather_rows(idx)?,
        Op::Softmax(a) => last_axis(get(*a), "softmax", softmax_slice)?,
        Op::LogSoftmax(a) => last_axis(get(*a), "log_softmax", log_softmax_slice)?,
        Op::PickPerRow(a, cols) => {
            let t = get(*a);
            let (r, c) = t.dims2("pick_per_row")?;
            if cols.len() != r {
                return Err(Error::dim("pick_per_row", t.shape(), &[cols.len()]));
            }
            let mut out = Vec::with_capacity(r);
            for (row, &col) in cols.iter().enumerate() {
                if col >= c {
                    return Err(Error::Argument(format!(
                        "column {col} out of range for width {c}"
                    )));
                }
                out.push(t.data()[row * c + col]);
            }
            Tensor::vector(out)
        }
        Op::Reshape(a, shape) => get(*a).reshape(shape)?,
    })
}

fn last_axis(t: &Tensor, op: &'static str, f: fn(&[f64]) -> Vec<f64>) -> Result<Tensor> {
    let (_, c) = t.rows_cols(op)?;
    if c == 0 {
        return Err(Error::Argument(format!("{op} of an empty vector")));
    }
    let data: Vec<f64> = t.data().chunks(c).flat_map(f).collect();
    Tensor::new(t.shape().to_vec(), data)
}
