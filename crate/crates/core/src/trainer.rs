//! The dual-update training loop.
//!
//! Each step reads one pre-step state and derives two independent updates
//! from it: network parameters Θ descend the (weighted) task losses with the
//! weights held constant, and the weight module Ψ takes one scheduler step
//! with the losses held constant. Neither update sees the other's result.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use log::info;
use rand::Rng;

use crate::checkpoint;
use crate::config::{TaskKind, TaskSpec, ThetaUpdate, TrainConfig};
use crate::error::{Error, Result};
use crate::losses::{center_loss_batch, cross_entropy_batch, CenterBank, LossVector};
use crate::metrics::{accuracy, predict};
use crate::network::{Architecture, ModelParams};
use crate::numerics::{Tape, Tensor};
use crate::optim::{lr_schedule, rmsprop_step, OptimState};
use crate::rng::{derive_seed, seeded};
use crate::synthdata::{generate_split, infer_schema, load_csv, Dataset, Modality};
use crate::taskweights::{l4_loss, scheduler_step, task_weights, SchedulerKind, WeightModuleState};

/// Inputs and labels for one step, shared by all tasks.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskBatch {
    pub x: Tensor,
    pub labels: Vec<usize>,
    pub modalities: Vec<Modality>,
}

impl TaskBatch {
    pub fn from_rows(data: &Dataset, idx: &[usize]) -> Self {
        TaskBatch {
            x: data.features(idx),
            labels: data.labels_of(idx),
            modalities: idx.iter().map(|&i| data.modalities()[i]).collect(),
        }
    }

    /// Rows of the batch that feed `task`'s loss.
    pub fn rows_for(&self, task: &TaskSpec) -> Vec<usize> {
        (0..self.labels.len())
            .filter(|&r| task.accepts(self.modalities[r]))
            .collect()
    }
}

/// Draws a batch with replacement, split evenly between the two modalities
/// when both are present. Deterministic per (seed, iteration).
pub fn sample_batch(
    data: &Dataset,
    batch_size: usize,
    seed: u64,
    iteration: usize,
) -> Result<TaskBatch> {
    if data.is_empty() {
        return Err(Error::Argument(
            "cannot sample a batch from an empty dataset".into(),
        ));
    }
    let mut rng = seeded(seed, 0xba7c_0000_0000 + iteration as u64);
    let pools: Vec<Vec<usize>> = [Modality::A, Modality::B]
        .into_iter()
        .map(|m| data.indices_of(m))
        .filter(|p| !p.is_empty())
        .collect();
    let idx: Vec<usize> = (0..batch_size)
        .map(|k| {
            let pool = &pools[k % pools.len()];
            pool[rng.random_range(0..pool.len())]
        })
        .collect();
    Ok(TaskBatch::from_rows(data, &idx))
}

/// Everything that changes during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: ModelParams,
    pub psi: WeightModuleState,
    /// One center bank per verification task.
    pub banks: Vec<Option<CenterBank>>,
    pub opt: OptimState,
}

impl TrainState {
    pub fn init(config: &TrainConfig, input_dim: usize, num_classes: usize) -> Result<Self> {
        let arch = Architecture {
            input_dim,
            trunk: config.model.trunk.clone(),
            branch_hidden: config.model.branch_hidden.clone(),
            bottleneck: config.model.bottleneck,
            classes: vec![num_classes; config.num_tasks()],
            activation: config.model.activation,
            dropout_rate: config.model.dropout,
        };
        let model = ModelParams::new(&arch, derive_seed(config.seed, 0x6e6e))?;
        let mut psi = WeightModuleState::zeros(
            config.num_tasks(),
            model.z_dim(),
            config.psi_learning_rate(),
        )?;
        psi.update_bias = config.scheduler.update_bias;
        let banks = config
            .tasks
            .iter()
            .map(|t| match t.kind {
                TaskKind::Verification => {
                    CenterBank::new(num_classes, config.model.bottleneck, config.loss.beta)
                        .map(Some)
                }
                TaskKind::Identification => Ok(None),
            })
            .collect::<Result<Vec<_>>>()?;
        let opt = OptimState::zeros_like(model.named_tensors().into_iter().map(|(_, t)| t));
        Ok(TrainState {
            model,
            psi,
            banks,
            opt,
        })
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub iteration: usize,
    pub lr: f64,
    pub weights: Vec<f64>,
    pub losses: Vec<f64>,
    pub l4: f64,
    /// The objective Θ descended this step.
    pub total: f64,
}

impl StepRecord {
    pub fn csv_row(&self) -> String {
        let mut cols = vec![self.iteration.to_string(), self.lr.to_string()];
        cols.extend(self.weights.iter().map(f64::to_string));
        cols.extend(self.losses.iter().map(f64::to_string));
        cols.push(self.l4.to_string());
        cols.push(self.total.to_string());
        cols.join(",")
    }
}

/// `iter,lr,w1..wT,L1..LT,L4,total`
pub fn csv_header(num_tasks: usize) -> String {
    let mut cols = vec!["iter".to_string(), "lr".to_string()];
    cols.extend((1..=num_tasks).map(|i| format!("w{i}")));
    cols.extend((1..=num_tasks).map(|i| format!("L{i}")));
    cols.push("L4".into());
    cols.push("total".into());
    cols.join(",")
}

/// Held-out classification accuracy per task.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub iteration: usize,
    pub accuracy: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunHistory {
    pub tasks: Vec<TaskSpec>,
    pub theta_update: ThetaUpdate,
    pub records: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
}

impl RunHistory {
    pub fn final_accuracy(&self) -> Option<&[f64]> {
        self.evals.last().map(|e| e.accuracy.as_slice())
    }
}

/// Gradients and updates computed from one pre-step state, not yet applied.
#[derive(Clone, Debug)]
pub struct StepPlan {
    pub record: StepRecord,
    /// Gradient of the Θ objective, in [`ModelParams::named_tensors`] order.
    pub theta_grads: Vec<Tensor>,
    pub next_psi: WeightModuleState,
    center_batches: Vec<Option<(Tensor, Vec<usize>)>>,
}

impl StepPlan {
    pub fn apply_theta(
        &self,
        model: &mut ModelParams,
        opt: &mut OptimState,
        config: &TrainConfig,
    ) -> Result<()> {
        let params = model.tensors_mut();
        for (((p, g), a), b) in params
            .into_iter()
            .zip(&self.theta_grads)
            .zip(opt.acc.iter_mut())
            .zip(opt.buf.iter_mut())
        {
            rmsprop_step(p, g, a, b, self.record.lr, &config.optimizer)?;
        }
        Ok(())
    }

    pub fn apply_psi(&self, psi: &mut WeightModuleState) {
        *psi = self.next_psi.clone();
    }

    pub fn apply_centers(&self, banks: &mut [Option<CenterBank>]) -> Result<()> {
        for (bank, batch) in banks.iter_mut().zip(&self.center_batches) {
            if let (Some(bank), Some((emb, labels))) = (bank, batch) {
                bank.update(emb, labels)?;
            }
        }
        Ok(())
    }

    pub fn apply(self, state: &mut TrainState, config: &TrainConfig) -> Result<StepRecord> {
        self.apply_theta(&mut state.model, &mut state.opt, config)?;
        self.apply_psi(&mut state.psi);
        self.apply_centers(&mut state.banks)?;
        Ok(self.record)
    }
}

/// Computes both updates of one step from the current state.
pub fn plan_step(
    state: &TrainState,
    batch: &TaskBatch,
    config: &TrainConfig,
    iteration: usize,
) -> Result<StepPlan> {
    let tasks = &config.tasks;
    if tasks.len() != state.model.num_tasks() {
        return Err(Error::Argument(format!(
            "{} tasks configured for a {}-branch model",
            tasks.len(),
            state.model.num_tasks()
        )));
    }
    let model = &state.model;
    let mut tape = Tape::new();
    let vars = model.register(&mut tape);
    let x = tape.constant(batch.x.clone());
    let dropout_seed = derive_seed(config.seed, 0xd40_0000_0000 + iteration as u64);
    let z = model.forward_trunk(&mut tape, &vars, x, true, dropout_seed)?;
    let all_rows = batch.labels.len();

    let mut loss_vars = Vec::with_capacity(tasks.len());
    let mut center_batches = Vec::with_capacity(tasks.len());
    for (t, task) in tasks.iter().enumerate() {
        let rows = batch.rows_for(task);
        if rows.is_empty() {
            return Err(Error::Argument(format!(
                "batch has no samples for task {}",
                t + 1
            )));
        }
        let labels: Vec<usize> = rows.iter().map(|&r| batch.labels[r]).collect();
        let zt = if rows.len() == all_rows {
            z
        } else {
            tape.gather_rows(z, rows)?
        };
        let head = model.forward_branch(&mut tape, &vars, t, zt, true, dropout_seed)?;
        let mut loss = cross_entropy_batch(&mut tape, head.logits, &labels)?;
        match (&state.banks[t], task.kind) {
            (Some(bank), TaskKind::Verification) => {
                let c = center_loss_batch(
                    &mut tape,
                    head.embedding,
                    bank,
                    &labels,
                    config.loss.center_form,
                )?;
                let c = tape.scale(c, config.loss.alpha)?;
                loss = tape.add(loss, c)?;
                center_batches.push(Some((tape.value(head.embedding).clone(), labels)));
            }
            _ => center_batches.push(None),
        }
        loss_vars.push(loss);
    }

    let loss_values: Vec<f64> = loss_vars.iter().map(|&v| tape.value(v).data()[0]).collect();
    if let Some(i) = loss_values.iter().position(|l| !l.is_finite()) {
        return Err(Error::Numeric(format!(
            "task {} loss became {} at iteration {iteration}",
            i + 1,
            loss_values[i]
        )));
    }
    let losses = LossVector::new(loss_values.clone())?;
    let z_value = tape.value(z).clone();
    let kind = config.scheduler_kind();
    let weights = match &kind {
        SchedulerKind::Static(w) => w.clone(),
        _ => task_weights(&z_value, &state.psi)?.into_data(),
    };

    // Θ objective: weights enter as constants.
    let mut objective = None;
    for (&lv, &w) in loss_vars.iter().zip(&weights) {
        let term = match config.theta_update {
            ThetaUpdate::Weighted => tape.scale(lv, w)?,
            ThetaUpdate::UnweightedSum => lv,
        };
        objective = Some(match objective {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    let objective = objective.expect("at least one task");
    let total = tape.value(objective).data()[0];
    let grads = tape.backward(objective)?;
    let theta_grads = vars
        .flat()
        .into_iter()
        .map(|v| grads.wrt(v).clone())
        .collect();

    // Ψ update: losses enter as constants.
    let (next_psi, _) = scheduler_step(&kind, &z_value, &state.psi, &losses)?;

    let record = StepRecord {
        iteration,
        lr: lr_schedule(iteration, config),
        l4: l4_loss(&Tensor::vector(weights.clone()), &losses)?,
        weights,
        losses: loss_values,
        total,
    };
    Ok(StepPlan {
        record,
        theta_grads,
        next_psi,
        center_batches,
    })
}

pub fn train_step(
    state: &mut TrainState,
    batch: &TaskBatch,
    config: &TrainConfig,
    iteration: usize,
) -> Result<StepRecord> {
    plan_step(state, batch, config, iteration)?.apply(state, config)
}

/// Held-out accuracy of each task's classifier on the rows it is trained on.
pub fn evaluate_accuracy(
    model: &ModelParams,
    data: &Dataset,
    tasks: &[TaskSpec],
) -> Result<Vec<f64>> {
    tasks
        .iter()
        .enumerate()
        .map(|(t, task)| {
            let rows: Vec<usize> = (0..data.len())
                .filter(|&i| task.accepts(data.modalities()[i]))
                .collect();
            let (_, logits) = model.infer(&data.features(&rows), t)?;
            accuracy(&predict(&logits)?, &data.labels_of(&rows))
        })
        .collect()
}

/// Resolves the configured data source into train and held-out sets.
pub fn load_data(config: &TrainConfig) -> Result<(Dataset, Dataset)> {
    if let Some(spec) = &config.dataset.synthetic {
        return generate_split(spec, config.dataset.test_samples_per_class);
    }
    let csv = config
        .dataset
        .csv
        .as_ref()
        .ok_or_else(|| Error::config("dataset", "no data source configured"))?;
    let schema = match &csv.schema {
        Some(s) => s.clone(),
        None => infer_schema(&csv.train)?,
    };
    Ok((
        load_csv(&csv.train, &schema)?,
        load_csv(&csv.test, &schema)?,
    ))
}

struct Outputs {
    dir: std::path::PathBuf,
    log: BufWriter<File>,
    eval: BufWriter<File>,
}

impl Outputs {
    fn create(dir: &Path, config: &TrainConfig) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let open = |name: &str| {
            let p = dir.join(name);
            File::create(&p)
                .map(BufWriter::new)
                .map_err(|e| Error::io(p, e))
        };
        let mut log = open("log.csv")?;
        let mut eval = open("eval.csv")?;
        let snapshot = dir.join("config.toml");
        fs::write(&snapshot, config.to_toml()).map_err(|e| Error::io(snapshot, e))?;
        let io = |e| Error::io(dir, e);
        writeln!(log, "{}", csv_header(config.num_tasks())).map_err(io)?;
        let acc_cols: Vec<String> = (1..=config.num_tasks())
            .map(|i| format!("acc{i}"))
            .collect();
        writeln!(eval, "iter,{}", acc_cols.join(",")).map_err(io)?;
        Ok(Outputs {
            dir: dir.to_path_buf(),
            log,
            eval,
        })
    }
}

/// Runs the configured training loop. With `out_dir`, writes `log.csv`,
/// `eval.csv`, `config.toml`, and checkpoints there.
pub fn run_training(config: &TrainConfig, out_dir: Option<&Path>) -> Result<RunHistory> {
    config.validate()?;
    let mut outputs = out_dir.map(|d| Outputs::create(d, config)).transpose()?;
    let (train, test) = load_data(config)?;
    let num_classes = train.num_classes().max(test.num_classes());
    let mut state = TrainState::init(config, train.dim(), num_classes)?;
    info!(
        "training {} tasks for {} iterations, theta update {:?}",
        config.num_tasks(),
        config.iterations,
        config.theta_update
    );

    let mut history = RunHistory {
        tasks: config.tasks.clone(),
        theta_update: config.theta_update,
        records: Vec::with_capacity(config.iterations),
        evals: Vec::new(),
    };
    for it in 0..config.iterations {
        let batch = sample_batch(&train, config.batch_size, config.seed, it)?;
        let record = train_step(&mut state, &batch, config, it)?;
        if let Some(out) = outputs.as_mut() {
            if it % config.log_every == 0 {
                writeln!(out.log, "{}", record.csv_row()).map_err(|e| Error::io(&out.dir, e))?;
            }
            if config.checkpoint_every > 0 && (it + 1) % config.checkpoint_every == 0 {
                checkpoint::save_state(
                    &state,
                    &out.dir.join(format!("checkpoint_{:06}.dmtl", it + 1)),
                )?;
            }
        }
        history.records.push(record);
        if config.eval_every > 0 && (it + 1) % config.eval_every == 0 && it + 1 < config.iterations
        {
            history.evals.push(EvalRecord {
                iteration: it + 1,
                accuracy: evaluate_accuracy(&state.model, &test, &config.tasks)?,
            });
        }
    }
    if !test.is_empty() {
        history.evals.push(EvalRecord {
            iteration: config.iterations,
            accuracy: evaluate_accuracy(&state.model, &test, &config.tasks)?,
        });
    }
    if let Some(mut out) = outputs {
        for e in &history.evals {
            let accs: Vec<String> = e.accuracy.iter().map(f64::to_string).collect();
            writeln!(out.eval, "{},{}", e.iteration, accs.join(","))
                .map_err(|err| Error::io(&out.dir, err))?;
        }
        out.log.flush().map_err(|e| Error::io(&out.dir, e))?;
        out.eval.flush().map_err(|e| Error::io(&out.dir, e))?;
        checkpoint::save_state(&state, &out.dir.join("final.dmtl"))?;
    }
    Ok(history)
}
