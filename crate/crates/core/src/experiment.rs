//! Multi-run experiments: static-weight sweeps, scripted scheduler
//! simulations, and the fold-based evaluation protocols.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use log::info;
use serde::{Deserialize, Serialize};

use crate::config::{SchedulerName, TrainConfig};
use crate::error::{Error, Result};
use crate::losses::LossVector;
use crate::metrics::{
    accuracy, aggregate_folds, auc, predict, rank_k_identification, roc_curve, val_at_far,
    Similarity,
};
use crate::network::ModelParams;
use crate::numerics::Tensor;
use crate::synthdata::{kfold_split, make_pairs, Dataset, Modality};
use crate::taskweights::{scheduler_step, SchedulerKind, WeightModuleState};
use crate::trainer::run_training;

/// Concurrency cap for sweeps, read from `DMTL_THREADS` (default 1).
pub fn threads_from_env() -> usize {
    std::env::var("DMTL_THREADS")
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or(1)
}

/// Static weights giving `task` weight `w` and splitting `1 − w` equally
/// among the other tasks.
pub fn sweep_static_weights(w: f64, task: usize, num_tasks: usize) -> Result<Vec<f64>> {
    if !(w > 0.0 && w <= 1.0) {
        return Err(Error::Argument(format!("sweep weight {w} outside (0,1]")));
    }
    if task >= num_tasks {
        return Err(Error::Argument(format!(
            "task {} out of range for {num_tasks} tasks",
            task + 1
        )));
    }
    if num_tasks == 1 {
        return Ok(vec![1.0]);
    }
    let rest = (1.0 - w) / (num_tasks - 1) as f64;
    let mut v = vec![rest; num_tasks];
    v[task] = w;
    // Put any rounding residue on the swept task so the vector sums to 1.
    let s: f64 = v.iter().sum();
    v[task] += 1.0 - s;
    Ok(v)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub weight: f64,
    pub static_weights: Vec<f64>,
    /// Final held-out accuracy of every task.
    pub accuracy: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepReport {
    pub task: usize,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    /// `weight,acc1..accT`
    pub fn to_csv(&self) -> String {
        let t = self.rows.first().map_or(0, |r| r.accuracy.len());
        let mut out = String::from("weight");
        for i in 1..=t {
            write!(out, ",acc{i}").expect("write to string");
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.weight.to_string());
            for a in &r.accuracy {
                write!(out, ",{a}").expect("write to string");
            }
            out.push('\n');
        }
        out
    }

    /// Row with the highest accuracy on the swept task; the smaller weight wins ties.
    pub fn best(&self) -> Option<&SweepRow> {
        self.rows
            .iter()
            .fold(None, |best: Option<&SweepRow>, r| match best {
                Some(b) if b.accuracy[self.task] >= r.accuracy[self.task] => Some(b),
                _ => Some(r),
            })
    }
}

/// One static-weight training run per entry of `weights`, at most `threads`
/// at a time. With `out_dir`, each run writes into `weight_<w>/`.
pub fn sweep(
    base: &TrainConfig,
    task: usize,
    weights: &[f64],
    out_dir: Option<&Path>,
    threads: usize,
) -> Result<SweepReport> {
    let configs = weights
        .iter()
        .map(|&w| {
            let mut cfg = base.clone();
            cfg.scheduler.kind = SchedulerName::Static;
            cfg.scheduler.static_weights = Some(sweep_static_weights(w, task, base.num_tasks())?);
            cfg.validate()?;
            Ok(cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<Vec<f64>>>>> =
        Mutex::new((0..configs.len()).map(|_| None).collect());
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some(cfg) = configs.get(i) else { break };
        let dir = out_dir.map(|d| d.join(format!("weight_{:.2}", weights[i])));
        info!(
            "sweep run {}/{}: weight {}",
            i + 1,
            configs.len(),
            weights[i]
        );
        let r = run_training(cfg, dir.as_deref()).and_then(|h| {
            h.final_accuracy()
                .map(<[f64]>::to_vec)
                .ok_or_else(|| Error::Argument("sweep runs need a held-out set".into()))
        });
        results
            .lock()
            .expect("no worker panics while holding the lock")[i] = Some(r);
    };
    std::thread::scope(|s| {
        for _ in 0..threads.clamp(1, configs.len().max(1)) {
            s.spawn(worker);
        }
    });
    let rows = results
        .into_inner()
        .expect("workers finished")
        .into_iter()
        .zip(weights.iter().zip(&configs))
        .map(|(r, (&weight, cfg))| {
            Ok(SweepRow {
                weight,
                static_weights: cfg.scheduler.static_weights.clone().expect("set above"),
                accuracy: r.expect("every run executed")?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepReport { task, rows })
}

/// Per-step task losses for [`simulate`], one row per step.
#[derive(Clone, Debug, PartialEq)]
pub struct LossScript {
    pub rows: Vec<Vec<f64>>,
}

impl LossScript {
    pub fn constant(losses: &[f64], steps: usize) -> Self {
        LossScript {
            rows: vec![losses.to_vec(); steps],
        }
    }

    /// Reads a headed CSV whose columns are the task losses.
    pub fn load(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)
            .map_err(|e| Error::Argument(format!("{}: {e}", path.display())))?;
        let mut rows = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| Error::Argument(format!("{}: {e}", path.display())))?;
            let row = rec
                .iter()
                .map(|c| {
                    c.trim().parse::<f64>().map_err(|_| Error::Parse {
                        row: i + 2,
                        message: format!("loss `{c}` is not a number"),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        Ok(LossScript { rows })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimulationStep {
    pub step: usize,
    pub weights: Vec<f64>,
    pub losses: Vec<f64>,
}

/// Iterates the scheduler on scripted losses with a fixed feature vector,
/// starting from a zero weight module. Row `t` holds the weights produced
/// by step `t`.
pub fn simulate(
    script: &LossScript,
    kind: &SchedulerKind,
    z: &Tensor,
    learning_rate: f64,
    update_bias: bool,
    steps: usize,
) -> Result<Vec<SimulationStep>> {
    if script.rows.len() < steps {
        return Err(Error::Argument(format!(
            "loss script has {} rows, fewer than the {steps} requested steps",
            script.rows.len()
        )));
    }
    let t = script.rows.first().map_or(0, Vec::len);
    let mut state = WeightModuleState::zeros(t, z.len(), learning_rate)?;
    state.update_bias = update_bias;
    let mut out = Vec::with_capacity(steps);
    for (step, row) in script.rows.iter().take(steps).enumerate() {
        let losses = LossVector::new(row.clone())?;
        let (next, w) = scheduler_step(kind, z, &state, &losses)?;
        state = next;
        out.push(SimulationStep {
            step: step + 1,
            weights: w.into_data(),
            losses: row.clone(),
        });
    }
    Ok(out)
}

/// `step,w1..wT,L1..LT`
pub fn simulation_csv(steps: &[SimulationStep]) -> String {
    let t = steps.first().map_or(0, |s| s.weights.len());
    let mut out = String::from("step");
    for i in 1..=t {
        write!(out, ",w{i}").expect("write to string");
    }
    for i in 1..=t {
        write!(out, ",L{i}").expect("write to string");
    }
    out.push('\n');
    for s in steps {
        out.push_str(&s.step.to_string());
        for v in s.weights.iter().chain(&s.losses) {
            write!(out, ",{v}").expect("write to string");
        }
        out.push('\n');
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Cross-modal pairs scored by embedding similarity.
    Verification,
    /// Modality-B probes against a modality-A gallery.
    C2p,
    /// Modality-A probes against a modality-B gallery.
    P2c,
    /// Classifier accuracy of one branch.
    Identification,
}

impl Protocol {
    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::Verification => "verification",
            Protocol::C2p => "c2p",
            Protocol::P2c => "p2c",
            Protocol::Identification => "identification",
        }
    }
}

impl std::str::FromStr for Protocol {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "verification" => Ok(Protocol::Verification),
            "c2p" => Ok(Protocol::C2p),
            "p2c" => Ok(Protocol::P2c),
            "identification" => Ok(Protocol::Identification),
            other => Err(format!("unknown protocol `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub protocol: Protocol,
    /// Branch whose embedding or classifier is evaluated.
    pub task: usize,
    pub folds: usize,
    /// Total verification pairs, spread evenly over the folds.
    pub pairs: usize,
    pub seed: u64,
    pub similarity: Similarity,
}

impl EvalOptions {
    pub fn new(protocol: Protocol) -> Self {
        EvalOptions {
            protocol,
            task: 0,
            folds: 10,
            pairs: 6000,
            seed: 0,
            similarity: Similarity::Cosine,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricSummary {
    pub name: String,
    pub per_fold: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub metrics: Vec<MetricSummary>,
}

impl EvalReport {
    pub fn metric(&self, name: &str) -> Option<&MetricSummary> {
        self.metrics.iter().find(|m| m.name == name)
    }

    /// One header row of metric names and one row of `mean±std` in percent.
    pub fn render(&self) -> String {
        let names: Vec<&str> = self.metrics.iter().map(|m| m.name.as_str()).collect();
        let cells: Vec<String> = self
            .metrics
            .iter()
            .map(|m| format!("{:.2}±{:.2}", 100.0 * m.mean, 100.0 * m.std))
            .collect();
        format!(
            "Method | {}\nmodel | {}\n",
            names.join(" | "),
            cells.join(" | ")
        )
    }
}

fn summarize(name: &str, per_fold: Vec<f64>) -> Result<MetricSummary> {
    let (mean, std) = aggregate_folds(&per_fold)?;
    Ok(MetricSummary {
        name: name.to_string(),
        per_fold,
        mean,
        std,
    })
}

/// Runs a protocol with k-fold aggregation.
///
/// Verification draws `pairs` cross-modal pairs and splits them into folds.
/// The rank protocols fold the probe set and search the full gallery of the
/// other modality.
pub fn evaluate(model: &ModelParams, data: &Dataset, opts: &EvalOptions) -> Result<EvalReport> {
    if data.dim() != model.input_dim() {
        return Err(Error::Checkpoint(format!(
            "model expects {}-dimensional inputs, dataset has {}",
            model.input_dim(),
            data.dim()
        )));
    }
    if opts.task >= model.num_tasks() {
        return Err(Error::Argument(format!(
            "model has no branch {}",
            opts.task + 1
        )));
    }
    if opts.folds < 2 {
        return Err(Error::Argument("evaluation needs at least 2 folds".into()));
    }
    let all: Vec<usize> = (0..data.len()).collect();
    let (emb, logits) = model.infer(&data.features(&all), opts.task)?;
    let metrics = match opts.protocol {
        Protocol::Verification => {
            let pairs = make_pairs(data, opts.pairs, opts.seed)?;
            let (mut v01, mut v1, mut areas) = (Vec::new(), Vec::new(), Vec::new());
            for f in 0..opts.folds {
                let fold: Vec<_> = pairs.iter().skip(f).step_by(opts.folds).collect();
                let scores: Vec<f64> = fold
                    .iter()
                    .map(|p| opts.similarity.score(emb.row(p.a), emb.row(p.b)))
                    .collect();
                let flags: Vec<bool> = fold.iter().map(|p| p.same).collect();
                let roc = roc_curve(&scores, &flags)?;
                v01.push(val_at_far(&roc, 0.001)?);
                v1.push(val_at_far(&roc, 0.01)?);
                areas.push(auc(&roc));
            }
            vec![
                summarize("VAL@FAR=0.1%", v01)?,
                summarize("VAL@FAR=1%", v1)?,
                summarize("AUC", areas)?,
            ]
        }
        Protocol::C2p | Protocol::P2c => {
            let (probe_mod, gallery_mod) = match opts.protocol {
                Protocol::C2p => (Modality::B, Modality::A),
                _ => (Modality::A, Modality::B),
            };
            let gallery = data.indices_of(gallery_mod);
            let g_emb = emb.gather_rows(&gallery)?;
            let g_lab = data.labels_of(&gallery);
            let probes = data.subset(&data.indices_of(probe_mod));
            let probe_rows = data.indices_of(probe_mod);
            let (mut r1, mut r10) = (Vec::new(), Vec::new());
            for fold in kfold_split(&probes, opts.folds, opts.seed)? {
                let rows: Vec<usize> = fold.iter().map(|&i| probe_rows[i]).collect();
                let p_emb = emb.gather_rows(&rows)?;
                let p_lab = data.labels_of(&rows);
                r1.push(rank_k_identification(
                    &p_emb,
                    &p_lab,
                    &g_emb,
                    &g_lab,
                    1,
                    opts.similarity,
                )?);
                let k = 10.min(gallery.len());
                r10.push(rank_k_identification(
                    &p_emb,
                    &p_lab,
                    &g_emb,
                    &g_lab,
                    k,
                    opts.similarity,
                )?);
            }
            vec![summarize("Rank-1", r1)?, summarize("Rank-10", r10)?]
        }
        Protocol::Identification => {
            let pred = predict(&logits)?;
            let mut accs = Vec::new();
            for fold in kfold_split(data, opts.folds, opts.seed)? {
                let p: Vec<usize> = fold.iter().map(|&i| pred[i]).collect();
                accs.push(accuracy(&p, &data.labels_of(&fold))?);
            }
            vec![summarize("Accuracy", accs)?]
        }
    };
    Ok(EvalReport {
        protocol: opts.protocol,
        metrics,
    })
}
