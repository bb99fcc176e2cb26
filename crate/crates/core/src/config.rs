//! Run configuration, read from and written to TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::CenterLossForm;
use crate::network::Activation;
use crate::synthdata::{CsvSchema, Modality, ModalitySpec};
use crate::taskweights::{validate_static, GradientForm, SchedulerKind};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThetaUpdate {
    /// Network parameters descend `Σ w_i L_i`.
    #[default]
    Weighted,
    /// Network parameters descend `Σ L_i`; weights are still generated and logged.
    UnweightedSum,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulerName {
    Static,
    #[default]
    DynamicL4,
    NaiveDynamic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulerConfig {
    #[serde(default)]
    pub kind: SchedulerName,
    #[serde(default)]
    pub gradient: GradientForm,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub static_weights: Option<Vec<f64>>,
    /// Step size for Ψ; defaults to the network's base learning rate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(default = "yes")]
    pub update_bias: bool,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            kind: SchedulerName::DynamicL4,
            gradient: GradientForm::Full,
            static_weights: None,
            learning_rate: None,
            update_bias: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "d_base_lr")]
    pub base_lr: f64,
    #[serde(default = "d_momentum")]
    pub momentum: f64,
    /// Decay of the running mean square.
    #[serde(default = "d_rho")]
    pub rho: f64,
    #[serde(default = "d_weight_decay")]
    pub weight_decay: f64,
    /// Iterations at which the learning rate is divided by 10.
    /// Defaults to 60% and 80% of the run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub milestones: Option<Vec<usize>>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            base_lr: d_base_lr(),
            momentum: d_momentum(),
            rho: d_rho(),
            weight_decay: d_weight_decay(),
            milestones: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "d_trunk")]
    pub trunk: Vec<usize>,
    #[serde(default = "d_branch_hidden")]
    pub branch_hidden: Vec<usize>,
    #[serde(default = "d_bottleneck")]
    pub bottleneck: usize,
    #[serde(default = "d_activation")]
    pub activation: Activation,
    #[serde(default)]
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            trunk: d_trunk(),
            branch_hidden: d_branch_hidden(),
            bottleneck: d_bottleneck(),
            activation: d_activation(),
            dropout: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the center term in the verification loss.
    #[serde(default = "d_alpha")]
    pub alpha: f64,
    /// Center update rate.
    #[serde(default = "d_beta")]
    pub beta: f64,
    #[serde(default)]
    pub center_form: CenterLossForm,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: d_alpha(),
            beta: d_beta(),
            center_form: CenterLossForm::SquaredHalved,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Classify identities of one modality with cross-entropy.
    Identification,
    /// Cross-entropy plus center loss on samples of both modalities;
    /// its bottleneck embedding is used for cross-modal matching.
    Verification,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modality: Option<Modality>,
}

impl TaskSpec {
    pub fn identification(modality: Modality) -> Self {
        TaskSpec {
            kind: TaskKind::Identification,
            modality: Some(modality),
        }
    }

    pub fn verification() -> Self {
        TaskSpec {
            kind: TaskKind::Verification,
            modality: None,
        }
    }

    /// Whether a sample of `modality` contributes to this task's loss.
    pub fn accepts(&self, modality: Modality) -> bool {
        self.modality.is_none_or(|m| m == modality)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvDataset {
    pub train: PathBuf,
    pub test: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema: Option<CsvSchema>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<ModalitySpec>,
    /// Held-out samples per class and modality for synthetic data.
    #[serde(default = "d_test_per_class")]
    pub test_samples_per_class: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<CsvDataset>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_iterations")]
    pub iterations: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub theta_update: ThetaUpdate,
    /// Write a CSV row every this many iterations.
    #[serde(default = "d_one")]
    pub log_every: usize,
    /// Checkpoint interval in iterations; 0 writes only the final checkpoint.
    #[serde(default)]
    pub checkpoint_every: usize,
    /// Held-out evaluation interval; 0 evaluates only at the end.
    #[serde(default)]
    pub eval_every: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub scheduler: SchedulerConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default = "d_tasks")]
    pub tasks: Vec<TaskSpec>,
    pub dataset: DatasetConfig,
}

fn yes() -> bool {
    true
}
fn d_one() -> usize {
    1
}
fn d_base_lr() -> f64 {
    0.1
}
fn d_momentum() -> f64 {
    0.99
}
fn d_rho() -> f64 {
    0.9
}
fn d_weight_decay() -> f64 {
    5e-5
}
fn d_trunk() -> Vec<usize> {
    vec![64, 64]
}
fn d_branch_hidden() -> Vec<usize> {
    vec![32]
}
fn d_bottleneck() -> usize {
    16
}
fn d_activation() -> Activation {
    Activation::Relu
}
fn d_alpha() -> f64 {
    0.003
}
fn d_beta() -> f64 {
    0.5
}
fn d_test_per_class() -> usize {
    10
}
fn d_iterations() -> usize {
    2000
}
fn d_batch() -> usize {
    90
}

/// Verification, modality-A identification, modality-B identification.
pub fn d_tasks() -> Vec<TaskSpec> {
    vec![
        TaskSpec::verification(),
        TaskSpec::identification(Modality::A),
        TaskSpec::identification(Modality::B),
    ]
}

impl TrainConfig {
    /// Defaults for everything except the data source.
    pub fn with_dataset(dataset: DatasetConfig) -> Self {
        TrainConfig {
            seed: 0,
            iterations: d_iterations(),
            batch_size: d_batch(),
            theta_update: ThetaUpdate::Weighted,
            log_every: 1,
            checkpoint_every: 0,
            eval_every: 0,
            out_dir: None,
            scheduler: SchedulerConfig::default(),
            optimizer: OptimizerConfig::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            tasks: d_tasks(),
            dataset,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| {
            let field = e
                .message()
                .split('`')
                .nth(1)
                .unwrap_or("config")
                .to_string();
            Error::config(field, e.message().trim().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn milestones(&self) -> Vec<usize> {
        self.optimizer.milestones.clone().unwrap_or_else(|| {
            let n = self.iterations;
            vec![n * 3 / 5, n * 4 / 5]
        })
    }

    pub fn psi_learning_rate(&self) -> f64 {
        self.scheduler
            .learning_rate
            .unwrap_or(self.optimizer.base_lr)
    }

    pub fn scheduler_kind(&self) -> SchedulerKind {
        match self.scheduler.kind {
            SchedulerName::Static => SchedulerKind::Static(
                self.scheduler
                    .static_weights
                    .clone()
                    .unwrap_or_else(|| vec![1.0 / self.num_tasks() as f64; self.num_tasks()]),
            ),
            SchedulerName::DynamicL4 => SchedulerKind::DynamicL4(self.scheduler.gradient),
            SchedulerName::NaiveDynamic => SchedulerKind::NaiveDynamic,
        }
    }

    /// Checks every field, reporting the first invalid one.
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.log_every == 0 {
            return Err(Error::config("log_every", "must be at least 1"));
        }
        if self.scheduler.kind == SchedulerName::Static {
            if let Some(w) = &self.scheduler.static_weights {
                validate_static(w, self.num_tasks())
                    .map_err(|e| Error::config("scheduler.static_weights", e.to_string()))?;
            }
        }
        if let Some(lr) = self.scheduler.learning_rate {
            if !(lr > 0.0) {
                return Err(Error::config("scheduler.learning_rate", "must be positive"));
            }
        }
        let o = &self.optimizer;
        if !(o.base_lr > 0.0) {
            return Err(Error::config("optimizer.base_lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&o.momentum) {
            return Err(Error::config("optimizer.momentum", "must lie in [0,1)"));
        }
        if !(0.0..1.0).contains(&o.rho) {
            return Err(Error::config("optimizer.rho", "must lie in [0,1)"));
        }
        if !(o.weight_decay >= 0.0) {
            return Err(Error::config(
                "optimizer.weight_decay",
                "must be nonnegative",
            ));
        }
        if let Some(m) = &o.milestones {
            if m.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::config(
                    "optimizer.milestones",
                    "must be strictly increasing",
                ));
            }
        }
        let m = &self.model;
        if m.trunk.iter().chain(&m.branch_hidden).any(|&w| w == 0) {
            return Err(Error::config(
                "model.trunk",
                "layer widths must be positive",
            ));
        }
        if m.bottleneck == 0 {
            return Err(Error::config("model.bottleneck", "must be positive"));
        }
        if !(0.0..1.0).contains(&m.dropout) {
            return Err(Error::config("model.dropout", "must lie in [0,1)"));
        }
        if !(self.loss.alpha >= 0.0) {
            return Err(Error::config("loss.alpha", "must be nonnegative"));
        }
        if !(self.loss.beta > 0.0 && self.loss.beta <= 1.0) {
            return Err(Error::config("loss.beta", "must lie in (0,1]"));
        }
        if self.tasks.is_empty() {
            return Err(Error::config("tasks", "at least one task is required"));
        }
        for (i, t) in self.tasks.iter().enumerate() {
            match (t.kind, t.modality) {
                (TaskKind::Identification, None) => {
                    return Err(Error::config(
                        format!("tasks[{i}].modality"),
                        "identification needs a modality",
                    ))
                }
                (TaskKind::Verification, Some(_)) => {
                    return Err(Error::config(
                        format!("tasks[{i}].modality"),
                        "verification uses both modalities",
                    ))
                }
                _ => {}
            }
        }
        match (&self.dataset.synthetic, &self.dataset.csv) {
            (Some(spec), None) => spec.validate()?,
            (None, Some(_)) => {}
            _ => {
                return Err(Error::config(
                    "dataset",
                    "exactly one of `synthetic` or `csv` is required",
                ))
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOY: &str = r#"
seed = 3
iterations = 40

[scheduler]
kind = "naive_dynamic"
learning_rate = 0.5

[dataset]
test_samples_per_class = 4

[dataset.synthetic]
num_classes = 4
dim = 6
samples_per_class = 10
noise_a = 1.5
noise_b = 0.3
seed = 11
"#;

    #[test]
    fn parses_with_defaults() {
        let c = TrainConfig::from_toml(TOY).unwrap();
        assert_eq!(c.batch_size, 90);
        assert_eq!(c.optimizer.momentum, 0.99);
        assert_eq!(c.optimizer.base_lr, 0.1);
        assert_eq!(c.optimizer.weight_decay, 5e-5);
        assert_eq!(c.milestones(), vec![24, 32]);
        assert_eq!(c.num_tasks(), 3);
        assert_eq!(c.scheduler_kind(), SchedulerKind::NaiveDynamic);
        assert_eq!(c.psi_learning_rate(), 0.5);
    }

    #[test]
    fn snapshot_round_trip() {
        let c = TrainConfig::from_toml(TOY).unwrap();
        let again = TrainConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = TOY.replace("iterations = 40", "iterations = 40\nlearning_rat = 0.1");
        let err = TrainConfig::from_toml(&text).unwrap_err().to_string();
        assert!(err.contains("learning_rat"), "{err}");
    }

    #[test]
    fn missing_dataset_is_named() {
        let err = TrainConfig::from_toml("seed = 1\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("dataset"), "{err}");
    }

    #[test]
    fn first_invalid_field_is_named() {
        let text = TOY.replace(
            "[scheduler]",
            "[optimizer]\nbase_lr = -1.0\nmomentum = 2.0\n\n[scheduler]",
        );
        match TrainConfig::from_toml(&text) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "optimizer.base_lr"),
            other => panic!("{other:?}"),
        }
    }
}
