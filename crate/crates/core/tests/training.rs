use std::fs;

use dmtl_core::checkpoint::{load_model, load_state, save_state, state_tensors};
use dmtl_core::config::{SchedulerName, ThetaUpdate, TrainConfig};
use dmtl_core::trainer::{
    csv_header, load_data, plan_step, run_training, sample_batch, train_step, TrainState,
};
use dmtl_core::Error;

const THREE_TASK: &str = include_str!("../../../configs/toy_three_task.toml");

fn short_config(iterations: usize) -> TrainConfig {
    let mut cfg = TrainConfig::from_toml(THREE_TASK).unwrap();
    cfg.iterations = iterations;
    cfg.checkpoint_every = 10;
    cfg.eval_every = 10;
    cfg
}

fn state_after(cfg: &TrainConfig, steps: usize) -> (TrainState, dmtl_core::Dataset) {
    let (train, _) = load_data(cfg).unwrap();
    let mut state = TrainState::init(cfg, train.dim(), train.num_classes()).unwrap();
    for it in 0..steps {
        let batch = sample_batch(&train, cfg.batch_size, cfg.seed, it).unwrap();
        train_step(&mut state, &batch, cfg, it).unwrap();
    }
    (state, train)
}

#[test]
fn run_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = short_config(25);
    let history = run_training(&cfg, Some(dir.path())).unwrap();
    assert_eq!(history.records.len(), 25);

    let log = fs::read_to_string(dir.path().join("log.csv")).unwrap();
    let mut lines = log.lines();
    let header = lines.next().unwrap();
    assert_eq!(header, "iter,lr,w1,w2,w3,L1,L2,L3,L4,total");
    assert_eq!(header, csv_header(3));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 25);
    for row in rows {
        assert_eq!(row.split(',').count(), 10, "{row}");
    }
    for name in [
        "config.toml",
        "eval.csv",
        "final.dmtl",
        "checkpoint_000010.dmtl",
        "checkpoint_000020.dmtl",
    ] {
        assert!(dir.path().join(name).is_file(), "{name} missing");
    }
    let evals = fs::read_to_string(dir.path().join("eval.csv")).unwrap();
    assert_eq!(evals.lines().next().unwrap(), "iter,acc1,acc2,acc3");
    assert_eq!(evals.lines().count(), 4);
}

#[test]
fn snapshot_reproduces_the_run() {
    let first = tempfile::tempdir().unwrap();
    let second = tempfile::tempdir().unwrap();
    let cfg = short_config(15);
    run_training(&cfg, Some(first.path())).unwrap();
    let snapshot = TrainConfig::load(&first.path().join("config.toml")).unwrap();
    assert_eq!(snapshot, cfg);
    run_training(&snapshot, Some(second.path())).unwrap();
    for name in ["log.csv", "final.dmtl", "eval.csv"] {
        let a = fs::read(first.path().join(name)).unwrap();
        let b = fs::read(second.path().join(name)).unwrap();
        assert!(a == b, "{name} differs");
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let cfg = short_config(0);
    let (state, train) = state_after(&cfg, 12);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.dmtl");
    save_state(&state, &path).unwrap();
    let back = load_state(&path).unwrap();
    let bits = |s: &TrainState| -> Vec<(String, Vec<u64>)> {
        state_tensors(s)
            .into_iter()
            .map(|(n, t)| (n, t.data().iter().map(|v| v.to_bits()).collect()))
            .collect()
    };
    assert_eq!(bits(&state), bits(&back));
    assert_eq!(back, state);

    // The restored state continues exactly like the original.
    let (mut a, mut b) = (state, back);
    for it in 12..15 {
        let batch = sample_batch(&train, cfg.batch_size, cfg.seed, it).unwrap();
        let ra = train_step(&mut a, &batch, &cfg, it).unwrap();
        let rb = train_step(&mut b, &batch, &cfg, it).unwrap();
        assert_eq!(ra, rb);
    }

    let model = load_model(&path).unwrap();
    assert_eq!(model.num_tasks(), 3);
    assert_eq!(model.input_dim(), train.dim());
}

#[test]
fn theta_and_psi_updates_are_isolated() {
    let cfg = short_config(0);
    let (mut state, train) = state_after(&cfg, 5);
    let batch = sample_batch(&train, cfg.batch_size, cfg.seed, 5).unwrap();
    let plan = plan_step(&state, &batch, &cfg, 5).unwrap();

    let psi_before = state.psi.checksum();
    plan.apply_theta(&mut state.model, &mut state.opt, &cfg)
        .unwrap();
    assert_eq!(state.psi.checksum(), psi_before);

    let theta_before = state.model.checksum();
    plan.apply_psi(&mut state.psi);
    assert_eq!(state.model.checksum(), theta_before);
    assert_ne!(state.psi.checksum(), psi_before);
}

#[test]
fn unweighted_sum_ignores_the_weights() {
    let mut cfg = short_config(0);
    cfg.theta_update = ThetaUpdate::UnweightedSum;
    let (state, train) = state_after(&cfg, 3);
    let batch = sample_batch(&train, cfg.batch_size, cfg.seed, 3).unwrap();
    let plan = plan_step(&state, &batch, &cfg, 3).unwrap();
    let sum: f64 = plan.record.losses.iter().sum();
    assert!((plan.record.total - sum).abs() < 1e-12);

    let mut shifted = state.clone();
    shifted.psi.bias.data_mut()[0] += 3.0;
    let other = plan_step(&shifted, &batch, &cfg, 3).unwrap();
    assert_ne!(other.record.weights, plan.record.weights);
    assert_eq!(other.theta_grads, plan.theta_grads);
}

#[test]
fn static_scheduler_keeps_psi_fixed() {
    let mut cfg = short_config(0);
    cfg.scheduler.kind = SchedulerName::Static;
    cfg.scheduler.static_weights = Some(vec![0.2, 0.3, 0.5]);
    let (state, _) = state_after(&cfg, 6);
    assert!(state.psi.is_zero());
}

#[test]
fn non_finite_loss_names_the_task() {
    let cfg = short_config(0);
    let (mut state, train) = state_after(&cfg, 0);
    state.model.branches[1].classifier.weight.data_mut()[0] = f64::NAN;
    let batch = sample_batch(&train, cfg.batch_size, cfg.seed, 0).unwrap();
    let err = train_step(&mut state, &batch, &cfg, 0).unwrap_err();
    assert!(matches!(err, Error::Numeric(_)));
    assert!(err.to_string().contains("task 2"), "{err}");
}

#[test]
fn unwritable_output_fails_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let err = run_training(&short_config(1_000_000), Some(&blocker.join("out"))).unwrap_err();
    assert!(matches!(err, Error::Io { .. }), "{err}");
}

#[test]
fn learning_rate_steps_down_at_milestones() {
    let mut cfg = short_config(30);
    cfg.optimizer.milestones = Some(vec![10, 20]);
    let h = run_training(&cfg, None).unwrap();
    let base = cfg.optimizer.base_lr;
    assert_eq!(h.records[9].lr, base);
    assert!((h.records[10].lr - base / 10.0).abs() < 1e-18);
    assert!((h.records[29].lr - base / 100.0).abs() < 1e-18);
}
