use std::path::Path;

use kdc_core::config::ExperimentConfig;
use kdc_core::dataset::write_synthetic_dataset;
use kdc_core::trainer::{
    checkpoint_path, read_loss_log, run_experiment, steps_for, verify_snapshot, Checkpoint, RunOptions, TrainMode,
    CONFIG_SNAPSHOT, LOSS_LOG,
};
use kdc_core::Error;

fn config(dir: &Path, extra: &str) -> ExperimentConfig {
    let data = dir.join("data");
    if !data.exists() {
        write_synthetic_dataset(&data, &["circle", "square"], 5, 16, 21).unwrap();
    }
    let text = format!(
        r#"
schema_version = 1
[train]
class_order = ["circle", "square"]
epochs_per_class = 2
batch_size = 2
grad_accum = 2
learning_rate = 1e-3
buffer_capacity = 3
seed = 4
{extra}
[teacher]
pretrain_steps = 2
batch_size = 2
[codec]
factor = 2
[eval]
samples_per_class = 2
sampling_steps = 2
saved_samples = 1
[paths]
data_root = "{}"
"#,
        data.display()
    );
    ExperimentConfig::from_toml_str(&text).unwrap()
}

#[test]
fn full_run_step_count_and_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "");
    let run = dir.path().join("run");
    let out = run_experiment(cfg.clone(), TrainMode::Full, &run, &RunOptions::default()).unwrap();
    // Class 1 trains on its 5 images; class 2 on 5 images plus the 3 replayed.
    let want = steps_for(5, &cfg.train) + steps_for(8, &cfg.train);
    assert_eq!(out.optimizer_steps, want);
    let log = read_loss_log(&run.join(LOSS_LOG)).unwrap();
    assert_eq!(log.len() as u64, want);
    assert!(log.iter().all(|r| r.losses.l_soft.is_some() && r.losses.total.is_finite()));
    assert_eq!(out.buffer.len(), 3);
    assert_eq!(out.reports.len(), 2);
    for rel in [
        "metrics/class_1.json",
        "metrics/class_2/circle.json",
        "metrics/class_2/square.json",
        "samples/class_2/circle_0.png",
        "buffer.bin",
        "teacher.ckpt",
    ] {
        assert!(run.join(rel).is_file(), "{rel}");
    }
    verify_snapshot(&run).unwrap();
    let ck = Checkpoint::load(&checkpoint_path(&run, 2)).unwrap();
    assert_eq!(ck.classes_done, 2);
    assert_eq!(ck.step, want);
    assert_eq!(ck.buffer.len(), 3);
}

#[test]
fn baselines_disable_their_component() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "");
    let run = dir.path().join("no_replay");
    let out = run_experiment(cfg.clone(), TrainMode::NoReplay, &run, &RunOptions::default()).unwrap();
    assert!(out.buffer.is_empty());
    assert_eq!(out.optimizer_steps, 2 * steps_for(5, &cfg.train));

    let run = dir.path().join("no_kd");
    run_experiment(cfg, TrainMode::NoKd, &run, &RunOptions::default()).unwrap();
    let log = read_loss_log(&run.join(LOSS_LOG)).unwrap();
    assert!(log.iter().all(|r| r.losses.l_soft.is_none() && r.losses.l_feature.is_none()));
    assert!(log.iter().all(|r| r.losses.total == r.losses.l_mse));
}

#[test]
fn run_directory_guards() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "");
    let run = dir.path().join("run");
    let stop = RunOptions {
        stop_after_class: Some(1),
        ..Default::default()
    };
    run_experiment(cfg.clone(), TrainMode::Full, &run, &stop).unwrap();

    let again = run_experiment(cfg.clone(), TrainMode::Full, &run, &RunOptions::default());
    assert!(matches!(again, Err(Error::Usage(_))));

    let changed = config(dir.path(), "weight_decay = 0.02");
    let resume = RunOptions {
        resume: Some(checkpoint_path(&run, 1)),
        ..Default::default()
    };
    assert!(matches!(run_experiment(changed, TrainMode::Full, &run, &resume), Err(Error::Config(_))));

    std::fs::write(run.join(CONFIG_SNAPSHOT), "tampered").unwrap();
    assert!(matches!(verify_snapshot(&run), Err(Error::Validation(_))));
}

#[test]
fn mixed_precision_runs_and_differs() {
    let dir = tempfile::tempdir().unwrap();
    let full = config(dir.path(), "");
    let mixed = config(dir.path(), "precision = \"mixed\"");
    let a = run_experiment(full, TrainMode::NoReplay, &dir.path().join("a"), &RunOptions::default()).unwrap();
    let b = run_experiment(mixed, TrainMode::NoReplay, &dir.path().join("b"), &RunOptions::default()).unwrap();
    assert_eq!(a.optimizer_steps, b.optimizer_steps);
    let la = read_loss_log(&dir.path().join("a").join(LOSS_LOG)).unwrap();
    let lb = read_loss_log(&dir.path().join("b").join(LOSS_LOG)).unwrap();
    let gap = (la.last().unwrap().losses.total - lb.last().unwrap().losses.total).abs();
    assert!(gap > 0.0 && gap < 1e-2, "{gap}");
}
