use std::fs;
use std::path::Path;

use tempfile::tempdir;
use tsc_core::dataio::{scan_directory, LabelSchema};
use tsc_core::harness::*;
use tsc_core::model::{LossKind, TrainingHistory, HISTORY_HEADER};
use tsc_core::stats::{class_distribution, scatter_table, write_scatter_csv};
use tsc_core::synthetic::{write_corpus, SyntheticConfig};

fn corpus(root: &Path, n: usize) {
    write_corpus(root, &SyntheticConfig { n_per_class: n, side: 32, noise: 0.1, seed: 5 }).unwrap();
}

fn small_config(data: &Path, out: &Path, mode: Mode) -> ExperimentConfig {
    let mut c = ExperimentConfig { mode, data_root: Some(data.to_path_buf()), output_dir: Some(out.to_path_buf()), ..Default::default() };
    c.model.input = [32, 32, 1];
    c.model.conv1 = 4;
    c.model.conv2 = 4;
    c.model.dense = 8;
    c.train.epochs = 2;
    c.train.batch_size = 8;
    c.k = 2;
    c
}

#[test]
fn one_shot_cross_validation_artifacts() {
    let dir = tempdir().unwrap();
    let data = dir.path().join("data");
    corpus(&data, 20);
    let out = dir.path().join("run");
    let cfg = small_config(&data, &out, Mode::OneShot);
    let r = run_cross_validation(&cfg).unwrap();
    assert_eq!(r.folds.len(), 2);
    assert_eq!(r.holdout_size, 16);
    for f in [
        "config.snapshot",
        "history.csv",
        "confusion_one_shot.csv",
        "report_one_shot.txt",
        "report_one_shot.json",
        "predictions.csv",
        "model_one_shot.json",
        "comparison.csv",
        "result.json",
    ] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    assert!(!out.join(".lock").exists());
    let history = fs::read_to_string(out.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 1 + 2 * 2);
    assert_eq!(history.lines().next().unwrap(), HISTORY_HEADER);
    let parsed = TrainingHistory::read_csv(&out.join("history.csv")).unwrap();
    assert_eq!(parsed.rows.iter().map(|r| r.fold).collect::<Vec<_>>(), vec![0, 0, 1, 1]);
    assert_eq!(fs::read_to_string(out.join("predictions.csv")).unwrap().lines().count(), 17);

    let snap = ExperimentConfig::from_toml(&fs::read_to_string(out.join("config.snapshot")).unwrap()).unwrap();
    assert_eq!(snap, cfg);
    let summary = ResultSummary::load(&out).unwrap();
    assert_eq!(summary.fold_accuracies.len(), 2);
    assert!((summary.accuracy - r.aggregate.mean).abs() < 1e-12);

    let model = tsc_core::Model::load(&out.join("model_one_shot.json")).unwrap();
    let test = scan_directory(&data, &LabelSchema::multiclass4()).unwrap().manifest;
    assert_eq!(model.predict_labels(&test).unwrap().len(), 80);
}

#[test]
fn cascade_writes_stage_artifacts() {
    let dir = tempdir().unwrap();
    let data = dir.path().join("data");
    corpus(&data, 15);
    let out = dir.path().join("cascade");
    let mut cfg = small_config(&data, &out, Mode::Cascade);
    cfg.k = 0;
    let r = run_experiment(&cfg).unwrap();
    assert_eq!(r.folds.len(), 1);
    for f in ["history_stage1.csv", "history_stage2.csv", "confusion_cascade.csv", "report_stage1.txt", "report_stage2.txt", "model_stage1.json", "model_stage2.json"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let preds = fs::read_to_string(out.join("predictions.csv")).unwrap();
    assert!(preds.starts_with("id,true_label,pred_label,p_normal,p_covid,p_opacity,p_pneumonia\n"));
}

#[test]
fn stage_modes_and_transfer_head() {
    let dir = tempdir().unwrap();
    let data = dir.path().join("data");
    corpus(&data, 12);
    let out = dir.path().join("s1");
    let mut cfg = small_config(&data, &out, Mode::Stage1);
    cfg.model.kind = ModelKind::Transfer;
    cfg.model.backbone = tsc_core::model::BackboneSpec::RandomProjection { input_side: 16, feature_dim: 32, seed: 1 };
    cfg.model.hidden = 8;
    let r = run_experiment(&cfg).unwrap();
    assert_eq!(r.trainable_parameters, 32 * 8 + 8 + 9);
    let cm = fs::read_to_string(out.join("confusion_stage1.csv")).unwrap();
    assert!(cm.starts_with("true\\pred,disease,normal"));
}

#[test]
fn config_errors() {
    let dir = tempdir().unwrap();
    let mut cfg = small_config(dir.path(), &dir.path().join("o"), Mode::OneShot);
    cfg.train.loss = Some(LossKind::BinaryCrossEntropy);
    let err = run_experiment(&cfg).unwrap_err();
    assert!(!err.is_runtime(), "{err}");
    assert!(ExperimentConfig::from_toml("mode = \"triage\"").is_err());
    assert!(ExperimentConfig::from_toml("unknown_key = 1").is_err());
    let mut cfg = small_config(dir.path(), &dir.path().join("o"), Mode::OneShot);
    cfg.k = 1;
    assert!(run_cross_validation(&cfg).is_err());
}

#[test]
fn output_lock_is_exclusive() {
    let dir = tempdir().unwrap();
    let lock = OutputLock::acquire(dir.path()).unwrap();
    assert!(matches!(OutputLock::acquire(dir.path()), Err(HarnessError::OutputLocked(_))));
    drop(lock);
    assert!(OutputLock::acquire(dir.path()).is_ok());
}

#[test]
fn stats_on_scanned_corpus() {
    let dir = tempdir().unwrap();
    corpus(dir.path(), 3);
    let m = scan_directory(dir.path(), &LabelSchema::multiclass4()).unwrap().manifest;
    assert_eq!(class_distribution(&m).values().sum::<usize>(), 12);
    let rows = scatter_table(&m).unwrap();
    assert_eq!(rows.len(), 12);
    assert!(rows.iter().all(|r| r.channel_mean.len() == 1 && (0.0..=1.0).contains(&r.channel_mean[0])));
    let p = dir.path().join("scatter.csv");
    write_scatter_csv(&rows, &p).unwrap();
    assert_eq!(fs::read_to_string(&p).unwrap().lines().count(), 13);
}
