mod common;

use bevcvt_core::dataset::{generate_dataset, Split};
use bevcvt_core::synthworld::RigSpec;
use bevcvt_nn::losses::{LossConfig, LossKind};
use bevcvt_nn::training::{
    batch_loss, evaluate, evaluate_model, load_split, standard_matrix, run_experiment_matrix, score_predictions, train_model,
    train_on, ExperimentCell, RunRecord, TrainConfig, BEST_CHECKPOINT, LAST_CHECKPOINT, RUN_FILE,
};
use bevcvt_nn::{Batch, BevModel, ModelConfig, ModelKind, NnError};
use candle_core::Device;
use common::{tiny_cvt, tiny_dataset, tiny_unet};
use ndarray::Array3;

fn tiny_train_config(model: ModelKind) -> TrainConfig {
    TrainConfig {
        model,
        epochs: 1,
        batch_size: 4,
        cvt: tiny_cvt(4),
        unet: tiny_unet(4),
        ..TrainConfig::default()
    }
}

#[test]
fn one_epoch_run_is_recorded_and_repeatable() {
    let data = tempfile::tempdir().unwrap();
    tiny_dataset(data.path(), 8);
    let out = tempfile::tempdir().unwrap();
    for model in [ModelKind::Cvt, ModelKind::Unet] {
        let cfg = tiny_train_config(model);
        let a = train_model(&cfg, data.path(), &out.path().join("a")).unwrap();
        let b = train_model(&cfg, data.path(), &out.path().join("b")).unwrap();
        assert_eq!(a.epochs.len(), 1);
        assert!(a.epochs[0].train_loss.is_finite() && a.epochs[0].val_loss.is_finite());
        assert!((a.epochs[0].train_loss - b.epochs[0].train_loss).abs() <= 1e-6);
        assert!((a.epochs[0].val_loss - b.epochs[0].val_loss).abs() <= 1e-6);
        assert!(a.best_checkpoint.exists() && a.last_checkpoint.exists());

        let lines = std::fs::read_to_string(out.path().join("a").join(RUN_FILE)).unwrap();
        assert_eq!(lines.lines().count(), 1);
        let loaded = RunRecord::load(&out.path().join("a")).unwrap();
        assert_eq!(loaded.train_losses(), a.train_losses());
        assert_eq!(loaded.config, cfg);
    }
}

#[test]
fn best_checkpoint_tracks_the_lowest_validation_loss() {
    let data = tempfile::tempdir().unwrap();
    let m = tiny_dataset(data.path(), 4);
    let train = load_split(data.path(), &m, Split::Train, 4, None).unwrap();
    let val = load_split(data.path(), &m, Split::Val, 4, None).unwrap();
    let cfg = TrainConfig { epochs: 3, checkpoint_every: 2, ..tiny_train_config(ModelKind::Unet) };
    let out = tempfile::tempdir().unwrap();
    let model = BevModel::new(&cfg.model_config(&m), 0, &Device::Cpu).unwrap();
    let run = train_on(&cfg, model, &train, &val, out.path()).unwrap();
    assert_eq!(run.epochs.len(), 3);
    let best = run.epochs.iter().min_by(|a, b| a.val_loss.total_cmp(&b.val_loss)).unwrap().epoch;
    assert_eq!(run.best_epoch, best);
    assert!(out.path().join("epoch002.safetensors").exists());
    assert!(!out.path().join("epoch001.safetensors").exists());
    // the best checkpoint reproduces the recorded validation loss
    let reloaded = BevModel::load(&out.path().join(BEST_CHECKPOINT), &Device::Cpu).unwrap();
    let refs: Vec<_> = val.iter().collect();
    let loss = batch_loss(&reloaded, &cfg.loss, &Batch::from_samples(&refs, &Device::Cpu).unwrap()).unwrap();
    assert!((loss - run.epochs[best - 1].val_loss).abs() < 1e-6);
}

#[test]
fn view_count_mismatch_fails_before_training() {
    let data = tempfile::tempdir().unwrap();
    let cfg = common::tiny_config(2);
    let cfg = bevcvt_core::dataset::DatasetConfig { rig: RigSpec { n_views: 3, ..cfg.rig }, ..cfg };
    generate_dataset(&cfg, data.path(), false).unwrap();
    let out = tempfile::tempdir().unwrap();
    let err = train_model(&tiny_train_config(ModelKind::Cvt), data.path(), &out.path().join("run")).unwrap_err();
    assert!(matches!(err, NnError::Config(_)), "{err}");
    assert!(!out.path().join("run").exists());
}

#[test]
fn validation_pass_leaves_parameters_untouched() {
    let data = tempfile::tempdir().unwrap();
    let m = tiny_dataset(data.path(), 2);
    let samples = load_split(data.path(), &m, Split::Val, 4, None).unwrap();
    let refs: Vec<_> = samples.iter().collect();
    let batch = Batch::from_samples(&refs, &Device::Cpu).unwrap();
    let model = BevModel::new(&ModelConfig::Cvt(tiny_cvt(4)), 0, &Device::Cpu).unwrap();
    let before: Vec<Vec<f32>> = model.params().vars().iter().map(|v| v.flatten_all().unwrap().to_vec1().unwrap()).collect();
    batch_loss(&model, &LossConfig::default(), &batch).unwrap();
    evaluate_model(&model, "m", "val", &samples, 0.5, 2).unwrap();
    let after: Vec<Vec<f32>> = model.params().vars().iter().map(|v| v.flatten_all().unwrap().to_vec1().unwrap()).collect();
    assert!(before.iter().flatten().zip(after.iter().flatten()).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn checkpoint_round_trip_preserves_metrics() {
    let data = tempfile::tempdir().unwrap();
    let m = tiny_dataset(data.path(), 3);
    let samples = load_split(data.path(), &m, Split::Test, 4, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for cfg in [ModelConfig::Cvt(tiny_cvt(4)), ModelConfig::Unet(tiny_unet(4))] {
        let model = BevModel::new(&cfg, 9, &Device::Cpu).unwrap();
        let path = dir.path().join("m.safetensors");
        model.save_with(&path, &[("label", "tiny".into())]).unwrap();
        let (loaded, meta) = BevModel::load_with_metadata(&path, &Device::Cpu).unwrap();
        assert_eq!(meta["label"], "tiny");
        assert_eq!(loaded.config(), cfg);
        let a = evaluate_model(&model, "tiny", "test", &samples, 0.5, 4).unwrap();
        let b = evaluate_model(&loaded, "tiny", "test", &samples, 0.5, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(evaluate(&path, data.path(), Split::Test, 0.5).unwrap(), a);
    }
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.safetensors");
    BevModel::new(&ModelConfig::Unet(tiny_unet(4)), 0, &Device::Cpu).unwrap().save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(BevModel::load(&path, &Device::Cpu), Err(NnError::Checkpoint { .. })));
    assert!(BevModel::load(&dir.path().join("missing.safetensors"), &Device::Cpu).is_err());
}

#[test]
fn oracle_and_constant_predictions() {
    let data = tempfile::tempdir().unwrap();
    let m = tiny_dataset(data.path(), 3);
    let samples = load_split(data.path(), &m, Split::Test, 4, None).unwrap();
    let perfect: Vec<Array3<f32>> = samples.iter().map(|s| s.bev_gt.data.mapv(|v| if v != 0 { 10.0 } else { -10.0 })).collect();
    let report = score_predictions("oracle", "test", &samples, &perfect, 0.5).unwrap();
    for v in [report.overall.road, report.overall.trajectory, report.overall.lane] {
        assert_eq!(v, Some(1.0));
    }
    assert_eq!(report.per_route.len(), 2);
    assert_eq!(report.traces.len(), 2);

    let negative: Vec<Array3<f32>> = samples.iter().map(|s| s.bev_gt.data.mapv(|_| -10.0)).collect();
    assert!(samples.iter().all(|s| s.bev_gt.data.index_axis(ndarray::Axis(0), 0).iter().any(|&v| v != 0)));
    let report = score_predictions("negative", "test", &samples, &negative, 0.5).unwrap();
    assert_eq!(report.overall.road, Some(0.0));
    assert!(score_predictions("short", "test", &samples, &negative[1..], 0.5).is_err());
}

#[test]
fn non_finite_loss_names_the_batch() {
    let data = tempfile::tempdir().unwrap();
    let m = tiny_dataset(data.path(), 4);
    let train = load_split(data.path(), &m, Split::Train, 4, None).unwrap();
    let val = load_split(data.path(), &m, Split::Val, 4, None).unwrap();
    let cfg = tiny_train_config(ModelKind::Unet);
    let model = BevModel::new(&cfg.model_config(&m), 0, &Device::Cpu).unwrap();
    let poisoned = model
        .params()
        .named()
        .iter()
        .map(|(k, v)| (k.clone(), (v.as_tensor() * f64::NAN).unwrap()))
        .collect();
    model.params().assign(&poisoned).unwrap();
    let out = tempfile::tempdir().unwrap();
    match train_on(&cfg, model, &train, &val, out.path()) {
        Err(NnError::NonFinite { epoch, batch, samples, .. }) => {
            assert_eq!((epoch, batch), (1, 0));
            assert!(samples.contains("town01/route01/"), "{samples}");
        }
        other => panic!("expected a non-finite loss error, got {:?}", other.map(|r| r.epochs.len())),
    }
    assert!(!out.path().join(LAST_CHECKPOINT).exists());
}

#[test]
fn experiment_matrix_layout() {
    let cells = standard_matrix();
    assert_eq!(cells.len(), 6);
    assert_eq!(cells.iter().filter(|c| c.model == ModelKind::Unet).count(), 2);
    assert!(cells.iter().filter(|c| c.model == ModelKind::Unet).all(|c| c.n_views == 4));
    let names: Vec<String> = cells.iter().map(|c| c.config(&TrainConfig::default()).display_name()).collect();
    assert_eq!(names[0], "CVT, Focal loss - 4 cams");
    assert_eq!(names[3], "Unet, L1 - 4 cams");
    assert_eq!(names[5], "CVT, L1 - 3 cams");
}

#[test]
fn single_cell_matrix_gives_one_row_and_survives_failures() {
    let data = tempfile::tempdir().unwrap();
    tiny_dataset(data.path(), 2);
    let out = tempfile::tempdir().unwrap();
    let base = tiny_train_config(ModelKind::Cvt);
    let cell = ExperimentCell { model: ModelKind::Unet, loss: LossKind::L1, n_views: 4 };
    let report = run_experiment_matrix(&base, &[cell], data.path(), out.path()).unwrap();
    assert_eq!(report.test_table.rows.len(), 1);
    assert_eq!(report.val_table.rows.len(), 1);
    assert_eq!(report.test_table.rows[0].model, "Unet, L1 - 4 cams");
    assert!(out.path().join(cell.slug()).join("eval_test.json").exists());

    // a cell that cannot run (five views) is reported and the next one still trains
    let bad = ExperimentCell { n_views: 5, ..cell };
    let report = run_experiment_matrix(&base, &[bad, cell], data.path(), out.path()).unwrap();
    assert!(report.outcomes[0].error.is_some());
    assert!(report.outcomes[1].error.is_none());
    assert_eq!(report.test_table.rows.len(), 1);
}
