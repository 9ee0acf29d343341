use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bevcvt_core::dataset::{DatasetConfig, TownEntry, BEV_FILE};
use bevcvt_core::metrics::{MetricsReport, MetricsTable};
use bevcvt_core::synthworld::{GridSpec, RigSpec};
use bevcvt_nn::cvt::CvtConfig;
use bevcvt_nn::training::{TrainConfig, BEST_CHECKPOINT};
use bevcvt_nn::ModelKind;
use bevcvt::visualize::PanelLayout;

fn bevcvt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bevcvt")).args(args).env_remove("BEVCVT_DATA_ROOT").output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stdout:\n{}\nstderr:\n{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_data_config() -> DatasetConfig {
    DatasetConfig {
        towns: vec![TownEntry { name: "town01".into(), seed: 1 }, TownEntry { name: "town02".into(), seed: 2 }],
        routes_per_town: 2,
        frames_per_route: Some(2),
        rig: RigSpec { width: 32, height: 32, ..RigSpec::default() },
        grid: GridSpec { height: 32, width: 32, resolution: 1.0, anchor_row: 24, anchor_col: 16 },
        ..DatasetConfig::default()
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) {
    std::fs::write(path, serde_json::to_string_pretty(value).unwrap()).unwrap();
}

fn gen_tiny(dir: &Path) -> PathBuf {
    let cfg = dir.join("data.json");
    write_json(&cfg, &tiny_data_config());
    let root = dir.join("data");
    ok(&bevcvt(&["gen-data", "--config", s(&cfg), "--out", s(&root)]));
    root
}

fn tiny_train_config(n_views: usize) -> TrainConfig {
    TrainConfig {
        model: ModelKind::Cvt,
        n_views,
        epochs: 1,
        batch_size: 2,
        cvt: CvtConfig { embed_dim: 16, n_heads: 2, backbone_widths: vec![8, 16, 16], map_resolution: 8, decoder_widths: vec![8], ..CvtConfig::default() },
        ..TrainConfig::default()
    }
}

fn train_tiny(dir: &Path, root: &Path, n_views: usize) -> PathBuf {
    let cfg = dir.join(format!("train{n_views}.json"));
    write_json(&cfg, &tiny_train_config(n_views));
    let run = dir.join(format!("run{n_views}"));
    ok(&bevcvt(&["train", "--config", s(&cfg), "--root", s(root), "--out", s(&run)]));
    run
}

#[test]
fn unknown_subcommand_and_flag_fail() {
    assert!(!bevcvt(&["frobnicate"]).status.success());
    assert!(!bevcvt(&["gen-data", "--no-such-flag"]).status.success());
    assert!(!bevcvt(&[]).status.success());
}

#[test]
fn invalid_config_value_exits_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = bevcvt(&["gen-data", "--set", "routes_per_town=0", "--out", s(&dir.path().join("d"))]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let out = bevcvt(&["gen-data", "--set", "no_such_key=1", "--out", s(&dir.path().join("d"))]);
    assert_eq!(out.status.code(), Some(2));
    let out = bevcvt(&["gen-data", "--set", "routes_per_town", "--out", s(&dir.path().join("d"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gen_data_refuses_rerun_and_force_is_identical() {
    let dir = tempfile::tempdir().unwrap();
    let root = gen_tiny(dir.path());
    let bev = root.join("town01/route01/000000").join(BEV_FILE);
    let before = std::fs::read(&bev).unwrap();
    let listing = std::fs::read(root.join("generation.json")).unwrap();

    let cfg = dir.path().join("data.json");
    let again = bevcvt(&["gen-data", "--config", s(&cfg), "--out", s(&root)]);
    assert_eq!(again.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&again.stderr).contains("error"));

    ok(&bevcvt(&["gen-data", "--config", s(&cfg), "--out", s(&root), "--force"]));
    assert_eq!(std::fs::read(&bev).unwrap(), before);
    assert_eq!(std::fs::read(root.join("generation.json")).unwrap(), listing);
}

#[test]
fn set_overrides_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("data.json");
    write_json(&cfg, &tiny_data_config());
    let root = dir.path().join("data");
    ok(&bevcvt(&["gen-data", "--config", s(&cfg), "--set", "frames_per_route=1", "--set", "towns[1].name=\"townB\"", "--out", s(&root)]));
    assert!(root.join("town01/route01/000000").is_dir());
    assert!(!root.join("town01/route01/000001").exists());
    assert!(root.join("townB").is_dir());
    assert!(!root.join("town02").exists());
}

#[test]
fn report_lists_missing_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("nope_a.json");
    let b = dir.path().join("nope_b");
    let out = bevcvt(&["report", s(&a), s(&b), "--out", s(&dir.path().join("r"))]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("nope_a.json") && err.contains("nope_b"), "{err}");
}

#[test]
fn train_eval_report_visualize() {
    let dir = tempfile::tempdir().unwrap();
    let root = gen_tiny(dir.path());
    let run = train_tiny(dir.path(), &root, 4);
    let ckpt = run.join(BEST_CHECKPOINT);
    assert!(ckpt.exists());

    // a second train into the same directory is refused
    let again = bevcvt(&["train", "--config", s(&dir.path().join("train4.json")), "--root", s(&root), "--out", s(&run)]);
    assert!(!again.status.success());

    let stdout = ok(&bevcvt(&["eval", "--checkpoint", s(&ckpt), "--root", s(&root), "--split", "test"]));
    assert!(stdout.contains("Road"));
    let eval: MetricsReport = serde_json::from_str(&std::fs::read_to_string(run.join("eval_test.json")).unwrap()).unwrap();
    assert_eq!(eval.split, "test");
    assert!(!eval.per_route.is_empty());

    let report = dir.path().join("report");
    ok(&bevcvt(&["report", s(&run), "--out", s(&report)]));
    let text = MetricsTable::parse_text(&std::fs::read_to_string(report.join("table_test.txt")).unwrap()).unwrap();
    let json: MetricsTable = serde_json::from_str(&std::fs::read_to_string(report.join("table_test.json")).unwrap()).unwrap();
    assert_eq!(text, json);
    assert_eq!(text.rows.len(), 1);
    assert!((text.rows[0].road.unwrap() - eval.overall.road.unwrap()).abs() <= 5e-5);
    assert!(report.join("losses.svg").exists());
    assert!(std::fs::read_dir(report.join("traces")).unwrap().next().is_some());

    // unknown sample
    let bad = bevcvt(&["visualize", "--checkpoint", s(&ckpt), "--root", s(&root), "--sample", "town09/route01/000000", "--out", s(&dir.path().join("p"))]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("town09/route01/000000"));

    let panels = dir.path().join("panels");
    let id = "town02/route01/000001";
    ok(&bevcvt(&["visualize", "--checkpoint", s(&ckpt), "--root", s(&root), "--sample", id, "--out", s(&panels)]));
    let panel = image::open(panels.join("panel_town02_route01_000001.png")).unwrap().to_rgb8();
    let layout = PanelLayout { n_views: 4, tile_width: 32, tile_height: 32 };
    assert_eq!(layout.n_tiles(), 7);
    assert_eq!(panel.dimensions(), layout.size());
    let gt = image::open(root.join(id).join(BEV_FILE)).unwrap().to_rgb8();
    assert_eq!(layout.crop(&panel, layout.ground_truth_tile()), gt);

    // a three-view model drops the rear view
    let run3 = train_tiny(dir.path(), &root, 3);
    ok(&bevcvt(&["visualize", "--checkpoint", s(&run3.join(BEST_CHECKPOINT)), "--root", s(&root), "--sample", id, "--out", s(&panels), "--force"]));
    let panel = image::open(panels.join("panel_town02_route01_000001.png")).unwrap().to_rgb8();
    let layout = PanelLayout { n_views: 3, ..layout };
    assert_eq!(panel.dimensions(), layout.size());
    assert_eq!(layout.crop(&panel, layout.ground_truth_tile()), gt);
}

#[test]
fn eval_rejects_config_flags() {
    let out = bevcvt(&["eval", "--checkpoint", "x.safetensors", "--root", ".", "--set", "a=1"]);
    assert_eq!(out.status.code(), Some(2));
}
