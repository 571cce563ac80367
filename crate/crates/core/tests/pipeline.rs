use std::fmt::Write as _;

use boundary_unlearning::config::{ExperimentConfig, DEFAULT_CONFIG};
use boundary_unlearning::data::make_blobs;
use boundary_unlearning::eval::accuracy;
use boundary_unlearning::experiment::{load_dataset, run_experiment, train_original, TABLE1_FILE};
use boundary_unlearning::Error;

fn csv_config(path: &std::path::Path, out: &std::path::Path) -> String {
    DEFAULT_CONFIG
        .replace("data.source = \"blobs\"", &format!("data.source = \"csv\"\ndata.path = {path:?}\ndata.header = true"))
        .replace("data.per_class = 200\n", "")
        .replace("data.spread = 0.06\n", "")
        .replace("data.num_classes = 10", "data.num_classes = 3")
        .replace("train.epochs = 100", "train.epochs = 30")
        .replace("raster.resolution = 512", "raster.resolution = 8")
        .replace("output.dir = \"runs/default\"", &format!("output.dir = {out:?}"))
}

#[test]
fn default_blobs_are_fit_by_the_default_network() {
    let cfg = ExperimentConfig::parse(DEFAULT_CONFIG).unwrap();
    let ds = load_dataset(&cfg).unwrap();
    assert_eq!(ds.train.len(), 1600);
    assert_eq!(ds.test.len(), 400);
    let (model, _) = train_original(&cfg, &ds).unwrap();
    assert_eq!(model.widths(), vec![2, 64, 64, 10]);
    assert!(accuracy(&model, &ds.train).unwrap() >= 0.99);
}

#[test]
fn csv_dataset_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let ds = make_blobs(3, 40, 2, 0.1, 5).unwrap();
    let mut text = String::from("x,y,label\n");
    for e in ds.train.iter().chain(&ds.test) {
        let _ = writeln!(text, "{},{},{}", e.x()[0], e.x()[1], e.label);
    }
    let csv = dir.path().join("points.csv");
    std::fs::write(&csv, text).unwrap();
    let out = dir.path().join("run");
    let cfg = ExperimentConfig::parse(&csv_config(&csv, &out)).unwrap();
    let run = run_experiment(&cfg).unwrap();
    assert_eq!(run.results.num_classes, 3);
    assert_eq!(run.split.forget_train.len() + run.split.forget_test.len(), 40);
    assert!(out.join(TABLE1_FILE).exists());
    assert!(out.join("raster_boundary_shrink.pgm").exists());
}

#[test]
fn failed_run_names_the_stage_and_removes_its_output() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bad.csv");
    std::fs::write(&csv, "x,y,label\n0.1,0.2,0\n0.3,0.4,7\n").unwrap();
    let out = dir.path().join("run");
    let cfg = ExperimentConfig::parse(&csv_config(&csv, &out)).unwrap();
    let err = run_experiment(&cfg).unwrap_err();
    match &err {
        Error::Stage { stage, source } => {
            assert_eq!(stage, "data");
            assert!(source.to_string().contains("bad.csv:3"), "{source}");
        }
        other => panic!("unexpected error {other}"),
    }
    assert!(!out.exists());
}
