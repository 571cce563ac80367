//! End-to-end orchestration: train the original model, run every configured
//! unlearning method, evaluate, and write the result tables.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint, write_atomic, Provenance};
use crate::config::{DataSpec, ExperimentConfig};
use crate::data::{forget_split, load_csv, make_blobs, AccessCounter, CsvOptions, ForgetSplit, LabeledDataset};
use crate::error::{Error, Result};
use crate::eval::{evaluate, speedup_ratio, Bounds2D, EvalReport, Raster, RasterSpec};
use crate::nn::{train, Classifier};
use crate::rng::seeded;
use crate::unlearn::{
    boundary_expand, boundary_shrink, finetune_baseline, negative_gradient_baseline, random_labels_baseline, retrain,
    Method, UnlearnResult,
};

/// Row label of the model before unlearning.
pub const ORIGINAL: &str = "original";

/// Table rows in display order.
pub const TABLE_ORDER: [&str; 7] = [
    ORIGINAL,
    "retrain",
    "finetune",
    "negative_gradient",
    "random_labels",
    "boundary_shrink",
    "boundary_expanding",
];

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<LabeledDataset> {
    match &cfg.data {
        DataSpec::Blobs {
            num_classes,
            per_class,
            feature_dim,
            spread,
        } => make_blobs(*num_classes, *per_class, *feature_dim, *spread, cfg.data_seed()),
        DataSpec::Csv {
            path,
            num_classes,
            feature_dim,
            header,
        } => load_csv(
            path,
            &CsvOptions {
                num_classes: *num_classes,
                feature_dim: *feature_dim,
                header: *header,
                seed: cfg.data_seed(),
            },
        ),
    }
}

/// Trains the original model on the full training set; returns it with its wall-clock.
pub fn train_original(cfg: &ExperimentConfig, ds: &LabeledDataset) -> Result<(Classifier, f64)> {
    let start = Instant::now();
    let init = Classifier::random(&cfg.widths(), &mut seeded(cfg.init_seed()))?;
    let model = train(&init, &ds.train, &cfg.train_optimizer())?;
    Ok((model, start.elapsed().as_secs_f64()))
}

/// Runs one method through an access-counting view of the split and checks
/// that it read only the part it is allowed to.
pub fn run_method(cfg: &ExperimentConfig, original: &Classifier, split: &ForgetSplit, method: Method) -> Result<UnlearnResult> {
    let view = AccessCounter::new(split);
    let opt = cfg.method_optimizer(method);
    let result = match method {
        Method::BoundaryShrink => boundary_shrink(original, &view, &cfg.shrink_config())?,
        Method::BoundaryExpand => boundary_expand(original, &view, &opt)?,
        Method::Retrain => retrain(&view, &cfg.widths(), &opt, cfg.retrain_init_seed())?,
        Method::Finetune => finetune_baseline(original, &view, &opt)?,
        Method::RandomLabels => random_labels_baseline(original, &view, &opt, cfg.relabel_seed())?,
        Method::NegativeGradient => negative_gradient_baseline(original, &view, &opt)?,
    };
    let log = view.log();
    let forget_only = !matches!(method, Method::Retrain | Method::Finetune);
    if forget_only && log.remain_reads > 0 {
        return Err(Error::AccessViolation(format!(
            "{method} read {} remaining-data examples",
            log.remain_reads
        )));
    }
    if !forget_only && (log.forget_reads > 0 || log.forget_class_in_remain > 0) {
        return Err(Error::AccessViolation(format!(
            "{method} read {} forgetting-data examples",
            log.forget_reads + log.forget_class_in_remain
        )));
    }
    if result.model.output_dim() != split.num_classes {
        return Err(Error::state(format!("{method} returned a model of the wrong width")));
    }
    Ok(result)
}

/// Raster settings for this dataset, or `None` when features are not 2-d.
pub fn raster_spec(cfg: &ExperimentConfig, ds: &LabeledDataset) -> Result<Option<RasterSpec>> {
    if ds.feature_dim != 2 {
        return Ok(None);
    }
    Ok(Some(RasterSpec {
        bounds: Bounds2D::around(&ds.train, cfg.raster_margin)?,
        resolution: cfg.raster_resolution,
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: String,
    pub report: EvalReport,
}

/// Contents of `results.json`. Wall-clock times live in `timing.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResults {
    pub config_digest: String,
    pub seed: u64,
    pub forget_class: usize,
    pub num_classes: usize,
    pub attack: String,
    pub rows: Vec<MethodRow>,
}

impl RunResults {
    pub fn row(&self, method: &str) -> Option<&EvalReport> {
        self.rows.iter().find(|r| r.method == method).map(|r| &r.report)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub method: String,
    pub wall_clock_seconds: f64,
    pub speedup_vs_retrain: Option<f64>,
}

/// Everything produced by [`run_experiment`], kept in memory for callers.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub results: RunResults,
    pub timing: Vec<TimingRow>,
    pub models: Vec<(String, Classifier)>,
    pub split: ForgetSplit,
    pub rasters: Vec<(String, Raster)>,
}

impl RunOutput {
    pub fn model(&self, method: &str) -> Option<&Classifier> {
        self.models.iter().find(|(m, _)| m == method).map(|(_, c)| c)
    }
}

pub const CONFIG_FILE: &str = "config.json";
pub const RESULTS_FILE: &str = "results.json";
pub const TABLE1_FILE: &str = "table1.csv";
pub const ASR_FILE: &str = "asr.csv";
pub const ENTROPY_FILE: &str = "entropy.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";

pub fn checkpoint_path(dir: &Path, method: &str) -> PathBuf {
    dir.join(CHECKPOINT_DIR).join(format!("{method}.buln"))
}

/// Tracks files written during a run so a failed run can remove them.
struct Artifacts {
    dir: PathBuf,
    written: Vec<PathBuf>,
    created_dirs: Vec<PathBuf>,
}

impl Artifacts {
    fn new(dir: &Path) -> Result<Self> {
        let mut created_dirs = Vec::new();
        for d in [dir.to_path_buf(), dir.join(CHECKPOINT_DIR)] {
            if !d.exists() {
                std::fs::create_dir_all(&d)?;
                created_dirs.push(d);
            }
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
            created_dirs,
        })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        write_atomic(&path, bytes)?;
        self.written.push(path);
        Ok(())
    }

    fn checkpoint(&mut self, model: &Classifier, prov: &Provenance) -> Result<()> {
        let path = checkpoint_path(&self.dir, &prov.method);
        save_checkpoint(model, prov, &path)?;
        self.written.push(path);
        Ok(())
    }

    fn discard(self) {
        for f in &self.written {
            let _ = std::fs::remove_file(f);
        }
        for d in self.created_dirs.iter().rev() {
            let _ = std::fs::remove_dir(d);
        }
    }
}

fn stage<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage {
        stage: name.to_string(),
        source: Box::new(e),
    })
}

/// Runs the whole pipeline and writes all artifacts into `cfg.output_dir`.
/// On failure, files written by this call are removed.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    stage("config", cfg.validate())?;
    let mut artifacts = stage("output", Artifacts::new(&cfg.output_dir))?;
    match run_inner(cfg, &mut artifacts) {
        Ok(out) => Ok(out),
        Err(e) => {
            artifacts.discard();
            Err(e)
        }
    }
}

fn run_inner(cfg: &ExperimentConfig, artifacts: &mut Artifacts) -> Result<RunOutput> {
    let ds = stage("data", load_dataset(cfg))?;
    let split = stage("split", forget_split(&ds, cfg.forget_class))?;
    let (original, original_secs) = stage("train", train_original(cfg, &ds))?;

    let mut models = vec![(ORIGINAL.to_string(), original.clone())];
    let mut timings = vec![(ORIGINAL.to_string(), original_secs)];
    let mut methods = cfg.methods.clone();
    if !methods.contains(&Method::Retrain) {
        methods.insert(0, Method::Retrain);
    }
    for method in methods {
        let r = stage(method.name(), run_method(cfg, &original, &split, method))?;
        timings.push((method.name().to_string(), r.wall_clock_seconds));
        models.push((method.name().to_string(), r.model));
    }
    models.sort_by_key(|(m, _)| table_rank(m));
    timings.sort_by_key(|(m, _)| table_rank(m));

    let digest = cfg.digest();
    for (method, model) in &models {
        let prov = Provenance {
            method: method.clone(),
            seed: cfg.seed,
            config_digest: digest.clone(),
            num_classes: split.num_classes,
        };
        stage("checkpoint", artifacts.checkpoint(model, &prov))?;
    }
    stage("config", artifacts.write(CONFIG_FILE, &serde_json::to_vec_pretty(cfg)?))?;

    let raster = stage("evaluate", raster_spec(cfg, &ds))?;
    let (results, rasters) = stage("evaluate", evaluate_models(cfg, &split, &models, raster.as_ref()))?;
    for (method, grid) in &rasters {
        let mut pgm = Vec::new();
        grid.write_pgm(&mut pgm)?;
        stage("raster", artifacts.write(&format!("raster_{method}.pgm"), &pgm))?;
        stage(
            "raster",
            artifacts.write(&format!("raster_{method}.json"), &serde_json::to_vec_pretty(&grid.sidecar())?),
        )?;
    }

    let retrain_secs = timings
        .iter()
        .find(|(m, _)| m == Method::Retrain.name())
        .map(|(_, s)| *s)
        .expect("retrain always runs");
    let timing: Vec<TimingRow> = timings
        .into_iter()
        .map(|(method, secs)| TimingRow {
            speedup_vs_retrain: (method != ORIGINAL).then(|| speedup_ratio(retrain_secs, secs)),
            method,
            wall_clock_seconds: secs,
        })
        .collect();

    stage("write", write_tables(artifacts, &results))?;
    stage("write", artifacts.write(TIMING_FILE, timing_csv(&timing).as_bytes()))?;

    Ok(RunOutput {
        dir: cfg.output_dir.clone(),
        results,
        timing,
        models,
        split,
        rasters,
    })
}

fn table_rank(method: &str) -> usize {
    TABLE_ORDER.iter().position(|m| *m == method).unwrap_or(TABLE_ORDER.len())
}

fn evaluate_models(
    cfg: &ExperimentConfig,
    split: &ForgetSplit,
    models: &[(String, Classifier)],
    raster: Option<&RasterSpec>,
) -> Result<(RunResults, Vec<(String, Raster)>)> {
    let mut rows = Vec::with_capacity(models.len());
    let mut rasters = Vec::new();
    for (method, model) in models {
        let (report, grid) = evaluate(model, split, &cfg.mia, raster)?;
        rows.push(MethodRow {
            method: method.clone(),
            report,
        });
        if let Some(g) = grid {
            rasters.push((method.clone(), g));
        }
    }
    Ok((
        RunResults {
            config_digest: cfg.digest(),
            seed: cfg.seed,
            forget_class: split.forget_class,
            num_classes: split.num_classes,
            attack: "entropy-threshold MIA".into(),
            rows,
        },
        rasters,
    ))
}

fn write_tables(artifacts: &mut Artifacts, results: &RunResults) -> Result<()> {
    artifacts.write(RESULTS_FILE, &results_json(results)?)?;
    artifacts.write(TABLE1_FILE, table1_csv(results).as_bytes())?;
    artifacts.write(ASR_FILE, asr_csv(results).as_bytes())?;
    artifacts.write(ENTROPY_FILE, entropy_csv(results).as_bytes())?;
    Ok(())
}

pub fn results_json(results: &RunResults) -> Result<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(results)?;
    v.push(b'\n');
    Ok(v)
}

/// Four accuracies per method, in percent.
pub fn table1_csv(results: &RunResults) -> String {
    let mut s = String::from("method,acc_remain_train,acc_forget_train,acc_remain_test,acc_forget_test\n");
    for row in &results.rows {
        let r = &row.report;
        let _ = writeln!(
            s,
            "{},{:.2},{:.2},{:.2},{:.2}",
            row.method,
            100.0 * r.acc_remain_train,
            100.0 * r.acc_forget_train,
            100.0 * r.acc_remain_test,
            100.0 * r.acc_forget_test
        );
    }
    s
}

pub fn asr_csv(results: &RunResults) -> String {
    let mut s = String::from("method,asr,threshold,attack_balanced_accuracy,degenerate\n");
    for row in &results.rows {
        let m = &row.report.mia;
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            row.method, m.asr, m.threshold, m.attack_balanced_accuracy, m.degenerate
        );
    }
    s
}

pub fn entropy_csv(results: &RunResults) -> String {
    let mut s = String::from("method,split,entropy\n");
    for row in &results.rows {
        for (split, values) in row.report.entropy.splits() {
            for v in values {
                let _ = writeln!(s, "{},{split},{v}", row.method);
            }
        }
    }
    s
}

pub fn timing_csv(rows: &[TimingRow]) -> String {
    let mut s = String::from("method,wall_clock_seconds,speedup_vs_retrain\n");
    for r in rows {
        let speedup = r.speedup_vs_retrain.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(s, "{},{},{speedup}", r.method, r.wall_clock_seconds);
    }
    s
}

/// Recomputes every metric table of a finished run from its stored config
/// and checkpoints, rewriting `results.json`, `table1.csv`, `asr.csv` and
/// `entropy.csv`. Timings are not recomputed.
pub fn report(dir: &Path) -> Result<RunResults> {
    let cfg: ExperimentConfig = stage(
        "report",
        std::fs::read(dir.join(CONFIG_FILE))
            .map_err(Error::from)
            .and_then(|b| serde_json::from_slice(&b).map_err(Error::from)),
    )?;
    let ds = stage("data", load_dataset(&cfg))?;
    let split = stage("split", forget_split(&ds, cfg.forget_class))?;
    let digest = cfg.digest();
    let mut models = Vec::new();
    for method in TABLE_ORDER {
        let path = checkpoint_path(dir, method);
        if !path.exists() {
            continue;
        }
        let (model, prov) = stage("checkpoint", load_checkpoint(&path))?;
        if prov.config_digest != digest {
            return Err(Error::state(format!(
                "checkpoint {} was produced by a different config",
                path.display()
            )));
        }
        models.push((method.to_string(), model));
    }
    let raster = raster_spec(&cfg, &ds)?;
    // Rasters are only needed for the area column, which the tables carry.
    let (results, _) = stage("evaluate", evaluate_models(&cfg, &split, &models, raster.as_ref()))?;
    let mut artifacts = Artifacts::new(dir)?;
    stage("write", write_tables(&mut artifacts, &results))?;
    Ok(results)
}
