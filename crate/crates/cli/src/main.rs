use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use boundary_unlearning::checkpoint::{load_checkpoint, save_checkpoint, write_atomic, Provenance};
use boundary_unlearning::config::{DataSpec, ExperimentConfig};
use boundary_unlearning::data::forget_split;
use boundary_unlearning::eval::{evaluate, median};
use boundary_unlearning::experiment::{
    self, checkpoint_path, load_dataset, raster_spec, run_method, train_original, RunResults, CONFIG_FILE, ORIGINAL,
    TABLE1_FILE,
};
use boundary_unlearning::{Classifier, Method};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

/// Class-level unlearning experiments on small classifiers.
#[derive(Parser)]
#[command(name = "bunlearn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the original model and save its checkpoint.
    Train(Common),
    /// Unlearn the forgetting class from a saved checkpoint.
    Unlearn {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_method)]
        method: Method,
        /// Model to unlearn from [default: <out>/checkpoints/original.buln].
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a saved checkpoint on every split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// [default: <out>/checkpoints/original.buln]
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the full pipeline and write every table.
    Run(Common),
    /// Recompute the tables of a finished run from its checkpoints.
    Report {
        dir: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    forget_class: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    /// Output directory; overrides `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Skip the first line of a CSV dataset.
    #[arg(long)]
    header: bool,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: boundary_unlearning::Error| e.to_string())
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::from_path(&self.config)
            .with_context(|| format!("loading config {}", self.config.display()))?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(t) = self.forget_class {
            cfg.forget_class = t;
        }
        if let Some(eps) = self.epsilon {
            cfg.epsilon = eps;
        }
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        if self.header {
            match &mut cfg.data {
                DataSpec::Csv { header, .. } => *header = true,
                DataSpec::Blobs { .. } => bail!("--header only applies to csv data"),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn provenance(cfg: &ExperimentConfig, method: &str) -> Provenance {
    Provenance {
        method: method.to_string(),
        seed: cfg.seed,
        config_digest: cfg.digest(),
        num_classes: cfg.data.num_classes(),
    }
}

fn load_matching(cfg: &ExperimentConfig, path: &Path) -> Result<Classifier> {
    let (model, prov) = load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    if prov.config_digest != cfg.digest() {
        bail!(
            "checkpoint {} was produced by a different config (digest {})",
            path.display(),
            prov.config_digest
        );
    }
    Ok(model)
}

fn write_config(cfg: &ExperimentConfig) -> Result<()> {
    write_atomic(&cfg.output_dir.join(CONFIG_FILE), &serde_json::to_vec_pretty(cfg)?)?;
    Ok(())
}

fn print_json(v: &serde_json::Value) -> Result<()> {
    writeln!(std::io::stdout(), "{}", serde_json::to_string_pretty(v)?)?;
    Ok(())
}

fn print_table(results: &RunResults) -> Result<()> {
    write!(std::io::stdout(), "{}", experiment::table1_csv(results))?;
    Ok(())
}

fn train(common: &Common) -> Result<()> {
    let cfg = common.load()?;
    let ds = load_dataset(&cfg)?;
    let (model, secs) = train_original(&cfg, &ds)?;
    let path = checkpoint_path(&cfg.output_dir, ORIGINAL);
    std::fs::create_dir_all(path.parent().expect("checkpoint has a parent"))?;
    save_checkpoint(&model, &provenance(&cfg, ORIGINAL), &path)?;
    write_config(&cfg)?;
    print_json(&json!({
        "method": ORIGINAL,
        "checkpoint": path,
        "wall_clock_seconds": secs,
    }))
}

fn unlearn(common: &Common, method: Method, checkpoint: Option<&Path>) -> Result<()> {
    let cfg = common.load()?;
    let source = checkpoint.map_or_else(|| checkpoint_path(&cfg.output_dir, ORIGINAL), Path::to_path_buf);
    let original = load_matching(&cfg, &source)?;
    let ds = load_dataset(&cfg)?;
    let split = forget_split(&ds, cfg.forget_class)?;
    let result = run_method(&cfg, &original, &split, method).with_context(|| format!("running {method}"))?;
    let path = checkpoint_path(&cfg.output_dir, method.name());
    std::fs::create_dir_all(path.parent().expect("checkpoint has a parent"))?;
    save_checkpoint(&result.model, &provenance(&cfg, method.name()), &path)?;
    let timing = json!({
        "method": method.name(),
        "checkpoint": path,
        "wall_clock_seconds": result.wall_clock_seconds,
        "per_epoch_loss": result.per_epoch_loss,
    });
    write_atomic(
        &cfg.output_dir.join(format!("timing_{}.json", method.name())),
        &serde_json::to_vec_pretty(&timing)?,
    )?;
    print_json(&timing)
}

fn eval(common: &Common, checkpoint: Option<&Path>) -> Result<()> {
    let cfg = common.load()?;
    let path = checkpoint.map_or_else(|| checkpoint_path(&cfg.output_dir, ORIGINAL), Path::to_path_buf);
    let model = load_matching(&cfg, &path)?;
    let ds = load_dataset(&cfg)?;
    let split = forget_split(&ds, cfg.forget_class)?;
    let raster = raster_spec(&cfg, &ds)?;
    let (report, _) = evaluate(&model, &split, &cfg.mia, raster.as_ref())?;
    let medians: serde_json::Map<_, _> = report
        .entropy
        .splits()
        .iter()
        .map(|(name, h)| (name.to_string(), json!(median(h))))
        .collect();
    print_json(&json!({
        "checkpoint": path,
        "acc_remain_train": report.acc_remain_train,
        "acc_forget_train": report.acc_forget_train,
        "acc_remain_test": report.acc_remain_test,
        "acc_forget_test": report.acc_forget_test,
        "mia": report.mia,
        "median_entropy": medians,
        "region_area": report.region_area,
    }))
}

fn run(common: &Common) -> Result<()> {
    let cfg = common.load()?;
    let out = experiment::run_experiment(&cfg)?;
    print_table(&out.results)?;
    eprintln!("artifacts written to {}", out.dir.display());
    Ok(())
}

fn report(dir: &Path) -> Result<()> {
    let results = experiment::report(dir)?;
    print_table(&results)?;
    eprintln!("rewrote {}", dir.join(TABLE1_FILE).display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Train(c) => train(c),
        Command::Unlearn {
            common,
            method,
            checkpoint,
        } => unlearn(common, *method, checkpoint.as_deref()),
        Command::Eval { common, checkpoint } => eval(common, checkpoint.as_deref()),
        Command::Run(c) => run(c),
        Command::Report { dir } => report(dir),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
