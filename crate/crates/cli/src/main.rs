//! `clear` command-line tool.
//!
//! Exit status: 0 on success, 1 for invalid arguments, configuration or
//! input files, 2 for failures while running (including a failed gradient
//! check).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use clear_core::data::npz::import_npz;
use clear_core::data::split::{stratified_split, SplitSpec};
use clear_core::data::synth::{fundus_standin, synth_longtail};
use clear_core::data::Dataset;
use clear_core::gradcheck::run_suite;
use clear_core::model::Model;
use clear_core::report::{from_json, write_eval_bundle, write_plots};
use clear_core::train::config::{parse_override, parse_pairs};
use clear_core::train::trainer::{
    carve_validation, evaluate, labels_csv, predict, predictions_csv, train_to_end, RunPaths,
};
use clear_core::train::{Checkpoint, TrainConfig, Trainer};
use clear_core::CoreError;
use clear_tensor::GradCheckOptions;

#[derive(Parser)]
#[command(name = "clear", version, about = "Evidential selective-scan image classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset as TDS.
    Generate(GenerateArgs),
    /// Convert arrays from an NPZ archive to TDS.
    Import(ImportArgs),
    /// Train a model and write checkpoints and the metrics log.
    Train(TrainArgs),
    /// Evaluate a checkpoint and write the report bundle.
    Eval(EvalArgs),
    /// Write per-sample predictions as CSV.
    Predict(PredictArgs),
    /// Draw risk-coverage and confidence plots from a saved report.
    Report(ReportArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// `longtail` or `fundus`.
    #[arg(long, default_value = "longtail")]
    kind: String,
    #[arg(long, default_value_t = 8)]
    classes: usize,
    #[arg(long, default_value_t = 400)]
    base_count: usize,
    #[arg(long, default_value_t = 0.6)]
    decay: f64,
    #[arg(long, default_value_t = 28)]
    image_size: usize,
    /// Sample count for `fundus`.
    #[arg(long, default_value_t = 1080)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Split tag stored in the metadata.
    #[arg(long, default_value = "all")]
    split: String,
    #[arg(long)]
    out: PathBuf,
    /// Also split the data: training part to `--out`, the rest here.
    #[arg(long)]
    test_out: Option<PathBuf>,
    #[arg(long, default_value_t = 0.8)]
    train_fraction: f64,
    #[arg(long)]
    labels_csv: Option<PathBuf>,
}

#[derive(Args)]
struct ImportArgs {
    #[arg(long)]
    npz: PathBuf,
    #[arg(long, default_value = "train_images")]
    images_key: String,
    #[arg(long, default_value = "train_labels")]
    labels_key: String,
    /// Class count; inferred as max label + 1 when omitted.
    #[arg(long)]
    num_classes: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    labels_csv: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value`, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    val: Option<PathBuf>,
    /// Evaluated with the best checkpoint after training.
    #[arg(long)]
    test: Option<PathBuf>,
    /// Run directory holding `last.ckpt` to continue from.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// CSV file; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// `report.json` written by `eval`.
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 1e-4)]
    step: f64,
    /// Check at most this many coordinates per parameter.
    #[arg(long)]
    max_coords: Option<usize>,
}

enum Failure {
    Validation(String),
    Runtime(String),
}

impl From<CoreError> for Failure {
    fn from(e: CoreError) -> Self {
        if e.is_validation() {
            Failure::Validation(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn write_labels(ds: &Dataset, path: &Option<PathBuf>) -> Outcome {
    if let Some(p) = path {
        std::fs::write(p, labels_csv(ds)?)?;
    }
    Ok(())
}

fn describe(ds: &Dataset) -> String {
    let [n, c, h, w] = ds.dims();
    format!("{n} images {c}x{h}x{w}, {} classes, counts {:?}", ds.num_classes(), ds.class_counts())
}

fn generate(a: GenerateArgs) -> Outcome {
    let mut ds = match a.kind.as_str() {
        "longtail" => synth_longtail(a.classes, a.base_count, a.decay, a.image_size, a.seed)?,
        "fundus" => fundus_standin(a.n, a.seed, &a.split)?,
        other => return Err(Failure::Validation(format!("unknown kind `{other}` (longtail, fundus)"))),
    };
    ds.set_meta("split", a.split.clone());
    match &a.test_out {
        Some(test_path) => {
            let spec = SplitSpec {
                train_fraction: a.train_fraction,
                seed: a.seed,
                stratify: true,
            };
            let (train, test, warnings) = stratified_split(&ds, &spec)?;
            warnings.iter().for_each(|w| eprintln!("warning: {w}"));
            train.write_tds(&a.out)?;
            test.write_tds(test_path)?;
            write_labels(&train, &a.labels_csv)?;
            eprintln!("train: {}", describe(&train));
            eprintln!("test:  {}", describe(&test));
        }
        None => {
            ds.write_tds(&a.out)?;
            write_labels(&ds, &a.labels_csv)?;
            eprintln!("{}", describe(&ds));
        }
    }
    Ok(())
}

fn import(a: ImportArgs) -> Outcome {
    let ds = import_npz(&a.npz, &a.images_key, &a.labels_key, a.num_classes)?;
    ds.write_tds(&a.out)?;
    write_labels(&ds, &a.labels_csv)?;
    eprintln!("{}", describe(&ds));
    Ok(())
}

fn read_dataset(path: &Path) -> Result<Dataset, Failure> {
    Dataset::read_tds(path).map_err(|e| match e {
        CoreError::Io(io) => Failure::Validation(format!("cannot read {}: {io}", path.display())),
        other => Failure::from(other),
    })
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    Checkpoint::load(path).map_err(|e| match e {
        CoreError::Io(io) => Failure::Validation(format!("cannot read {}: {io}", path.display())),
        other => Failure::from(other),
    })
}

fn train_cmd(a: TrainArgs) -> Outcome {
    let mut overrides = Vec::new();
    if let Some(s) = a.seed {
        overrides.push(("train.seed".to_string(), s.to_string()));
    }
    if let Some(e) = a.epochs {
        overrides.push(("train.epochs".to_string(), e.to_string()));
    }
    if let Some(p) = &a.train {
        overrides.push(("data.train".to_string(), p.display().to_string()));
    }
    if let Some(p) = &a.val {
        overrides.push(("data.val".to_string(), p.display().to_string()));
    }
    if let Some(p) = &a.test {
        overrides.push(("data.test".to_string(), p.display().to_string()));
    }
    for s in &a.sets {
        overrides.push(parse_override(s)?);
    }

    let mut trainer = match &a.resume {
        Some(dir) => {
            let paths = RunPaths::new(dir);
            let last = load_checkpoint(&paths.last())?;
            let best = paths.best().exists().then(|| load_checkpoint(&paths.best())).transpose()?;
            let mut t = Trainer::from_checkpoint(last, best)?;
            // Only the epoch budget and data locations may change on resume.
            for (k, v) in &overrides {
                match k.as_str() {
                    "train.epochs" | "data.train" | "data.val" | "data.test" | "train.log_seconds" => {
                        t.cfg.set(k, v)?
                    }
                    _ => {
                        let mut probe = t.cfg.clone();
                        probe.set(k, v)?;
                        if probe != t.cfg {
                            return Err(Failure::Validation(format!("`{k}` cannot change when resuming")));
                        }
                    }
                }
            }
            t
        }
        None => {
            let mut cfg = TrainConfig::default();
            if let Some(p) = &a.config {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Failure::Validation(format!("cannot read {}: {e}", p.display())))?;
                cfg.apply(&parse_pairs(&text)?)?;
            }
            cfg.apply(&overrides)?;
            cfg.validate()?;
            let train_path = cfg
                .train_path
                .clone()
                .ok_or_else(|| Failure::Validation("no training data (use --train or data.train)".into()))?;
            let probe = read_dataset(&train_path)?;
            Trainer::new(cfg, probe.channels(), probe.num_classes())?
        }
    };

    let cfg = trainer.cfg.clone();
    let train_path = cfg
        .train_path
        .clone()
        .ok_or_else(|| Failure::Validation("no training data (use --train or data.train)".into()))?;
    let full = read_dataset(&train_path)?;
    let (train, val) = match &cfg.val_path {
        Some(p) => (full, read_dataset(p)?),
        None => {
            let (tr, val, warnings) = carve_validation(&full, &cfg)?;
            warnings.iter().for_each(|w| eprintln!("warning: {w}"));
            (tr, val)
        }
    };
    eprintln!("train: {}", describe(&train));
    eprintln!("val:   {}", describe(&val));
    eprintln!("parameters: {}", trainer.model.store.num_scalars());
    train_to_end(&mut trainer, &train, &val, Some(&a.out), |r| {
        eprintln!(
            "epoch {:>4}  loss {:.4}  lambda {:.5}  val_oa {:.4}  val_f1 {:.4}  val_auc {:.4}  val_ece {:.4}  {:.1}s",
            r.epoch, r.train_loss, r.lambda, r.val_oa, r.val_f1, r.val_auc, r.val_ece, r.seconds
        )
    })?;
    for e in &trainer.events {
        eprintln!("event: {e}");
    }
    if trainer.epoch > 0 {
        eprintln!("best val OA {:.4} at epoch {}", trainer.best_val_oa, trainer.best_epoch);
    }
    if let Some(p) = &cfg.test_path {
        let test = read_dataset(p)?;
        let report = evaluate(&trainer.best_model, &test, &cfg.augment_config())?;
        let dir = a.out.join("test_eval");
        write_eval_bundle(&report, &dir)?;
        write_plots(&report, &dir)?;
        eprintln!("test OA {:.4}  F1 {:.4}  AUC {:.4}  ECE {:.4}", report.oa, report.f1, report.auc, report.ece);
    }
    Ok(())
}

fn model_from(ckpt: Checkpoint) -> Result<(Model, TrainConfig), Failure> {
    let cfg = ckpt.config.clone();
    let model = Model::from_store(cfg.model_config(ckpt.in_channels, ckpt.num_classes), ckpt.params)?;
    Ok((model, cfg))
}

fn eval_cmd(a: EvalArgs) -> Outcome {
    let (model, cfg) = model_from(load_checkpoint(&a.checkpoint)?)?;
    let ds = read_dataset(&a.data)?;
    let report = evaluate(&model, &ds, &cfg.augment_config())?;
    write_eval_bundle(&report, &a.out)?;
    print!("{}", clear_core::report::summary_text(&report));
    Ok(())
}

fn predict_cmd(a: PredictArgs) -> Outcome {
    let (model, cfg) = model_from(load_checkpoint(&a.checkpoint)?)?;
    let ds = read_dataset(&a.data)?;
    let csv = predictions_csv(&predict(&model, &ds, &cfg.augment_config())?);
    match &a.out {
        Some(p) => std::fs::write(p, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn report_cmd(a: ReportArgs) -> Outcome {
    let text = std::fs::read_to_string(&a.report)
        .map_err(|e| Failure::Validation(format!("cannot read {}: {e}", a.report.display())))?;
    let report = from_json(&text)?;
    write_plots(&report, &a.out)?;
    Ok(())
}

fn gradcheck_cmd(a: GradcheckArgs) -> Outcome {
    if !(a.tol > 0.0 && a.step > 0.0) {
        return Err(Failure::Validation("--tol and --step must be positive".into()));
    }
    let opts = GradCheckOptions {
        h: a.step,
        tol: a.tol,
        max_coords: a.max_coords,
        ..Default::default()
    };
    let suite = run_suite(opts)?;
    for c in &suite.cases {
        println!(
            "{:<5} {:<28} coords {:>6}  max rel error {:.3e}  {:.2}s",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.coords,
            c.max_rel_error,
            c.seconds
        );
    }
    println!(
        "{} cases, max rel error {:.3e} (tol {:.0e}), {:.1}s",
        suite.cases.len(),
        suite.max_rel_error(),
        suite.tol,
        suite.seconds
    );
    if suite.passed() {
        Ok(())
    } else {
        Err(Failure::Runtime("gradient check failed".into()))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Import(a) => import(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Predict(a) => predict_cmd(a),
        Command::Report(a) => report_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
