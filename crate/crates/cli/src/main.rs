//! `vulndiv`: dataset generation, ensemble training and robustness
//! evaluation from JSON configs.
//!
//! Every subcommand takes `--config FILE`, `--set PATH=VALUE` and its own
//! named flags. Precedence, lowest first: built-in defaults, the config
//! file, `--set` overrides in order, named flags. The merged config is
//! written to `<out>/config.resolved.json`; passing it back with `--config`
//! reproduces the run.

mod commands;
mod config;
mod output;

use std::io;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::Value;

use commands::Layered;
use config::{merge, parse_set, read_config_file, resolve, set_path};

const AFTER_HELP: &str = "Config precedence (lowest first): built-in defaults, --config file, --set overrides, named flags.";

#[derive(Parser)]
#[command(name = "vulndiv", version, about = "Vulnerability-diversified ensemble training and evaluation", after_help = AFTER_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON config file.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 1 gives the single-threaded reference schedule.
    #[arg(long, value_name = "K")]
    workers: Option<usize>,
    /// Override a config value by dotted path, e.g. `plan.lambda=0.5`.
    /// Values are parsed as JSON, falling back to a string. Repeatable.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    sets: Vec<String>,
}

#[derive(Args, Clone)]
struct IdxFlags {
    /// IDX image file; sets `data` to an IDX pair together with --labels.
    #[arg(long, requires = "labels")]
    images: Option<PathBuf>,
    /// IDX label file.
    #[arg(long, requires = "images")]
    labels: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic glyph dataset as IDX train/test pairs.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        noise: Option<f32>,
        #[arg(long)]
        train_per_class: Option<usize>,
        #[arg(long)]
        test_per_class: Option<usize>,
    },
    /// Train an ensemble; writes a checkpoint and a JSON-lines epoch log.
    Train {
        #[command(flatten)]
        common: Common,
        /// baseline, dverge, advt or dverge+advt.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        models: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        pretrain_epochs: Option<usize>,
        #[arg(long)]
        lambda: Option<f32>,
        #[arg(long)]
        arch: Option<String>,
        /// Checkpoint to start from.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long, requires = "train_labels")]
        train_images: Option<PathBuf>,
        #[arg(long, requires = "train_images")]
        train_labels: Option<PathBuf>,
        #[arg(long, requires = "eval_labels")]
        eval_images: Option<PathBuf>,
        #[arg(long, requires = "eval_images")]
        eval_labels: Option<PathBuf>,
    },
    /// Distil one sub-model's features of target images into source images.
    Distill {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        member: Option<usize>,
        #[arg(long)]
        epsilon: Option<f32>,
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long)]
        count: Option<usize>,
        #[command(flatten)]
        idx: IdxFlags,
    },
    /// Pairwise vulnerability diversity of the sub-models.
    Diversity {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        epsilon: Option<f32>,
        #[arg(long)]
        samples: Option<usize>,
        #[command(flatten)]
        idx: IdxFlags,
    },
    /// Transfer success among sub-models as CSV plus a JSON sidecar.
    TransferMatrix {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        epsilon: Option<f32>,
        #[arg(long)]
        samples: Option<usize>,
        #[command(flatten)]
        idx: IdxFlags,
    },
    /// Clean, white-box and black-box accuracy over a list of radii.
    AttackEval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Surrogate checkpoint; repeatable.
        #[arg(long = "surrogate")]
        surrogates: Vec<PathBuf>,
        /// Comma-separated radii.
        #[arg(long, value_delimiter = ',')]
        eps: Option<Vec<f32>>,
        #[arg(long)]
        samples: Option<usize>,
        #[command(flatten)]
        idx: IdxFlags,
    },
    /// Ensemble labels on a plane around one image.
    DecisionRegion {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        surrogate: Option<PathBuf>,
        #[arg(long)]
        index: Option<usize>,
        #[arg(long)]
        epsilon: Option<f32>,
        #[arg(long)]
        resolution: Option<usize>,
        #[command(flatten)]
        idx: IdxFlags,
    },
    /// White-box (and optionally black-box and transfer) accuracy per radius.
    SweepEps {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated radii.
        #[arg(long, value_delimiter = ',')]
        eps: Option<Vec<f32>>,
        #[arg(long)]
        samples: Option<usize>,
        #[command(flatten)]
        idx: IdxFlags,
    },
    /// White-box accuracy for several attack iteration budgets.
    ConvergenceCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        epsilon: Option<f32>,
        /// Comma-separated budgets.
        #[arg(long, value_delimiter = ',')]
        iterations: Option<Vec<usize>>,
        #[arg(long)]
        samples: Option<usize>,
        #[command(flatten)]
        idx: IdxFlags,
    },
}

/// A failure reported as one JSON line on stderr.
#[derive(Debug)]
pub struct CliError {
    pub kind: String,
    pub message: String,
    pub path: Option<String>,
}

impl CliError {
    pub fn new(kind: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            message: message.into(),
            path: None,
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new("usage", message)
    }

    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            kind: "config".into(),
            message: message.into(),
            path: Some(path.into()),
        }
    }

    fn line(&self) -> String {
        let mut v = serde_json::json!({ "error": self.kind, "message": self.message });
        if let Some(p) = &self.path {
            v["path"] = Value::from(p.clone());
        }
        v.to_string()
    }

    fn exit_code(&self) -> u8 {
        if self.kind == "usage" {
            2
        } else {
            1
        }
    }
}

impl From<vulndiv::Error> for CliError {
    fn from(e: vulndiv::Error) -> Self {
        match &e {
            vulndiv::Error::InvalidSpec { field, reason } => CliError::config(*field, reason.clone()),
            _ => CliError::new(e.kind(), e.to_string()),
        }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::new("io", e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::new("json", e.to_string())
    }
}

type Overrides = Vec<(String, Value)>;

fn put<T: Serialize>(o: &mut Overrides, path: &str, v: &Option<T>) {
    if let Some(v) = v {
        o.push((path.to_string(), serde_json::to_value(v).expect("flag values serialize")));
    }
}

fn put_idx(o: &mut Overrides, key: &str, images: &Option<PathBuf>, labels: &Option<PathBuf>) {
    if let (Some(i), Some(l)) = (images, labels) {
        o.push((key.to_string(), serde_json::json!({ "kind": "idx", "images": i, "labels": l })));
    }
}

fn layered<T: Layered>(common: &Common, seed_path: &str, mut flags: Overrides) -> Result<T, CliError> {
    let mut doc = T::base();
    if let Some(p) = &common.config {
        merge(&mut doc, read_config_file(p)?);
    }
    for s in &common.sets {
        let (path, value) = parse_set(s)?;
        set_path(&mut doc, &path, value)?;
    }
    put(&mut flags, seed_path, &common.seed);
    for (path, value) in flags {
        set_path(&mut doc, &path, value)?;
    }
    resolve(doc)
}

fn run(command: Command) -> Result<String, CliError> {
    let mut o = Overrides::new();
    match command {
        Command::GenData { common, classes, size, noise, train_per_class, test_per_class } => {
            put(&mut o, "classes", &classes);
            put(&mut o, "size", &size);
            put(&mut o, "noise", &noise);
            put(&mut o, "train_per_class", &train_per_class);
            put(&mut o, "test_per_class", &test_per_class);
            let cfg = layered(&common, "seed", o)?;
            with_workers(&common, || commands::gen_data(&cfg, &common.out))
        }
        Command::Train {
            common,
            mode,
            models,
            epochs,
            pretrain_epochs,
            lambda,
            arch,
            init,
            train_images,
            train_labels,
            eval_images,
            eval_labels,
        } => {
            put(&mut o, "plan.mode", &mode);
            put(&mut o, "plan.models", &models);
            put(&mut o, "plan.epochs", &epochs);
            put(&mut o, "plan.pretrain_epochs", &pretrain_epochs);
            put(&mut o, "plan.lambda", &lambda);
            put(&mut o, "architecture", &arch);
            put(&mut o, "init", &init);
            put_idx(&mut o, "train_data", &train_images, &train_labels);
            put_idx(&mut o, "eval_data", &eval_images, &eval_labels);
            let cfg = layered(&common, "plan.seed", o)?;
            with_workers(&common, || commands::train_cmd(&cfg, &common.out))
        }
        Command::Distill { common, checkpoint, member, epsilon, layer, count, idx } => {
            put(&mut o, "checkpoint", &checkpoint);
            put(&mut o, "member", &member);
            put(&mut o, "distill.epsilon", &epsilon);
            put(&mut o, "distill.layer", &layer);
            put(&mut o, "count", &count);
            put_idx(&mut o, "targets", &idx.images, &idx.labels);
            let cfg = layered(&common, "seed", o)?;
            with_workers(&common, || commands::distill_cmd(&cfg, &common.out))
        }
        Command::Diversity { common, checkpoint, epsilon, samples, idx } => {
            put(&mut o, "checkpoint", &checkpoint);
            put(&mut o, "distill.epsilon", &epsilon);
            put(&mut o, "samples", &samples);
            put_idx(&mut o, "data", &idx.images, &idx.labels);
            let cfg = layered(&common, "seed", o)?;
            with_workers(&common, || commands::diversity_cmd(&cfg, &common.out))
        }
        Command::TransferMatrix { common, checkpoint, epsilon, samples, idx } => {
            put(&mut o, "checkpoint", &checkpoint);
            put(&mut o, "epsilon", &epsilon);
            put(&mut o, "samples", &samples);
            put_idx(&mut o, "data", &idx.images, &idx.labels);
            let cfg = layered(&common, "seed", o)?;
            with_workers(&common, || commands::transfer_cmd(&cfg, &common.out))
        }
        Command::AttackEval { common, checkpoint, surrogates, eps, samples, idx } => {
            put(&mut o, "checkpoint", &checkpoint);
            if !surrogates.is_empty() {
                put(&mut o, "surrogates", &Some(surrogates));
            }
            put(&mut o, "epsilons", &eps);
            put(&mut o, "samples", &samples);
            put_idx(&mut o, "data", &idx.images, &idx.labels);
            let cfg = layered(&common, "seed", o)?;
            with_workers(&common, || commands::attack_eval_cmd(&cfg, &common.out))
        }
        Command::DecisionRegion { common, checkpoint, surrogate, index, epsilon, resolution, idx } => {
            put(&mut o, "checkpoint", &checkpoint);
            put(&mut o, "surrogate", &surrogate);
            put(&mut o, "index", &index);
            put(&mut o, "epsilon", &epsilon);
            put(&mut o, "resolution", &resolution);
            put_idx(&mut o, "data", &idx.images, &idx.labels);
            let cfg = layered(&common, "seed", o)?;
            with_workers(&common, || commands::decision_region_cmd(&cfg, &common.out))
        }
        Command::SweepEps { common, checkpoint, eps, samples, idx } => {
            put(&mut o, "checkpoint", &checkpoint);
            put(&mut o, "epsilons", &eps);
            put(&mut o, "samples", &samples);
            put_idx(&mut o, "data", &idx.images, &idx.labels);
            let cfg = layered(&common, "seed", o)?;
            with_workers(&common, || commands::sweep_cmd(&cfg, &common.out))
        }
        Command::ConvergenceCheck { common, checkpoint, epsilon, iterations, samples, idx } => {
            put(&mut o, "checkpoint", &checkpoint);
            put(&mut o, "epsilon", &epsilon);
            put(&mut o, "iterations", &iterations);
            put(&mut o, "samples", &samples);
            put_idx(&mut o, "data", &idx.images, &idx.labels);
            let cfg = layered(&common, "seed", o)?;
            with_workers(&common, || commands::convergence_cmd(&cfg, &common.out))
        }
    }
}

fn with_workers<F: FnOnce() -> Result<String, CliError> + Send>(common: &Common, f: F) -> Result<String, CliError> {
    check_out(&common.out)?;
    match common.workers {
        Some(0) => Err(CliError::usage("--workers must be at least 1")),
        Some(k) => rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build()
            .map_err(|e| CliError::new("workers", e.to_string()))?
            .install(f),
        None => f(),
    }
}

fn check_out(out: &Path) -> Result<(), CliError> {
    if out.is_file() {
        return Err(CliError::usage(format!("--out {} is a file", out.display())));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("{}", CliError::usage(first).line());
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(line) => {
            println!("{line}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(e.exit_code())
        }
    }
}
