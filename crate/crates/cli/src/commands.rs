//! Typed configs and runners, one per subcommand.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use vulndiv::attacks::AttackSpec;
use vulndiv::data::{gen_synthetic, load_checkpoint, save_checkpoint, write_idx, Dataset, Provenance, Split, SyntheticSpec};
use vulndiv::distill::{distill_features, DistillSpec};
use vulndiv::diversity::{pairwise_diversity, transfer_matrix, LayerPolicy};
use vulndiv::eval::{blackbox_eval, clean_accuracy, convergence_check, decision_grid, evaluate, whitebox_eval, AxisMode, Battery};
use vulndiv::models::{build_model, Activation, Architecture, Ensemble, ModelSpec};
use vulndiv::rng;
use vulndiv::training::{train, TrainPlan};

use crate::config::{DataRef, Precision};
use crate::output::Outputs;
use crate::CliError;

fn ten() -> usize {
    10
}

fn sixteen() -> usize {
    16
}

fn one() -> usize {
    1
}

fn noise() -> f32 {
    0.1
}

fn train_per_class() -> usize {
    200
}

fn test_per_class() -> usize {
    50
}

fn two_hundred() -> usize {
    200
}

fn default_template() -> AttackSpec {
    AttackSpec::evaluation(0.1)
}

fn default_battery() -> Battery {
    Battery::desk(0.1)
}

fn convergence_template() -> AttackSpec {
    AttackSpec::evaluation(0.1).with_restarts(1)
}

fn convergence_iterations() -> Vec<usize> {
    vec![100, 500]
}

fn twenty_one() -> usize {
    21
}

/// Base layer of the config precedence: defaults that are whole objects,
/// so that `--set attack.steps=5` edits the default attack instead of
/// replacing it with a partial one.
pub trait Layered: serde::de::DeserializeOwned {
    fn base() -> serde_json::Value {
        json!({})
    }
}

impl Layered for GenDataConfig {}
impl Layered for TrainConfig {}
impl Layered for DistillConfig {}
impl Layered for DiversityConfig {}
impl Layered for DecisionRegionConfig {}

impl Layered for TransferConfig {
    fn base() -> serde_json::Value {
        json!({ "attack": default_template() })
    }
}

impl Layered for AttackEvalConfig {
    fn base() -> serde_json::Value {
        json!({ "whitebox": default_template(), "battery": default_battery() })
    }
}

impl Layered for SweepConfig {
    fn base() -> serde_json::Value {
        json!({ "attack": default_template(), "battery": default_battery() })
    }
}

impl Layered for ConvergenceConfig {
    fn base() -> serde_json::Value {
        json!({ "attack": convergence_template() })
    }
}

fn sampled(data: Dataset, samples: Option<usize>, seed: u64) -> Dataset {
    match samples {
        Some(n) => data.sample(n, rng::derive(seed, &[rng::tag("cli-sample")])),
        None => data,
    }
}

fn load(path: &Path) -> Result<Ensemble, CliError> {
    Ok(load_checkpoint(path)?)
}

fn ok_line(command: &str, out: &Path, extra: serde_json::Value) -> String {
    let mut v = json!({ "status": "ok", "command": command, "out": out.display().to_string() });
    if let (Some(o), serde_json::Value::Object(e)) = (v.as_object_mut(), extra) {
        o.extend(e);
    }
    v.to_string()
}

// ---------------------------------------------------------------- gen-data

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenDataConfig {
    #[serde(default = "ten")]
    pub classes: usize,
    #[serde(default = "sixteen")]
    pub size: usize,
    #[serde(default = "one")]
    pub channels: usize,
    #[serde(default = "noise")]
    pub noise: f32,
    #[serde(default = "train_per_class")]
    pub train_per_class: usize,
    #[serde(default = "test_per_class")]
    pub test_per_class: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
}

pub fn gen_data(cfg: &GenDataConfig, out: &Path) -> Result<String, CliError> {
    let mut outputs = Outputs::create(out, "gen-data")?;
    let mut counts = Vec::new();
    for (split, per_class) in [(Split::Train, cfg.train_per_class), (Split::Test, cfg.test_per_class)] {
        let spec = SyntheticSpec {
            classes: cfg.classes,
            per_class,
            size: cfg.size,
            channels: cfg.channels,
            noise: cfg.noise,
            seed: cfg.seed,
        };
        let d = gen_synthetic(&spec, split)?;
        let name = match split {
            Split::Train => "train",
            Split::Test => "test",
        };
        let (img, lbl) = (format!("{name}-images.idx"), format!("{name}-labels.idx"));
        write_idx(&d, outputs.path(&img), outputs.path(&lbl))?;
        outputs.track(img);
        outputs.track(lbl);
        counts.push(d.len());
    }
    let out = outputs.finish(cfg, cfg.seed)?;
    Ok(ok_line("gen-data", &out, json!({ "train": counts[0], "test": counts[1] })))
}

// ---------------------------------------------------------------- train

fn cnn_small() -> Architecture {
    Architecture::CnnSmall
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "cnn_small")]
    pub architecture: Architecture,
    #[serde(default = "one")]
    pub width: usize,
    #[serde(default)]
    pub activation: Activation,
    /// Start from this checkpoint instead of fresh initialisations.
    #[serde(default)]
    pub init: Option<PathBuf>,
    pub train_data: DataRef,
    #[serde(default)]
    pub eval_data: Option<DataRef>,
    pub plan: TrainPlan,
    #[serde(default)]
    pub precision: Precision,
}

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const TRAIN_LOG: &str = "train_log.jsonl";

pub fn train_cmd(cfg: &TrainConfig, out: &Path) -> Result<String, CliError> {
    let data = cfg.train_data.load()?;
    let eval = cfg.eval_data.as_ref().map(DataRef::load).transpose()?;
    let plan = &cfg.plan;
    plan.validate()?;
    let mut ens = match &cfg.init {
        Some(p) => load(p)?,
        None => {
            let members = (0..plan.models)
                .map(|i| {
                    let spec = ModelSpec {
                        architecture: cfg.architecture,
                        input_shape: data.input_shape(),
                        classes: data.classes(),
                        width: cfg.width,
                        activation: cfg.activation,
                        seed: rng::derive(plan.seed, &[rng::tag("init"), i as u64]),
                    };
                    let mut m = build_model(&spec)?;
                    m.set_id(format!("member-{i}"));
                    Ok(m)
                })
                .collect::<Result<Vec<_>, CliError>>()?;
            Ensemble::new(members)?
        }
    };
    let mut outputs = Outputs::create(out, "train")?;
    let mut log = BufWriter::new(File::create(outputs.path(TRAIN_LOG))?);
    let mut write_err = None;
    let result = train(&mut ens, plan, &data, eval.as_ref(), &mut |r| {
        let line = serde_json::to_string(r).map_err(CliError::from).and_then(|l| Ok(writeln!(log, "{l}")?));
        if let Err(e) = line {
            write_err.get_or_insert(e);
        }
    });
    log.flush()?;
    drop(log);
    outputs.track(TRAIN_LOG);
    if let Some(e) = write_err {
        return Err(e);
    }
    let train_log = result?;
    let ckpt = outputs.path(CHECKPOINT_DIR);
    save_checkpoint(&ens, &ckpt)?;
    outputs.track(format!("{CHECKPOINT_DIR}/ensemble.json"));
    for i in 0..ens.len() {
        outputs.track(format!("{CHECKPOINT_DIR}/member-{i}/manifest.json"));
        outputs.track(format!("{CHECKPOINT_DIR}/member-{i}/weights.bin"));
    }
    let last = train_log.records.last().and_then(|r| r.clean_accuracy);
    let out = outputs.finish(cfg, plan.seed)?;
    Ok(ok_line("train", &out, json!({ "epochs": train_log.records.len(), "clean_accuracy": last })))
}

// ---------------------------------------------------------------- distill

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    pub checkpoint: PathBuf,
    /// Sub-model whose features are distilled.
    #[serde(default)]
    pub member: usize,
    pub distill: DistillSpec,
    pub targets: DataRef,
    /// Source images; the target set when absent.
    #[serde(default)]
    pub sources: Option<DataRef>,
    #[serde(default = "sixteen")]
    pub count: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
}

pub fn distill_cmd(cfg: &DistillConfig, out: &Path) -> Result<String, CliError> {
    let ens = load(&cfg.checkpoint)?;
    let model = ens
        .members()
        .get(cfg.member)
        .ok_or_else(|| CliError::config("member", format!("{} outside 0..{}", cfg.member, ens.len())))?;
    let targets = cfg.targets.load()?;
    let sources = match &cfg.sources {
        Some(s) => s.load()?,
        None => targets.clone(),
    };
    let pick = |d: &Dataset, name: &str| {
        vulndiv::data::sample_with_replacement(d.len(), cfg.count, &mut rng::stream(cfg.seed, name, &[]))
    };
    let (ti, si) = (pick(&targets, "distill-targets"), pick(&sources, "distill-sources"));
    let (x, y) = targets.batch(&ti);
    let (xs, ys) = sources.batch(&si);
    let batch = distill_features(model, &cfg.distill, (&x, &y), (&xs, &ys), cfg.seed)?;
    let mut outputs = Outputs::create(out, "distill")?;
    let images = Dataset::new(
        batch.distilled.clone(),
        batch.source_labels.clone(),
        targets.classes().max(sources.classes()),
        Split::Test,
        Provenance::Derived {
            from: Box::new(sources.provenance().clone()),
            note: "distilled".into(),
        },
    )?;
    write_idx(&images, outputs.path("distilled-images.idx"), outputs.path("distilled-labels.idx"))?;
    outputs.track("distilled-images.idx");
    outputs.track("distilled-labels.idx");
    outputs.write_json(
        "distilled.json",
        &json!({
            "member": cfg.member,
            "layer": batch.layer,
            "epsilon": batch.epsilon,
            "target_rows": ti,
            "source_rows": si,
            "target_labels": batch.target_labels,
            "source_labels": batch.source_labels,
            "objective": batch.objective_values,
            "mean_objective": batch.mean_objective(),
        }),
    )?;
    let mean = batch.mean_objective();
    let out = outputs.finish(cfg, cfg.seed)?;
    Ok(ok_line("distill", &out, json!({ "mean_objective": mean })))
}

// ---------------------------------------------------------------- diversity

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiversityConfig {
    pub checkpoint: PathBuf,
    pub data: DataRef,
    /// Distillation settings; `layer` is replaced per draw by `layer_policy`.
    pub distill: DistillSpec,
    #[serde(default)]
    pub layer_policy: LayerPolicy,
    #[serde(default = "two_hundred")]
    pub samples: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
}

pub fn diversity_cmd(cfg: &DiversityConfig, out: &Path) -> Result<String, CliError> {
    let ens = load(&cfg.checkpoint)?;
    let data = cfg.data.load()?;
    let m = ens.members();
    let mut pairs = Vec::new();
    for i in 0..m.len() {
        for j in i + 1..m.len() {
            pairs.push(pairwise_diversity(&m[i], &m[j], &data, &cfg.distill, cfg.layer_policy, cfg.samples, cfg.seed)?);
        }
    }
    let mean = if pairs.is_empty() {
        None
    } else {
        Some(pairs.iter().map(|p| p.value).sum::<f64>() / pairs.len() as f64)
    };
    let mut outputs = Outputs::create(out, "diversity")?;
    outputs.write_json("diversity.json", &json!({ "pairs": pairs, "mean": mean }))?;
    let out = outputs.finish(cfg, cfg.seed)?;
    Ok(ok_line("diversity", &out, json!({ "mean": mean })))
}

// ---------------------------------------------------------------- transfer-matrix

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferConfig {
    pub checkpoint: PathBuf,
    pub data: DataRef,
    pub epsilon: f32,
    /// Attack template; its step size is rescaled to `epsilon`.
    #[serde(default = "default_template")]
    pub attack: AttackSpec,
    #[serde(default = "two_hundred")]
    pub samples: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
}

pub fn transfer_cmd(cfg: &TransferConfig, out: &Path) -> Result<String, CliError> {
    let ens = load(&cfg.checkpoint)?;
    let data = cfg.data.load()?;
    let tm = transfer_matrix(&ens, &cfg.attack.at_epsilon(cfg.epsilon), &data, cfg.samples, cfg.seed)?;
    let mut outputs = Outputs::create(out, "transfer-matrix")?;
    outputs.write("transfer_matrix.csv", tm.to_csv())?;
    outputs.write_json(
        "transfer_matrix.json",
        &json!({
            "csv": "transfer_matrix.csv",
            "epsilon": tm.epsilon,
            "steps": tm.steps,
            "restarts": tm.restarts,
            "sample_count": tm.sample_count,
            "mean_off_diagonal": tm.mean_off_diagonal(),
            "rates": tm.rates,
        }),
    )?;
    let mean = tm.mean_off_diagonal();
    let out = outputs.finish(cfg, cfg.seed)?;
    Ok(ok_line("transfer-matrix", &out, json!({ "mean_off_diagonal": mean })))
}

// ---------------------------------------------------------------- attack-eval

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackEvalConfig {
    pub checkpoint: PathBuf,
    /// Hold-out checkpoints used as black-box surrogates.
    #[serde(default)]
    pub surrogates: Vec<PathBuf>,
    pub data: DataRef,
    pub epsilons: Vec<f32>,
    #[serde(default = "default_template")]
    pub whitebox: AttackSpec,
    #[serde(default = "default_battery")]
    pub battery: Battery,
    /// Evaluate on this many seeded-random rows instead of the whole set.
    #[serde(default)]
    pub samples: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
}

pub fn attack_eval_cmd(cfg: &AttackEvalConfig, out: &Path) -> Result<String, CliError> {
    let ens = load(&cfg.checkpoint)?;
    let surrogates = cfg.surrogates.iter().map(|p| load(p)).collect::<Result<Vec<_>, _>>()?;
    let data = sampled(cfg.data.load()?, cfg.samples, cfg.seed);
    let report = evaluate(&ens, &surrogates, &cfg.epsilons, &cfg.whitebox, &cfg.battery, &data, cfg.seed)?;
    let mut outputs = Outputs::create(out, "attack-eval")?;
    outputs.write_json("report.json", &report)?;
    let out = outputs.finish(cfg, cfg.seed)?;
    Ok(ok_line(
        "attack-eval",
        &out,
        json!({ "clean_accuracy": report.clean_accuracy, "whitebox": report.whitebox_accuracy, "blackbox": report.blackbox_accuracy }),
    ))
}

// ---------------------------------------------------------------- decision-region

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecisionRegionConfig {
    pub checkpoint: PathBuf,
    pub surrogate: PathBuf,
    pub data: DataRef,
    #[serde(default)]
    pub index: usize,
    pub epsilon: f32,
    #[serde(default = "twenty_one")]
    pub resolution: usize,
    #[serde(default)]
    pub axis: AxisMode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
}

pub fn decision_region_cmd(cfg: &DecisionRegionConfig, out: &Path) -> Result<String, CliError> {
    let ens = load(&cfg.checkpoint)?;
    let surrogate = load(&cfg.surrogate)?;
    let data = cfg.data.load()?;
    let grid = decision_grid(&ens, &surrogate, &data, cfg.index, cfg.resolution, cfg.epsilon, &cfg.axis, cfg.seed)?;
    let mut csv = format!(
        "# image={} resolution={} epsilon_max={} axis_v_fallback={} rows=vertical columns=horizontal\n",
        grid.image_id, grid.resolution, grid.epsilon_max, grid.axis_v_fallback
    );
    let offsets = grid.offsets();
    csv.push_str("offset");
    for b in &offsets {
        let _ = write!(csv, ",{b}");
    }
    csv.push('\n');
    for (a, row) in offsets.iter().zip(&grid.labels) {
        let _ = write!(csv, "{a}");
        for l in row {
            let _ = write!(csv, ",{l}");
        }
        csv.push('\n');
    }
    let mut outputs = Outputs::create(out, "decision-region")?;
    outputs.write("grid.csv", csv)?;
    outputs.write_json("grid.json", &grid)?;
    let center = grid.center_label();
    let out = outputs.finish(cfg, cfg.seed)?;
    Ok(ok_line("decision-region", &out, json!({ "center_label": center, "axis_v_fallback": grid.axis_v_fallback })))
}

// ---------------------------------------------------------------- sweep-eps

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub checkpoint: PathBuf,
    pub data: DataRef,
    pub epsilons: Vec<f32>,
    #[serde(default = "default_template")]
    pub attack: AttackSpec,
    #[serde(default)]
    pub samples: Option<usize>,
    /// Adds black-box accuracy per ε when non-empty.
    #[serde(default)]
    pub surrogates: Vec<PathBuf>,
    #[serde(default = "default_battery")]
    pub battery: Battery,
    /// Adds the mean off-diagonal transfer rate per ε.
    #[serde(default)]
    pub transfer: bool,
    #[serde(default = "two_hundred")]
    pub transfer_samples: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
}

#[derive(Serialize)]
struct SweepRow {
    epsilon: f32,
    whitebox_accuracy: f64,
    blackbox_accuracy: Option<f64>,
    transferability: Option<f64>,
}

pub fn sweep_cmd(cfg: &SweepConfig, out: &Path) -> Result<String, CliError> {
    let ens = load(&cfg.checkpoint)?;
    let surrogates = cfg.surrogates.iter().map(|p| load(p)).collect::<Result<Vec<_>, _>>()?;
    let full = cfg.data.load()?;
    let data = sampled(full.clone(), cfg.samples, cfg.seed);
    let wb = whitebox_eval(&ens, &cfg.epsilons, &cfg.attack, &data, rng::derive(cfg.seed, &[0]))?;
    let mut rows = Vec::new();
    for (i, (&e, w)) in cfg.epsilons.iter().zip(wb).enumerate() {
        let blackbox = if surrogates.is_empty() {
            None
        } else {
            Some(blackbox_eval(&ens, &surrogates, e, &cfg.battery, &data, rng::derive(cfg.seed, &[1, i as u64]))?)
        };
        let transferability = if cfg.transfer {
            transfer_matrix(&ens, &cfg.attack.at_epsilon(e), &full, cfg.transfer_samples, rng::derive(cfg.seed, &[2]))?.mean_off_diagonal()
        } else {
            None
        };
        rows.push(SweepRow {
            epsilon: e,
            whitebox_accuracy: w,
            blackbox_accuracy: blackbox,
            transferability,
        });
    }
    let mut csv = format!("# samples={} seed={}\nepsilon,whitebox_accuracy,blackbox_accuracy,transferability\n", data.len(), cfg.seed);
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in &rows {
        let _ = writeln!(csv, "{},{},{},{}", r.epsilon, r.whitebox_accuracy, opt(r.blackbox_accuracy), opt(r.transferability));
    }
    let mut outputs = Outputs::create(out, "sweep-eps")?;
    outputs.write("sweep.csv", csv)?;
    outputs.write_json("sweep.json", &json!({ "clean_accuracy": clean_accuracy(&ens, &data)?, "sample_count": data.len(), "rows": rows }))?;
    let out = outputs.finish(cfg, cfg.seed)?;
    Ok(ok_line("sweep-eps", &out, json!({ "rows": rows.len() })))
}

// ---------------------------------------------------------------- convergence-check

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergenceConfig {
    pub checkpoint: PathBuf,
    pub data: DataRef,
    pub epsilon: f32,
    #[serde(default = "convergence_iterations")]
    pub iterations: Vec<usize>,
    /// Attack template; steps are replaced by each budget.
    #[serde(default = "convergence_template")]
    pub attack: AttackSpec,
    #[serde(default)]
    pub samples: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
}

pub fn convergence_cmd(cfg: &ConvergenceConfig, out: &Path) -> Result<String, CliError> {
    let ens = load(&cfg.checkpoint)?;
    let data = sampled(cfg.data.load()?, cfg.samples, cfg.seed);
    let acc = convergence_check(&ens, &cfg.iterations, &cfg.attack.at_epsilon(cfg.epsilon), &data, cfg.seed)?;
    let gap = match (acc.first(), acc.last()) {
        (Some(a), Some(b)) => a - b,
        _ => 0.0,
    };
    let mut outputs = Outputs::create(out, "convergence-check")?;
    outputs.write_json(
        "convergence.json",
        &json!({ "epsilon": cfg.epsilon, "iterations": cfg.iterations, "accuracy": acc, "gap_first_to_last": gap, "sample_count": data.len() }),
    )?;
    let out = outputs.finish(cfg, cfg.seed)?;
    Ok(ok_line("convergence-check", &out, json!({ "accuracy": acc })))
}
