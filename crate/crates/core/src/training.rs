//! Training loops: clean pretraining, round-robin vulnerability
//! diversification, PGD adversarial training and their λ-weighted
//! combination.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{pgd_attack, AttackSpec};
use crate::data::{epoch_batches, sample_with_replacement, Dataset};
use crate::distill::{distill_features, DistillSpec, DistilledBatch};
use crate::diversity::{diversity_loss_with_grad, pairwise_diversity, transfer_matrix, LayerPolicy};
use crate::engine::{sgd_step, EngineError, ParamMap, SgdConfig, SgdState, Tensor};
use crate::error::{Error, Result};
use crate::eval::clean_accuracy;
use crate::loss::model_ce_grads;
use crate::models::{Ensemble, LayeredModel};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "baseline")]
    Baseline,
    #[serde(rename = "dverge")]
    Dverge,
    #[serde(rename = "advt")]
    Advt,
    #[serde(rename = "dverge+advt")]
    DvergeAdvt,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Baseline, Mode::Dverge, Mode::Advt, Mode::DvergeAdvt];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Dverge => "dverge",
            Mode::Advt => "advt",
            Mode::DvergeAdvt => "dverge+advt",
        }
    }

    fn distills(self) -> bool {
        matches!(self, Mode::Dverge | Mode::DvergeAdvt)
    }

    fn attacks(self) -> bool {
        matches!(self, Mode::Advt | Mode::DvergeAdvt)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid("mode", format!("unknown mode `{s}`")))
    }
}

/// Step decay: `initial · decay^k` where `k` counts the milestones (given
/// as fractions of the phase length) already reached.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub initial: f64,
    pub decay: f64,
    pub milestones: Vec<f64>,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            initial: 0.05,
            decay: 0.1,
            milestones: vec![0.6, 0.9],
        }
    }
}

impl LrSchedule {
    pub fn at(&self, epoch: usize, total: usize) -> f64 {
        let reached = self
            .milestones
            .iter()
            // ceil keeps a one-epoch phase at the initial rate
            .filter(|&&m| epoch as f64 >= (m * total as f64 - 1e-9).ceil())
            .count();
        self.initial * self.decay.powi(reached as i32)
    }
}

/// Per-epoch measurements used to follow diversity and transferability.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSpec {
    /// Commonly-correct evaluation rows attacked for transferability.
    pub samples: usize,
    pub attack: AttackSpec,
    pub distill: DistillSpec,
    /// Monte Carlo size of each pairwise diversity estimate.
    pub diversity_samples: usize,
    /// Trailing window of the rolling probe values in the log.
    #[serde(default = "default_window")]
    pub window: usize,
}

fn default_window() -> usize {
    30
}

fn default_momentum() -> f64 {
    0.9
}

fn default_weight_decay() -> f64 {
    1e-4
}

fn default_batch_size() -> usize {
    64
}

fn default_lambda() -> f32 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPlan {
    pub mode: Mode,
    /// Number of sub-models.
    pub models: usize,
    /// Epochs of the main phase.
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Cap on batches per epoch; a full pass when absent.
    #[serde(default)]
    pub batches_per_epoch: Option<usize>,
    #[serde(default)]
    pub lr: LrSchedule,
    #[serde(default = "default_momentum")]
    pub sgd_momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    /// Required by the distilling modes; its `layer` is replaced according
    /// to `layer_policy`.
    #[serde(default)]
    pub distill: Option<DistillSpec>,
    /// Required by the adversarial modes.
    #[serde(default)]
    pub advt: Option<AttackSpec>,
    /// Weight of the diversification term in the combined mode.
    #[serde(default = "default_lambda")]
    pub lambda: f32,
    #[serde(default)]
    pub layer_policy: LayerPolicy,
    /// Clean epochs run before the main phase.
    #[serde(default)]
    pub pretrain_epochs: usize,
    #[serde(default)]
    pub probe: Option<ProbeSpec>,
    #[serde(default)]
    pub seed: u64,
}

impl TrainPlan {
    pub fn new(mode: Mode, models: usize, epochs: usize, batch_size: usize, seed: u64) -> Self {
        Self {
            mode,
            models,
            epochs,
            batch_size,
            batches_per_epoch: None,
            lr: LrSchedule::default(),
            sgd_momentum: default_momentum(),
            weight_decay: default_weight_decay(),
            distill: None,
            advt: None,
            lambda: default_lambda(),
            layer_policy: LayerPolicy::UniformRandom,
            pretrain_epochs: 0,
            probe: None,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.models == 0 {
            return Err(Error::invalid("models", "need at least one sub-model"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be positive"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid("lambda", format!("{} must be finite and non-negative", self.lambda)));
        }
        if !(self.lr.initial > 0.0 && self.lr.initial.is_finite()) {
            return Err(Error::invalid("lr.initial", "must be positive"));
        }
        if self.mode.distills() {
            self.distill
                .as_ref()
                .ok_or_else(|| Error::invalid("distill", format!("required by mode {}", self.mode)))?
                .validate()?;
        }
        if self.mode.attacks() {
            self.advt
                .as_ref()
                .ok_or_else(|| Error::invalid("advt", format!("required by mode {}", self.mode)))?
                .validate()?;
        }
        if let LayerPolicy::Fixed(0) = self.layer_policy {
            return Err(Error::invalid("layer_policy", "taps are numbered from 1"));
        }
        Ok(())
    }

    fn sgd(&self, lr: f64) -> SgdConfig {
        SgdConfig {
            lr,
            momentum: self.sgd_momentum,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Main,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: Phase,
    pub epoch: usize,
    pub mode: Mode,
    pub lr: f64,
    /// Mean training loss per sub-model.
    pub losses: Vec<f64>,
    /// Distillation layer used this epoch.
    pub layer: Option<usize>,
    pub clean_accuracy: Option<f64>,
    /// Mean off-diagonal transfer success of the probe attack.
    pub transferability: Option<f64>,
    /// Mean pairwise diversity estimate.
    pub diversity: Option<f64>,
    /// Trailing means of the probes over the main phase so far.
    #[serde(default)]
    pub transferability_rolling: Option<f64>,
    #[serde(default)]
    pub diversity_rolling: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    /// One JSON object per line, one line per epoch.
    pub fn to_json_lines(&self) -> Result<String> {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        Ok(s)
    }

    pub fn main_phase(&self) -> impl Iterator<Item = &EpochRecord> {
        self.records.iter().filter(|r| r.phase == Phase::Main)
    }
}

/// Momentum buffers, one per sub-model.
#[derive(Clone, Debug, Default)]
pub struct Optimizers {
    states: Vec<SgdState>,
}

impl Optimizers {
    pub fn new(n: usize) -> Self {
        Self {
            states: vec![SgdState::new(); n],
        }
    }
}

/// Per-sub-model losses and parameter gradients of one step.
#[derive(Clone, Debug)]
pub struct StepResult {
    pub losses: Vec<f32>,
    pub grads: Vec<ParamMap>,
}

fn guard<T>(r: Result<T>, epoch: usize, model: usize) -> Result<T> {
    match r {
        Err(Error::Engine(EngineError::NonFinite { .. })) => Err(Error::Diverged { epoch, model }),
        other => other,
    }
}

fn check_data(ens: &Ensemble, data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let m = &ens.members()[0];
    if data.input_shape() != m.input_shape() || data.classes() != m.classes() {
        return Err(Error::IncompatibleModels(format!(
            "data is {:?}/{} classes, models take {:?}/{}",
            data.input_shape(),
            data.classes(),
            m.input_shape(),
            m.classes()
        )));
    }
    Ok(())
}

fn apply(ens: &mut Ensemble, opt: &mut Optimizers, step: &StepResult, config: SgdConfig, epoch: usize) -> Result<()> {
    for (i, (m, state)) in ens.members_mut().iter_mut().zip(&mut opt.states).enumerate() {
        if m.is_frozen() {
            continue;
        }
        if !step.losses[i].is_finite() {
            return Err(Error::Diverged { epoch, model: i });
        }
        sgd_step(m.params_mut(), &step.grads[i], config, state)?;
        if m.params().values().any(|t| !t.all_finite()) {
            return Err(Error::Diverged { epoch, model: i });
        }
    }
    Ok(())
}

fn batches(plan: &TrainPlan, n: usize, name: &str, path: &[u64]) -> Vec<Vec<usize>> {
    let mut b = epoch_batches(n, plan.batch_size, &mut rng::stream(plan.seed, name, path));
    if let Some(cap) = plan.batches_per_epoch {
        b.truncate(cap);
    }
    b
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// One clean cross-entropy epoch; each sub-model has its own shuffle.
fn clean_epoch(ens: &mut Ensemble, opt: &mut Optimizers, plan: &TrainPlan, data: &Dataset, phase: Phase, epoch: usize, lr: f64) -> Result<Vec<f64>> {
    let tag = match phase {
        Phase::Pretrain => "pretrain-shuffle",
        Phase::Main => "clean-shuffle",
    };
    let config = plan.sgd(lr);
    let mut out = Vec::with_capacity(ens.len());
    for (i, (m, state)) in ens.members_mut().iter_mut().zip(&mut opt.states).enumerate() {
        let mut losses = Vec::new();
        if m.is_frozen() {
            out.push(0.0);
            continue;
        }
        for b in batches(plan, data.len(), tag, &[epoch as u64, i as u64]) {
            let (x, y) = data.batch(&b);
            let (loss, grads) = guard(model_ce_grads(m, &x, &y, 1.0 / b.len() as f32), epoch, i)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, model: i });
            }
            sgd_step(m.params_mut(), &grads, config, state)?;
            losses.push(loss as f64);
        }
        if m.params().values().any(|t| !t.all_finite()) {
            return Err(Error::Diverged { epoch, model: i });
        }
        out.push(mean(&losses));
    }
    Ok(out)
}

/// Independent clean training of every sub-model for the plan's pretraining
/// epochs.
pub fn pretrain_clean(ens: &mut Ensemble, plan: &TrainPlan, data: &Dataset, eval: Option<&Dataset>) -> Result<TrainLog> {
    check_data(ens, data)?;
    let mut opt = Optimizers::new(ens.len());
    let mut log = TrainLog::default();
    for epoch in 0..plan.pretrain_epochs {
        let lr = plan.lr.at(epoch, plan.pretrain_epochs);
        let losses = clean_epoch(ens, &mut opt, plan, data, Phase::Pretrain, epoch, lr)?;
        log.records.push(EpochRecord {
            phase: Phase::Pretrain,
            epoch,
            mode: Mode::Baseline,
            lr,
            losses,
            layer: None,
            clean_accuracy: eval.map(|e| clean_accuracy(ens, e)).transpose()?,
            transferability: None,
            diversity: None,
            transferability_rolling: None,
            diversity_rolling: None,
        });
    }
    Ok(log)
}

fn distill_all(members: &[LayeredModel], spec: &DistillSpec, batch: (&Tensor, &[usize]), source: (&Tensor, &[usize]), epoch: usize) -> Result<Vec<DistilledBatch>> {
    members
        .par_iter()
        .enumerate()
        .map(|(i, m)| guard(distill_features(m, spec, batch, source, 0), epoch, i))
        .collect()
}

/// Round-robin term for every sub-model: `Σ_{j≠i} CE(f_i(X′_j), Y_s)`.
fn dverge_terms(members: &[LayeredModel], distilled: &[DistilledBatch], epoch: usize) -> Result<StepResult> {
    let parts = members
        .par_iter()
        .enumerate()
        .map(|(i, m)| {
            let others: Vec<&DistilledBatch> = distilled.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, b)| b).collect();
            guard(diversity_loss_with_grad(m, &others), epoch, i)
        })
        .collect::<Result<Vec<_>>>()?;
    let (losses, grads) = parts.into_iter().unzip();
    Ok(StepResult { losses, grads })
}

fn pick_layer(plan: &TrainPlan, ens: &Ensemble, epoch: usize) -> Result<usize> {
    let taps = ens.members().iter().map(LayeredModel::tap_count).min().unwrap_or(1);
    plan.layer_policy.pick(taps, &mut rng::stream(plan.seed, "layer", &[epoch as u64]))
}

/// One epoch of round-robin diversification.
///
/// Each batch: draw an independent source batch uniformly with replacement,
/// distil every member's features of the batch into the sources at this
/// epoch's layer, compute every member's gradient on the others' distilled
/// images against the source labels, then update all members together.
pub fn dverge_epoch(ens: &mut Ensemble, opt: &mut Optimizers, plan: &TrainPlan, data: &Dataset, epoch: usize) -> Result<EpochRecord> {
    let lr = plan.lr.at(epoch, plan.epochs);
    let mut record = EpochRecord {
        phase: Phase::Main,
        epoch,
        mode: Mode::Dverge,
        lr,
        losses: vec![0.0; ens.len()],
        layer: None,
        clean_accuracy: None,
        transferability: None,
        diversity: None,
        transferability_rolling: None,
        diversity_rolling: None,
    };
    if ens.len() < 2 {
        return Ok(record);
    }
    let layer = pick_layer(plan, ens, epoch)?;
    record.layer = Some(layer);
    let spec = plan
        .distill
        .as_ref()
        .ok_or_else(|| Error::invalid("distill", "required by mode dverge"))?
        .clone()
        .with_layer(layer);
    let mut sums = vec![Vec::new(); ens.len()];
    for (b, idx) in batches(plan, data.len(), "dverge-shuffle", &[epoch as u64]).into_iter().enumerate() {
        let (x, y) = data.batch(&idx);
        let src = sample_with_replacement(data.len(), idx.len(), &mut rng::stream(plan.seed, "source", &[epoch as u64, b as u64]));
        let (xs, ys) = data.batch(&src);
        let distilled = distill_all(ens.members(), &spec, (&x, &y), (&xs, &ys), epoch)?;
        let step = dverge_terms(ens.members(), &distilled, epoch)?;
        apply(ens, opt, &step, plan.sgd(lr), epoch)?;
        for (s, l) in sums.iter_mut().zip(&step.losses) {
            s.push(*l as f64);
        }
    }
    record.losses = sums.iter().map(|s| mean(s)).collect();
    Ok(record)
}

/// Cross-entropy of every member on PGD adversarials of `(x, y)`.
///
/// With `per_member` each member is attacked on its own; otherwise one set
/// of adversarials is made against the whole ensemble.
pub fn advt_step(members: &[LayeredModel], x: &Tensor, y: &[usize], spec: &AttackSpec, per_member: bool, seed: u64) -> Result<StepResult> {
    if members.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    let shared = if per_member {
        None
    } else {
        Some(pgd_attack(members, x, y, spec, seed)?.adversarials)
    };
    let parts = members
        .par_iter()
        .enumerate()
        .map(|(i, m)| {
            let adv = match &shared {
                Some(a) => a.clone(),
                None => pgd_attack(m, x, y, spec, rng::derive(seed, &[i as u64]))?.adversarials,
            };
            model_ce_grads(m, &adv, y, 1.0 / y.len() as f32)
        })
        .collect::<Result<Vec<_>>>()?;
    let (losses, grads) = parts.into_iter().unzip();
    Ok(StepResult { losses, grads })
}

/// Per member: `λ · (round-robin term at `layer`) + CE on the member's own
/// PGD adversarials of the source batch`, with the matching gradient.
pub fn combined_step(
    members: &[LayeredModel],
    batch: (&Tensor, &[usize]),
    source: (&Tensor, &[usize]),
    plan: &TrainPlan,
    layer: usize,
    seed: u64,
) -> Result<StepResult> {
    let attack = plan.advt.as_ref().ok_or_else(|| Error::invalid("advt", "required by mode dverge+advt"))?;
    let distill = plan.distill.as_ref().ok_or_else(|| Error::invalid("distill", "required by mode dverge+advt"))?;
    let adv = advt_step(members, source.0, source.1, attack, true, seed)?;
    let distilled = distill_all(members, &distill.clone().with_layer(layer), batch, source, 0)?;
    let div = dverge_terms(members, &distilled, 0)?;
    let lambda = plan.lambda;
    let mut out = adv;
    for i in 0..members.len() {
        out.losses[i] += lambda * div.losses[i];
        for (name, g) in out.grads[i].iter_mut() {
            for (a, b) in g.data_mut().iter_mut().zip(div.grads[i][name].data()) {
                *a += lambda * *b;
            }
        }
    }
    Ok(out)
}

fn advt_epoch(ens: &mut Ensemble, opt: &mut Optimizers, plan: &TrainPlan, data: &Dataset, epoch: usize) -> Result<EpochRecord> {
    let lr = plan.lr.at(epoch, plan.epochs);
    let spec = plan.advt.as_ref().ok_or_else(|| Error::invalid("advt", "required by mode advt"))?;
    let mut sums = vec![Vec::new(); ens.len()];
    for (b, idx) in batches(plan, data.len(), "advt-shuffle", &[epoch as u64]).into_iter().enumerate() {
        let (x, y) = data.batch(&idx);
        let seed = rng::derive(plan.seed, &[rng::tag("advt"), epoch as u64, b as u64]);
        let step = guard(advt_step(ens.members(), &x, &y, spec, false, seed), epoch, 0)?;
        apply(ens, opt, &step, plan.sgd(lr), epoch)?;
        for (s, l) in sums.iter_mut().zip(&step.losses) {
            s.push(*l as f64);
        }
    }
    Ok(EpochRecord {
        phase: Phase::Main,
        epoch,
        mode: Mode::Advt,
        lr,
        losses: sums.iter().map(|s| mean(s)).collect(),
        layer: None,
        clean_accuracy: None,
        transferability: None,
        diversity: None,
        transferability_rolling: None,
        diversity_rolling: None,
    })
}

fn combined_epoch(ens: &mut Ensemble, opt: &mut Optimizers, plan: &TrainPlan, data: &Dataset, epoch: usize) -> Result<EpochRecord> {
    let lr = plan.lr.at(epoch, plan.epochs);
    let layer = pick_layer(plan, ens, epoch)?;
    let mut sums = vec![Vec::new(); ens.len()];
    for (b, idx) in batches(plan, data.len(), "combined-shuffle", &[epoch as u64]).into_iter().enumerate() {
        let (x, y) = data.batch(&idx);
        let src = sample_with_replacement(data.len(), idx.len(), &mut rng::stream(plan.seed, "source", &[epoch as u64, b as u64]));
        let (xs, ys) = data.batch(&src);
        let seed = rng::derive(plan.seed, &[rng::tag("advt"), epoch as u64, b as u64]);
        let step = guard(combined_step(ens.members(), (&x, &y), (&xs, &ys), plan, layer, seed), epoch, 0)?;
        apply(ens, opt, &step, plan.sgd(lr), epoch)?;
        for (s, l) in sums.iter_mut().zip(&step.losses) {
            s.push(*l as f64);
        }
    }
    Ok(EpochRecord {
        phase: Phase::Main,
        epoch,
        mode: Mode::DvergeAdvt,
        lr,
        losses: sums.iter().map(|s| mean(s)).collect(),
        layer: Some(layer),
        clean_accuracy: None,
        transferability: None,
        diversity: None,
        transferability_rolling: None,
        diversity_rolling: None,
    })
}

/// Probe values for the current ensemble: mean off-diagonal transfer
/// success and mean pairwise diversity. Both use a seed fixed for the run so
/// epoch-to-epoch changes reflect the models rather than the sampling.
pub fn probe(ens: &Ensemble, spec: &ProbeSpec, policy: LayerPolicy, eval: &Dataset, seed: u64) -> Result<(Option<f64>, Option<f64>)> {
    if ens.len() < 2 {
        return Ok((None, None));
    }
    let transfer = match transfer_matrix(ens, &spec.attack, eval, spec.samples, rng::derive(seed, &[rng::tag("probe-transfer")])) {
        Ok(t) => t.mean_off_diagonal(),
        Err(Error::NoCommonlyCorrect { .. }) => None,
        Err(e) => return Err(e),
    };
    let members = ens.members();
    let mut values = Vec::new();
    for i in 0..members.len() {
        for j in i + 1..members.len() {
            let d = pairwise_diversity(
                &members[i],
                &members[j],
                eval,
                &spec.distill,
                policy,
                spec.diversity_samples,
                rng::derive(seed, &[rng::tag("probe-diversity")]),
            )?;
            values.push(d.value);
        }
    }
    Ok((transfer, Some(mean(&values))))
}

/// Pretraining (if planned) followed by the main phase of the plan's mode.
/// `on_epoch` sees every record as soon as it is complete.
pub fn train(
    ens: &mut Ensemble,
    plan: &TrainPlan,
    data: &Dataset,
    eval: Option<&Dataset>,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainLog> {
    plan.validate()?;
    check_data(ens, data)?;
    if ens.len() != plan.models {
        return Err(Error::invalid(
            "models",
            format!("plan has {} sub-models, ensemble has {}", plan.models, ens.len()),
        ));
    }
    let mut log = pretrain_clean(ens, plan, data, eval)?;
    log.records.iter().for_each(&mut *on_epoch);
    let mut opt = Optimizers::new(ens.len());
    for epoch in 0..plan.epochs {
        let mut record = match plan.mode {
            Mode::Baseline => {
                let lr = plan.lr.at(epoch, plan.epochs);
                let losses = clean_epoch(ens, &mut opt, plan, data, Phase::Main, epoch, lr)?;
                EpochRecord {
                    phase: Phase::Main,
                    epoch,
                    mode: Mode::Baseline,
                    lr,
                    losses,
                    layer: None,
                    clean_accuracy: None,
                    transferability: None,
                    diversity: None,
                    transferability_rolling: None,
                    diversity_rolling: None,
                }
            }
            Mode::Dverge => dverge_epoch(ens, &mut opt, plan, data, epoch)?,
            Mode::Advt => advt_epoch(ens, &mut opt, plan, data, epoch)?,
            Mode::DvergeAdvt => combined_epoch(ens, &mut opt, plan, data, epoch)?,
        };
        if let Some(e) = eval {
            record.clean_accuracy = Some(clean_accuracy(ens, e)?);
            if let Some(p) = &plan.probe {
                let (t, d) = probe(ens, p, plan.layer_policy, e, plan.seed)?;
                record.transferability = t;
                record.diversity = d;
                let main = log.main_phase().chain(std::iter::once(&record));
                let (ts, ds): (Vec<_>, Vec<_>) = main.map(|r| (r.transferability, r.diversity)).unzip();
                let last = |v: Vec<Option<f64>>| {
                    let v: Vec<f64> = v.into_iter().flatten().collect();
                    rolling_mean(&v, p.window).last().copied()
                };
                record.transferability_rolling = t.and(last(ts));
                record.diversity_rolling = d.and(last(ds));
            }
        }
        on_epoch(&record);
        log.records.push(record);
    }
    Ok(log)
}

/// Trailing moving average with the given window (shorter at the start).
pub fn rolling_mean(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            mean(&values[lo..=i])
        })
        .collect()
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties. `NaN` when either
/// side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "spearman needs paired samples");
    let (ra, rb) = (ranks(a), ranks(b));
    let (ma, mb) = (mean(&ra), mean(&rb));
    let mut num = 0.0;
    let mut da = 0.0;
    let mut db = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        num += (x - ma) * (y - mb);
        da += (x - ma) * (x - ma);
        db += (y - mb) * (y - mb);
    }
    num / (da * db).sqrt()
}
