//! Training loops, checkpoints and the transfer-learning experiments.
//!
//! Training draws one sample per iteration from a seeded permutation that
//! is regenerated on every pass. Every `validation_interval` iterations the
//! mean validation MSE drives both the plateau learning-rate schedule and
//! early stopping; patiences are counted in validation checks. The
//! parameters from the best check are what a run returns.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use alloc::{format, vec};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate_plan, isodose_mse, paired_t_test, DvhMetric, MetricsReport, TTestResult};
use crate::nn::{
    adam_step, backward, build_unet, forward, forward_tape, mse_loss, AdamState, Mode, ModelParameters, Tensor,
    UNetConfig,
};
use crate::preprocess::{Sample, N_CHANNELS};
use crate::seed::{self, derive_seed};
use crate::volume::VoxelGrid;

/// A loss must drop by more than this to count as an improvement.
pub const IMPROVEMENT_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSchedule {
    pub max_iterations: usize,
    pub validation_interval: usize,
    pub initial_lr: f64,
    pub plateau_factor: f64,
    /// In validation checks.
    pub plateau_patience: usize,
    pub min_lr: f64,
    /// In validation checks.
    pub early_stop_patience: usize,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            max_iterations: 5000,
            validation_interval: 10,
            initial_lr: 1e-3,
            plateau_factor: 0.1,
            plateau_patience: 30,
            min_lr: 1e-4,
            early_stop_patience: 99,
            seed: 0,
        }
    }
}

/// Fine-tuning budget relative to training from scratch (40k of 150k).
pub const FINE_TUNE_FRACTION: f64 = 40.0 / 150.0;

impl TrainSchedule {
    pub fn full_scale() -> Self {
        Self {
            max_iterations: 150_000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.validation_interval == 0 || self.plateau_patience == 0 || self.early_stop_patience == 0 {
            return Err(Error::Config("validation interval and patiences must be positive".into()));
        }
        if !(self.initial_lr > 0.0) || !(self.min_lr > 0.0) || self.min_lr > self.initial_lr {
            return Err(Error::Config(format!(
                "need 0 < min_lr ({}) <= initial_lr ({})",
                self.min_lr, self.initial_lr
            )));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(Error::Config("plateau_factor must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// Same schedule with the budget scaled by [`FINE_TUNE_FRACTION`].
    pub fn for_fine_tuning(&self) -> Self {
        Self {
            max_iterations: libm::round(self.max_iterations as f64 * FINE_TUNE_FRACTION) as usize,
            ..*self
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..*self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationPoint {
    pub iteration: usize,
    pub val_loss: f64,
    /// Mean training loss since the previous check; absent at iteration 0.
    pub train_loss: Option<f64>,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    /// `"random"` or `"finetune"`.
    pub origin: String,
    pub init_seed: Option<u64>,
    pub schedule: TrainSchedule,
    pub train_samples: usize,
    pub val_samples: usize,
    pub iterations_run: usize,
    pub best_iteration: usize,
    pub best_val_loss: f64,
    pub final_lr: f64,
    pub stopped_early: bool,
    pub history: Vec<ValidationPoint>,
}

/// Best-validation parameters of a run together with the optimizer state
/// at that point and the run's history.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub params: ModelParameters<f32>,
    pub optimizer: Option<AdamState<f32>>,
    pub meta: Option<TrainingMeta>,
}

impl ModelCheckpoint {
    pub fn untrained(params: ModelParameters<f32>) -> Self {
        Self {
            params,
            optimizer: None,
            meta: None,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Init<'a> {
    Random { config: UNetConfig, seed: u64 },
    Checkpoint(&'a ModelCheckpoint),
}

fn input_tensor(s: &Sample) -> Result<Tensor<f32>> {
    Tensor::new(s.input.kernel().dims, N_CHANNELS, s.input.data().to_vec())
}

/// Dropout-free prediction on the kernel grid.
pub fn predict(params: &ModelParameters<f32>, sample: &Sample) -> Result<VoxelGrid> {
    forward(params, &sample.input, Mode::Infer, 0)
}

/// Mean over samples of the per-sample MSE, in inference mode.
pub fn mean_loss(params: &ModelParameters<f32>, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Config("loss over an empty dataset".into()));
    }
    let mut total = 0.0;
    for s in samples {
        let pred = predict(params, s)?;
        total += mse_loss(pred.data(), s.target.data())?.0;
    }
    Ok(total / samples.len() as f64)
}

pub fn train(init: Init<'_>, dataset: &[Sample], val: &[Sample], schedule: &TrainSchedule) -> Result<ModelCheckpoint> {
    schedule.validate()?;
    if dataset.is_empty() || val.is_empty() {
        return Err(Error::Config("training and validation sets must be nonempty".into()));
    }
    let kernel = dataset[0].input.kernel();
    let (mut params, origin, init_seed) = match init {
        Init::Random { config, seed } => (build_unet::<f32>(&config, kernel, seed)?, "random", Some(seed)),
        Init::Checkpoint(c) => (c.params.clone(), "finetune", None),
    };
    if let Some(s) = dataset.iter().chain(val).find(|s| s.input.kernel() != params.kernel) {
        return Err(Error::Shape(format!(
            "sample {}/{} has kernel {:?}, model expects {:?}",
            s.patient_id,
            s.plan_index,
            s.input.kernel().dims,
            params.kernel.dims
        )));
    }
    let mut adam = AdamState::new(&params, schedule.initial_lr);
    let first = mean_loss(&params, val)?;
    if !first.is_finite() {
        return Err(Error::TrainingDiverged { iteration: 0, loss: first });
    }
    let mut history = vec![ValidationPoint {
        iteration: 0,
        val_loss: first,
        train_loss: None,
        lr: adam.lr,
    }];
    // Only post-update checks compete for the best weights; the initial
    // weights survive only when no check runs.
    let mut best = (f64::INFINITY, 0usize, params.clone(), adam.clone());
    let mut since_best = 0usize;
    let mut plateau_wait = 0usize;
    let mut stopped_early = false;
    let mut iterations_run = 0usize;
    let mut order: Vec<usize> = Vec::new();
    let mut pass = 0u64;
    let mut running = (0.0f64, 0usize);

    for it in 1..=schedule.max_iterations {
        if order.is_empty() {
            order = (0..dataset.len()).collect();
            order.shuffle(&mut seed::rng(derive_seed(schedule.seed, &format!("shuffle/{pass}"))));
            order.reverse();
            pass += 1;
        }
        let s = &dataset[order.pop().expect("refilled above")];
        let x = input_tensor(s)?;
        let (y, tape) = forward_tape(&params, &x, Mode::Train, derive_seed(schedule.seed, &format!("dropout/{it}")))?;
        let (loss, grad) = mse_loss(&y.data, s.target.data())?;
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged { iteration: it, loss });
        }
        let grads = backward(&params, tape, Tensor::new(y.dims, 1, grad)?)?;
        adam_step(&mut params, &grads.params, &mut adam)?;
        running = (running.0 + loss, running.1 + 1);
        iterations_run = it;

        if it % schedule.validation_interval != 0 {
            continue;
        }
        let v = mean_loss(&params, val)?;
        if !v.is_finite() {
            return Err(Error::TrainingDiverged { iteration: it, loss: v });
        }
        history.push(ValidationPoint {
            iteration: it,
            val_loss: v,
            train_loss: Some(running.0 / running.1 as f64),
            lr: adam.lr,
        });
        running = (0.0, 0);
        if v < best.0 - IMPROVEMENT_EPS {
            best = (v, it, params.clone(), adam.clone());
            since_best = 0;
            plateau_wait = 0;
        } else {
            since_best += 1;
            plateau_wait += 1;
            if plateau_wait >= schedule.plateau_patience {
                plateau_wait = 0;
                if adam.lr > schedule.min_lr * (1.0 + 1e-9) {
                    adam.lr = (adam.lr * schedule.plateau_factor).max(schedule.min_lr);
                }
            }
            if since_best >= schedule.early_stop_patience {
                stopped_early = true;
                break;
            }
        }
    }
    let (best_val_loss, best_iteration, params, optimizer) = best;
    let best_val_loss = if best_val_loss.is_finite() { best_val_loss } else { first };
    Ok(ModelCheckpoint {
        params,
        optimizer: Some(optimizer),
        meta: Some(TrainingMeta {
            origin: origin.into(),
            init_seed,
            schedule: *schedule,
            train_samples: dataset.len(),
            val_samples: val.len(),
            iterations_run,
            best_iteration,
            best_val_loss,
            final_lr: adam.lr,
            stopped_early,
            history,
        }),
    })
}

/// Continues training from `source` on the target data with a fresh
/// optimizer.
pub fn fine_tune(
    source: &ModelCheckpoint,
    target: &[Sample],
    val: &[Sample],
    schedule: &TrainSchedule,
) -> Result<ModelCheckpoint> {
    if let Some(s) = target.iter().chain(val).find(|s| s.input.kernel() != source.params.kernel) {
        return Err(Error::Adaptation(format!(
            "source kernel {:?} differs from target kernel {:?} ({})",
            source.params.kernel.dims,
            s.input.kernel().dims,
            s.patient_id
        )));
    }
    if source.params.config.in_channels != N_CHANNELS {
        return Err(Error::Adaptation(format!(
            "source model takes {} channels, target inputs have {N_CHANNELS}",
            source.params.config.in_channels
        )));
    }
    train(Init::Checkpoint(source), target, val, schedule)
}

/// Metric errors of `params` on each test sample, in sample order.
pub fn evaluate_model(params: &ModelParameters<f32>, test: &[Sample]) -> Result<Vec<MetricsReport>> {
    test.iter()
        .map(|s| evaluate_plan(&predict(params, s)?, &s.target, &s.case.structures))
        .collect()
}

/// Mean over the test samples of the `v_percent` isodose MSE.
pub fn mean_isodose_mse(params: &ModelParameters<f32>, test: &[Sample], v_percent: f64) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Config("empty test set".into()));
    }
    let mut total = 0.0;
    for s in test {
        total += isodose_mse(&predict(params, s)?, &s.target, s.case.prescription(), v_percent)?;
    }
    Ok(total / test.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Source,
    Target,
    Adapted,
    Combined,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [ModelKind::Target, ModelKind::Adapted, ModelKind::Combined, ModelKind::Source];

    pub fn label(&self) -> &'static str {
        match self {
            ModelKind::Source => "source",
            ModelKind::Target => "target",
            ModelKind::Adapted => "adapted",
            ModelKind::Combined => "combined",
        }
    }
}

/// Textual flag for a non-significant comparison between two of the
/// target, adapted and combined models.
pub fn pair_marker(a: ModelKind, b: ModelKind) -> Option<&'static str> {
    use ModelKind::*;
    match (a.min(b), a.max(b)) {
        (Target, Adapted) => Some("*"),
        (Adapted, Combined) => Some("●"),
        (Target, Combined) => Some("◆"),
        _ => None,
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Split {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub unet: UNetConfig,
    pub schedule: TrainSchedule,
    /// Defaults to `schedule.for_fine_tuning()`.
    pub fine_tune: Option<TrainSchedule>,
    pub alpha: f64,
    pub isodose_percent: f64,
    /// Repeat target samples so the pooled set is balanced.
    pub rebalance_combined: bool,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            unet: UNetConfig::default(),
            schedule: TrainSchedule::default(),
            fine_tune: None,
            alpha: 0.05,
            isodose_percent: 10.0,
            rebalance_combined: false,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    fn schedule_for(&self, kind: ModelKind, label: &str) -> TrainSchedule {
        let base = match kind {
            ModelKind::Adapted => self.fine_tune.unwrap_or_else(|| self.schedule.for_fine_tuning()),
            _ => self.schedule,
        };
        base.with_seed(derive_seed(self.seed, &format!("train/{label}")))
    }

    fn init_seed(&self, label: &str) -> u64 {
        derive_seed(self.seed, &format!("init/{label}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub model: ModelKind,
    pub structure: String,
    pub metric: DvhMetric,
    pub mean: f64,
    pub sd: f64,
    /// One error per test plan containing the structure, in test order.
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairTest {
    pub a: ModelKind,
    pub b: ModelKind,
    pub structure: String,
    pub metric: DvhMetric,
    /// Absent when fewer than two test plans contain the structure.
    pub result: Option<TTestResult>,
    /// Set when the pair is one of the marked pairs and not significant.
    pub marker: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub model: ModelKind,
    pub label: String,
    pub points: Vec<ValidationPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub model: ModelKind,
    pub size: usize,
    /// Mean test-set isodose MSE of each repeat.
    pub values: Vec<f64>,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub models: Vec<ModelKind>,
    pub errors: Vec<ErrorSummary>,
    pub t_tests: Vec<PairTest>,
    pub curves: Vec<LossCurve>,
    pub sweep: Vec<SweepRow>,
}

impl ExperimentReport {
    pub fn error(&self, model: ModelKind, structure: &str, metric: DvhMetric) -> Option<&ErrorSummary> {
        self.errors
            .iter()
            .find(|e| e.model == model && e.structure == structure && e.metric == metric)
    }

    pub fn sweep_row(&self, model: ModelKind, size: usize) -> Option<&SweepRow> {
        self.sweep.iter().find(|r| r.model == model && r.size == size)
    }
}

/// Sample mean and standard deviation (n - 1 denominator; 0 for one value).
pub fn mean_sd(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, libm::sqrt(var))
}

/// `(structure, metric)` keys in first-seen order across the reports.
fn metric_keys(reports: &[MetricsReport]) -> Vec<(String, DvhMetric)> {
    let mut keys: Vec<(String, DvhMetric)> = Vec::new();
    for r in reports {
        for row in &r.rows {
            if !keys.iter().any(|(s, m)| *s == row.structure && *m == row.metric) {
                keys.push((row.structure.clone(), row.metric));
            }
        }
    }
    keys
}

/// Per-structure error summaries and pairwise paired t-tests for models
/// evaluated on the same test plans.
pub fn summarize(evaluations: &[(ModelKind, Vec<MetricsReport>)], alpha: f64) -> Result<(Vec<ErrorSummary>, Vec<PairTest>)> {
    let Some((_, first)) = evaluations.first() else {
        return Ok((Vec::new(), Vec::new()));
    };
    let keys = metric_keys(first);
    let values = |reports: &[MetricsReport], s: &str, m: DvhMetric| -> Vec<f64> {
        reports.iter().filter_map(|r| r.error(s, m)).collect()
    };
    let mut errors = Vec::new();
    for (kind, reports) in evaluations {
        for (s, m) in &keys {
            let v = values(reports, s, *m);
            let (mean, sd) = mean_sd(&v);
            errors.push(ErrorSummary {
                model: *kind,
                structure: s.clone(),
                metric: *m,
                mean,
                sd,
                values: v,
            });
        }
    }
    let mut tests = Vec::new();
    for (i, (ka, ra)) in evaluations.iter().enumerate() {
        for (kb, rb) in &evaluations[i + 1..] {
            for (s, m) in &keys {
                let (va, vb) = (values(ra, s, *m), values(rb, s, *m));
                let result = if va.len() >= 2 && va.len() == vb.len() {
                    Some(paired_t_test(&va, &vb, alpha)?)
                } else {
                    None
                };
                let marker = match (result, pair_marker(*ka, *kb)) {
                    (Some(r), Some(mk)) if !r.significant => Some(mk.to_string()),
                    _ => None,
                };
                tests.push(PairTest {
                    a: *ka,
                    b: *kb,
                    structure: s.clone(),
                    metric: *m,
                    result,
                    marker,
                });
            }
        }
    }
    Ok((errors, tests))
}

fn pooled(source: &[Sample], target: &[Sample], rebalance: bool) -> Vec<Sample> {
    let mut out: Vec<Sample> = source.to_vec();
    if rebalance && !target.is_empty() && target.len() < source.len() {
        out.extend(target.iter().cycle().take(source.len()).cloned());
    } else {
        out.extend_from_slice(target);
    }
    out
}

fn curve(kind: ModelKind, label: &str, c: &ModelCheckpoint) -> LossCurve {
    LossCurve {
        model: kind,
        label: label.into(),
        points: c.meta.as_ref().map(|m| m.history.clone()).unwrap_or_default(),
    }
}

/// Trained checkpoints of the four-model protocol, in [`ModelKind::ALL`]
/// order.
pub type ProtocolModels = Vec<(ModelKind, ModelCheckpoint)>;

/// Trains the source, target, adapted and combined models and evaluates
/// all four on the target test split.
pub fn four_model_protocol(
    source: &Split,
    target: &Split,
    cfg: &ExperimentConfig,
) -> Result<(ExperimentReport, ProtocolModels)> {
    if source.train.is_empty() || target.train.is_empty() || target.test.is_empty() {
        return Err(Error::Config("four-model protocol needs source/target training data and a target test split".into()));
    }
    if let Some(s) = target
        .test
        .iter()
        .find(|t| source.train.iter().chain(&target.train).any(|x| x.patient_id == t.patient_id))
    {
        return Err(Error::Config(format!("test patient `{}` also appears in training data", s.patient_id)));
    }
    let random = |label: &str| Init::Random {
        config: cfg.unet,
        seed: cfg.init_seed(label),
    };
    let label = |k: ModelKind| k.label();
    let src = train(random("source"), &source.train, &source.val, &cfg.schedule_for(ModelKind::Source, "source"))
        .map_err(|e| e.in_model("source"))?;
    let tgt = train(random("target"), &target.train, &target.val, &cfg.schedule_for(ModelKind::Target, "target"))
        .map_err(|e| e.in_model("target"))?;
    let adp = fine_tune(&src, &target.train, &target.val, &cfg.schedule_for(ModelKind::Adapted, "adapted"))
        .map_err(|e| e.in_model("adapted"))?;
    let comb = train(
        random("combined"),
        &pooled(&source.train, &target.train, cfg.rebalance_combined),
        &pooled(&source.val, &target.val, false),
        &cfg.schedule_for(ModelKind::Combined, "combined"),
    )
    .map_err(|e| e.in_model("combined"))?;

    let models: ProtocolModels = vec![
        (ModelKind::Target, tgt),
        (ModelKind::Adapted, adp),
        (ModelKind::Combined, comb),
        (ModelKind::Source, src),
    ];
    let mut evaluations = Vec::new();
    for (k, c) in &models {
        let reports = evaluate_model(&c.params, &target.test).map_err(|e| e.in_model(label(*k)))?;
        evaluations.push((*k, reports));
    }
    let (errors, t_tests) = summarize(&evaluations, cfg.alpha)?;
    let report = ExperimentReport {
        models: models.iter().map(|m| m.0).collect(),
        errors,
        t_tests,
        curves: models.iter().map(|(k, c)| curve(*k, label(*k), c)).collect(),
        sweep: Vec::new(),
    };
    Ok((report, models))
}

/// Inputs of a training-size sweep. `target_pool` groups the available
/// target training samples by patient.
#[derive(Debug, Clone, Copy)]
pub struct SweepData<'a> {
    pub source_ckpt: &'a ModelCheckpoint,
    /// Source training data pooled into the combined model.
    pub source_train: &'a [Sample],
    pub target_pool: &'a [Vec<Sample>],
    pub val: &'a [Sample],
    pub test: &'a [Sample],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub sizes: Vec<usize>,
    pub plans_per_patient: usize,
    pub repeats: usize,
    pub models: Vec<ModelKind>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            sizes: vec![1, 2, 4, 8],
            plans_per_patient: 8,
            repeats: 10,
            models: vec![ModelKind::Target, ModelKind::Adapted, ModelKind::Combined],
        }
    }
}

/// Seeded draw of `size` patients and up to `plans` plans from each.
pub fn draw_subset(pool: &[Vec<Sample>], size: usize, plans: usize, seed: u64) -> Result<Vec<Sample>> {
    if size > pool.len() {
        return Err(Error::Config(format!("training size {size} exceeds {} available patients", pool.len())));
    }
    let mut rng = seed::rng(seed);
    let mut patients: Vec<usize> = (0..pool.len()).collect();
    patients.shuffle(&mut rng);
    patients.truncate(size);
    patients.sort_unstable();
    let mut out = Vec::new();
    for p in patients {
        let mut idx: Vec<usize> = (0..pool[p].len()).collect();
        idx.shuffle(&mut rng);
        idx.truncate(plans);
        idx.sort_unstable();
        out.extend(idx.into_iter().map(|i| pool[p][i].clone()));
    }
    Ok(out)
}

/// For every training size and repeat, draws a target subset, trains the
/// requested models and records the mean test-set isodose MSE. Validation
/// and test sets stay fixed across sizes.
pub fn size_sweep(data: &SweepData<'_>, sweep: &SweepConfig, cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    if sweep.repeats == 0 || sweep.plans_per_patient == 0 || sweep.sizes.is_empty() || sweep.models.is_empty() {
        return Err(Error::Config("sweep needs sizes, models, repeats and plans per patient".into()));
    }
    if let Some(&s) = sweep.sizes.iter().find(|&&s| s == 0 || s > data.target_pool.len()) {
        return Err(Error::Config(format!(
            "training size {s} outside 1..={}",
            data.target_pool.len()
        )));
    }
    let mut rows = Vec::new();
    let mut curves = Vec::new();
    for &size in &sweep.sizes {
        let mut per_model: Vec<Vec<f64>> = vec![Vec::new(); sweep.models.len()];
        for rep in 0..sweep.repeats {
            let cell = format!("sweep/{size}/{rep}");
            let subset = draw_subset(
                data.target_pool,
                size,
                sweep.plans_per_patient,
                derive_seed(cfg.seed, &format!("{cell}/subset")),
            )?;
            let cell_cfg = ExperimentConfig {
                seed: derive_seed(cfg.seed, &cell),
                ..*cfg
            };
            for (mi, &kind) in sweep.models.iter().enumerate() {
                let label = kind.label();
                let random = Init::Random {
                    config: cfg.unet,
                    seed: cell_cfg.init_seed(label),
                };
                let sched = cell_cfg.schedule_for(kind, label);
                let ckpt = match kind {
                    ModelKind::Source => Ok(data.source_ckpt.clone()),
                    ModelKind::Target => train(random, &subset, data.val, &sched),
                    ModelKind::Adapted => fine_tune(data.source_ckpt, &subset, data.val, &sched),
                    ModelKind::Combined => train(
                        random,
                        &pooled(data.source_train, &subset, cfg.rebalance_combined),
                        data.val,
                        &sched,
                    ),
                }
                .map_err(|e| e.in_model(label))?;
                let mse = mean_isodose_mse(&ckpt.params, data.test, cfg.isodose_percent).map_err(|e| e.in_model(label))?;
                per_model[mi].push(mse);
                curves.push(curve(kind, &format!("{label}/size{size}/rep{rep}"), &ckpt));
            }
        }
        for (mi, &kind) in sweep.models.iter().enumerate() {
            let (mean, sd) = mean_sd(&per_model[mi]);
            rows.push(SweepRow {
                model: kind,
                size,
                values: core::mem::take(&mut per_model[mi]),
                mean,
                sd,
            });
        }
    }
    Ok(ExperimentReport {
        models: sweep.models.clone(),
        errors: Vec::new(),
        t_tests: Vec::new(),
        curves,
        sweep: rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_checks() {
        assert!(TrainSchedule::default().validate().is_ok());
        assert_eq!(TrainSchedule::full_scale().for_fine_tuning().max_iterations, 40_000);
        assert_eq!(TrainSchedule::default().for_fine_tuning().max_iterations, 1333);
        let bad = TrainSchedule {
            min_lr: 1e-2,
            ..TrainSchedule::default()
        };
        assert!(bad.validate().is_err());
        assert!(TrainSchedule {
            validation_interval: 0,
            ..TrainSchedule::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn markers() {
        use ModelKind::*;
        assert_eq!(pair_marker(Adapted, Target), Some("*"));
        assert_eq!(pair_marker(Combined, Adapted), Some("●"));
        assert_eq!(pair_marker(Target, Combined), Some("◆"));
        assert_eq!(pair_marker(Source, Target), None);
    }

    #[test]
    fn mean_sd_examples() {
        assert_eq!(mean_sd(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_sd(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }
}
