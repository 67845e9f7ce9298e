//! Deterministic training driver: seeded epoch shuffles, scheduled SGD, a divergence
//! guard on every batch loss, periodic evaluation, checkpoints and run records, and
//! a matrix runner over (plan, seed) cells.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{lr_at, AutodiffError, Sgd, SgdConfig, Tape};
use crate::data_io::ScoredSubset;
use crate::evaluation::{compute_metrics, EvalError, EvalReport, MetricSet, PairEvalSpec};
use crate::models::{BackboneConfig, InputStats, ModelError, ScorePredictor};
use crate::objectives::{
    bins_of, bpr_batch_loss, cross_entropy_bins, inverse_frequency_weights, make_pairs, mse_loss, Objective,
    ObjectiveError,
};
use crate::rng::{derive_seed, SplitMix64};

pub const RECORD_FILE: &str = "record.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const SIDECAR_FILE: &str = "model.json";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}, step {step} (global step {global_step}): {detail}")]
    Divergence { epoch: usize, step: usize, global_step: usize, detail: String, record: Box<RunRecord> },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("{path}: {msg}")]
    Io { path: PathBuf, msg: String },
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> TrainError {
    TrainError::Io { path: path.to_path_buf(), msg: e.to_string() }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub objective: Objective,
    pub sgd: SgdConfig,
    pub batch_size: usize,
    pub seeds: Vec<u64>,
    pub eval_every: usize,
    pub backbone: BackboneConfig,
    pub pair_eval: PairEvalSpec,
    /// Weight the bin cross entropy by inverse bin frequency.
    #[serde(default)]
    pub bins_weighted: bool,
}

impl TrainPlan {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.objective.validate()?;
        self.sgd.validate().map_err(TrainError::Config)?;
        self.backbone.validate()?;
        if self.seeds.is_empty() {
            return Err(TrainError::Config("seed list is empty".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be positive".into()));
        }
        if matches!(self.objective, Objective::Bpr { .. }) && self.batch_size < 2 {
            return Err(TrainError::Config("pairwise training needs batch_size ≥ 2".into()));
        }
        if self.eval_every == 0 {
            return Err(TrainError::Config("eval_every must be positive".into()));
        }
        if self.pair_eval.eval_batch < 2 {
            return Err(TrainError::Config("pair evaluation batch must be at least 2".into()));
        }
        Ok(())
    }

    pub fn epochs(&self) -> usize {
        self.sgd.total_epochs
    }
}

/// Named experiment scale. `desk` runs on a CPU in minutes; `full` carries the
/// full-scale settings (200 epochs, batch 256, residual backbone, ten seeds).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Desk,
    Full,
}

impl std::str::FromStr for Profile {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "desk" => Ok(Profile::Desk),
            "full" | "paper" => Ok(Profile::Full),
            other => Err(format!("unknown profile `{other}` (expected desk|full)")),
        }
    }
}

impl std::fmt::Display for Profile {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Profile::Desk => "desk",
            Profile::Full => "full",
        })
    }
}

impl Profile {
    pub fn plan(&self, objective: Objective) -> TrainPlan {
        match self {
            Profile::Desk => TrainPlan {
                objective,
                sgd: SgdConfig {
                    base_lr: 0.02,
                    weight_decay: 5e-4,
                    momentum: 0.9,
                    decay_factor: 0.2,
                    decay_epochs: vec![6, 8],
                    warmup_epochs: 1,
                    total_epochs: 10,
                },
                batch_size: 128,
                seeds: vec![0, 1, 2],
                eval_every: 1,
                backbone: BackboneConfig::small_cnn(),
                pair_eval: PairEvalSpec::default(),
                bins_weighted: false,
            },
            Profile::Full => TrainPlan {
                objective,
                sgd: SgdConfig::default(),
                batch_size: 256,
                seeds: (0..10).collect(),
                eval_every: 1,
                backbone: BackboneConfig::resnet18_like(),
                pair_eval: PairEvalSpec::default(),
                bins_weighted: false,
            },
        }
    }

    /// Training samples used from the training split (`None` = all).
    pub fn train_limit(&self) -> Option<usize> {
        match self {
            Profile::Desk => Some(5_000),
            Profile::Full => None,
        }
    }

    /// Samples used from each evaluation set (`None` = all).
    pub fn eval_limit(&self) -> Option<usize> {
        match self {
            Profile::Desk => Some(2_000),
            Profile::Full => None,
        }
    }

    /// Whether summary tables from this profile may be compared with full-scale numbers.
    pub fn comparable(&self) -> bool {
        matches!(self, Profile::Full)
    }

    /// The six methods of the full comparison: BPR, regression, and 5/10/20/40 bins.
    pub fn methods() -> Vec<Objective> {
        use crate::objectives::BprVariant;
        let mut m = vec![Objective::Bpr { variant: BprVariant::Modified }, Objective::Regression];
        m.extend([5, 10, 20, 40].map(|k| Objective::Bins { k }));
        m
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub step_losses: Vec<f64>,
    pub step_lrs: Vec<f64>,
    pub skipped_batches: usize,
    pub eval: BTreeMap<String, MetricSet>,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Diverged { epoch: usize, step: usize, global_step: usize, cause: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataEcho {
    pub name: String,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: String,
    pub seed: u64,
    pub plan: TrainPlan,
    pub train_data: DataEcho,
    pub eval_data: Vec<DataEcho>,
    pub epochs: Vec<EpochRecord>,
    /// Metrics of the final model on every evaluation set.
    pub final_eval: BTreeMap<String, MetricSet>,
    pub checkpoint: Option<String>,
    pub status: RunStatus,
}

impl RunRecord {
    pub fn loss_curve(&self) -> Vec<f64> {
        self.epochs.iter().flat_map(|e| e.step_losses.iter().copied()).collect()
    }
}

/// Sidecar written next to every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSidecar {
    pub backbone: BackboneConfig,
    pub head_width: usize,
    pub seed: u64,
    pub objective: Objective,
    pub epoch: usize,
    pub plan: TrainPlan,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Cell directory for the record, checkpoint and sidecar.
    pub out_dir: Option<PathBuf>,
    /// Replaces the loss of this global step with NaN (exercises the divergence guard).
    pub poison_step: Option<usize>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub record: RunRecord,
    pub model: ScorePredictor<f32>,
}

/// Eval-mode metrics of `model` on `subset`.
pub fn evaluate_subset(
    model: &ScorePredictor<f32>,
    objective: &Objective,
    subset: &ScoredSubset,
    pair_spec: &PairEvalSpec,
) -> Result<MetricSet, TrainError> {
    if subset.is_empty() {
        return Ok(MetricSet::new());
    }
    let outputs = model.infer(&subset.images)?;
    Ok(compute_metrics(objective, &outputs, &subset.scores, pair_spec)?)
}

fn evaluate_all(
    model: &ScorePredictor<f32>,
    plan: &TrainPlan,
    eval_sets: &[&ScoredSubset],
) -> Result<BTreeMap<String, MetricSet>, TrainError> {
    eval_sets
        .iter()
        .map(|s| Ok((s.name.clone(), evaluate_subset(model, &plan.objective, s, &plan.pair_eval)?)))
        .collect()
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<(), TrainError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn read_record(dir: &Path) -> Result<RunRecord, TrainError> {
    let path = dir.join(RECORD_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    serde_json::from_str(&text).map_err(|e| io_err(&path, e))
}

pub fn read_sidecar(dir: &Path) -> Result<ModelSidecar, TrainError> {
    let path = dir.join(SIDECAR_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    serde_json::from_str(&text).map_err(|e| io_err(&path, e))
}

/// Rebuilds the model described by a cell directory's sidecar and loads its checkpoint.
pub fn load_model(dir: &Path) -> Result<(ModelSidecar, ScorePredictor<f32>), TrainError> {
    let sidecar = read_sidecar(dir)?;
    let mut model = ScorePredictor::build(sidecar.backbone.clone(), sidecar.head_width, sidecar.seed)?;
    let path = dir.join(CHECKPOINT_FILE);
    let bytes = std::fs::read(&path).map_err(|e| io_err(&path, e))?;
    model.restore(&bytes)?;
    Ok((sidecar, model))
}

fn save_model(dir: &Path, model: &ScorePredictor<f32>, plan: &TrainPlan, epoch: usize) -> Result<String, TrainError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let path = dir.join(CHECKPOINT_FILE);
    std::fs::write(&path, model.checkpoint_bytes()).map_err(|e| io_err(&path, e))?;
    let sidecar = ModelSidecar {
        backbone: model.config().clone(),
        head_width: model.head_width(),
        seed: model.seed(),
        objective: plan.objective,
        epoch,
        plan: plan.clone(),
    };
    write_json(&dir.join(SIDECAR_FILE), &sidecar)?;
    Ok(path.display().to_string())
}

fn gather_images(data: &ScoredSubset, idx: &[usize]) -> Vec<u8> {
    let mut out = Vec::with_capacity(idx.len() * crate::data_io::IMAGE_BYTES);
    for &i in idx {
        out.extend_from_slice(data.image(i));
    }
    out
}

enum StepOutcome {
    Loss(f64),
    Skipped(String),
}

struct Trainer<'a> {
    plan: &'a TrainPlan,
    model: ScorePredictor<f32>,
    optimizer: Sgd<f32>,
    bin_weights: Option<Vec<f64>>,
}

impl Trainer<'_> {
    /// One forward/backward/update on the samples at `idx`. The divergence check runs
    /// on the loss before any parameter changes.
    fn step(
        &mut self,
        data: &ScoredSubset,
        idx: &[usize],
        lr: f64,
        poison: bool,
    ) -> Result<Result<StepOutcome, String>, TrainError> {
        let scores: Vec<f64> = idx.iter().map(|&i| data.scores[i]).collect();
        let pairs = match self.plan.objective {
            Objective::Bpr { .. } => match make_pairs(&scores) {
                Ok(p) => Some(p),
                Err(e) => return Ok(Ok(StepOutcome::Skipped(e.to_string()))),
            },
            _ => None,
        };
        let mut tape = Tape::new();
        let x = tape.constant(self.model.normalize(&gather_images(data, idx))?);
        let fwd = self.model.forward(&mut tape, x, true)?;
        let loss = match self.plan.objective {
            Objective::Regression => mse_loss(&mut tape, fwd.output, &scores)?,
            Objective::Bins { .. } => {
                let scheme = self.plan.objective.scheme().expect("validated bins objective");
                let targets = bins_of(&scores, scheme)?;
                cross_entropy_bins(&mut tape, fwd.output, &targets, self.bin_weights.as_deref())?
            }
            Objective::Bpr { variant } => {
                bpr_batch_loss(&mut tape, fwd.output, pairs.as_ref().expect("pairs built"), variant)?
            }
        };
        let value = if poison { f64::NAN } else { tape.value(loss).item() as f64 };
        if !value.is_finite() {
            return Ok(Err(format!("non-finite batch loss {value}")));
        }
        let grads = tape.backward(loss)?;
        self.model.params_mut().accumulate(&tape, &grads);
        let bad = self
            .model
            .params()
            .iter()
            .find(|p| p.grad.as_ref().is_some_and(|g| !g.is_finite()))
            .map(|p| p.name.clone());
        if let Some(name) = bad {
            self.model.params_mut().clear_grads();
            return Ok(Err(format!("non-finite gradient in `{name}`")));
        }
        self.optimizer.step(self.model.params_mut(), lr)?;
        self.model.apply_bn_updates(fwd.bn_updates);
        Ok(Ok(StepOutcome::Loss(value)))
    }
}

/// Trains one (plan, seed) cell. Batch order in epoch `e` is a SplitMix64 permutation
/// seeded with `derive_seed(seed, e)`; model parameters are initialized from `seed`.
/// The final partial batch is kept, except that a pairwise batch without a valid pair
/// is skipped with a warning.
pub fn train(
    plan: &TrainPlan,
    seed: u64,
    train_data: &ScoredSubset,
    eval_sets: &[&ScoredSubset],
    opts: &TrainOptions,
) -> Result<TrainOutcome, TrainError> {
    plan.validate()?;
    if train_data.is_empty() {
        return Err(TrainError::Config("training set is empty".into()));
    }
    let mut plan = plan.clone();
    plan.seeds = vec![seed];
    plan.backbone.input_stats = InputStats::from_images(&train_data.images);
    let model = ScorePredictor::build(plan.backbone.clone(), plan.objective.head_width(), seed)?;
    let bin_weights = match (plan.bins_weighted, plan.objective.scheme()) {
        (true, Some(scheme)) => Some(inverse_frequency_weights(&bins_of(&train_data.scores, scheme)?, scheme.k())),
        _ => None,
    };
    let method = plan.objective.label();
    let mut record = RunRecord {
        method: method.clone(),
        seed,
        plan: plan.clone(),
        train_data: DataEcho { name: train_data.name.clone(), samples: train_data.len() },
        eval_data: eval_sets.iter().map(|s| DataEcho { name: s.name.clone(), samples: s.len() }).collect(),
        epochs: Vec::new(),
        final_eval: BTreeMap::new(),
        checkpoint: None,
        status: RunStatus::Completed,
    };
    let mut trainer = Trainer { plan: &plan, model, optimizer: Sgd::new(plan.sgd.clone()), bin_weights };

    let n = train_data.len();
    let steps_per_epoch = n.div_ceil(plan.batch_size);
    let mut global_step = 0;
    for epoch in 0..plan.epochs() {
        let started = Instant::now();
        let order = SplitMix64::new(derive_seed(seed, epoch as u64)).permutation(n);
        let mut rec = EpochRecord {
            epoch,
            mean_loss: 0.0,
            step_losses: Vec::with_capacity(steps_per_epoch),
            step_lrs: Vec::with_capacity(steps_per_epoch),
            skipped_batches: 0,
            eval: BTreeMap::new(),
            wall_seconds: 0.0,
        };
        for (step, idx) in order.chunks(plan.batch_size).enumerate() {
            let lr = lr_at(epoch, step, steps_per_epoch, &plan.sgd);
            let poison = opts.poison_step == Some(global_step);
            match trainer.step(train_data, idx, lr, poison)? {
                Ok(StepOutcome::Loss(loss)) => {
                    rec.step_losses.push(loss);
                    rec.step_lrs.push(lr);
                }
                Ok(StepOutcome::Skipped(why)) => {
                    warn!("{method} seed {seed}: skipping batch {step} of epoch {epoch}: {why}");
                    rec.skipped_batches += 1;
                }
                Err(cause) => {
                    rec.mean_loss = mean(&rec.step_losses);
                    rec.wall_seconds = started.elapsed().as_secs_f64();
                    record.epochs.push(rec);
                    record.status = RunStatus::Diverged { epoch, step, global_step, cause: cause.clone() };
                    if let Some(dir) = &opts.out_dir {
                        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
                        write_json(&dir.join(RECORD_FILE), &record)?;
                    }
                    return Err(TrainError::Divergence {
                        epoch,
                        step,
                        global_step,
                        detail: cause,
                        record: Box::new(record),
                    });
                }
            }
            global_step += 1;
        }
        rec.mean_loss = mean(&rec.step_losses);
        if (epoch + 1) % plan.eval_every == 0 {
            rec.eval = evaluate_all(&trainer.model, &plan, eval_sets)?;
        }
        rec.wall_seconds = started.elapsed().as_secs_f64();
        info!(
            "{method} seed {seed} epoch {}/{}: loss {:.6} lr {:.3e}{}",
            epoch + 1,
            plan.epochs(),
            rec.mean_loss,
            rec.step_lrs.last().copied().unwrap_or(0.0),
            format_eval(&rec.eval)
        );
        record.epochs.push(rec);
    }

    let model = trainer.model;
    record.final_eval = evaluate_all(&model, &plan, eval_sets)?;
    if let Some(dir) = &opts.out_dir {
        record.checkpoint = Some(save_model(dir, &model, &plan, record.epochs.len())?);
        write_json(&dir.join(RECORD_FILE), &record)?;
    }
    Ok(TrainOutcome { record, model })
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn format_eval(eval: &BTreeMap<String, MetricSet>) -> String {
    let mut s = String::new();
    for (set, metrics) in eval {
        for (k, v) in metrics {
            s.push_str(&format!(" {set}.{k}={v:.4}"));
        }
    }
    s
}

/// Directory of one cell under a run root: `runs/<method>/<seed>/`.
pub fn cell_dir(root: &Path, method: &str, seed: u64) -> PathBuf {
    root.join("runs").join(method).join(seed.to_string())
}

/// Data shared by every cell of a matrix.
#[derive(Clone, Copy, Debug)]
pub struct MatrixData<'a> {
    pub train: &'a ScoredSubset,
    pub eval_sets: &'a [&'a ScoredSubset],
}

#[derive(Debug)]
pub struct CellResult {
    pub method: String,
    pub seed: u64,
    pub outcome: Result<RunRecord, TrainError>,
}

/// Runs every (plan, seed) cell, in parallel across cells. Results are returned in
/// plan order, then seed order; a failing cell does not stop the others.
pub fn run_matrix(
    plans: &[TrainPlan],
    data: MatrixData<'_>,
    root: Option<&Path>,
) -> Result<Vec<CellResult>, TrainError> {
    if plans.is_empty() {
        return Err(TrainError::Config("no plans to run".into()));
    }
    for p in plans {
        p.validate()?;
    }
    let cells: Vec<(&TrainPlan, u64)> = plans.iter().flat_map(|p| p.seeds.iter().map(move |&s| (p, s))).collect();
    Ok(cells
        .into_par_iter()
        .map(|(plan, seed)| {
            let method = plan.objective.label();
            let opts = TrainOptions { out_dir: root.map(|r| cell_dir(r, &method, seed)), poison_step: None };
            let outcome = train(plan, seed, data.train, data.eval_sets, &opts).map(|o| o.record);
            CellResult { method, seed, outcome }
        })
        .collect())
}

/// Aggregates `metric` from the final evaluations of completed runs into one report
/// per (dataset, method), seeds in record order.
pub fn summarize_records(records: &[RunRecord], metric: &str) -> Result<Vec<EvalReport>, EvalError> {
    let mut groups: BTreeMap<(String, String), Vec<(u64, f64)>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.status == RunStatus::Completed) {
        for (dataset, metrics) in &r.final_eval {
            if let Some(&v) = metrics.get(metric) {
                groups.entry((dataset.clone(), r.method.clone())).or_default().push((r.seed, v));
            }
        }
    }
    groups.into_iter().map(|((dataset, method), values)| EvalReport::new(&dataset, &method, metric, values)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::BprVariant;
    use crate::synthetic;

    fn tiny_plan(objective: Objective, epochs: usize) -> TrainPlan {
        TrainPlan {
            objective,
            sgd: SgdConfig {
                base_lr: 0.01,
                momentum: 0.9,
                decay_epochs: vec![],
                total_epochs: epochs,
                ..SgdConfig::default()
            },
            batch_size: 16,
            seeds: vec![0],
            eval_every: 1,
            backbone: BackboneConfig { stage_widths: vec![4, 8], ..BackboneConfig::small_cnn() },
            pair_eval: PairEvalSpec::default(),
            bins_weighted: false,
        }
    }

    fn data(n: usize) -> ScoredSubset {
        synthetic::cifar100_like(n, 3).subset("train")
    }

    #[test]
    fn zero_epochs_keeps_initial_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let d = data(20);
        let opts = TrainOptions { out_dir: Some(dir.path().to_path_buf()), poison_step: None };
        let out = train(&tiny_plan(Objective::Regression, 0), 5, &d, &[], &opts).unwrap();
        assert!(out.record.epochs.is_empty());
        assert!(dir.path().join(CHECKPOINT_FILE).exists());
        let (sidecar, model) = load_model(dir.path()).unwrap();
        assert_eq!(sidecar.epoch, 0);
        assert_eq!(model.checkpoint_bytes(), out.model.checkpoint_bytes());
    }

    #[test]
    fn deterministic_losses_and_recorded_lrs() {
        let d = data(40);
        let plan = tiny_plan(Objective::Bpr { variant: BprVariant::Modified }, 2);
        let a = train(&plan, 1, &d, &[], &TrainOptions::default()).unwrap().record;
        let b = train(&plan, 1, &d, &[], &TrainOptions::default()).unwrap().record;
        assert_eq!(a.loss_curve(), b.loss_curve());
        assert_eq!(a.loss_curve().len(), 6);
        for e in &a.epochs {
            for (s, &lr) in e.step_lrs.iter().enumerate() {
                assert_eq!(lr, lr_at(e.epoch, s, 3, &plan.sgd));
            }
        }
        let c = train(&plan, 2, &d, &[], &TrainOptions::default()).unwrap().record;
        assert_ne!(a.loss_curve(), c.loss_curve());
    }

    #[test]
    fn poisoned_step_diverges_and_keeps_partial_record() {
        let dir = tempfile::tempdir().unwrap();
        let d = data(40);
        let opts = TrainOptions { out_dir: Some(dir.path().to_path_buf()), poison_step: Some(4) };
        let err = train(&tiny_plan(Objective::Regression, 3), 0, &d, &[], &opts).unwrap_err();
        match err {
            TrainError::Divergence { epoch, step, global_step, record, .. } => {
                assert_eq!((epoch, step, global_step), (1, 1, 4));
                assert_eq!(record.loss_curve().len(), 4);
            }
            other => panic!("unexpected {other}"),
        }
        let saved = read_record(dir.path()).unwrap();
        assert!(matches!(saved.status, RunStatus::Diverged { global_step: 4, .. }));
        assert!(saved.loss_curve().iter().all(|l| l.is_finite()));
    }

    #[test]
    fn reload_reproduces_final_metrics() {
        let dir = tempfile::tempdir().unwrap();
        let d = data(48);
        let test = synthetic::cifar100_like(24, 4).subset("test");
        let opts = TrainOptions { out_dir: Some(dir.path().to_path_buf()), poison_step: None };
        for objective in [Objective::Regression, Objective::Bins { k: 5 }] {
            let plan = tiny_plan(objective, 1);
            let out = train(&plan, 0, &d, &[&test], &opts).unwrap();
            let (sidecar, model) = load_model(dir.path()).unwrap();
            let again = evaluate_subset(&model, &sidecar.objective, &test, &plan.pair_eval).unwrap();
            assert_eq!(out.record.final_eval["test"], again);
            assert_eq!(out.record.epochs[0].eval["test"], again);
        }
    }

    #[test]
    fn config_errors() {
        let d = data(8);
        let mut plan = tiny_plan(Objective::Regression, 1);
        plan.seeds.clear();
        assert!(matches!(plan.validate(), Err(TrainError::Config(_))));
        let plan = TrainPlan { batch_size: 1, ..tiny_plan(Objective::Bpr { variant: BprVariant::Modified }, 1) };
        assert!(matches!(train(&plan, 0, &d, &[], &TrainOptions::default()), Err(TrainError::Config(_))));
        let plan = tiny_plan(Objective::Bins { k: 1 }, 1);
        assert!(train(&plan, 0, &d, &[], &TrainOptions::default()).is_err());
        assert!(matches!(run_matrix(&[], MatrixData { train: &d, eval_sets: &[] }, None), Err(TrainError::Config(_))));
    }

    #[test]
    fn single_sample_pair_batch_is_skipped() {
        let d = data(17);
        let plan = tiny_plan(Objective::Bpr { variant: BprVariant::Modified }, 1);
        let rec = train(&plan, 0, &d, &[], &TrainOptions::default()).unwrap().record;
        assert_eq!(rec.epochs[0].skipped_batches, 1);
        assert_eq!(rec.epochs[0].step_losses.len(), 1);
    }

    #[test]
    fn matrix_is_ordered_and_labeled() {
        let d = data(16);
        let mut a = tiny_plan(Objective::Regression, 1);
        a.seeds = vec![3, 1, 2];
        let b = tiny_plan(Objective::Bins { k: 5 }, 1);
        let dir = tempfile::tempdir().unwrap();
        let cells = run_matrix(&[a, b], MatrixData { train: &d, eval_sets: &[] }, Some(dir.path())).unwrap();
        let labels: Vec<(String, u64)> = cells.iter().map(|c| (c.method.clone(), c.seed)).collect();
        assert_eq!(
            labels,
            vec![("regression".into(), 3), ("regression".into(), 1), ("regression".into(), 2), ("bins-5".into(), 0)]
        );
        assert!(cells.iter().all(|c| c.outcome.is_ok()));
        assert!(cell_dir(dir.path(), "bins-5", 0).join(RECORD_FILE).exists());
    }

    #[test]
    fn summaries_group_by_dataset_and_method() {
        let plan = tiny_plan(Objective::Regression, 1);
        let rec = |method: &str, seed, src: f64, status| RunRecord {
            method: method.into(),
            seed,
            plan: plan.clone(),
            train_data: DataEcho { name: "t".into(), samples: 1 },
            eval_data: vec![],
            epochs: vec![],
            final_eval: BTreeMap::from([("d".to_string(), MetricSet::from([("src".to_string(), src)]))]),
            checkpoint: None,
            status,
        };
        let diverged = RunStatus::Diverged { epoch: 0, step: 0, global_step: 0, cause: "nan".into() };
        let records = [
            rec("bpr", 0, 0.4, RunStatus::Completed),
            rec("bpr", 1, 0.6, RunStatus::Completed),
            rec("bpr", 2, 0.9, diverged),
            rec("regression", 0, 0.2, RunStatus::Completed),
        ];
        let reports = summarize_records(&records, "src").unwrap();
        assert_eq!(reports.len(), 2);
        assert_eq!(reports[0].method, "bpr");
        assert_eq!(reports[0].seeds, vec![0, 1]);
        assert!((reports[0].mean - 0.5).abs() < 1e-12);
        assert!(reports[1].std.is_none());
        assert!(summarize_records(&records, "mse").unwrap().is_empty());
    }

    #[test]
    fn profiles() {
        let desk = Profile::Desk.plan(Objective::Regression);
        desk.validate().unwrap();
        assert_eq!(desk.epochs(), 10);
        assert_eq!(Profile::Desk.train_limit(), Some(5_000));
        let full = Profile::Full.plan(Objective::Bins { k: 40 });
        full.validate().unwrap();
        assert_eq!(full.batch_size, 256);
        assert_eq!(full.seeds.len(), 10);
        assert_eq!(full.sgd, SgdConfig::default());
        assert_eq!(full.objective.head_width(), 40);
        assert_eq!("paper".parse::<Profile>(), Ok(Profile::Full));
        assert_eq!(Profile::methods().len(), 6);
    }
}
