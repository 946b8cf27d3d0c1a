//! Config-driven runs: parsing, the training loop, checkpoints, metrics
//! streams and the sine-regression comparison grid.
//!
//! Every random draw comes from ChaCha8 streams keyed by the run seed:
//! stream 0 samples training tasks, 1 initializes θ, 2 draws the fixed
//! validation tasks and 3 draws meta-test tasks.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adversarial::{adversarial_update, AdvConfig, EpisodeTriple, OptimizerState, RngState, TrainState};
use crate::autodiff::ParamSet;
use crate::error::{Error, Result};
use crate::eval::{evaluate_suite, meta_test_task, write_results, MetricName, MetricsRecord, ResultRow, SuiteSpec};
use crate::meta::{baseline_meta_step, InnerConfig, LearnerKind, TaskReduction};
use crate::models::{EncoderSpec, FislParams, HeadKind, HeadSpec, Model};
use crate::tasks::{BlobDomain, EpisodeShape, SineDomain, Task, TaskDomain};

pub const TASK_STREAM: u64 = 0;
pub const INIT_STREAM: u64 = 1;
pub const VALIDATION_STREAM: u64 = 2;
pub const EVAL_STREAM: u64 = 3;

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

/// File name of the retained checkpoint for `iteration`.
pub fn checkpoint_file(iteration: u64) -> String {
    format!("checkpoint_{iteration}.json")
}
pub const METRICS_HEADER: &str = "iteration,train_loss,val_mse_source,val_mse_unseen,wall_ms";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Fisl,
    Baseline,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Fisl => "fisl",
            Mode::Baseline => "baseline",
        }
    }
}

/// Inner-loop settings as written in a config. A missing `inner_lr` takes
/// the learner's published default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InnerSettings {
    #[serde(default)]
    pub inner_lr: Option<f64>,
    #[serde(default = "one")]
    pub inner_steps: usize,
    #[serde(default = "default_ridge_lambda")]
    pub ridge_lambda: f64,
    #[serde(default)]
    pub first_order: bool,
}

impl Default for InnerSettings {
    fn default() -> Self {
        InnerSettings {
            inner_lr: None,
            inner_steps: 1,
            ridge_lambda: default_ridge_lambda(),
            first_order: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShotConfig {
    /// Support points (per class for classification).
    #[serde(default = "default_support")]
    pub support: usize,
    /// Query points during training.
    #[serde(default = "default_query")]
    pub query: usize,
    /// Query points at validation and meta-test time.
    #[serde(default = "default_eval_query")]
    pub eval_query: usize,
    /// Classes per episode; ignored for regression.
    #[serde(default = "default_n_way")]
    pub n_way: usize,
}

impl Default for ShotConfig {
    fn default() -> Self {
        ShotConfig {
            support: default_support(),
            query: default_query(),
            eval_query: default_eval_query(),
            n_way: default_n_way(),
        }
    }
}

fn one() -> usize {
    1
}
fn default_ridge_lambda() -> f64 {
    1.0
}
fn default_support() -> usize {
    5
}
fn default_query() -> usize {
    20
}
fn default_eval_query() -> usize {
    100
}
fn default_n_way() -> usize {
    5
}
fn default_hidden() -> Vec<usize> {
    vec![40, 40]
}
fn default_source() -> TaskDomain {
    TaskDomain::Sine(SineDomain::source())
}
fn default_unseen() -> TaskDomain {
    TaskDomain::Sine(SineDomain::unseen())
}
fn default_outer_lr() -> f64 {
    0.001
}
fn default_meta_batch() -> usize {
    2
}
fn default_iterations() -> u64 {
    20_000
}
fn default_every() -> u64 {
    1000
}
fn default_n_eval_tasks() -> usize {
    2000
}
fn default_n_val_tasks() -> usize {
    100
}
fn default_out_dir() -> PathBuf {
    PathBuf::from("runs/default")
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub learner_kind: LearnerKind,
    pub mode: Mode,
    #[serde(default = "default_hidden")]
    pub hidden_dims: Vec<usize>,
    #[serde(default = "default_source")]
    pub source: TaskDomain,
    #[serde(default = "default_unseen")]
    pub unseen: TaskDomain,
    #[serde(default)]
    pub shots: ShotConfig,
    #[serde(default)]
    pub adv: AdvConfig,
    #[serde(default)]
    pub inner: InnerSettings,
    #[serde(default = "default_outer_lr")]
    pub outer_lr: f64,
    /// Tasks per baseline outer step.
    #[serde(default = "default_meta_batch")]
    pub meta_batch: usize,
    #[serde(default = "default_iterations")]
    pub iterations: u64,
    #[serde(default = "default_every")]
    pub eval_every: u64,
    #[serde(default = "default_every")]
    pub checkpoint_every: u64,
    #[serde(default = "default_n_eval_tasks")]
    pub n_eval_tasks: usize,
    /// Fixed validation tasks per domain scored at every eval; 0 disables.
    #[serde(default = "default_n_val_tasks")]
    pub n_val_tasks: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Fill the `wall_ms` metrics column. Off by default so that metrics
    /// files depend on nothing but the config.
    #[serde(default)]
    pub record_wall_time: bool,
    /// Check parameters for NaN or infinity after every optimizer step.
    #[serde(default = "default_true")]
    pub check_finite: bool,
    /// Also keep every periodic checkpoint as `checkpoint_<iteration>.json`.
    #[serde(default)]
    pub keep_checkpoints: bool,
}

fn field_err(path: &str, message: impl Into<String>) -> Error {
    Error::Config {
        path: path.to_string(),
        message: message.into(),
    }
}

impl ExperimentConfig {
    /// All defaults for the given learner and mode.
    pub fn new(learner_kind: LearnerKind, mode: Mode) -> Self {
        let json = serde_json::json!({ "learner_kind": learner_kind, "mode": mode });
        let mut cfg: ExperimentConfig = serde_json::from_value(json).expect("defaults deserialize");
        cfg.resolve();
        cfg
    }

    /// Shifted-blob classification preset: 5-way 5-shot with 15 query
    /// points per class, η = 0.1 and 5,000 iterations.
    pub fn blob(learner_kind: LearnerKind, mode: Mode) -> Self {
        let mut cfg = Self::new(learner_kind, mode);
        cfg.source = TaskDomain::Blob(BlobDomain::source());
        cfg.unseen = TaskDomain::Blob(BlobDomain::unseen());
        cfg.shots = ShotConfig {
            support: 5,
            query: 15,
            eval_query: 15,
            n_way: 5,
        };
        cfg.adv = AdvConfig::classification();
        cfg.iterations = 5000;
        cfg.eval_every = 500;
        cfg.checkpoint_every = 500;
        cfg
    }

    fn resolve(&mut self) {
        if self.inner.inner_lr.is_none() {
            self.inner.inner_lr = Some(self.learner_kind.default_inner_lr());
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
            return Err(field_err("hidden_dims", "need at least one layer, each at least 1 wide"));
        }
        if self.source.is_classification() != self.unseen.is_classification() {
            return Err(field_err("unseen", "source and unseen domains must share a task family"));
        }
        if self.learner_kind == LearnerKind::Proto && !self.source.is_classification() {
            return Err(field_err("learner_kind", "proto needs a classification task family"));
        }
        let s = &self.shots;
        for (name, v) in [("shots.support", s.support), ("shots.query", s.query), ("shots.eval_query", s.eval_query)] {
            if v == 0 {
                return Err(field_err(name, "must be at least 1"));
            }
        }
        if self.source.is_classification() && s.n_way < 2 {
            return Err(field_err("shots.n_way", "must be at least 2"));
        }
        if !(self.outer_lr > 0.0 && self.outer_lr.is_finite()) {
            return Err(field_err("outer_lr", "must be a positive number"));
        }
        if self.meta_batch == 0 {
            return Err(field_err("meta_batch", "must be at least 1"));
        }
        if self.eval_every == 0 {
            return Err(field_err("eval_every", "must be at least 1"));
        }
        if self.checkpoint_every == 0 {
            return Err(field_err("checkpoint_every", "must be at least 1"));
        }
        if self.n_eval_tasks < 2 {
            return Err(field_err("n_eval_tasks", "must be at least 2"));
        }
        if self.n_val_tasks == 1 {
            return Err(field_err("n_val_tasks", "must be 0 or at least 2"));
        }
        self.adv.validate().map_err(|e| field_err("adv", e.to_string()))?;
        self.inner_config().validate().map_err(|e| field_err("inner", e.to_string()))?;
        Ok(())
    }

    pub fn inner_config(&self) -> InnerConfig {
        InnerConfig {
            kind: self.learner_kind,
            inner_lr: self
                .inner
                .inner_lr
                .unwrap_or_else(|| self.learner_kind.default_inner_lr()),
            inner_steps: self.inner.inner_steps,
            ridge_lambda: self.inner.ridge_lambda,
            first_order: self.inner.first_order,
        }
    }

    pub fn model(&self) -> Result<Model> {
        let classification = self.source.is_classification();
        let kind = match (self.learner_kind, classification) {
            (LearnerKind::Maml | LearnerKind::Anil, false) => HeadKind::LinearRegression,
            (LearnerKind::Maml | LearnerKind::Anil, true) => HeadKind::LinearClassifier,
            (LearnerKind::Ridge, _) => HeadKind::RidgeClosedForm,
            (LearnerKind::Proto, _) => HeadKind::PrototypeMetric,
        };
        let output_dim = if classification { self.shots.n_way } else { 1 };
        Model::new(
            EncoderSpec::new(self.source.input_dim(), self.hidden_dims.clone())?,
            HeadSpec { kind, output_dim },
        )
    }

    pub fn train_episode(&self) -> EpisodeShape {
        EpisodeShape {
            n_way: self.shots.n_way,
            support: self.shots.support,
            query: self.shots.query,
        }
    }

    pub fn eval_episode(&self) -> EpisodeShape {
        EpisodeShape {
            query: self.shots.eval_query,
            ..self.train_episode()
        }
    }

    /// Short label such as `maml-fisl` or `anil`.
    pub fn model_tag(&self) -> String {
        match self.mode {
            Mode::Fisl => format!("{}-fisl", self.learner_kind.name()),
            Mode::Baseline => self.learner_kind.name().to_string(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Parse, default and validate a config document. Errors name the
/// offending field.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let mut cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        field_err(&path, e.into_inner().to_string())
    })?;
    cfg.resolve();
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text)
}

/// Training state plus the losses recorded since the last metrics row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub iteration: u64,
    pub theta: ParamSet,
    pub phi: FislParams,
    pub optimizer_state: OptimizerState,
    pub rng_state: RngState,
    #[serde(default)]
    pub pending_train_losses: Vec<f64>,
}

impl Checkpoint {
    pub fn new(state: &TrainState, pending: &[f64]) -> Self {
        Checkpoint {
            iteration: state.iteration,
            theta: state.theta.clone(),
            phi: state.phi.clone(),
            optimizer_state: state.optimizer_state.clone(),
            rng_state: state.rng_state.clone(),
            pending_train_losses: pending.to_vec(),
        }
    }

    pub fn state(&self) -> TrainState {
        TrainState {
            iteration: self.iteration,
            theta: self.theta.clone(),
            phi: self.phi.clone(),
            optimizer_state: self.optimizer_state.clone(),
            rng_state: self.rng_state.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_string(self)?).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// One metrics-stream row. For classification the validation columns
/// hold accuracy.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub iteration: u64,
    pub train_loss: f64,
    pub val_source: Option<f64>,
    pub val_unseen: Option<f64>,
    pub wall_ms: Option<f64>,
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.iteration,
            self.train_loss,
            opt_cell(self.val_source),
            opt_cell(self.val_unseen),
            opt_cell(self.wall_ms)
        )
    }
}

pub fn initial_state(cfg: &ExperimentConfig, model: &Model) -> TrainState {
    let mut init = ChaCha8Rng::seed_from_u64(cfg.seed);
    init.set_stream(INIT_STREAM);
    let theta = model.init_params(&mut init);
    TrainState::new(
        theta,
        FislParams::identity(model.channels()),
        RngState::new(cfg.seed, TASK_STREAM),
    )
}

struct Validation {
    source: Vec<Task>,
    unseen: Vec<Task>,
}

impl Validation {
    fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(VALIDATION_STREAM);
        let shape = cfg.eval_episode();
        let mut draw = |domain: &TaskDomain, tag: &str| {
            (0..cfg.n_val_tasks)
                .map(|_| domain.sample_episode(&shape, tag, &mut rng))
                .collect::<Result<Vec<_>>>()
        };
        let source = draw(&cfg.source, "source")?;
        let unseen = draw(&cfg.unseen, "unseen")?;
        Ok(Validation { source, unseen })
    }

    fn score(&self, tasks: &[Task], model: &Model, state: &TrainState, cfg: &ExperimentConfig) -> Result<Option<f64>> {
        if tasks.is_empty() {
            return Ok(None);
        }
        let inner = cfg.inner_config();
        let use_fisl = cfg.mode == Mode::Fisl;
        let values = tasks
            .par_iter()
            .map(|t| meta_test_task(model, &state.theta, &state.phi, t, &inner, use_fisl))
            .collect::<Result<Vec<_>>>()?;
        let metric = if cfg.source.is_classification() {
            MetricName::Accuracy
        } else {
            MetricName::Mse
        };
        Ok(Some(MetricsRecord::from_values(metric, &values, "", "")?.mean))
    }
}

/// Result of a training run.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub state: TrainState,
    /// Rows produced by this call (a resumed run omits earlier rows).
    pub metrics: Vec<MetricsRow>,
}

struct Sink {
    dir: Option<PathBuf>,
    keep: bool,
}

impl Sink {
    fn start(&self, cfg: &ExperimentConfig, resume_at: Option<u64>) -> Result<()> {
        let Some(dir) = &self.dir else { return Ok(()) };
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut resolved = cfg.clone();
        resolved.out_dir = dir.clone();
        let cfg_path = dir.join(CONFIG_FILE);
        fs::write(&cfg_path, resolved.to_json()?).map_err(|e| Error::io(&cfg_path, e))?;
        let metrics = dir.join(METRICS_FILE);
        let mut body = format!("{METRICS_HEADER}\n");
        if let Some(at) = resume_at {
            // keep rows up to the checkpoint so the file matches an
            // uninterrupted run once training finishes
            if let Ok(old) = fs::read_to_string(&metrics) {
                for line in old.lines().skip(1) {
                    let it: Option<u64> = line.split(',').next().and_then(|v| v.parse().ok());
                    if it.is_some_and(|it| it <= at) {
                        body.push_str(line);
                        body.push('\n');
                    }
                }
            }
        }
        fs::write(&metrics, body).map_err(|e| Error::io(&metrics, e))
    }

    fn row(&self, row: &MetricsRow) -> Result<()> {
        let Some(dir) = &self.dir else { return Ok(()) };
        let path = dir.join(METRICS_FILE);
        let mut f = fs::OpenOptions::new()
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        writeln!(f, "{}", row.to_csv()).map_err(|e| Error::io(&path, e))
    }

    fn checkpoint(&self, state: &TrainState, pending: &[f64]) -> Result<()> {
        let Some(dir) = &self.dir else { return Ok(()) };
        let ckpt = Checkpoint::new(state, pending);
        if self.keep {
            ckpt.save(&dir.join(checkpoint_file(state.iteration)))?;
        }
        ckpt.save(&dir.join(CHECKPOINT_FILE))
    }
}

fn one_step(
    cfg: &ExperimentConfig,
    model: &Model,
    inner: &InnerConfig,
    state: &TrainState,
    rng: &mut ChaCha8Rng,
) -> Result<(TrainState, f64)> {
    let shape = cfg.train_episode();
    match cfg.mode {
        Mode::Fisl => {
            let triple = EpisodeTriple::sample(&cfg.source, shape.n_way, shape.support, shape.query, rng)?;
            adversarial_update(model, state, &triple, &cfg.adv, inner, cfg.outer_lr)
        }
        Mode::Baseline => {
            let tasks = (0..cfg.meta_batch)
                .map(|_| cfg.source.sample_episode(&shape, "source", rng))
                .collect::<Result<Vec<_>>>()?;
            let mut opt = state.optimizer_state.theta.clone();
            let step = baseline_meta_step(model, &state.theta, &mut opt, &tasks, inner, cfg.outer_lr, TaskReduction::Mean)?;
            let mut next = state.clone();
            next.theta = step.theta;
            next.optimizer_state.theta = opt;
            next.iteration += 1;
            Ok((next, step.loss))
        }
    }
}

/// Run (or continue) training for `cfg.iterations` outer steps.
///
/// With `out_dir`, the resolved config, the metrics stream and checkpoints
/// are written there. A failing step writes a checkpoint of the last good
/// state before the error is returned.
pub fn train(cfg: &ExperimentConfig, out_dir: Option<&Path>, resume: Option<Checkpoint>) -> Result<RunOutcome> {
    cfg.validate()?;
    let model = cfg.model()?;
    let inner = cfg.inner_config();
    let sink = Sink {
        dir: out_dir.map(Path::to_path_buf),
        keep: cfg.keep_checkpoints,
    };
    let (mut state, mut pending) = match resume {
        Some(c) => {
            if c.iteration > cfg.iterations {
                return Err(Error::invalid(format!(
                    "checkpoint is at iteration {} but the config stops at {}",
                    c.iteration, cfg.iterations
                )));
            }
            (c.state(), c.pending_train_losses)
        }
        None => (initial_state(cfg, &model), Vec::new()),
    };
    let resumed = (state.iteration > 0).then_some(state.iteration);
    sink.start(cfg, resumed)?;
    let validation = Validation::new(cfg)?;
    let mut rng = state.rng_state.restore();
    let started = Instant::now();
    let mut rows = Vec::new();

    while state.iteration < cfg.iterations {
        let step = one_step(cfg, &model, &inner, &state, &mut rng).and_then(|(mut next, loss)| {
            if cfg.check_finite {
                next.ensure_finite()?;
            }
            next.rng_state.capture(&rng);
            Ok((next, loss))
        });
        let (next, loss) = match step {
            Ok(v) => v,
            Err(e) => {
                sink.checkpoint(&state, &pending)?;
                return Err(e);
            }
        };
        state = next;
        pending.push(loss);
        let last = state.iteration == cfg.iterations;
        if state.iteration % cfg.eval_every == 0 || last {
            let row = MetricsRow {
                iteration: state.iteration,
                train_loss: pending.iter().sum::<f64>() / pending.len() as f64,
                val_source: validation.score(&validation.source, &model, &state, cfg)?,
                val_unseen: validation.score(&validation.unseen, &model, &state, cfg)?,
                wall_ms: cfg
                    .record_wall_time
                    .then(|| started.elapsed().as_secs_f64() * 1000.0),
            };
            pending.clear();
            sink.row(&row)?;
            rows.push(row);
        }
        if state.iteration % cfg.checkpoint_every == 0 && !last {
            sink.checkpoint(&state, &pending)?;
        }
    }
    sink.checkpoint(&state, &pending)?;
    Ok(RunOutcome { state, metrics: rows })
}

/// Which task distribution to evaluate on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainChoice {
    Source,
    Unseen,
}

impl DomainChoice {
    pub fn name(self) -> &'static str {
        match self {
            DomainChoice::Source => "source",
            DomainChoice::Unseen => "unseen",
        }
    }
}

/// Meta-test a trained state on `n_eval_tasks` fresh tasks.
pub fn evaluate_state(
    cfg: &ExperimentConfig,
    state: &TrainState,
    domain: DomainChoice,
    use_fisl: bool,
) -> Result<MetricsRecord> {
    let model = cfg.model()?;
    let inner = cfg.inner_config();
    let task_domain = match domain {
        DomainChoice::Source => &cfg.source,
        DomainChoice::Unseen => &cfg.unseen,
    };
    let model_tag = if use_fisl {
        cfg.model_tag()
    } else {
        cfg.learner_kind.name().to_string()
    };
    let spec = SuiteSpec {
        domain: task_domain,
        domain_tag: domain.name(),
        model_tag: &model_tag,
        episode: cfg.eval_episode(),
        n_tasks: cfg.n_eval_tasks,
        inner: &inner,
        use_fisl,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(EVAL_STREAM);
    Ok(evaluate_suite(&model, &state.theta, &state.phi, &spec, &mut rng)?.record)
}

/// Evaluate the checkpoint at `path` using the `config.json` beside it and
/// write `eval_<domain>[_nofisl].{csv,json}` into the same directory.
pub fn evaluate_checkpoint(path: &Path, domain: DomainChoice, use_fisl: bool) -> Result<MetricsRecord> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let cfg = parse_config(&dir.join(CONFIG_FILE))?;
    let ckpt = Checkpoint::load(path)?;
    let record = evaluate_state(&cfg, &ckpt.state(), domain, use_fisl)?;
    let stem = format!("eval_{}{}", domain.name(), if use_fisl { "" } else { "_nofisl" });
    let row = ResultRow {
        record: record.clone(),
        shot: cfg.shots.support,
        seed: cfg.seed,
    };
    write_results(dir, &stem, &[row])?;
    Ok(record)
}

/// Settings for the {MAML, ANIL} × {baseline, FiSL} × {5, 10}-shot grid.
#[derive(Clone, Debug)]
pub struct GridOptions {
    pub iterations: u64,
    pub seeds: Vec<u64>,
    pub n_eval_tasks: usize,
    pub shots: Vec<usize>,
    pub learners: Vec<LearnerKind>,
}

impl Default for GridOptions {
    fn default() -> Self {
        GridOptions {
            iterations: default_iterations(),
            seeds: vec![0, 1, 2],
            n_eval_tasks: default_n_eval_tasks(),
            shots: vec![5, 10],
            learners: vec![LearnerKind::Maml, LearnerKind::Anil],
        }
    }
}

/// One trained and evaluated grid cell.
#[derive(Clone, Debug, PartialEq)]
pub struct GridCell {
    pub learner: LearnerKind,
    pub mode: Mode,
    pub shot: usize,
    pub seed: u64,
    pub record: MetricsRecord,
}

#[derive(Clone, Debug)]
pub struct GridReport {
    pub cells: Vec<GridCell>,
    pub table: String,
}

impl GridReport {
    pub fn cell(&self, learner: LearnerKind, mode: Mode, shot: usize, seed: u64) -> Option<&GridCell> {
        self.cells
            .iter()
            .find(|c| c.learner == learner && c.mode == mode && c.shot == shot && c.seed == seed)
    }
}

fn grid_table(opts: &GridOptions, cells: &[GridCell]) -> String {
    let mut s = String::from("| Method |");
    for shot in &opts.shots {
        let _ = write!(s, " {shot}-shot |");
    }
    s.push_str("\n|---|");
    for _ in &opts.shots {
        s.push_str("---|");
    }
    s.push('\n');
    for learner in &opts.learners {
        for mode in [Mode::Baseline, Mode::Fisl] {
            let label = match mode {
                Mode::Baseline => learner.name().to_uppercase(),
                Mode::Fisl => format!("{}-FiSL", learner.name().to_uppercase()),
            };
            let _ = write!(s, "| {label} |");
            for &shot in &opts.shots {
                let picked: Vec<&MetricsRecord> = cells
                    .iter()
                    .filter(|c| c.learner == *learner && c.mode == mode && c.shot == shot)
                    .map(|c| &c.record)
                    .collect();
                let n = picked.len().max(1) as f64;
                let mean = picked.iter().map(|r| r.mean).sum::<f64>() / n;
                let ci = picked.iter().map(|r| r.ci95_halfwidth).sum::<f64>() / n;
                let _ = write!(s, " {mean:.3} ± {ci:.3} |");
            }
            s.push('\n');
        }
    }
    let _ = writeln!(
        s,
        "\nUnseen-domain MSE, mean over seeds {:?} of the per-seed mean ± 95% CI ({} tasks each, {} iterations).",
        opts.seeds, opts.n_eval_tasks, opts.iterations
    );
    s
}

/// Train and evaluate every grid cell under `out_dir`, then write
/// `table1.md`, `table1.csv` and `table1.json` there.
pub fn reproduce_table1(out_dir: &Path, opts: &GridOptions) -> Result<GridReport> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut jobs = Vec::new();
    for &learner in &opts.learners {
        for mode in [Mode::Baseline, Mode::Fisl] {
            for &shot in &opts.shots {
                for &seed in &opts.seeds {
                    jobs.push((learner, mode, shot, seed));
                }
            }
        }
    }
    let cells = jobs
        .par_iter()
        .map(|&(learner, mode, shot, seed)| {
            let mut cfg = ExperimentConfig::new(learner, mode);
            cfg.shots.support = shot;
            cfg.iterations = opts.iterations;
            cfg.n_eval_tasks = opts.n_eval_tasks;
            cfg.seed = seed;
            cfg.out_dir = out_dir.join(format!("{}-{shot}shot-seed{seed}", cfg.model_tag()));
            let run = train(&cfg, Some(&cfg.out_dir), None)?;
            let record = evaluate_state(&cfg, &run.state, DomainChoice::Unseen, mode == Mode::Fisl)?;
            let row = ResultRow {
                record: record.clone(),
                shot,
                seed,
            };
            write_results(&cfg.out_dir, "eval_unseen", &[row])?;
            Ok(GridCell {
                learner,
                mode,
                shot,
                seed,
                record,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<ResultRow> = cells
        .iter()
        .map(|c| ResultRow {
            record: c.record.clone(),
            shot: c.shot,
            seed: c.seed,
        })
        .collect();
    write_results(out_dir, "table1", &rows)?;
    let table = grid_table(opts, &cells);
    let md = out_dir.join("table1.md");
    fs::write(&md, &table).map_err(|e| Error::io(&md, e))?;
    Ok(GridReport { cells, table })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_takes_published_defaults() {
        let cfg = parse_config_str(r#"{"learner_kind": "maml", "mode": "fisl"}"#).unwrap();
        assert_eq!(cfg.hidden_dims, vec![40, 40]);
        assert_eq!(cfg.outer_lr, 0.001);
        assert_eq!(cfg.meta_batch, 2);
        assert_eq!(cfg.iterations, 20_000);
        assert_eq!(cfg.inner.inner_lr, Some(0.01));
        assert_eq!(cfg.inner.inner_steps, 1);
        assert_eq!((cfg.adv.penalty, cfg.adv.ascent_lr), (0.5, 0.01));
        assert_eq!((cfg.shots.support, cfg.shots.query, cfg.shots.eval_query), (5, 20, 100));
        assert_eq!(cfg.n_eval_tasks, 2000);
        let anil = parse_config_str(r#"{"learner_kind": "anil", "mode": "baseline"}"#).unwrap();
        assert_eq!(anil.inner_config().inner_lr, 0.1);
    }

    #[test]
    fn bad_configs_name_the_field() {
        let err = parse_config_str(r#"{"learner_kind": "maml", "mode": "fisl", "iterations": -5}"#).unwrap_err();
        assert!(matches!(&err, Error::Config { path, .. } if path == "iterations"), "{err}");
        let err = parse_config_str(r#"{"learner_kind": "maml", "mode": "fisl", "foo": 1}"#).unwrap_err();
        assert!(err.to_string().contains("foo"), "{err}");
        let err = parse_config_str(r#"{"learner_kind": "maml", "mode": "fisl", "adv": {"penalty": -1}}"#).unwrap_err();
        assert!(matches!(&err, Error::Config { path, .. } if path == "adv"), "{err}");
        let err = parse_config_str(r#"{"learner_kind": "maml", "mode": "fisl", "shots": {"support": 0}}"#).unwrap_err();
        assert!(matches!(&err, Error::Config { path, .. } if path == "shots.support"), "{err}");
        let err = parse_config_str(r#"{"learner_kind": "proto", "mode": "fisl"}"#).unwrap_err();
        assert!(matches!(&err, Error::Config { path, .. } if path == "learner_kind"), "{err}");
        assert!(parse_config(Path::new("/definitely/not/here.json")).is_err());
    }

    #[test]
    fn blob_domains_parse() {
        let text = r#"{
            "learner_kind": "proto", "mode": "fisl",
            "source": {"family": "blob", "n_classes_pool": 64, "center_norm": [2, 6],
                       "noise_std": 1.0, "pool_seed": 0,
                       "transform": {"matrix": [[1, 0], [0, 1]], "offset": [0, 0]}},
            "unseen": {"family": "blob", "n_classes_pool": 64, "center_norm": [2, 6],
                       "noise_std": 1.0, "pool_seed": 1,
                       "transform": {"matrix": [[1.0606601717798212, -1.0606601717798212], [1.0606601717798212, 1.0606601717798212]], "offset": [1, -1]}}
        }"#;
        let cfg = parse_config_str(text).unwrap();
        assert!(cfg.source.is_classification());
        let again = parse_config_str(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(cfg, again);
        let bad = text.replace("\"noise_std\": 1.0, \"pool_seed\": 0", "\"noise_std\": 1.0, \"pool_seed\": 0, \"bogus\": 1");
        assert!(parse_config_str(&bad).is_err());
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = ExperimentConfig::new(LearnerKind::Anil, Mode::Baseline);
        let back = parse_config_str(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn zero_iterations_gives_identity_shift_and_no_rows() {
        let mut cfg = ExperimentConfig::new(LearnerKind::Maml, Mode::Fisl);
        cfg.iterations = 0;
        let dir = tempfile::tempdir().unwrap();
        let run = train(&cfg, Some(dir.path()), None).unwrap();
        assert!(run.state.phi.is_identity());
        assert!(run.metrics.is_empty());
        let csv = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
        assert_eq!(csv, format!("{METRICS_HEADER}\n"));
        assert!(dir.path().join(CHECKPOINT_FILE).exists());
        assert!(dir.path().join(CONFIG_FILE).exists());
    }

    #[test]
    fn grid_table_layout() {
        let opts = GridOptions {
            iterations: 10,
            seeds: vec![0],
            n_eval_tasks: 2,
            shots: vec![5],
            learners: vec![LearnerKind::Maml],
        };
        let rec = |m| MetricsRecord::from_values(MetricName::Mse, &[m, m], "unseen", "x").unwrap();
        let cells = vec![
            GridCell {
                learner: LearnerKind::Maml,
                mode: Mode::Baseline,
                shot: 5,
                seed: 0,
                record: rec(3.0),
            },
            GridCell {
                learner: LearnerKind::Maml,
                mode: Mode::Fisl,
                shot: 5,
                seed: 0,
                record: rec(1.5),
            },
        ];
        let t = grid_table(&opts, &cells);
        assert!(t.contains("| MAML | 3.000 ± 0.000 |"), "{t}");
        assert!(t.contains("| MAML-FiSL | 1.500 ± 0.000 |"), "{t}");
    }
}
