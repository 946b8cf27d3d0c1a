//! Meta-test protocol and aggregate metrics.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::meta::{inner_adapt, proto_logits, InnerConfig, LearnerKind};
use crate::models::{FislParams, Model, RoutedTask};
use crate::tasks::{sample_sine_task_with_wave, EpisodeShape, SineDomain, Split, Targets, Task, TaskDomain};
use crate::autodiff::ParamSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricName {
    Mse,
    Accuracy,
}

impl MetricName {
    pub fn as_str(self) -> &'static str {
        match self {
            MetricName::Mse => "mse",
            MetricName::Accuracy => "accuracy",
        }
    }
}

/// Mean of a per-task metric with its 95% confidence half-width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub metric_name: MetricName,
    pub mean: f64,
    pub ci95_halfwidth: f64,
    pub n_tasks: usize,
    pub domain_tag: String,
    pub model_tag: String,
}

impl MetricsRecord {
    /// `1.96 · s / √n` with the n − 1 sample deviation. Values are summed in
    /// sorted order so the result does not depend on evaluation order.
    pub fn from_values(
        metric_name: MetricName,
        values: &[f64],
        domain_tag: &str,
        model_tag: &str,
    ) -> Result<Self> {
        let n = values.len();
        if n < 2 {
            return Err(Error::invalid("a confidence interval needs at least 2 tasks"));
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mean = sorted.iter().sum::<f64>() / n as f64;
        let var = sorted.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        Ok(MetricsRecord {
            metric_name,
            mean,
            ci95_halfwidth: 1.96 * (var / n as f64).sqrt(),
            n_tasks: n,
            domain_tag: domain_tag.to_string(),
            model_tag: model_tag.to_string(),
        })
    }
}

fn accuracy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let (rows, cols) = logits.dims2()?;
    if rows != labels.len() || rows == 0 {
        return Err(Error::invalid("logits and labels disagree"));
    }
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(r, &l)| {
            let row = &logits.values()[r * cols..(r + 1) * cols];
            let best = (0..cols).fold(0, |b, c| if row[c] > row[b] { c } else { b });
            best == l
        })
        .count();
    Ok(correct as f64 / rows as f64)
}

fn mse(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch {
            op: "mse",
            lhs: pred.shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    let n = pred.len() as f64;
    Ok(pred
        .values()
        .iter()
        .zip(target.values())
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n)
}

/// Query predictions (or logits) after adapting to the support set, with
/// every forward pass routed through `phi` when `use_fisl` is set. φ is used
/// as given; nothing about it is adapted per task.
pub fn predict_task(
    model: &Model,
    theta: &ParamSet,
    phi: &FislParams,
    task: &Task,
    query_x: &Tensor,
    inner: &InnerConfig,
    use_fisl: bool,
) -> Result<Tensor> {
    let tape = Tape::new();
    let w = theta.to_tape(&tape);
    let shift = use_fisl.then(|| phi.to_tape(&tape));
    let routed = RoutedTask { task, shift };
    let out = match inner.kind {
        LearnerKind::Proto => {
            let probe = Task {
                support: task.support.clone(),
                query: Split {
                    x: query_x.clone(),
                    y: task.query.y.clone(),
                },
                domain_tag: task.domain_tag.clone(),
            };
            let routed = RoutedTask { task: &probe, shift };
            proto_logits(&tape, model, &w, routed)?
        }
        _ => {
            let learner = inner_adapt(&tape, model, &w, routed, inner, false)?;
            let x = tape.leaf(query_x.clone());
            model.forward(&tape, &learner.weights, shift.as_ref(), x)?
        }
    };
    Ok((*tape.value(out)).clone())
}

/// MSE (regression) or accuracy (classification) on the task's query set.
pub fn meta_test_task(
    model: &Model,
    theta: &ParamSet,
    phi: &FislParams,
    task: &Task,
    inner: &InnerConfig,
    use_fisl: bool,
) -> Result<f64> {
    let out = predict_task(model, theta, phi, task, &task.query.x, inner, use_fisl)?;
    match &task.query.y {
        Targets::Values(t) => mse(&out, t),
        Targets::Classes { labels, .. } => accuracy(&out, labels),
    }
}

/// A suite's aggregate plus the per-task values in sampling order.
#[derive(Clone, Debug)]
pub struct SuiteResult {
    pub record: MetricsRecord,
    pub per_task: Vec<f64>,
}

/// Evaluation settings shared by every task of a suite.
#[derive(Clone, Debug)]
pub struct SuiteSpec<'a> {
    pub domain: &'a TaskDomain,
    pub domain_tag: &'a str,
    pub model_tag: &'a str,
    pub episode: EpisodeShape,
    pub n_tasks: usize,
    pub inner: &'a InnerConfig,
    pub use_fisl: bool,
}

/// Draw `n_tasks` tasks from `rng` in order, score them in parallel against
/// the frozen parameters and aggregate.
pub fn evaluate_suite<R: Rng + ?Sized>(
    model: &Model,
    theta: &ParamSet,
    phi: &FislParams,
    spec: &SuiteSpec,
    rng: &mut R,
) -> Result<SuiteResult> {
    if spec.n_tasks < 2 {
        return Err(Error::invalid("n_tasks must be at least 2"));
    }
    let tasks = (0..spec.n_tasks)
        .map(|_| spec.domain.sample_episode(&spec.episode, spec.domain_tag, rng))
        .collect::<Result<Vec<_>>>()?;
    let per_task = tasks
        .par_iter()
        .map(|t| meta_test_task(model, theta, phi, t, spec.inner, spec.use_fisl))
        .collect::<Result<Vec<_>>>()?;
    let metric = if spec.domain.is_classification() {
        MetricName::Accuracy
    } else {
        MetricName::Mse
    };
    let record = MetricsRecord::from_values(metric, &per_task, spec.domain_tag, spec.model_tag)?;
    Ok(SuiteResult { record, per_task })
}

/// One line of a results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    #[serde(flatten)]
    pub record: MetricsRecord,
    pub shot: usize,
    pub seed: u64,
}

pub const RESULTS_HEADER: &str = "model_tag,domain_tag,shot,metric_name,mean,ci95,n_tasks,seed";

pub fn results_csv(rows: &[ResultRow]) -> String {
    let mut s = String::from(RESULTS_HEADER);
    s.push('\n');
    for r in rows {
        let m = &r.record;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            m.model_tag,
            m.domain_tag,
            r.shot,
            m.metric_name.as_str(),
            m.mean,
            m.ci95_halfwidth,
            m.n_tasks,
            r.seed
        );
    }
    s
}

/// Write `<stem>.csv` and `<stem>.json` into `dir`.
pub fn write_results(dir: &Path, stem: &str, rows: &[ResultRow]) -> Result<()> {
    let csv = dir.join(format!("{stem}.csv"));
    std::fs::write(&csv, results_csv(rows)).map_err(|e| Error::io(&csv, e))?;
    let json = dir.join(format!("{stem}.json"));
    let body = serde_json::to_string_pretty(rows)?;
    std::fs::write(&json, body).map_err(|e| Error::io(&json, e))
}

/// Ground truth and model predictions on an input grid for one sampled wave.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveDump {
    pub amplitude: f64,
    pub phase: f64,
    pub support_x: Vec<f64>,
    pub support_y: Vec<f64>,
    pub x: Vec<f64>,
    pub truth: Vec<f64>,
    pub prediction: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
pub fn sine_curve<R: Rng + ?Sized>(
    model: &Model,
    theta: &ParamSet,
    phi: &FislParams,
    domain: &SineDomain,
    k_support: usize,
    grid_points: usize,
    inner: &InnerConfig,
    use_fisl: bool,
    rng: &mut R,
) -> Result<CurveDump> {
    if grid_points < 2 {
        return Err(Error::invalid("grid needs at least 2 points"));
    }
    let (task, wave) = sample_sine_task_with_wave(domain, k_support, 1, "curve", rng)?;
    let (lo, hi) = (domain.x_range.lo(), domain.x_range.hi());
    let x: Vec<f64> = (0..grid_points)
        .map(|i| lo + (hi - lo) * i as f64 / (grid_points - 1) as f64)
        .collect();
    let pred = predict_task(model, theta, phi, &task, &Tensor::column(x.clone()), inner, use_fisl)?;
    let Targets::Values(sy) = &task.support.y else {
        unreachable!("sine tasks carry values")
    };
    Ok(CurveDump {
        amplitude: wave.amplitude,
        phase: wave.phase,
        support_x: task.support.x.values().to_vec(),
        support_y: sy.values().to_vec(),
        truth: x.iter().map(|&v| wave.eval(v)).collect(),
        x,
        prediction: pred.into_values(),
    })
}
