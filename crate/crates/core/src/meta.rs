//! Base-learner adaptation and the bilevel meta-objective.
//!
//! Gradient-based learners (MAML, ANIL) take `inner_steps` of gradient descent
//! from θ on the support set; the ridge learner solves for its head in closed
//! form; the prototype learner has no adaptation step at all. Every path can
//! be recorded so the outer gradient flows through the adaptation.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamSet, Tape, Tensor, Var, VarMap};
use crate::error::{Error, Result};
use crate::models::{prototype_logits, prototypes, EncoderSpec, Model, RoutedTask, HEAD_B, HEAD_W, RIDGE_W};
use crate::optim::Adam;
use crate::tasks::{Split, Targets, Task};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LearnerKind {
    Maml,
    Anil,
    Ridge,
    Proto,
}

impl LearnerKind {
    /// Published inner learning rates: 0.01 for MAML, 0.1 for ANIL.
    pub fn default_inner_lr(self) -> f64 {
        match self {
            LearnerKind::Maml => 0.01,
            LearnerKind::Anil => 0.1,
            LearnerKind::Ridge | LearnerKind::Proto => 0.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LearnerKind::Maml => "maml",
            LearnerKind::Anil => "anil",
            LearnerKind::Ridge => "ridge",
            LearnerKind::Proto => "proto",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InnerConfig {
    pub kind: LearnerKind,
    pub inner_lr: f64,
    pub inner_steps: usize,
    pub ridge_lambda: f64,
    /// Drop second-order terms of the inner steps (ablation only).
    #[serde(default)]
    pub first_order: bool,
}

impl InnerConfig {
    pub fn new(kind: LearnerKind) -> Self {
        InnerConfig {
            kind,
            inner_lr: kind.default_inner_lr(),
            inner_steps: 1,
            ridge_lambda: 1.0,
            first_order: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let gradient_based = matches!(self.kind, LearnerKind::Maml | LearnerKind::Anil);
        if gradient_based && !(self.inner_lr >= 0.0 && self.inner_lr.is_finite()) {
            return Err(Error::invalid("inner_lr must be a non-negative number"));
        }
        if gradient_based && self.inner_steps == 0 {
            return Err(Error::invalid("inner_steps must be at least 1"));
        }
        if !(self.ridge_lambda >= 0.0 && self.ridge_lambda.is_finite()) {
            return Err(Error::invalid("ridge_lambda must be non-negative"));
        }
        Ok(())
    }
}

/// Task-specific weights produced by [`inner_adapt`].
#[derive(Clone, Debug)]
pub struct BaseLearner {
    pub weights: VarMap,
    /// Names of the entries that differ from θ.
    pub adapted: Vec<String>,
}

fn targets_tensor(y: &Targets) -> Tensor {
    match y {
        Targets::Values(t) => t.clone(),
        Targets::Classes { labels, n_way } => {
            let mut t = Tensor::zeros(&[labels.len(), *n_way]);
            for (i, &l) in labels.iter().enumerate() {
                t.values_mut()[i * n_way + l] = 1.0;
            }
            t
        }
    }
}

/// Mean loss of `pred` on a split: squared error or softmax cross-entropy.
pub fn split_loss(tape: &Tape, pred: Var, y: &Targets) -> Result<Var> {
    match y {
        Targets::Values(t) => {
            let target = tape.leaf(t.clone());
            tape.mse(pred, target)
        }
        Targets::Classes { labels, .. } => tape.softmax_cross_entropy(pred, labels),
    }
}

fn predict(tape: &Tape, model: &Model, w: &VarMap, task: RoutedTask, split: &Split) -> Result<Var> {
    let x = tape.leaf(split.x.clone());
    model.forward(tape, w, task.shift.as_ref(), x)
}

fn adapted_names(model: &Model, theta: &VarMap, kind: LearnerKind) -> Vec<String> {
    match kind {
        LearnerKind::Maml => theta.keys().cloned().collect(),
        LearnerKind::Anil => {
            let _ = model;
            theta
                .keys()
                .filter(|k| k.as_str() == HEAD_W || k.as_str() == HEAD_B)
                .cloned()
                .collect()
        }
        LearnerKind::Ridge | LearnerKind::Proto => Vec::new(),
    }
}

/// Adapt a base learner to the (possibly shifted) support set.
///
/// With `differentiable`, the adaptation stays on the tape so gradients with
/// respect to θ flow through it (second order unless `cfg.first_order`).
/// Otherwise the returned weights are constants.
pub fn inner_adapt(
    tape: &Tape,
    model: &Model,
    theta: &VarMap,
    task: RoutedTask,
    cfg: &InnerConfig,
    differentiable: bool,
) -> Result<BaseLearner> {
    cfg.validate()?;
    if task.task.support.is_empty() {
        return Err(Error::Empty("support set"));
    }
    let mut w = theta.clone();
    let adapted = match cfg.kind {
        LearnerKind::Proto => {
            return Err(Error::invalid("the prototype learner has no adaptation step"))
        }
        LearnerKind::Maml | LearnerKind::Anil => {
            let names = adapted_names(model, theta, cfg.kind);
            if names.is_empty() {
                return Err(Error::MissingParam(HEAD_W.to_string()));
            }
            // Fresh aliases so each inner gradient is a partial derivative in
            // the learner's weights, not a total derivative through anything
            // else that happens to depend on θ.
            for name in &names {
                let alias = tape.scale(w[name], 1.0)?;
                w.insert(name.clone(), alias);
            }
            let create_graph = differentiable && !cfg.first_order;
            for _ in 0..cfg.inner_steps {
                let pred = predict(tape, model, &w, task, &task.task.support)?;
                let loss = split_loss(tape, pred, &task.task.support.y)?;
                let sub: VarMap = names.iter().map(|n| (n.clone(), w[n])).collect();
                let g = tape.grad_map(loss, &sub, create_graph)?;
                for name in &names {
                    let step = tape.scale(g.grads[name], cfg.inner_lr)?;
                    let next = tape.sub(w[name], step)?;
                    w.insert(name.clone(), next);
                }
            }
            names
        }
        LearnerKind::Ridge => {
            let x = tape.leaf(task.task.support.x.clone());
            let z = model.features(tape, &w, task.shift.as_ref(), x)?;
            let c = model.channels();
            let y = tape.leaf(targets_tensor(&task.task.support.y));
            let zt = tape.transpose(z)?;
            let gram = tape.matmul(zt, z)?;
            let reg = tape.leaf(Tensor::eye(c).map(|v| v * cfg.ridge_lambda));
            let a = tape.add(gram, reg)?;
            let b = tape.matmul(zt, y)?;
            let sol = tape.solve(a, b)?;
            w.insert(RIDGE_W.to_string(), sol);
            vec![RIDGE_W.to_string()]
        }
    };
    if !differentiable {
        for name in &adapted {
            let d = tape.detach(w[name]);
            w.insert(name.clone(), d);
        }
    }
    Ok(BaseLearner {
        weights: w,
        adapted,
    })
}

/// Mean query loss of an adapted learner.
pub fn query_loss(tape: &Tape, model: &Model, learner: &BaseLearner, task: RoutedTask) -> Result<Var> {
    if task.task.query.is_empty() {
        return Err(Error::Empty("query set"));
    }
    let pred = predict(tape, model, &learner.weights, task, &task.task.query)?;
    split_loss(tape, pred, &task.task.query.y)
}

fn classes(split: &Split) -> Result<(&[usize], usize)> {
    match &split.y {
        Targets::Classes { labels, n_way } => Ok((labels, *n_way)),
        Targets::Values(_) => Err(Error::invalid("prototype learner needs a classification task")),
    }
}

/// Query logits against class prototypes of the (shifted) support features.
pub fn proto_logits(tape: &Tape, model: &Model, theta: &VarMap, task: RoutedTask) -> Result<Var> {
    let (labels, n_way) = classes(&task.task.support)?;
    let shift = task.shift.as_ref();
    let xs = tape.leaf(task.task.support.x.clone());
    let zs = model.features(tape, theta, shift, xs)?;
    let protos = prototypes(tape, zs, labels, n_way)?;
    let xq = tape.leaf(task.task.query.x.clone());
    let zq = model.features(tape, theta, shift, xq)?;
    prototype_logits(tape, protos, zq)
}

/// Prototypical-network loss: cross-entropy over negative squared distances.
pub fn proto_loss(tape: &Tape, model: &Model, theta: &VarMap, task: RoutedTask) -> Result<Var> {
    if task.task.query.is_empty() {
        return Err(Error::Empty("query set"));
    }
    let (labels, _) = classes(&task.task.query)?;
    let logits = proto_logits(tape, model, theta, task)?;
    tape.softmax_cross_entropy(logits, labels)
}

/// Post-adaptation query loss for any learner kind.
pub fn task_loss(
    tape: &Tape,
    model: &Model,
    theta: &VarMap,
    task: RoutedTask,
    cfg: &InnerConfig,
    differentiable: bool,
) -> Result<Var> {
    match cfg.kind {
        LearnerKind::Proto => proto_loss(tape, model, theta, task),
        _ => {
            let learner = inner_adapt(tape, model, theta, task, cfg, differentiable)?;
            query_loss(tape, model, &learner, task)
        }
    }
}

/// How per-task losses combine into the outer objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskReduction {
    Mean,
    Sum,
}

#[derive(Clone, Debug)]
pub struct MetaStep {
    pub theta: ParamSet,
    pub loss: f64,
}

/// Outer objective over a batch of tasks, recorded on `tape`.
pub fn batch_loss(
    tape: &Tape,
    model: &Model,
    theta: &VarMap,
    tasks: &[Task],
    cfg: &InnerConfig,
    reduction: TaskReduction,
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for task in tasks {
        let l = task_loss(tape, model, theta, RoutedTask::plain(task), cfg, true)?;
        total = Some(match total {
            None => l,
            Some(acc) => tape.add(acc, l)?,
        });
    }
    let total = total.ok_or(Error::Empty("task batch"))?;
    match reduction {
        TaskReduction::Sum => Ok(total),
        TaskReduction::Mean => tape.scale(total, 1.0 / tasks.len() as f64),
    }
}

/// One Adam step on θ against the batch's post-adaptation query loss. On a
/// non-finite loss or gradient nothing is updated and the error names the
/// outer iteration.
pub fn baseline_meta_step(
    model: &Model,
    theta: &ParamSet,
    opt: &mut Adam,
    tasks: &[Task],
    cfg: &InnerConfig,
    lr: f64,
    reduction: TaskReduction,
) -> Result<MetaStep> {
    let iteration = opt.step + 1;
    let tape = Tape::new();
    let vars = theta.to_tape(&tape);
    let diverged = |detail: String| Error::Diverged { iteration, detail };
    let loss = batch_loss(&tape, model, &vars, tasks, cfg, reduction).map_err(|e| match e {
        Error::NonFinite { op } => diverged(format!("{op} in meta loss")),
        other => other,
    })?;
    let loss_value = tape.item(loss)?;
    let grads = tape.grad_map(loss, &vars, false).map_err(|e| match e {
        Error::NonFinite { op } => diverged(format!("{op} in meta gradient")),
        other => other,
    })?;
    let grads = ParamSet::from_tape(&tape, &grads.grads);
    if !loss_value.is_finite() || !grads.is_finite() {
        return Err(diverged("meta gradient".into()));
    }
    let mut next = theta.clone();
    opt.update(&mut next, &grads, lr)?;
    Ok(MetaStep {
        theta: next,
        loss: loss_value,
    })
}

/// Names of θ entries belonging to the encoder.
pub fn encoder_names(theta: &ParamSet) -> Vec<String> {
    theta
        .names()
        .filter(|n| EncoderSpec::is_encoder_param(n))
        .cloned()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{analytic_grad, numeric_grad, max_relative_error};
    use crate::models::{EncoderSpec, HeadKind, HeadSpec};
    use crate::tasks::{sample_blob_task, sample_sine_task, BlobDomain, SineDomain};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sine_model(hidden: Vec<usize>) -> Model {
        Model::new(
            EncoderSpec::new(1, hidden).unwrap(),
            HeadSpec {
                kind: HeadKind::LinearRegression,
                output_dim: 1,
            },
        )
        .unwrap()
    }

    fn sine_task(seed: u64, k: usize, q: usize) -> Task {
        sample_sine_task(&SineDomain::source(), k, q, "source", &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    /// One-layer "encoder" with a single unit and a scalar head, so the
    /// support loss is exactly (w − 3)² in the head weight.
    fn scalar_head_setup(head_w: f64) -> (Model, ParamSet, Task) {
        let model = sine_model(vec![1]);
        let mut p = ParamSet::new();
        p.insert("enc.w0", Tensor::matrix(1, 1, vec![0.0]).unwrap());
        p.insert("enc.b0", Tensor::row(vec![1.0]));
        p.insert(HEAD_W, Tensor::matrix(1, 1, vec![head_w]).unwrap());
        p.insert(HEAD_B, Tensor::row(vec![0.0]));
        let split = Split {
            x: Tensor::column(vec![0.0]),
            y: Targets::Values(Tensor::column(vec![3.0])),
        };
        let task = Task {
            support: split.clone(),
            query: split,
            domain_tag: "toy".into(),
        };
        (model, p, task)
    }

    #[test]
    fn one_step_on_quadratic() {
        let (model, p, task) = scalar_head_setup(0.0);
        let tape = Tape::new();
        let theta = p.to_tape(&tape);
        let mut cfg = InnerConfig::new(LearnerKind::Anil);
        cfg.inner_lr = 0.1;
        let l = inner_adapt(&tape, &model, &theta, (&task).into(), &cfg, false).unwrap();
        let w = tape.value(l.weights[HEAD_W]).item().unwrap();
        assert!((w - 0.6).abs() < 1e-15, "{w}");
    }

    #[test]
    fn stationary_point_is_left_in_place() {
        let (model, p, task) = scalar_head_setup(3.0);
        let tape = Tape::new();
        let theta = p.to_tape(&tape);
        let cfg = InnerConfig::new(LearnerKind::Maml);
        let l = inner_adapt(&tape, &model, &theta, (&task).into(), &cfg, true).unwrap();
        for (name, t) in &p {
            assert_eq!(*tape.value(l.weights[name]), *t, "{name}");
        }
    }

    #[test]
    fn anil_leaves_encoder_bitwise_unchanged() {
        let model = sine_model(vec![8, 8]);
        let p = model.init_params(&mut ChaCha8Rng::seed_from_u64(1));
        let task = sine_task(2, 5, 10);
        let tape = Tape::new();
        let theta = p.to_tape(&tape);
        let cfg = InnerConfig::new(LearnerKind::Anil);
        let l = inner_adapt(&tape, &model, &theta, (&task).into(), &cfg, true).unwrap();
        for name in encoder_names(&p) {
            assert!(tape.value(l.weights[&name]).bit_eq(p.get(&name).unwrap()));
        }
        assert_eq!(l.adapted, vec![HEAD_B.to_string(), HEAD_W.to_string()]);
    }

    #[test]
    fn zero_inner_lr_gives_the_unadapted_gradient() {
        let model = sine_model(vec![6, 6]);
        let p = model.init_params(&mut ChaCha8Rng::seed_from_u64(4));
        let task = sine_task(5, 5, 10);
        let mut cfg = InnerConfig::new(LearnerKind::Maml);
        cfg.inner_lr = 0.0;
        let adapted = analytic_grad(
            &|tape: &Tape, w: &VarMap| task_loss(tape, &model, w, (&task).into(), &cfg, true),
            &p,
        )
        .unwrap();
        let plain = analytic_grad(
            &|tape: &Tape, w: &VarMap| {
                let learner = BaseLearner {
                    weights: w.clone(),
                    adapted: vec![],
                };
                query_loss(tape, &model, &learner, (&task).into())
            },
            &p,
        )
        .unwrap();
        for (name, g) in &plain {
            let a = adapted.get(name).unwrap();
            assert!(g.values().iter().zip(a.values()).all(|(x, y)| x == y), "{name}");
        }
    }

    #[test]
    fn meta_gradient_matches_finite_differences() {
        let model = sine_model(vec![5, 5]);
        let p = model.init_params(&mut ChaCha8Rng::seed_from_u64(11));
        let task = sine_task(12, 5, 10);
        for kind in [LearnerKind::Maml, LearnerKind::Anil] {
            let mut cfg = InnerConfig::new(kind);
            cfg.inner_steps = 2;
            let f = |tape: &Tape, w: &VarMap| task_loss(tape, &model, w, (&task).into(), &cfg, true);
            let a = analytic_grad(&f, &p).unwrap();
            let n = numeric_grad(&f, &p, 1e-5).unwrap();
            let err = max_relative_error(&a, &n);
            assert!(err < 1e-4, "{kind:?}: {err}");
        }
    }

    #[test]
    fn query_loss_cases() {
        let (model, p, task) = scalar_head_setup(3.0);
        let tape = Tape::new();
        let learner = BaseLearner {
            weights: p.to_tape(&tape),
            adapted: vec![],
        };
        let l = query_loss(&tape, &model, &learner, (&task).into()).unwrap();
        assert_eq!(tape.item(l).unwrap(), 0.0);

        let mut zero = p.clone();
        zero.insert(HEAD_W, Tensor::matrix(1, 1, vec![0.0]).unwrap());
        let two = Task {
            support: task.support.clone(),
            query: Split {
                x: Tensor::column(vec![0.0, 1.0]),
                y: Targets::Values(Tensor::column(vec![1.0, -1.0])),
            },
            domain_tag: "toy".into(),
        };
        let learner = BaseLearner {
            weights: zero.to_tape(&tape),
            adapted: vec![],
        };
        let l = query_loss(&tape, &model, &learner, (&two).into()).unwrap();
        assert_eq!(tape.item(l).unwrap(), 1.0);

        let mut empty = two.clone();
        empty.query = Split {
            x: Tensor::matrix(0, 1, vec![]).unwrap(),
            y: Targets::Values(Tensor::matrix(0, 1, vec![]).unwrap()),
        };
        assert!(matches!(
            query_loss(&tape, &model, &learner, (&empty).into()),
            Err(Error::Empty(_))
        ));
    }

    fn identity_proto_model() -> (Model, ParamSet) {
        let model = Model::new(
            EncoderSpec::new(2, vec![2]).unwrap(),
            HeadSpec {
                kind: HeadKind::PrototypeMetric,
                output_dim: 2,
            },
        )
        .unwrap();
        let mut p = ParamSet::new();
        p.insert("enc.w0", Tensor::eye(2));
        p.insert("enc.b0", Tensor::zeros(&[1, 2]));
        (model, p)
    }

    fn toy_class_task(support: Vec<f64>, s_labels: Vec<usize>, query: Vec<f64>, q_labels: Vec<usize>) -> Task {
        let n_way = 1 + *s_labels.iter().max().unwrap();
        Task {
            support: Split {
                x: Tensor::matrix(s_labels.len(), 2, support).unwrap(),
                y: Targets::Classes {
                    labels: s_labels,
                    n_way,
                },
            },
            query: Split {
                x: Tensor::matrix(q_labels.len(), 2, query).unwrap(),
                y: Targets::Classes {
                    labels: q_labels,
                    n_way,
                },
            },
            domain_tag: "toy".into(),
        }
    }

    #[test]
    fn proto_loss_limits_and_hand_value() {
        let (model, p) = identity_proto_model();
        let tape = Tape::new();
        let theta = p.to_tape(&tape);

        // query on its prototype, other prototype 20 away
        let t = toy_class_task(vec![1.0, 1.0, 21.0, 1.0], vec![0, 1], vec![1.0, 1.0], vec![0]);
        let l = tape.item(proto_loss(&tape, &model, &theta, (&t).into()).unwrap()).unwrap();
        assert!(l < 1e-6, "{l}");

        // equidistant query
        let t = toy_class_task(vec![1.0, 0.0, 3.0, 0.0], vec![0, 1], vec![2.0, 1.0], vec![1]);
        let l = tape.item(proto_loss(&tape, &model, &theta, (&t).into()).unwrap()).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);

        // hand-evaluated 2-way 1-shot: prototypes (1,0),(0,2); query (1,1) label 0
        // d0 = 1, d1 = 2 -> logits (−1, −2); loss = ln(1 + e^{−1})
        let t = toy_class_task(vec![1.0, 0.0, 0.0, 2.0], vec![0, 1], vec![1.0, 1.0], vec![0]);
        let l = tape.item(proto_loss(&tape, &model, &theta, (&t).into()).unwrap()).unwrap();
        let expected = (1.0 + (-1.0f64).exp()).ln();
        assert!((l - expected).abs() < 1e-9);

        let t = toy_class_task(vec![1.0, 0.0, 0.0, 2.0], vec![0, 2], vec![1.0, 1.0], vec![0]);
        assert!(proto_loss(&tape, &model, &theta, (&t).into()).is_err());
    }

    #[test]
    fn proto_loss_ignores_support_order_within_classes() {
        let model = Model::new(
            EncoderSpec::new(2, vec![6]).unwrap(),
            HeadSpec {
                kind: HeadKind::PrototypeMetric,
                output_dim: 5,
            },
        )
        .unwrap();
        let p = model.init_params(&mut ChaCha8Rng::seed_from_u64(0));
        let task = sample_blob_task(&BlobDomain::source(), 3, 2, 4, "s", &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut swapped = task.clone();
        // swap the two support rows of every class (rows are grouped by class)
        let order: Vec<usize> = (0..3).flat_map(|c| [2 * c + 1, 2 * c]).collect();
        swapped.support.x = task.support.x.select_rows(&order).unwrap();
        let tape = Tape::new();
        let theta = p.to_tape(&tape);
        let a = tape.item(proto_loss(&tape, &model, &theta, (&task).into()).unwrap()).unwrap();
        let b = tape.item(proto_loss(&tape, &model, &theta, (&swapped).into()).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ridge_solves_normal_equations() {
        let model = Model::new(
            EncoderSpec::new(1, vec![6]).unwrap(),
            HeadSpec {
                kind: HeadKind::RidgeClosedForm,
                output_dim: 1,
            },
        )
        .unwrap();
        let p = model.init_params(&mut ChaCha8Rng::seed_from_u64(2));
        let task = sine_task(3, 10, 10);
        let tape = Tape::new();
        let theta = p.to_tape(&tape);
        let cfg = InnerConfig::new(LearnerKind::Ridge);
        let l = inner_adapt(&tape, &model, &theta, (&task).into(), &cfg, false).unwrap();
        let w = tape.value(l.weights[RIDGE_W]);
        // residual of (ZᵀZ + λI) w − Zᵀy
        let x = tape.leaf(task.support.x.clone());
        let z = tape.value(model.encode(&tape, &theta, x).unwrap());
        let Targets::Values(y) = &task.support.y else { panic!() };
        let (n, c) = z.dims2().unwrap();
        let mut worst: f64 = 0.0;
        for i in 0..c {
            let mut lhs = cfg.ridge_lambda * w.values()[i];
            let mut rhs = 0.0;
            for r in 0..n {
                rhs += z.get2(r, i) * y.values()[r];
                for j in 0..c {
                    lhs += z.get2(r, i) * z.get2(r, j) * w.values()[j];
                }
            }
            worst = worst.max((lhs - rhs).abs());
        }
        assert!(worst < 1e-8, "{worst}");
    }

    #[test]
    fn ridge_head_fits_two_points() {
        // features are (x, 1) through an identity-like layer with bias
        let model = Model::new(
            EncoderSpec::new(1, vec![2]).unwrap(),
            HeadSpec {
                kind: HeadKind::RidgeClosedForm,
                output_dim: 1,
            },
        )
        .unwrap();
        let mut p = ParamSet::new();
        p.insert("enc.w0", Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
        p.insert("enc.b0", Tensor::row(vec![0.0, 1.0]));
        let split = Split {
            x: Tensor::column(vec![1.0, 2.0]),
            y: Targets::Values(Tensor::column(vec![3.0, 5.0])),
        };
        let task = Task {
            support: split.clone(),
            query: split,
            domain_tag: "toy".into(),
        };
        let tape = Tape::new();
        let theta = p.to_tape(&tape);
        let mut cfg = InnerConfig::new(LearnerKind::Ridge);
        cfg.ridge_lambda = 1e-8;
        let l = inner_adapt(&tape, &model, &theta, (&task).into(), &cfg, false).unwrap();
        // exact fit is w = (2, 1): residual of predictions on the support
        let x = tape.leaf(task.support.x.clone());
        let pred = tape.value(model.forward(&tape, &l.weights, None, x).unwrap());
        assert!((pred.values()[0] - 3.0).abs() < 1e-6 && (pred.values()[1] - 5.0).abs() < 1e-6);

        cfg.ridge_lambda = 0.0;
        let one_point = Task {
            support: Split {
                x: Tensor::column(vec![1.0]),
                y: Targets::Values(Tensor::column(vec![3.0])),
            },
            ..task.clone()
        };
        assert!(matches!(
            inner_adapt(&tape, &model, &theta, (&one_point).into(), &cfg, false),
            Err(Error::Singular { .. })
        ));
    }

    #[test]
    fn baseline_step_edge_cases() {
        let model = sine_model(vec![8, 8]);
        let p = model.init_params(&mut ChaCha8Rng::seed_from_u64(0));
        let tasks = vec![sine_task(1, 5, 10), sine_task(2, 5, 10)];
        let cfg = InnerConfig::new(LearnerKind::Maml);
        let mut opt = Adam::new(&p);
        let s = baseline_meta_step(&model, &p, &mut opt, &tasks, &cfg, 0.0, TaskReduction::Mean).unwrap();
        assert!(s.theta.bit_eq(&p));
        assert!(baseline_meta_step(&model, &p, &mut opt, &[], &cfg, 0.001, TaskReduction::Mean).is_err());

        // at a global optimum: zero targets, zero head
        let (model, mut p, mut task) = scalar_head_setup(3.0);
        task.query = task.support.clone();
        p.insert(HEAD_B, Tensor::row(vec![0.0]));
        let mut opt = Adam::new(&p);
        let s = baseline_meta_step(&model, &p, &mut opt, &[task], &cfg, 0.001, TaskReduction::Mean).unwrap();
        assert!(s.theta.max_abs_diff(&p) <= 1e-8);
    }

    #[test]
    fn classification_cross_entropy_of_uniform_logits() {
        let model = Model::new(
            EncoderSpec::new(2, vec![4]).unwrap(),
            HeadSpec {
                kind: HeadKind::LinearClassifier,
                output_dim: 5,
            },
        )
        .unwrap();
        let mut p = model.init_params(&mut ChaCha8Rng::seed_from_u64(0));
        p.insert(HEAD_W, Tensor::zeros(&[4, 5]));
        p.insert(HEAD_B, Tensor::zeros(&[1, 5]));
        let task = sample_blob_task(&BlobDomain::source(), 5, 1, 3, "s", &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let tape = Tape::new();
        let learner = BaseLearner {
            weights: p.to_tape(&tape),
            adapted: vec![],
        };
        let l = tape.item(query_loss(&tape, &model, &learner, (&task).into()).unwrap()).unwrap();
        assert!((l - 1.6094379124341003).abs() < 1e-12);
    }
}
