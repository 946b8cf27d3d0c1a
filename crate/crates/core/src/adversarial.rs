//! Adversarial feature-shift training.
//!
//! Each iteration consumes three source tasks. The first drives a few steps
//! of gradient ascent on the shift layer φ against a transport-penalised
//! surrogate, the second is replayed through the resulting φ' as a pseudo
//! unseen-domain task, and the third is used as is. θ and φ then take one
//! Adam step on the summed query losses of the last two.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamSet, Tape, Tensor, Var, VarMap};
use crate::error::{Error, Result};
use crate::meta::{inner_adapt, proto_loss, split_loss, task_loss, BaseLearner, InnerConfig, LearnerKind};
use crate::models::{fisl_apply, fisl_transform_task, FislParams, FislVars, Model, RoutedTask};
use crate::optim::Adam;
use crate::tasks::{Task, TaskDomain};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdvConfig {
    /// Lagrange penalty on the transport cost.
    #[serde(default = "AdvConfig::default_penalty")]
    pub penalty: f64,
    /// Ascent step size η.
    #[serde(default = "AdvConfig::default_ascent_lr")]
    pub ascent_lr: f64,
    #[serde(default = "AdvConfig::default_ascent_steps")]
    pub ascent_steps: usize,
    /// Differentiate the outer loss through the ascent steps into φ.
    #[serde(default = "default_true")]
    pub phi_second_order: bool,
    /// Let the outer step move φ. Turning this off pins φ at its initial
    /// value, which the baseline-equivalence checks rely on.
    #[serde(default = "default_true")]
    pub update_phi: bool,
}

fn default_true() -> bool {
    true
}

impl AdvConfig {
    fn default_penalty() -> f64 {
        0.5
    }

    fn default_ascent_lr() -> f64 {
        0.01
    }

    fn default_ascent_steps() -> usize {
        1
    }

    /// Settings used for the classification benchmark (η = 0.1).
    pub fn classification() -> Self {
        AdvConfig {
            ascent_lr: 0.1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.penalty >= 0.0 && self.penalty.is_finite()) {
            return Err(Error::invalid("penalty must be non-negative"));
        }
        if !(self.ascent_lr >= 0.0 && self.ascent_lr.is_finite()) {
            return Err(Error::invalid("ascent_lr must be non-negative"));
        }
        if self.ascent_steps == 0 {
            return Err(Error::invalid("ascent_steps must be at least 1"));
        }
        Ok(())
    }
}

impl Default for AdvConfig {
    fn default() -> Self {
        AdvConfig {
            penalty: Self::default_penalty(),
            ascent_lr: Self::default_ascent_lr(),
            ascent_steps: Self::default_ascent_steps(),
            phi_second_order: true,
            update_phi: true,
        }
    }
}

/// The three source tasks one iteration consumes.
#[derive(Clone, Debug)]
pub struct EpisodeTriple {
    pub adapt_task: Task,
    pub pseudo_source_task: Task,
    pub clean_task: Task,
}

impl EpisodeTriple {
    pub fn sample(
        domain: &TaskDomain,
        n_way: usize,
        support: usize,
        query: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mut draw = || domain.sample(n_way, support, query, "source", rng);
        Ok(EpisodeTriple {
            adapt_task: draw()?,
            pseudo_source_task: draw()?,
            clean_task: draw()?,
        })
    }
}

/// Mean of `½‖z₀ − z‖²` over paired rows, or `+∞` if any pair's labels
/// differ (labels may not be transported).
pub fn transport_cost<L: PartialEq>(z0: &Tensor, z: &Tensor, y0: &[L], y: &[L]) -> Result<f64> {
    if z0.shape() != z.shape() {
        return Err(Error::ShapeMismatch {
            op: "transport_cost",
            lhs: z0.shape().to_vec(),
            rhs: z.shape().to_vec(),
        });
    }
    let (rows, cols) = z0.dims2()?;
    if y0.len() != rows || y.len() != rows {
        return Err(Error::invalid(format!(
            "transport_cost: {rows} rows but {} and {} labels",
            y0.len(),
            y.len()
        )));
    }
    if rows == 0 {
        return Err(Error::Empty("transport batch"));
    }
    if y0.iter().zip(y).any(|(a, b)| a != b) {
        return Ok(f64::INFINITY);
    }
    let total: f64 = (0..rows)
        .map(|r| {
            (0..cols)
                .map(|c| {
                    let d = z0.get2(r, c) - z.get2(r, c);
                    d * d
                })
                .sum::<f64>()
        })
        .sum();
    Ok(0.5 * total / rows as f64)
}

/// Batch-mean transport cost on the tape. Labels are never moved by the
/// shift layer, so only the finite branch exists here.
pub fn transport_cost_on_tape(tape: &Tape, z0: Var, z: Var) -> Result<Var> {
    let rows = tape.shape(z0).first().copied().unwrap_or(0);
    if rows == 0 {
        return Err(Error::Empty("transport batch"));
    }
    let d = tape.sub(z, z0)?;
    let sq = tape.sum(tape.square(d)?)?;
    tape.scale(sq, 0.5 / rows as f64)
}

/// Query loss of the shifted task minus `penalty` times the transport cost
/// of the shift. `learner` supplies the weights; the prototype learner has
/// none and uses `theta` directly.
pub fn surrogate_objective(
    tape: &Tape,
    model: &Model,
    theta: &VarMap,
    learner: Option<&BaseLearner>,
    phi: &FislVars,
    task: &Task,
    penalty: f64,
) -> Result<Var> {
    if task.query.is_empty() {
        return Err(Error::Empty("query set"));
    }
    let w = learner.map_or(theta, |l| &l.weights);
    let xq = tape.leaf(task.query.x.clone());
    let z0 = model.encode(tape, w, xq)?;
    let z = fisl_apply(tape, phi, z0)?;
    let loss = match learner {
        Some(_) => {
            let pred = model.head_forward(tape, w, z)?;
            split_loss(tape, pred, &task.query.y)?
        }
        None => proto_loss(tape, model, theta, fisl_transform_task(*phi, task))?,
    };
    if penalty == 0.0 {
        return Ok(loss);
    }
    let cost = transport_cost_on_tape(tape, z0, z)?;
    let pen = tape.scale(cost, penalty)?;
    tape.sub(loss, pen)
}

fn adapt_for_ascent(
    tape: &Tape,
    model: &Model,
    theta: &VarMap,
    task: &Task,
    inner: &InnerConfig,
) -> Result<Option<BaseLearner>> {
    match inner.kind {
        LearnerKind::Proto => Ok(None),
        _ => inner_adapt(tape, model, theta, RoutedTask::plain(task), inner, false).map(Some),
    }
}

/// Gradient ascent on φ, recorded on `tape`. θ enters as a constant: the
/// learner is adapted once on the clean support set and held fixed. With
/// `phi_second_order` the steps stay differentiable in φ; otherwise each step
/// adds a constant to φ.
pub fn max_phase_on_tape(
    tape: &Tape,
    model: &Model,
    theta: &VarMap,
    phi: FislVars,
    task: &Task,
    inner: &InnerConfig,
    adv: &AdvConfig,
) -> Result<FislVars> {
    adv.validate()?;
    let frozen: VarMap = theta.iter().map(|(k, v)| (k.clone(), tape.detach(*v))).collect();
    let learner = adapt_for_ascent(tape, model, &frozen, task, inner)?;
    let mut current = phi;
    for step in 0..adv.ascent_steps {
        let s = surrogate_objective(tape, model, &frozen, learner.as_ref(), &current, task, adv.penalty)?;
        let g = tape.grad_map(s, &current.as_map(), adv.phi_second_order)?;
        let gg = g.grads[crate::models::FISL_GAMMA];
        let gb = g.grads[crate::models::FISL_BETA];
        if !(tape.value(gg).is_finite() && tape.value(gb).is_finite()) {
            return Err(Error::invalid(format!("non-finite ascent gradient at step {step}")));
        }
        current = FislVars {
            gamma: tape.add(current.gamma, tape.scale(gg, adv.ascent_lr)?)?,
            beta: tape.add(current.beta, tape.scale(gb, adv.ascent_lr)?)?,
        };
    }
    Ok(current)
}

/// Value-level ascent: φ' from φ on `task` with θ frozen.
pub fn max_phase(
    model: &Model,
    theta: &ParamSet,
    phi: &FislParams,
    task: &Task,
    inner: &InnerConfig,
    adv: &AdvConfig,
) -> Result<FislParams> {
    let tape = Tape::new();
    let t = theta.to_tape(&tape);
    let p = phi.to_tape(&tape);
    let out = max_phase_on_tape(&tape, model, &t, p, task, inner, adv)?;
    Ok(out.read(&tape))
}

/// Value of the surrogate at φ, with the learner adapted on the clean
/// support set exactly as [`max_phase`] does.
pub fn surrogate_value(
    model: &Model,
    theta: &ParamSet,
    phi: &FislParams,
    task: &Task,
    inner: &InnerConfig,
    penalty: f64,
) -> Result<f64> {
    let tape = Tape::new();
    let t = theta.to_tape(&tape);
    let learner = adapt_for_ascent(&tape, model, &t, task, inner)?;
    let p = phi.to_tape(&tape);
    let s = surrogate_objective(&tape, model, &t, learner.as_ref(), &p, task, penalty)?;
    tape.item(s)
}

/// Position in the task stream, enough to rebuild the generator exactly.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn new(seed: u64, stream: u64) -> Self {
        RngState {
            seed,
            stream,
            word_pos: 0,
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }

    pub fn capture(&mut self, rng: &ChaCha8Rng) {
        self.word_pos = rng.get_word_pos();
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub theta: Adam,
    pub phi: Adam,
}

/// Everything needed to continue training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub iteration: u64,
    pub theta: ParamSet,
    pub phi: FislParams,
    pub optimizer_state: OptimizerState,
    pub rng_state: RngState,
}

impl TrainState {
    pub fn new(theta: ParamSet, phi: FislParams, rng_state: RngState) -> Self {
        let optimizer_state = OptimizerState {
            theta: Adam::new(&theta),
            phi: Adam::new(&phi.to_params()),
        };
        TrainState {
            iteration: 0,
            theta,
            phi,
            optimizer_state,
            rng_state,
        }
    }

    pub fn ensure_finite(&self) -> Result<()> {
        let name = self
            .theta
            .first_non_finite()
            .or_else(|| self.phi.to_params().first_non_finite().map(|_| "phi"));
        match name {
            None => Ok(()),
            Some(n) => Err(Error::Diverged {
                iteration: self.iteration,
                detail: format!("parameter `{n}` after optimizer step"),
            }),
        }
    }
}

/// One adversarial iteration. Returns the new state and the summed
/// pseudo-plus-clean query loss; on any failure the input state is untouched.
pub fn adversarial_update(
    model: &Model,
    state: &TrainState,
    triple: &EpisodeTriple,
    adv: &AdvConfig,
    inner: &InnerConfig,
    lr: f64,
) -> Result<(TrainState, f64)> {
    let iteration = state.iteration + 1;
    let diverged = |e: Error| match e {
        Error::NonFinite { op } => Error::Diverged {
            iteration,
            detail: format!("{op} in adversarial step"),
        },
        other => other,
    };
    let tape = Tape::new();
    let theta = state.theta.to_tape(&tape);
    let phi = state.phi.to_tape(&tape);
    let (loss, wrt) = (|| -> Result<(Var, VarMap)> {
        let shifted = max_phase_on_tape(&tape, model, &theta, phi, &triple.adapt_task, inner, adv)?;
        let pseudo = fisl_transform_task(shifted, &triple.pseudo_source_task);
        let l_pseudo = task_loss(&tape, model, &theta, pseudo, inner, true)?;
        let l_clean = task_loss(&tape, model, &theta, RoutedTask::plain(&triple.clean_task), inner, true)?;
        let total = tape.add(l_pseudo, l_clean)?;
        let mut wrt = theta.clone();
        if adv.update_phi {
            wrt.extend(phi.as_map());
        }
        Ok((total, wrt))
    })()
    .map_err(diverged)?;
    let loss_value = tape.item(loss)?;
    let grads = tape.grad_map(loss, &wrt, false).map_err(diverged)?;
    let grads = ParamSet::from_tape(&tape, &grads.grads);
    if !loss_value.is_finite() || !grads.is_finite() {
        return Err(Error::Diverged {
            iteration,
            detail: "adversarial loss or gradient".into(),
        });
    }

    let mut next = state.clone();
    let theta_grads: ParamSet = state
        .theta
        .names()
        .map(|n| (n.clone(), grads.get(n).unwrap().clone()))
        .collect();
    next.optimizer_state.theta.update(&mut next.theta, &theta_grads, lr)?;
    if adv.update_phi {
        let mut phi_params = state.phi.to_params();
        let phi_grads: ParamSet = phi_params
            .names()
            .map(|n| (n.clone(), grads.get(n).unwrap().clone()))
            .collect();
        next.optimizer_state.phi.update(&mut phi_params, &phi_grads, lr)?;
        next.phi = FislParams::from_params(&phi_params)?;
    }
    next.iteration = iteration;
    Ok((next, loss_value))
}
