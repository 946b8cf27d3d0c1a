use super::params::ParamSet;
use super::tape::{Tape, Var, VarMap};
use crate::error::{Error, Result};

/// Denominator floor for [`relative_error`]; keeps coordinates whose true
/// gradient is (numerically) zero from producing meaningless ratios.
pub const REL_ERR_FLOOR: f64 = 1e-3;

/// `|a − b| / max(|a|, |b|, REL_ERR_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

/// Scalar function of a named parameter set, recorded on a fresh tape.
pub trait ScalarFn: Fn(&Tape, &VarMap) -> Result<Var> {}
impl<F: Fn(&Tape, &VarMap) -> Result<Var>> ScalarFn for F {}

/// Evaluate `f` at `point` without recording gradients.
pub fn eval_scalar(f: &impl ScalarFn, point: &ParamSet) -> Result<f64> {
    let tape = Tape::new();
    let vars = point.to_tape(&tape);
    let out = f(&tape, &vars)?;
    tape.item(out)
}

/// Central-difference gradient of `f` at `point`.
pub fn numeric_grad(f: &impl ScalarFn, point: &ParamSet, eps: f64) -> Result<ParamSet> {
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let mut out = point.zeros_like();
    let mut probe = point.clone();
    for name in point.names() {
        let n = point.require(name)?.len();
        for i in 0..n {
            let orig = point.require(name)?.values()[i];
            probe.get_mut(name).unwrap().values_mut()[i] = orig + eps;
            let up = eval_scalar(f, &probe)?;
            probe.get_mut(name).unwrap().values_mut()[i] = orig - eps;
            let down = eval_scalar(f, &probe)?;
            probe.get_mut(name).unwrap().values_mut()[i] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::NonFinite {
                    op: "finite difference",
                });
            }
            out.get_mut(name).unwrap().values_mut()[i] = (up - down) / (2.0 * eps);
        }
    }
    Ok(out)
}

/// Reverse-mode gradient of `f` at `point`.
pub fn analytic_grad(f: &impl ScalarFn, point: &ParamSet) -> Result<ParamSet> {
    let tape = Tape::new();
    let vars = point.to_tape(&tape);
    let out = f(&tape, &vars)?;
    let g = tape.grad_map(out, &vars, false)?;
    Ok(ParamSet::from_tape(&tape, &g.grads))
}

/// Worst per-coordinate [`relative_error`] between two gradient sets.
pub fn max_relative_error(a: &ParamSet, b: &ParamSet) -> f64 {
    a.iter()
        .flat_map(|(k, t)| {
            let other = b.get(k).expect("matching gradient sets");
            t.values()
                .iter()
                .zip(other.values())
                .map(|(&x, &y)| relative_error(x, y))
                .collect::<Vec<_>>()
        })
        .fold(0.0, f64::max)
}

/// Compare [`Tape::grad`] against central differences and return the worst
/// relative error over all coordinates.
pub fn check_grad(f: &impl ScalarFn, point: &ParamSet, eps: f64) -> Result<f64> {
    let analytic = analytic_grad(f, point)?;
    let numeric = numeric_grad(f, point, eps)?;
    Ok(max_relative_error(&analytic, &numeric))
}

/// Second-order check: central differences of the first gradient (taken with
/// `create_graph`) in the direction `dir` versus the Hessian-vector product
/// obtained by differentiating that gradient again.
pub fn check_hvp(f: &impl ScalarFn, point: &ParamSet, dir: &ParamSet, eps: f64) -> Result<f64> {
    // gradient of <∇f, dir> is H·dir
    let hvp = {
        let tape = Tape::new();
        let vars = point.to_tape(&tape);
        let out = f(&tape, &vars)?;
        let g = tape.grad_map(out, &vars, true)?;
        let mut dot = None;
        for (k, gv) in &g.grads {
            let d = tape.leaf(dir.require(k)?.clone());
            let term = tape.sum(tape.mul(*gv, d)?)?;
            dot = Some(match dot {
                None => term,
                Some(acc) => tape.add(acc, term)?,
            });
        }
        let dot = dot.ok_or(Error::Empty("parameter set"))?;
        let h = tape.grad_map(dot, &vars, false)?;
        ParamSet::from_tape(&tape, &h.grads)
    };
    let shifted = |sign: f64| -> Result<ParamSet> {
        let p: ParamSet = point
            .iter()
            .map(|(k, t)| {
                let d = dir.require(k)?;
                let mut t = t.clone();
                for (x, dx) in t.values_mut().iter_mut().zip(d.values()) {
                    *x += sign * eps * dx;
                }
                Ok((k.clone(), t))
            })
            .collect::<Result<_>>()?;
        analytic_grad(f, &p)
    };
    let up = shifted(1.0)?;
    let down = shifted(-1.0)?;
    let fd: ParamSet = up
        .iter()
        .map(|(k, u)| {
            let d = down.require(k).unwrap();
            let vals = u
                .values()
                .iter()
                .zip(d.values())
                .map(|(a, b)| (a - b) / (2.0 * eps))
                .collect();
            (k.clone(), super::Tensor::new(u.shape().to_vec(), vals).unwrap())
        })
        .collect();
    Ok(max_relative_error(&hvp, &fd))
}
