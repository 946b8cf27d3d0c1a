use serde::{Deserialize, Serialize};

use crate::autodiff::ParamSet;
use crate::error::{Error, Result};

/// Adam moment estimates for one parameter set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: ParamSet,
    pub v: ParamSet,
}

impl Adam {
    pub fn new(params: &ParamSet) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    /// Apply one bias-corrected update with learning rate `lr`.
    pub fn update(&mut self, params: &mut ParamSet, grads: &ParamSet, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let names: Vec<String> = params.names().cloned().collect();
        for name in names {
            let g = grads.require(&name)?;
            let m = self.m.get_mut(&name).ok_or_else(|| Error::MissingParam(name.clone()))?;
            let v = self.v.get_mut(&name).ok_or_else(|| Error::MissingParam(name.clone()))?;
            let p = params.get_mut(&name).unwrap();
            if g.shape() != p.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let (pv, mv, vv) = (p.values_mut(), m.values_mut(), v.values_mut());
            for (i, &gi) in g.values().iter().enumerate() {
                mv[i] = self.beta1 * mv[i] + (1.0 - self.beta1) * gi;
                vv[i] = self.beta2 * vv[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = mv[i] / c1;
                let vhat = vv[i] / c2;
                pv[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
