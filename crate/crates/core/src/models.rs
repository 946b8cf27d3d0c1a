//! Feature encoder, prediction heads and the feature-wise shift layer.
//!
//! The shift layer sits after the last encoder layer: `z = γ ⊙ z₀ + β` with
//! one scale and one offset per feature channel.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamSet, Tape, Tensor, Var, VarMap};
use crate::error::{Error, Result};
use crate::tasks::Task;

pub const HEAD_W: &str = "head.w";
pub const HEAD_B: &str = "head.b";
pub const RIDGE_W: &str = "ridge.w";
pub const FISL_GAMMA: &str = "fisl.gamma";
pub const FISL_BETA: &str = "fisl.beta";

/// Fully connected ReLU encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    pub input_dim: usize,
    #[serde(default = "EncoderSpec::default_hidden")]
    pub hidden_dims: Vec<usize>,
}

impl EncoderSpec {
    fn default_hidden() -> Vec<usize> {
        vec![40, 40]
    }

    pub fn new(input_dim: usize, hidden_dims: Vec<usize>) -> Result<Self> {
        let spec = EncoderSpec {
            input_dim,
            hidden_dims,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
            return Err(Error::invalid(
                "encoder dims must be at least 1 with one or more hidden layers",
            ));
        }
        Ok(())
    }

    /// Number of feature channels `C`.
    pub fn output_dim(&self) -> usize {
        *self.hidden_dims.last().expect("validated encoder")
    }

    fn layer_dims(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        std::iter::once(self.input_dim)
            .chain(self.hidden_dims.iter().copied())
            .zip(self.hidden_dims.iter().copied())
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().map(|(i, o)| (i + 1) * o).sum()
    }

    pub fn weight_name(layer: usize) -> String {
        format!("enc.w{layer}")
    }

    pub fn bias_name(layer: usize) -> String {
        format!("enc.b{layer}")
    }

    pub fn is_encoder_param(name: &str) -> bool {
        name.starts_with("enc.")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    LinearRegression,
    LinearClassifier,
    RidgeClosedForm,
    PrototypeMetric,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub kind: HeadKind,
    pub output_dim: usize,
}

impl HeadSpec {
    /// Whether the head owns trainable initial weights in θ.
    pub fn is_parametric(&self) -> bool {
        matches!(self.kind, HeadKind::LinearRegression | HeadKind::LinearClassifier)
    }
}

/// Shift-layer parameters φ: per-channel scale and offset, each `(1, C)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FislParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl FislParams {
    /// γ = 1, β = 0: the layer is a no-op.
    pub fn identity(channels: usize) -> Self {
        FislParams {
            gamma: Tensor::ones(&[1, channels]),
            beta: Tensor::zeros(&[1, channels]),
        }
    }

    pub fn new(gamma: Vec<f64>, beta: Vec<f64>) -> Result<Self> {
        if gamma.len() != beta.len() {
            return Err(Error::ShapeMismatch {
                op: "fisl",
                lhs: vec![1, gamma.len()],
                rhs: vec![1, beta.len()],
            });
        }
        let p = FislParams {
            gamma: Tensor::row(gamma),
            beta: Tensor::row(beta),
        };
        if !(p.gamma.is_finite() && p.beta.is_finite()) {
            return Err(Error::NonFinite { op: "fisl" });
        }
        Ok(p)
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn to_params(&self) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert(FISL_GAMMA, self.gamma.clone());
        p.insert(FISL_BETA, self.beta.clone());
        p
    }

    pub fn from_params(p: &ParamSet) -> Result<Self> {
        Ok(FislParams {
            gamma: p.require(FISL_GAMMA)?.clone(),
            beta: p.require(FISL_BETA)?.clone(),
        })
    }

    pub fn to_tape(&self, tape: &Tape) -> FislVars {
        FislVars {
            gamma: tape.leaf(self.gamma.clone()),
            beta: tape.leaf(self.beta.clone()),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.gamma.values().iter().all(|&g| g == 1.0) && self.beta.values().iter().all(|&b| b == 0.0)
    }
}

/// Shift-layer parameters recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FislVars {
    pub gamma: Var,
    pub beta: Var,
}

impl FislVars {
    pub fn as_map(&self) -> VarMap {
        [
            (FISL_GAMMA.to_string(), self.gamma),
            (FISL_BETA.to_string(), self.beta),
        ]
        .into_iter()
        .collect()
    }

    pub fn read(&self, tape: &Tape) -> FislParams {
        FislParams {
            gamma: (*tape.value(self.gamma)).clone(),
            beta: (*tape.value(self.beta)).clone(),
        }
    }
}

/// `γ ⊙ z₀ + β`, broadcast over the batch.
pub fn fisl_apply(tape: &Tape, phi: &FislVars, z0: Var) -> Result<Var> {
    let c = tape.shape(z0).last().copied().unwrap_or(0);
    let (g, b) = (tape.shape(phi.gamma), tape.shape(phi.beta));
    if g != [1, c] || b != [1, c] {
        return Err(Error::ShapeMismatch {
            op: "fisl_apply",
            lhs: g,
            rhs: tape.shape(z0),
        });
    }
    let scaled = tape.mul_bcast(z0, phi.gamma)?;
    tape.add_bcast(scaled, phi.beta)
}

/// A task whose forward passes go through a shift layer. Inputs and labels
/// are the source task's own; only features are moved.
#[derive(Clone, Copy, Debug)]
pub struct RoutedTask<'a> {
    pub task: &'a Task,
    pub shift: Option<FislVars>,
}

/// A source task seen through an adapted shift layer.
pub type PseudoTask<'a> = RoutedTask<'a>;

impl<'a> RoutedTask<'a> {
    pub fn plain(task: &'a Task) -> Self {
        RoutedTask { task, shift: None }
    }
}

impl<'a> From<&'a Task> for RoutedTask<'a> {
    fn from(task: &'a Task) -> Self {
        RoutedTask::plain(task)
    }
}

/// Attach `phi` to `task` so every forward pass for it is shifted.
pub fn fisl_transform_task(phi: FislVars, task: &Task) -> PseudoTask<'_> {
    RoutedTask {
        task,
        shift: Some(phi),
    }
}

/// Encoder plus head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub encoder: EncoderSpec,
    pub head: HeadSpec,
}

impl Model {
    pub fn new(encoder: EncoderSpec, head: HeadSpec) -> Result<Self> {
        encoder.validate()?;
        if head.output_dim == 0 {
            return Err(Error::invalid("head output_dim must be at least 1"));
        }
        Ok(Model { encoder, head })
    }

    pub fn channels(&self) -> usize {
        self.encoder.output_dim()
    }

    /// Uniform(±1/√fan_in) weights and biases for the encoder and, if
    /// parametric, the head.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamSet {
        let mut p = ParamSet::new();
        let mut layer = |p: &mut ParamSet, wn: String, bn: String, fan_in: usize, fan_out: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            let b = (0..fan_out).map(|_| rng.random_range(-bound..bound)).collect();
            p.insert(wn, Tensor::matrix(fan_in, fan_out, w).unwrap());
            p.insert(bn, Tensor::row(b));
        };
        for (i, (fan_in, fan_out)) in self.encoder.layer_dims().enumerate() {
            layer(
                &mut p,
                EncoderSpec::weight_name(i),
                EncoderSpec::bias_name(i),
                fan_in,
                fan_out,
            );
        }
        if self.head.is_parametric() {
            layer(
                &mut p,
                HEAD_W.to_string(),
                HEAD_B.to_string(),
                self.channels(),
                self.head.output_dim,
            );
        }
        p
    }

    pub fn encode(&self, tape: &Tape, w: &VarMap, x: Var) -> Result<Var> {
        let shape = tape.shape(x);
        if shape.len() != 2 || shape[1] != self.encoder.input_dim {
            return Err(Error::ShapeMismatch {
                op: "encode",
                lhs: shape,
                rhs: vec![0, self.encoder.input_dim],
            });
        }
        let mut h = x;
        for i in 0..self.encoder.hidden_dims.len() {
            let wi = var(w, &EncoderSpec::weight_name(i))?;
            let bi = var(w, &EncoderSpec::bias_name(i))?;
            let pre = tape.add_bcast(tape.matmul(h, wi)?, bi)?;
            h = tape.relu(pre)?;
        }
        Ok(h)
    }

    /// Encoder features, shifted when `shift` is given.
    pub fn features(&self, tape: &Tape, w: &VarMap, shift: Option<&FislVars>, x: Var) -> Result<Var> {
        let z0 = self.encode(tape, w, x)?;
        match shift {
            Some(phi) => fisl_apply(tape, phi, z0),
            None => Ok(z0),
        }
    }

    /// Predictions (regression) or logits (classification) from features.
    /// The prototype head has no weights; use [`prototype_logits`].
    pub fn head_forward(&self, tape: &Tape, w: &VarMap, z: Var) -> Result<Var> {
        match self.head.kind {
            HeadKind::LinearRegression | HeadKind::LinearClassifier => {
                let hw = var(w, HEAD_W)?;
                let hb = var(w, HEAD_B)?;
                tape.add_bcast(tape.matmul(z, hw)?, hb)
            }
            HeadKind::RidgeClosedForm => tape.matmul(z, var(w, RIDGE_W)?),
            HeadKind::PrototypeMetric => Err(Error::invalid(
                "the prototype head scores against support prototypes; use prototype_logits",
            )),
        }
    }

    pub fn forward(&self, tape: &Tape, w: &VarMap, shift: Option<&FislVars>, x: Var) -> Result<Var> {
        let z = self.features(tape, w, shift, x)?;
        self.head_forward(tape, w, z)
    }
}

fn var(w: &VarMap, name: &str) -> Result<Var> {
    w.get(name).copied().ok_or_else(|| Error::MissingParam(name.to_string()))
}

/// Class means of support features: `(n_way, C)`.
pub fn prototypes(tape: &Tape, support_z: Var, labels: &[usize], n_way: usize) -> Result<Var> {
    let n = labels.len();
    let mut counts = vec![0usize; n_way];
    for &l in labels {
        if l >= n_way {
            return Err(Error::invalid(format!("label {l} out of range for {n_way} classes")));
        }
        counts[l] += 1;
    }
    if let Some(c) = counts.iter().position(|&c| c == 0) {
        return Err(Error::invalid(format!("class {c} has no support examples")));
    }
    let mut avg = Tensor::zeros(&[n_way, n]);
    for (i, &l) in labels.iter().enumerate() {
        avg.values_mut()[l * n + i] = 1.0 / counts[l] as f64;
    }
    let avg = tape.leaf(avg);
    tape.matmul(avg, support_z)
}

/// Negative squared euclidean distance from each query row to each prototype.
pub fn prototype_logits(tape: &Tape, protos: Var, queries: Var) -> Result<Var> {
    let (q_shape, p_shape) = (tape.shape(queries), tape.shape(protos));
    if q_shape.len() != 2 || p_shape.len() != 2 || q_shape[1] != p_shape[1] {
        return Err(Error::ShapeMismatch {
            op: "prototype_logits",
            lhs: q_shape,
            rhs: p_shape,
        });
    }
    let (nq, k) = (q_shape[0], p_shape[0]);
    let qn = tape.sum_rows(tape.square(queries)?)?; // (nq, 1)
    let pn = tape.transpose(tape.sum_rows(tape.square(protos)?)?)?; // (1, k)
    let cross = tape.matmul(queries, tape.transpose(protos)?)?;
    let two_cross = tape.scale(cross, 2.0)?;
    let d = tape.sub(two_cross, tape.broadcast_to(qn, &[nq, k])?)?;
    tape.sub(d, tape.broadcast_to(pn, &[nq, k])?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check_grad;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn regression_model(hidden: Vec<usize>) -> Model {
        Model::new(
            EncoderSpec::new(1, hidden).unwrap(),
            HeadSpec {
                kind: HeadKind::LinearRegression,
                output_dim: 1,
            },
        )
        .unwrap()
    }

    #[test]
    fn param_count_matches_layers() {
        let m = regression_model(vec![40, 40]);
        let p = m.init_params(&mut ChaCha8Rng::seed_from_u64(0));
        let enc: usize = p
            .iter()
            .filter(|(k, _)| EncoderSpec::is_encoder_param(k))
            .map(|(_, t)| t.len())
            .sum();
        assert_eq!(enc, m.encoder.param_count());
        assert_eq!(enc, 2 * 40 + 41 * 40);
        assert!(EncoderSpec::new(0, vec![3]).is_err());
        assert!(EncoderSpec::new(2, vec![]).is_err());
    }

    #[test]
    fn zero_encoder_gives_zero_features() {
        let m = regression_model(vec![4, 3]);
        let p = m.init_params(&mut ChaCha8Rng::seed_from_u64(0)).zeros_like();
        let tape = Tape::new();
        let w = p.to_tape(&tape);
        let x = tape.leaf(Tensor::column(vec![1.0, -2.0]));
        let z = m.encode(&tape, &w, x).unwrap();
        assert_eq!(*tape.value(z), Tensor::zeros(&[2, 3]));
    }

    #[test]
    fn identity_layer_passes_input_through_relu() {
        let m = Model::new(
            EncoderSpec::new(2, vec![2]).unwrap(),
            HeadSpec {
                kind: HeadKind::LinearRegression,
                output_dim: 2,
            },
        )
        .unwrap();
        let tape = Tape::new();
        let mut p = ParamSet::new();
        p.insert("enc.w0", Tensor::eye(2));
        p.insert("enc.b0", Tensor::zeros(&[1, 2]));
        let w = p.to_tape(&tape);
        let x = tape.leaf(Tensor::matrix(1, 2, vec![0.5, 2.0]).unwrap());
        let z = m.encode(&tape, &w, x).unwrap();
        assert_eq!(tape.value(z).values(), &[0.5, 2.0]);
        let bad = tape.leaf(Tensor::matrix(1, 3, vec![0.0; 3]).unwrap());
        assert!(m.encode(&tape, &w, bad).is_err());
    }

    #[test]
    fn encoder_gradient_matches_finite_differences() {
        let m = regression_model(vec![6, 5]);
        let p = m.init_params(&mut ChaCha8Rng::seed_from_u64(3));
        let xs = Tensor::column(vec![-1.3, 0.4, 2.2, -3.1]);
        let f = |tape: &Tape, w: &VarMap| {
            let x = tape.leaf(xs.clone());
            let z = m.encode(tape, w, x)?;
            tape.mean(tape.square(z)?)
        };
        let err = check_grad(&f, &p, 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn fisl_cases() {
        let tape = Tape::new();
        let z0 = tape.leaf(Tensor::matrix(2, 2, vec![0.5, -1.0, 3.0, 4.0]).unwrap());
        let id = FislParams::identity(2).to_tape(&tape);
        assert_eq!(*tape.value(fisl_apply(&tape, &id, z0).unwrap()), *tape.value(z0));

        let zero = FislParams::new(vec![0.0, 0.0], vec![7.0, -7.0]).unwrap().to_tape(&tape);
        let z = fisl_apply(&tape, &zero, z0).unwrap();
        assert_eq!(tape.value(z).values(), &[7.0, -7.0, 7.0, -7.0]);

        let phi = FislParams::new(vec![2.0, 2.0], vec![1.0, -1.0]).unwrap().to_tape(&tape);
        let one = tape.leaf(Tensor::row(vec![0.5, -1.0]));
        let z = fisl_apply(&tape, &phi, one).unwrap();
        assert_eq!(tape.value(z).values(), &[2.0, -3.0]);

        let wrong = tape.leaf(Tensor::row(vec![1.0, 2.0, 3.0]));
        assert!(fisl_apply(&tape, &phi, wrong).is_err());
        assert!(FislParams::new(vec![1.0], vec![0.0, 0.0]).is_err());
    }

    #[test]
    fn linear_heads() {
        let m = Model::new(
            EncoderSpec::new(2, vec![2]).unwrap(),
            HeadSpec {
                kind: HeadKind::LinearRegression,
                output_dim: 2,
            },
        )
        .unwrap();
        let tape = Tape::new();
        let z = tape.leaf(Tensor::matrix(2, 2, vec![1.0, 2.0, -3.0, 4.0]).unwrap());
        let mut p = ParamSet::new();
        p.insert(HEAD_W, Tensor::zeros(&[2, 2]));
        p.insert(HEAD_B, Tensor::zeros(&[1, 2]));
        let w = p.to_tape(&tape);
        assert_eq!(*tape.value(m.head_forward(&tape, &w, z).unwrap()), Tensor::zeros(&[2, 2]));
        p.insert(HEAD_W, Tensor::eye(2));
        let w = p.to_tape(&tape);
        assert_eq!(*tape.value(m.head_forward(&tape, &w, z).unwrap()), *tape.value(z));
        assert!(matches!(
            m.head_forward(&tape, &VarMap::new(), z),
            Err(Error::MissingParam(_))
        ));
    }

    #[test]
    fn prototype_logits_are_negative_squared_distances() {
        let tape = Tape::new();
        let protos = tape.leaf(Tensor::matrix(2, 2, vec![0.0, 0.0, 3.0, 4.0]).unwrap());
        let q = tape.leaf(Tensor::matrix(1, 2, vec![3.0, 0.0]).unwrap());
        let l = prototype_logits(&tape, protos, q).unwrap();
        assert_eq!(tape.value(l).values(), &[-9.0, -16.0]);
    }

    #[test]
    fn prototypes_need_every_class() {
        let tape = Tape::new();
        let z = tape.leaf(Tensor::matrix(2, 1, vec![1.0, 3.0]).unwrap());
        let p = prototypes(&tape, z, &[1, 1], 2);
        assert!(p.is_err());
        let p = prototypes(&tape, z, &[0, 0], 1).unwrap();
        assert_eq!(tape.value(p).values(), &[2.0]);
    }
}
