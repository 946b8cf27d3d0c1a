//! Episodic task samplers: sine-wave regression and shifted Gaussian blobs.

use std::f64::consts::PI;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Closed interval `[lo, hi]`, written as a two-element array.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 2]", into = "[f64; 2]")]
pub struct Interval {
    lo: f64,
    hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::invalid(format!("invalid interval [{lo}, {hi}]")));
        }
        Ok(Interval { lo, hi })
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.random_range(self.lo..=self.hi)
        }
    }
}

impl TryFrom<[f64; 2]> for Interval {
    type Error = Error;
    fn try_from(v: [f64; 2]) -> Result<Self> {
        Interval::new(v[0], v[1])
    }
}

impl From<Interval> for [f64; 2] {
    fn from(i: Interval) -> Self {
        [i.lo, i.hi]
    }
}

/// Targets of a support or query split.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    /// Real-valued targets, one row per example.
    Values(Tensor),
    /// Integer class labels in `0..n_way`.
    Classes { labels: Vec<usize>, n_way: usize },
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Values(t) => t.shape().first().copied().unwrap_or(0),
            Targets::Classes { labels, .. } => labels.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Inputs `x` (one row per example) and their targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub x: Tensor,
    pub y: Targets,
}

impl Split {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One few-shot problem: a support set to adapt on and a query set to score.
#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub support: Split,
    pub query: Split,
    pub domain_tag: String,
}

impl Task {
    pub fn is_classification(&self) -> bool {
        matches!(self.support.y, Targets::Classes { .. })
    }

    pub fn n_way(&self) -> Option<usize> {
        match self.support.y {
            Targets::Classes { n_way, .. } => Some(n_way),
            Targets::Values(_) => None,
        }
    }
}

// ---- sine regression ------------------------------------------------------

/// Sine waves `y = A·sin(x + p)` with amplitude, phase and input ranges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SineDomain {
    pub amplitude: Interval,
    pub phase: Interval,
    #[serde(default = "SineDomain::default_x_range")]
    pub x_range: Interval,
}

impl SineDomain {
    fn default_x_range() -> Interval {
        Interval { lo: -5.0, hi: 5.0 }
    }

    /// Amplitude in [0.1, 3], phase in [0, 3π/4].
    pub fn source() -> Self {
        SineDomain {
            amplitude: Interval { lo: 0.1, hi: 3.0 },
            phase: Interval {
                lo: 0.0,
                hi: 0.75 * PI,
            },
            x_range: Self::default_x_range(),
        }
    }

    /// Amplitude in [3, 5], phase in [3π/4, π].
    pub fn unseen() -> Self {
        SineDomain {
            amplitude: Interval { lo: 3.0, hi: 5.0 },
            phase: Interval {
                lo: 0.75 * PI,
                hi: PI,
            },
            x_range: Self::default_x_range(),
        }
    }
}

/// Parameters of one drawn sine wave.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SineWave {
    pub amplitude: f64,
    pub phase: f64,
}

impl SineWave {
    pub fn eval(&self, x: f64) -> f64 {
        self.amplitude * (x + self.phase).sin()
    }
}

fn sine_split<R: Rng + ?Sized>(wave: &SineWave, range: &Interval, k: usize, rng: &mut R) -> Split {
    let xs: Vec<f64> = (0..k).map(|_| range.sample(rng)).collect();
    let ys = xs.iter().map(|&x| wave.eval(x)).collect();
    Split {
        x: Tensor::column(xs),
        y: Targets::Values(Tensor::column(ys)),
    }
}

/// Draw a wave and its support/query points. Also returns the wave so
/// callers can plot the ground truth.
pub fn sample_sine_task_with_wave<R: Rng + ?Sized>(
    domain: &SineDomain,
    k_support: usize,
    k_query: usize,
    tag: &str,
    rng: &mut R,
) -> Result<(Task, SineWave)> {
    if k_support == 0 || k_query == 0 {
        return Err(Error::invalid("support and query sizes must be at least 1"));
    }
    let wave = SineWave {
        amplitude: domain.amplitude.sample(rng),
        phase: domain.phase.sample(rng),
    };
    let support = sine_split(&wave, &domain.x_range, k_support, rng);
    let query = sine_split(&wave, &domain.x_range, k_query, rng);
    Ok((
        Task {
            support,
            query,
            domain_tag: tag.to_string(),
        },
        wave,
    ))
}

pub fn sample_sine_task<R: Rng + ?Sized>(
    domain: &SineDomain,
    k_support: usize,
    k_query: usize,
    tag: &str,
    rng: &mut R,
) -> Result<Task> {
    sample_sine_task_with_wave(domain, k_support, k_query, tag, rng).map(|(t, _)| t)
}

// ---- shifted blobs ---------------------------------------------------------

/// Invertible 2-D affine map `x ↦ M·x + b`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, try_from = "RawAffine")]
pub struct Affine2 {
    pub matrix: [[f64; 2]; 2],
    pub offset: [f64; 2],
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAffine {
    matrix: [[f64; 2]; 2],
    offset: [f64; 2],
}

impl TryFrom<RawAffine> for Affine2 {
    type Error = Error;
    fn try_from(r: RawAffine) -> Result<Self> {
        let a = Affine2 {
            matrix: r.matrix,
            offset: r.offset,
        };
        if a.determinant() == 0.0 || !a.determinant().is_finite() {
            return Err(Error::invalid("domain transform must be invertible"));
        }
        Ok(a)
    }
}

impl Affine2 {
    pub fn identity() -> Self {
        Affine2 {
            matrix: [[1.0, 0.0], [0.0, 1.0]],
            offset: [0.0, 0.0],
        }
    }

    /// Rotation by `degrees`, then uniform `scale`, then `offset`.
    pub fn rotate_scale_shift(degrees: f64, scale: f64, offset: [f64; 2]) -> Self {
        let (s, c) = degrees.to_radians().sin_cos();
        Affine2 {
            matrix: [[scale * c, -scale * s], [scale * s, scale * c]],
            offset,
        }
    }

    pub fn determinant(&self) -> f64 {
        let m = self.matrix;
        m[0][0] * m[1][1] - m[0][1] * m[1][0]
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let m = self.matrix;
        [
            m[0][0] * p[0] + m[0][1] * p[1] + self.offset[0],
            m[1][0] * p[0] + m[1][1] * p[1] + self.offset[1],
        ]
    }
}

/// Classes are isotropic Gaussians in the plane around centers drawn once
/// per domain; `transform` is applied to every input to emulate a shift.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobDomain {
    pub n_classes_pool: usize,
    pub center_norm: Interval,
    pub noise_std: f64,
    /// Seed for the fixed pool of class centers.
    pub pool_seed: u64,
    pub transform: Affine2,
}

impl BlobDomain {
    pub fn source() -> Self {
        BlobDomain {
            n_classes_pool: 64,
            center_norm: Interval { lo: 2.0, hi: 6.0 },
            noise_std: 1.0,
            pool_seed: 0,
            transform: Affine2::identity(),
        }
    }

    /// Fresh class pool seen through a 45° rotation, 1.5× scale and a
    /// (1, −1) translation.
    pub fn unseen() -> Self {
        BlobDomain {
            n_classes_pool: 64,
            center_norm: Interval { lo: 2.0, hi: 6.0 },
            noise_std: 1.0,
            pool_seed: 1,
            transform: Affine2::rotate_scale_shift(45.0, 1.5, [1.0, -1.0]),
        }
    }

    /// Class centers before the domain transform.
    pub fn centers(&self) -> Vec<[f64; 2]> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.pool_seed);
        (0..self.n_classes_pool)
            .map(|_| {
                let angle = rng.random_range(0.0..2.0 * PI);
                let r = self.center_norm.sample(&mut rng);
                [r * angle.cos(), r * angle.sin()]
            })
            .collect()
    }

    fn validate(&self) -> Result<()> {
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::invalid("noise_std must be a non-negative number"));
        }
        Ok(())
    }
}

fn blob_split<R: Rng + ?Sized>(
    domain: &BlobDomain,
    centers: &[[f64; 2]],
    per_class: usize,
    rng: &mut R,
) -> Split {
    let n_way = centers.len();
    let mut xs = Vec::with_capacity(n_way * per_class * 2);
    let mut labels = Vec::with_capacity(n_way * per_class);
    for (label, c) in centers.iter().enumerate() {
        for _ in 0..per_class {
            let dx: f64 = rng.sample(StandardNormal);
            let dy: f64 = rng.sample(StandardNormal);
            let p = domain
                .transform
                .apply([c[0] + domain.noise_std * dx, c[1] + domain.noise_std * dy]);
            xs.extend_from_slice(&p);
            labels.push(label);
        }
    }
    Split {
        x: Tensor::matrix(labels.len(), 2, xs).expect("2-D inputs"),
        y: Targets::Classes { labels, n_way },
    }
}

/// `n_way` classes drawn without replacement from the pool and relabelled
/// `0..n_way`, with `k_shot` support and `k_query` query points each.
pub fn sample_blob_task<R: Rng + ?Sized>(
    domain: &BlobDomain,
    n_way: usize,
    k_shot: usize,
    k_query: usize,
    tag: &str,
    rng: &mut R,
) -> Result<Task> {
    domain.validate()?;
    if n_way < 2 {
        return Err(Error::invalid("n_way must be at least 2"));
    }
    if n_way > domain.n_classes_pool {
        return Err(Error::invalid(format!(
            "n_way {n_way} exceeds the class pool of {}",
            domain.n_classes_pool
        )));
    }
    if k_shot == 0 || k_query == 0 {
        return Err(Error::invalid("k_shot and k_query must be at least 1"));
    }
    let pool = domain.centers();
    let chosen: Vec<[f64; 2]> = sample_indices(rng, pool.len(), n_way)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    let support = blob_split(domain, &chosen, k_shot, rng);
    let query = blob_split(domain, &chosen, k_query, rng);
    Ok(Task {
        support,
        query,
        domain_tag: tag.to_string(),
    })
}

// ---- task families ---------------------------------------------------------

/// A task distribution as written in experiment configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase", deny_unknown_fields)]
pub enum TaskDomain {
    Sine(SineDomain),
    Blob(BlobDomain),
}

/// Episode sizes. `support` and `query` count points per class for
/// classification and in total for regression.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeShape {
    pub n_way: usize,
    pub support: usize,
    pub query: usize,
}

impl TaskDomain {
    pub fn is_classification(&self) -> bool {
        matches!(self, TaskDomain::Blob(_))
    }

    /// Input width of every task in this family.
    pub fn input_dim(&self) -> usize {
        match self {
            TaskDomain::Sine(_) => 1,
            TaskDomain::Blob(_) => 2,
        }
    }

    pub fn sample_episode<R: Rng + ?Sized>(&self, shape: &EpisodeShape, tag: &str, rng: &mut R) -> Result<Task> {
        self.sample(shape.n_way, shape.support, shape.query, tag, rng)
    }

    /// Support and query sizes are per class for blobs and totals for sine.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        n_way: usize,
        support: usize,
        query: usize,
        tag: &str,
        rng: &mut R,
    ) -> Result<Task> {
        match self {
            TaskDomain::Sine(d) => sample_sine_task(d, support, query, tag, rng),
            TaskDomain::Blob(d) => sample_blob_task(d, n_way, support, query, tag, rng),
        }
    }
}
