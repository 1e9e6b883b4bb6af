//! Seeded random generation.
//!
//! Every draw in the crate goes through an [`RngStream`], a ChaCha8 generator
//! keyed by a 64-bit seed and a stream index. Batches give sample `i` the
//! stream `i`, which keeps results independent of how work is scheduled.

use std::f64::consts::PI;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, Open01, StandardNormal};

use crate::error::LinalgError;
use crate::linalg::{psd_factor, Matrix, Vector};

/// Default truncation level of the Poisson point series.
pub const DEFAULT_POISSON_EPS: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, stream, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Uniform draw on the open interval (0, 1).
    pub fn open01(&mut self) -> f64 {
        self.inner.sample(Open01)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

pub fn std_normal(rng: &mut RngStream) -> f64 {
    rng.sample(StandardNormal)
}

pub fn sample_std_normal(rng: &mut RngStream, n: usize) -> Vector {
    Vector::from_fn(n, |_, _| std_normal(rng))
}

/// Standard normal matrix, filled column by column.
pub fn std_normal_matrix(rng: &mut RngStream, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| std_normal(rng))
}

/// Gaussian law `𝒩(mean, F·Fᵀ)` with a precomputed PSD factor `F`.
#[derive(Debug, Clone)]
pub struct Mvn {
    mean: Vector,
    factor: Matrix,
}

impl Mvn {
    pub fn new(mean: Vector, cov: &Matrix) -> Result<Self, LinalgError> {
        if cov.nrows() != mean.len() {
            return Err(LinalgError::DimMismatch {
                op: "mvn",
                left: (mean.len(), 1),
                right: cov.shape(),
            });
        }
        Ok(Self {
            mean,
            factor: psd_factor(cov)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &Vector {
        &self.mean
    }

    pub fn sample(&self, rng: &mut RngStream) -> Vector {
        let z = sample_std_normal(rng, self.dim());
        &self.mean + &self.factor * z
    }
}

/// One draw of `𝒩(mean, cov)`. A zero covariance returns `mean` exactly.
pub fn sample_mvn(rng: &mut RngStream, mean: &Vector, cov: &Matrix) -> Result<Vector, LinalgError> {
    Ok(Mvn::new(mean.clone(), cov)?.sample(rng))
}

pub fn weibull_half_from_uniform(u: f64) -> f64 {
    let e = -u.ln();
    e * e
}

/// Weibull(1, 1/2) variate by inversion; survival function `e^{-√x}`.
pub fn sample_weibull_half(rng: &mut RngStream) -> f64 {
    weibull_half_from_uniform(rng.open01())
}

pub fn half_cauchy_from_uniform(u: f64) -> f64 {
    (0.5 * PI * u).tan()
}

/// Half-Cauchy variate with density `2/(π(1+x²))` on `x > 0`.
pub fn sample_half_cauchy(rng: &mut RngStream) -> f64 {
    half_cauchy_from_uniform(rng.open01())
}

/// Ordered points of a Poisson process with intensity `x^{-3/2} dx` on `(0, ∞)`,
/// truncated below `eps`.
#[derive(Debug, Clone, PartialEq)]
pub struct PoissonPointSeries {
    pub points: Vec<f64>,
    pub eps: f64,
    /// Upper bound on `∫₀^eps x ρ(dx)`, the expected mass of the dropped points.
    pub neglected_mass: f64,
}

impl PoissonPointSeries {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn count_above(&self, level: f64) -> usize {
        self.points.iter().take_while(|&&t| t > level).count()
    }
}

/// Points `T_j = 4 / (E_1 + … + E_j)²` with `E_k` i.i.d. standard exponential.
/// Generation stops at the first point below `eps`, which is not kept.
pub fn sample_poisson_points(rng: &mut RngStream, eps: f64) -> PoissonPointSeries {
    assert!(eps > 0.0, "poisson truncation level must be positive");
    let mut points = Vec::new();
    let mut gamma = 0.0;
    loop {
        let e: f64 = rng.sample(Exp1);
        gamma += e;
        let t = 4.0 / (gamma * gamma);
        if t < eps {
            break;
        }
        points.push(t);
    }
    PoissonPointSeries {
        points,
        eps,
        neglected_mass: 2.0 * eps.sqrt(),
    }
}

/// Law of the per-neuron variances feeding a layer of width `n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum VarianceModel {
    /// `V = 1/n`.
    #[default]
    Fixed,
    /// `V = WE²/n`, `WE ~ Weibull(1, 1/2)`.
    Model1,
    /// `V = π² HC² / n²`, `HC` half-Cauchy.
    Model2,
}

impl VarianceModel {
    pub fn name(&self) -> &'static str {
        match self {
            VarianceModel::Fixed => "fixed",
            VarianceModel::Model1 => "model1",
            VarianceModel::Model2 => "model2",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "fixed" => Some(VarianceModel::Fixed),
            "model1" => Some(VarianceModel::Model1),
            "model2" => Some(VarianceModel::Model2),
            _ => None,
        }
    }

    pub fn draw(&self, rng: &mut RngStream, n: usize) -> f64 {
        let n = n as f64;
        match self {
            VarianceModel::Fixed => 1.0 / n,
            VarianceModel::Model1 => {
                let w = sample_weibull_half(rng);
                w * w / n
            }
            VarianceModel::Model2 => {
                let h = sample_half_cauchy(rng);
                PI * PI * h * h / (n * n)
            }
        }
    }
}

pub fn sample_variance_vector(rng: &mut RngStream, model: VarianceModel, n: usize) -> Vector {
    assert!(n >= 1, "width must be at least 1");
    Vector::from_fn(n, |_, _| model.draw(rng, n))
}
