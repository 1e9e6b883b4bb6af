//! The wide-width limit.
//!
//! When every hidden width goes to infinity the output on `d` inputs becomes a
//! Gaussian mixture `𝒩(0, Id ⊗ K⁽ᴸ⁺¹⁾)` driven by a Markov chain of `d×d`
//! kernels:
//!
//! ```text
//! K⁽¹⁾ = C_B 𝟏𝟏ᵀ + C_W 𝐱ᵀ𝐱 / n₀
//! K⁽ℓ⁺¹⁾ = C_B 𝟏𝟏ᵀ + C_W ( a⁽ℓ⁾ E[σ(ζ)σ(ζ)ᵀ | K⁽ℓ⁾] + Σ_j T_j σ(ζ_j)σ(ζ_j)ᵀ )
//! ```
//!
//! where `ζ, ζ_j ~ 𝒩(0, K⁽ℓ⁾)` and `T_j` are the points of a Poisson process with
//! the Lévy measure of the per-layer variance sum. The expectation is a Monte
//! Carlo average, so arbitrary activations work; its standard errors are kept
//! alongside the chain.

use crate::error::{Error, LinalgError, Result};
use crate::linalg::{psd_factor, spd_factorize, symmetrize, JitterPolicy, Matrix, Vector, SYMMETRY_TOL};
use crate::network::{Activation, Architecture};
use crate::random::{sample_poisson_points, std_normal, std_normal_matrix, RngStream, VarianceModel, DEFAULT_POISSON_EPS};

/// Default number of Monte Carlo draws for the expectation term.
pub const DEFAULT_LIMIT_MC: usize = 100_000;

/// Default cap on chain realizations per draw when reweighting by the marginal
/// likelihood.
pub const DEFAULT_CHAIN_ATTEMPTS: u64 = 10_000_000;

/// Relative size below which negative eigenvalues count as roundoff.
pub const PSD_EIGEN_TOL: f64 = 1e-10;

/// `E[WE²]` for `WE ~ Weibull(1, 1/2)`.
pub const MODEL1_DRIFT: f64 = 24.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LevyMeasure {
    None,
    /// `x^{-3/2} dx` on `(0, ∞)`, points below `eps` dropped.
    InvSqrtCube { eps: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerLimit {
    pub drift: f64,
    pub levy: LevyMeasure,
}

impl LayerLimit {
    /// Limit of `Σ_j V_j` for `n` i.i.d. variances of the given model.
    pub fn for_model(model: VarianceModel, eps: f64) -> Self {
        match model {
            VarianceModel::Fixed => LayerLimit {
                drift: 1.0,
                levy: LevyMeasure::None,
            },
            VarianceModel::Model1 => LayerLimit {
                drift: MODEL1_DRIFT,
                levy: LevyMeasure::None,
            },
            VarianceModel::Model2 => LayerLimit {
                drift: 0.0,
                levy: LevyMeasure::InvSqrtCube { eps },
            },
        }
    }

    pub fn is_random(&self) -> bool {
        !matches!(self.levy, LevyMeasure::None)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LimitSpec {
    layers: Vec<LayerLimit>,
    mc_samples: usize,
}

impl LimitSpec {
    pub fn new(layers: Vec<LayerLimit>, mc_samples: usize) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("limit_spec", "need at least one hidden layer"));
        }
        for (k, l) in layers.iter().enumerate() {
            let layer = k + 1;
            if !(l.drift >= 0.0) || !l.drift.is_finite() {
                return Err(Error::invalid("drift", format!("layer {layer}: must be finite and >= 0")));
            }
            match l.levy {
                LevyMeasure::None if l.drift == 0.0 => {
                    return Err(Error::invalid(
                        "limit_spec",
                        format!("layer {layer}: zero drift without a Levy part gives a degenerate kernel"),
                    ))
                }
                LevyMeasure::InvSqrtCube { eps } if !(eps > 0.0) => {
                    return Err(Error::invalid("poisson_eps", "must be > 0"));
                }
                _ => {}
            }
        }
        if mc_samples < 2 && layers.iter().any(|l| l.drift > 0.0) {
            return Err(Error::invalid("limit_mc", "need at least 2 Monte Carlo draws"));
        }
        Ok(Self { layers, mc_samples })
    }

    pub fn from_architecture(arch: &Architecture, mc_samples: usize, eps: f64) -> Result<Self> {
        Self::new(
            arch.variance_models()
                .iter()
                .map(|&m| LayerLimit::for_model(m, eps))
                .collect(),
            mc_samples,
        )
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[LayerLimit] {
        &self.layers
    }

    pub fn mc_samples(&self) -> usize {
        self.mc_samples
    }

    /// True when no layer carries a Lévy part, so the chain is a fixed
    /// sequence (up to Monte Carlo error).
    pub fn is_deterministic(&self) -> bool {
        self.layers.iter().all(|l| !l.is_random())
    }
}

/// Everything the limit needs besides the data.
#[derive(Debug, Clone)]
pub struct LimitModel {
    pub spec: LimitSpec,
    pub n_out: usize,
    pub c_b: f64,
    pub c_w: f64,
    pub activation: Activation,
}

impl LimitModel {
    pub fn from_architecture(arch: &Architecture, mc_samples: usize, eps: f64) -> Result<Self> {
        Ok(Self {
            spec: LimitSpec::from_architecture(arch, mc_samples, eps)?,
            n_out: arch.n_out(),
            c_b: arch.c_b(),
            c_w: arch.c_w(),
            activation: arch.activation().clone(),
        })
    }

    pub fn with_defaults(arch: &Architecture) -> Result<Self> {
        Self::from_architecture(arch, DEFAULT_LIMIT_MC, DEFAULT_POISSON_EPS)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelChain {
    /// `K⁽¹⁾, …, K⁽ᴸ⁺¹⁾`.
    pub kernels: Vec<Matrix>,
    /// Entrywise Monte Carlo standard errors; zero for `K⁽¹⁾`.
    pub stderr: Vec<Matrix>,
    /// Number of Poisson points used at each step.
    pub levy_points: Vec<usize>,
    /// Sum over steps of the neglected Lévy mass bounds.
    pub neglected_mass: f64,
    pub seed: u64,
    pub stream: u64,
    pub mc_samples: usize,
}

impl KernelChain {
    pub fn last(&self) -> &Matrix {
        self.kernels.last().expect("chain is never empty")
    }
}

/// `K⁽¹⁾[i, i'] = C_B + C_W ⟨x(i), x(i')⟩ / n₀`.
pub fn k1(x: &Matrix, c_b: f64, c_w: f64) -> Matrix {
    let n0 = x.nrows() as f64;
    let d = x.ncols();
    let mut k = x.transpose() * x * (c_w / n0);
    k.add_scalar_mut(c_b);
    debug_assert_eq!(k.shape(), (d, d));
    symmetrize(&k)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelStep {
    pub kernel: Matrix,
    pub stderr: Matrix,
    pub levy_points: usize,
    pub neglected_mass: f64,
}

/// One transition `K⁽ℓ⁾ → K⁽ℓ⁺¹⁾` of the kernel chain.
///
/// The expectation is estimated from `mc_samples` draws of `ζ ~ 𝒩(0, K_prev)`
/// (skipped when the drift is zero); the Lévy sum uses one fresh `ζ_j` per
/// Poisson point.
pub fn k_step(
    rng: &mut RngStream,
    k_prev: &Matrix,
    layer: &LayerLimit,
    mc_samples: usize,
    c_b: f64,
    c_w: f64,
    activation: &Activation,
) -> Result<KernelStep> {
    if layer.drift == 0.0 && !layer.is_random() {
        return Err(Error::invalid("limit_spec", "zero drift without a Levy part"));
    }
    let d = k_prev.nrows();
    let factor = spd_factorize(k_prev, JitterPolicy::Escalating)?;
    let lower = factor.lower();
    let mut sum = Matrix::zeros(d, d);
    let mut stderr = Matrix::zeros(d, d);

    if layer.drift > 0.0 {
        let m = mc_samples;
        let mut s1 = Matrix::zeros(d, d);
        let mut s2 = Matrix::zeros(d, d);
        let mut z = Vector::zeros(d);
        let mut s = Vector::zeros(d);
        for _ in 0..m {
            for v in z.iter_mut() {
                *v = std_normal(rng);
            }
            lower.mul_to(&z, &mut s);
            s.apply(|v| *v = activation.apply(*v));
            for j in 0..d {
                for i in j..d {
                    let p = s[i] * s[j];
                    s1[(i, j)] += p;
                    s2[(i, j)] += p * p;
                }
            }
        }
        let mf = m as f64;
        for j in 0..d {
            for i in j..d {
                let mean = s1[(i, j)] / mf;
                let var = ((s2[(i, j)] - mf * mean * mean) / (mf - 1.0)).max(0.0);
                let se = (var / mf).sqrt();
                for (a, b) in [(i, j), (j, i)] {
                    sum[(a, b)] = layer.drift * mean;
                    stderr[(a, b)] = c_w * layer.drift * se;
                }
            }
        }
    }

    let mut levy_points = 0;
    let mut neglected_mass = 0.0;
    if let LevyMeasure::InvSqrtCube { eps } = layer.levy {
        let series = sample_poisson_points(rng, eps);
        let mut z = Vector::zeros(d);
        let mut s = Vector::zeros(d);
        for &t in &series.points {
            for v in z.iter_mut() {
                *v = std_normal(rng);
            }
            lower.mul_to(&z, &mut s);
            s.apply(|v| *v = activation.apply(*v));
            for j in 0..d {
                let tj = t * s[j];
                if tj == 0.0 {
                    continue;
                }
                for i in 0..d {
                    sum[(i, j)] += tj * s[i];
                }
            }
        }
        levy_points = series.len();
        neglected_mass = series.neglected_mass;
    }

    let mut kernel = sum * c_w;
    kernel.add_scalar_mut(c_b);
    Ok(KernelStep {
        kernel: symmetrize(&kernel),
        stderr,
        levy_points,
        neglected_mass,
    })
}

/// One realization of `K⁽¹⁾, …, K⁽ᴸ⁺¹⁾`.
pub fn build_chain(rng: &mut RngStream, x: &Matrix, model: &LimitModel) -> Result<KernelChain> {
    let (seed, stream) = (rng.seed(), rng.stream());
    let first = k1(x, model.c_b, model.c_w);
    let d = first.nrows();
    let mut chain = KernelChain {
        kernels: vec![first],
        stderr: vec![Matrix::zeros(d, d)],
        levy_points: Vec::new(),
        neglected_mass: 0.0,
        seed,
        stream,
        mc_samples: model.spec.mc_samples(),
    };
    for layer in model.spec.layers() {
        let step = k_step(
            rng,
            chain.last(),
            layer,
            model.spec.mc_samples(),
            model.c_b,
            model.c_w,
            &model.activation,
        )?;
        chain.kernels.push(step.kernel);
        chain.stderr.push(step.stderr);
        chain.levy_points.push(step.levy_points);
        chain.neglected_mass += step.neglected_mass;
    }
    check_kernel(chain.last())?;
    Ok(chain)
}

/// Symmetry and factorizability check applied to terminal kernels.
pub fn check_kernel(k: &Matrix) -> Result<()> {
    let scale = k.amax().max(f64::MIN_POSITIVE);
    if (k - k.transpose()).amax() > SYMMETRY_TOL * scale {
        return Err(crate::error::LinalgError::NotSymmetric {
            asymmetry: (k - k.transpose()).amax() / scale,
        }
        .into());
    }
    spd_factorize(k, JitterPolicy::Escalating)?;
    Ok(())
}

/// Gaussian posterior of a `𝒩(0, Id ⊗ K)` output under the likelihood
/// `exp(−Σᵢ‖ξ(i) − y(i)‖²)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LimitPosterior {
    /// `D = 2·I + K⁻¹`.
    pub d: Matrix,
    /// `D⁻¹`, the covariance shared by every output row.
    pub d_inv: Matrix,
    /// `2·Y·D⁻¹`, the `n_out × d` mean.
    pub mean: Matrix,
}

impl LimitPosterior {
    /// Row-by-row vectorized mean, `vec((2·Y·D⁻¹)ᵀ)`.
    pub fn lambda(&self) -> Vector {
        crate::linalg::vec(&self.mean.transpose())
    }

    pub fn sample(&self, rng: &mut RngStream) -> Result<Matrix> {
        let f = psd_factor(&self.d_inv)?;
        let g = std_normal_matrix(rng, self.mean.nrows(), self.mean.ncols());
        Ok(&self.mean + g * f.transpose())
    }
}

/// Spectrum of a symmetric PSD matrix with roundoff-level negative
/// eigenvalues set to zero. Kernels with Lévy jumps can span many orders of
/// magnitude, where a Cholesky factor of `I + 2K` or of `K` loses the small
/// directions to cancellation; the symmetric eigensolver does not.
fn psd_spectrum(k: &Matrix) -> Result<(Vector, Matrix)> {
    if !k.is_square() {
        return Err(LinalgError::NotSquare { shape: k.shape() }.into());
    }
    if !crate::linalg::is_finite(k) {
        return Err(LinalgError::NonFinite.into());
    }
    let eig = symmetrize(k).symmetric_eigen();
    let top = eig.eigenvalues.amax();
    if eig.eigenvalues.iter().any(|&l| l < -PSD_EIGEN_TOL * top.max(1.0)) {
        return Err(LinalgError::NotPd { dim: k.nrows(), jitter: 0.0 }.into());
    }
    Ok((eig.eigenvalues.map(|l| l.max(0.0)), eig.eigenvectors))
}

/// `D = 2I + K⁻¹`, `D⁻¹ = K(I + 2K)⁻¹` and the mean `2·Y·D⁻¹`, all from the
/// spectrum of `K`.
pub fn limit_posterior_params(k: &Matrix, y: &Matrix) -> Result<LimitPosterior> {
    if y.ncols() != k.nrows() {
        return Err(Error::invalid(
            "shape",
            format!("targets {:?} vs kernel {:?}", y.shape(), k.shape()),
        ));
    }
    let (lambda, u) = psd_spectrum(k)?;
    if lambda.iter().any(|&l| l == 0.0) {
        return Err(LinalgError::NotPd { dim: k.nrows(), jitter: 0.0 }.into());
    }
    let d = symmetrize(&(&u * Matrix::from_diagonal(&lambda.map(|l| 2.0 + 1.0 / l)) * u.transpose()));
    let d_inv = symmetrize(&(&u * Matrix::from_diagonal(&lambda.map(|l| l / (1.0 + 2.0 * l))) * u.transpose()));
    let mean = y * &d_inv * 2.0;
    Ok(LimitPosterior { d, d_inv, mean })
}

/// `log E[exp(−Σᵢ‖ξ(i) − y(i)‖²)]` for `ξ ~ 𝒩(0, Id ⊗ K)`:
/// `−(n_out/2)·log det(I + 2K) − Tr(Y (I + 2K)⁻¹ Yᵀ)`.
///
/// `K` only needs to be positive semidefinite. The value is always `≤ 0`.
pub fn marginal_log_likelihood(k: &Matrix, y: &Matrix) -> Result<f64> {
    if y.ncols() != k.nrows() {
        return Err(Error::invalid(
            "shape",
            format!("targets {:?} vs kernel {:?}", y.shape(), k.shape()),
        ));
    }
    let (lambda, u) = psd_spectrum(k)?;
    let proj = y * &u;
    let mut log_det = 0.0;
    let mut quad = 0.0;
    for (i, &l) in lambda.iter().enumerate() {
        log_det += (2.0 * l).ln_1p();
        quad += proj.column(i).norm_squared() / (1.0 + 2.0 * l);
    }
    Ok(-0.5 * y.nrows() as f64 * log_det - quad)
}

/// How mixing variables (here the random kernel) are treated when
/// conditioning on data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MixtureWeighting {
    /// Mixing variables follow their posterior: prior reweighted by the
    /// marginal likelihood of the data given them.
    #[default]
    Likelihood,
    /// Mixing variables keep their prior law; only the Gaussian part is
    /// conditioned.
    Prior,
}

impl MixtureWeighting {
    pub fn name(&self) -> &'static str {
        match self {
            MixtureWeighting::Likelihood => "likelihood",
            MixtureWeighting::Prior => "prior",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "likelihood" => Some(MixtureWeighting::Likelihood),
            "prior" => Some(MixtureWeighting::Prior),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LimitDraw {
    pub sample: Matrix,
    pub posterior: LimitPosterior,
    /// Chain realizations generated, including rejected ones.
    pub attempts: u64,
}

/// One draw of the limit output conditioned on the data.
///
/// A chain is built and `(λ, D)` computed from its last kernel. With
/// [`MixtureWeighting::Likelihood`] and a random chain, each realization is
/// kept with probability `m(K) = E[g | K]`; deterministic chains skip this.
pub fn sample_limit_posterior(
    rng: &mut RngStream,
    x: &Matrix,
    y: &Matrix,
    model: &LimitModel,
    weighting: MixtureWeighting,
    max_attempts: u64,
) -> Result<LimitDraw> {
    if y.nrows() != model.n_out || y.ncols() != x.ncols() {
        return Err(Error::invalid(
            "shape",
            format!("targets {:?}, expected {}x{}", y.shape(), model.n_out, x.ncols()),
        ));
    }
    let reweight = weighting == MixtureWeighting::Likelihood && !model.spec.is_deterministic();
    let mut attempts = 0u64;
    loop {
        if attempts >= max_attempts {
            return Err(Error::ProposalBudgetExceeded {
                layer: 0,
                proposals: attempts,
            });
        }
        attempts += 1;
        let chain = build_chain(rng, x, model)?;
        let k = chain.last();
        if reweight {
            let log_m = marginal_log_likelihood(k, y)?;
            if rng.open01().ln() > log_m {
                continue;
            }
        }
        let posterior = limit_posterior_params(k, y)?;
        let sample = posterior.sample(rng)?;
        return Ok(LimitDraw {
            sample,
            posterior,
            attempts,
        });
    }
}

/// One draw of the limit output under the prior, rows i.i.d. `𝒩(0, K⁽ᴸ⁺¹⁾)`.
pub fn sample_limit_prior(rng: &mut RngStream, x: &Matrix, model: &LimitModel) -> Result<Matrix> {
    let chain = build_chain(rng, x, model)?;
    let f = psd_factor(chain.last())?;
    let g = std_normal_matrix(rng, model.n_out, x.ncols());
    Ok(g * f.transpose())
}
