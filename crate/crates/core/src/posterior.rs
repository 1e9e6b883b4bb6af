//! Samplers for the finite-width posterior.
//!
//! The posterior reweights the prior by `g = exp(−Σᵢ‖Z⁽ᴸ⁺¹⁾(x(i)) − y(i)‖²)`.
//! Conditionally on the previous layer, `Z⁽ℓ⁾` is linear in the layer
//! parameters `W_B⁽ℓ⁾ = vec((W⁽ℓ⁾ | b⁽ℓ⁾)ᵀ)`, so the layers can be sampled in
//! order:
//!
//! * layer 1 is Gaussian with covariance `K⁽¹⁾` on each row;
//! * layer `ℓ ≥ 2` is drawn by rejection from the prior of `W_B⁽ℓ⁾`, accepting
//!   with the exact likelihood at the last layer and with a clamped Monte
//!   Carlo estimate of `E[g | W_B⁽ℓ⁾, Z⁽ℓ⁻¹⁾]` at hidden layers;
//! * for one hidden layer the last step has a closed form given `Z⁽¹⁾` and
//!   the variances, see [`sample_posterior_shallow`].
//!
//! Whether the layer-1 pre-activations and the variances are themselves
//! reweighted by the data is controlled by [`MixtureWeighting`].

use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::linalg::{hstack, psd_factor, spd_factorize, symmetrize, JitterPolicy, Matrix, SpdFactor, Vector};
use crate::network::{gaussian_log_likelihood, propagate, sample_layer_params, Activation, Architecture, LayerParams};
use crate::random::{sample_std_normal, sample_variance_vector, std_normal_matrix, RngStream};
use crate::wide_limit::{marginal_log_likelihood, MixtureWeighting};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReplicaReuse {
    /// One replica family per layer per output sample.
    #[default]
    PerOutputSample,
    /// A fresh family for every proposal.
    PerProposal,
}

impl ReplicaReuse {
    pub fn name(&self) -> &'static str {
        match self {
            ReplicaReuse::PerOutputSample => "per-output-sample",
            ReplicaReuse::PerProposal => "per-proposal",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "per-output-sample" => Some(ReplicaReuse::PerOutputSample),
            "per-proposal" => Some(ReplicaReuse::PerProposal),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RejectionConfig {
    pub n_replicas: usize,
    pub delta: f64,
    pub max_proposals: u64,
    pub replica_reuse: ReplicaReuse,
    pub weighting: MixtureWeighting,
}

impl Default for RejectionConfig {
    fn default() -> Self {
        Self {
            n_replicas: 100,
            delta: 0.99,
            max_proposals: 1_000_000,
            replica_reuse: ReplicaReuse::PerOutputSample,
            weighting: MixtureWeighting::Likelihood,
        }
    }
}

impl RejectionConfig {
    pub fn new(n_replicas: usize, delta: f64) -> Result<Self> {
        Self {
            n_replicas,
            delta,
            ..Self::default()
        }
        .validated()
    }

    pub fn validated(self) -> Result<Self> {
        if self.n_replicas < 1 {
            return Err(Error::invalid("mc_n", "must be >= 1"));
        }
        if !(self.delta > 0.5 && self.delta < 1.0) {
            return Err(Error::invalid("delta", "must lie strictly between 1/2 and 1"));
        }
        if self.max_proposals < 1 {
            return Err(Error::invalid("max_proposals", "must be >= 1"));
        }
        Ok(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LayerStats {
    pub proposals: u64,
    pub acceptances: u64,
    /// Sum of the acceptance probabilities used, one term per proposal.
    pub acceptance_prob_sum: f64,
    pub wall_time: Duration,
}

impl LayerStats {
    pub fn acceptance_rate(&self) -> f64 {
        if self.proposals == 0 {
            0.0
        } else {
            self.acceptances as f64 / self.proposals as f64
        }
    }

    pub fn mean_acceptance_prob(&self) -> f64 {
        if self.proposals == 0 {
            0.0
        } else {
            self.acceptance_prob_sum / self.proposals as f64
        }
    }

    pub fn merge(&mut self, other: &LayerStats) {
        self.proposals += other.proposals;
        self.acceptances += other.acceptances;
        self.acceptance_prob_sum += other.acceptance_prob_sum;
        self.wall_time += other.wall_time;
    }
}

/// Per-layer counters; `layers[k]` belongs to layer `k + 1`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RejectionStats {
    pub layers: Vec<LayerStats>,
}

impl RejectionStats {
    pub fn with_depth(n_layers: usize) -> Self {
        Self {
            layers: vec![LayerStats::default(); n_layers],
        }
    }

    pub fn layer_mut(&mut self, layer: usize) -> &mut LayerStats {
        if self.layers.len() < layer {
            self.layers.resize(layer, LayerStats::default());
        }
        &mut self.layers[layer - 1]
    }

    pub fn merge(&mut self, other: &RejectionStats) {
        for (k, s) in other.layers.iter().enumerate() {
            self.layer_mut(k + 1).merge(s);
        }
    }
}

/// Covariance shared by the rows of `Z⁽¹⁾`:
/// `(𝐱ᵀ|𝟏) diag(C_W/n₀, …, C_W/n₀, C_B) (𝐱ᵀ|𝟏)ᵀ`, the ones column dropped when
/// `C_B = 0`.
pub fn layer1_covariance(x: &Matrix, arch: &Architecture) -> Matrix {
    let n0 = x.nrows();
    let d = x.ncols();
    let design = if arch.has_bias() {
        hstack(&x.transpose(), &Matrix::from_element(d, 1, 1.0)).expect("same row count")
    } else {
        x.transpose()
    };
    let mut scale = vec![arch.c_w() / n0 as f64; n0];
    if arch.has_bias() {
        scale.push(arch.c_b());
    }
    let mut scaled = design.clone();
    for (j, mut col) in scaled.column_iter_mut().enumerate() {
        col *= scale[j];
    }
    symmetrize(&(scaled * design.transpose()))
}

/// Layer-1 pre-activations `Z⁽¹⁾ ∈ ℝ^{n₁×d}` drawn from their prior law.
pub fn sample_z1(rng: &mut RngStream, x: &Matrix, arch: &Architecture) -> Result<Matrix> {
    if x.nrows() != arch.n_in() {
        return Err(Error::invalid(
            "shape",
            format!("inputs have {} rows, architecture expects {}", x.nrows(), arch.n_in()),
        ));
    }
    let f = psd_factor(&layer1_covariance(x, arch))?;
    let g = std_normal_matrix(rng, arch.width(1), x.ncols());
    Ok(g * f.transpose())
}

/// A prior proposal for the parameters of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightDraw {
    pub params: LayerParams,
    pub has_bias: bool,
}

impl WeightDraw {
    /// `vec((W | b)ᵀ)`: row `h` of the weights followed by `b_h`, for each
    /// unit `h` in turn. Without bias the `b_h` slots are omitted.
    pub fn w_b(&self) -> Vector {
        let w = &self.params.weights;
        let m = if self.has_bias {
            hstack(w, &Matrix::from_column_slice(w.nrows(), 1, self.params.bias.as_slice()))
                .expect("same row count")
        } else {
            w.clone()
        };
        crate::linalg::vec(&m.transpose())
    }

    pub fn variances(&self) -> &Vector {
        &self.params.variances
    }
}

/// Draws the variances `V⁽ℓ⁻¹⁾` and then the Gaussian weights and bias of
/// layer `ℓ ∈ 2..=L+1` given them.
pub fn prior_weight_draw(rng: &mut RngStream, arch: &Architecture, layer: usize) -> WeightDraw {
    assert!(layer >= 2 && layer <= arch.depth() + 1, "layer {layer} has no weight prior mixture");
    WeightDraw {
        params: sample_layer_params(rng, arch, layer),
        has_bias: arch.has_bias(),
    }
}

/// `exp(−Σᵢ‖b + W·σ(z_L(i)) − y(i)‖²)`; may underflow to 0.
pub fn acceptance_exact_last(
    last: &LayerParams,
    z_l: &Matrix,
    y: &Matrix,
    activation: &Activation,
) -> Result<f64> {
    Ok(gaussian_log_likelihood(&last.phi_sigma(z_l, activation)?, y)?.exp())
}

pub fn clamp_psi(psi: f64, delta: f64) -> f64 {
    psi.max(1.0 - delta).min(delta)
}

/// Average of `psi` values clamped to `[1 − δ, δ]`. The result is clamped
/// once more so that summation rounding cannot leave the band.
pub fn clamped_mean(psi: &[f64], delta: f64) -> f64 {
    clamp_psi(psi.iter().map(|&p| clamp_psi(p, delta)).sum::<f64>() / psi.len() as f64, delta)
}

/// `N` independent prior draws of the parameters of layers `first..=L+1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicaFamily {
    pub first_layer: usize,
    pub replicas: Vec<Vec<LayerParams>>,
}

impl ReplicaFamily {
    pub fn draw(rng: &mut RngStream, arch: &Architecture, first_layer: usize, n: usize) -> Self {
        let last = arch.depth() + 1;
        assert!(first_layer >= 2 && first_layer <= last);
        let replicas = (0..n)
            .map(|_| (first_layer..=last).map(|l| sample_layer_params(rng, arch, l)).collect())
            .collect();
        Self { first_layer, replicas }
    }

    pub fn len(&self) -> usize {
        self.replicas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.replicas.is_empty()
    }

    /// `Ψ_r = g(output of replica r started from z, y)` for every replica.
    pub fn psi(&self, z: &Matrix, y: &Matrix, activation: &Activation) -> Result<Vec<f64>> {
        self.replicas
            .iter()
            .map(|rep| Ok(gaussian_log_likelihood(&propagate(rep, z, activation)?, y)?.exp()))
            .collect()
    }
}

/// Clamped Monte Carlo estimate of `E[g | Z⁽ℓ⁾ = z]` over the replica family.
pub fn acceptance_estimate_from_z(
    replicas: &ReplicaFamily,
    z: &Matrix,
    y: &Matrix,
    delta: f64,
    activation: &Activation,
) -> Result<f64> {
    Ok(clamped_mean(&replicas.psi(z, y, activation)?, delta))
}

/// `Î_B`: the proposal for layer `ℓ` is applied to `z_prev`, then each
/// replica carries the result through layers `ℓ+1..=L+1`.
pub fn acceptance_estimate(
    replicas: &ReplicaFamily,
    proposal: &LayerParams,
    z_prev: &Matrix,
    y: &Matrix,
    delta: f64,
    activation: &Activation,
) -> Result<f64> {
    let z = proposal.phi_sigma(z_prev, activation)?;
    acceptance_estimate_from_z(replicas, &z, y, delta, activation)
}

/// Draws `Z⁽ℓ⁾` given `Z⁽ℓ⁻¹⁾ = z_prev` for `ℓ ∈ 2..=L+1`.
///
/// Proposals come from the prior mixture (fresh variances each time). A
/// proposal is kept when a uniform falls below `I_B` (last layer) or below
/// the clamped estimate `Î_B` (hidden layers).
pub fn rejection_step(
    rng: &mut RngStream,
    z_prev: &Matrix,
    arch: &Architecture,
    layer: usize,
    cfg: &RejectionConfig,
    y: &Matrix,
) -> Result<(Matrix, LayerStats)> {
    let last = arch.depth() + 1;
    assert!(layer >= 2 && layer <= last, "rejection step needs 2 <= layer <= L+1");
    let start = Instant::now();
    let act = arch.activation();
    let fixed = if layer < last && cfg.replica_reuse == ReplicaReuse::PerOutputSample {
        Some(ReplicaFamily::draw(rng, arch, layer + 1, cfg.n_replicas))
    } else {
        None
    };
    let mut stats = LayerStats::default();
    while stats.proposals < cfg.max_proposals {
        let draw = prior_weight_draw(rng, arch, layer);
        let z = draw.params.phi_sigma(z_prev, act)?;
        stats.proposals += 1;
        let accept = if layer == last {
            let log_i = gaussian_log_likelihood(&z, y)?;
            stats.acceptance_prob_sum += log_i.exp();
            rng.open01().ln() <= log_i
        } else {
            let fresh = if fixed.is_none() {
                Some(ReplicaFamily::draw(rng, arch, layer + 1, cfg.n_replicas))
            } else {
                None
            };
            let family = fresh.as_ref().or(fixed.as_ref()).expect("hidden layer has replicas");
            let est = acceptance_estimate_from_z(family, &z, y, cfg.delta, act)?;
            stats.acceptance_prob_sum += est;
            rng.open01() <= est
        };
        if accept {
            stats.acceptances += 1;
            stats.wall_time = start.elapsed();
            return Ok((z, stats));
        }
    }
    Err(Error::ProposalBudgetExceeded {
        layer,
        proposals: stats.proposals,
    })
}

/// Layer-1 step of the deep sampler under [`MixtureWeighting::Likelihood`]:
/// `Z⁽¹⁾` proposed from its prior law and accepted with the clamped estimate
/// of `E[g | Z⁽¹⁾]` over replicas of layers `2..=L+1`.
pub fn layer1_rejection_step(
    rng: &mut RngStream,
    x: &Matrix,
    arch: &Architecture,
    cfg: &RejectionConfig,
    y: &Matrix,
) -> Result<(Matrix, LayerStats)> {
    let start = Instant::now();
    let act = arch.activation();
    let f = psd_factor(&layer1_covariance(x, arch))?;
    let fixed = if cfg.replica_reuse == ReplicaReuse::PerOutputSample {
        Some(ReplicaFamily::draw(rng, arch, 2, cfg.n_replicas))
    } else {
        None
    };
    let mut stats = LayerStats::default();
    while stats.proposals < cfg.max_proposals {
        let z1 = std_normal_matrix(rng, arch.width(1), x.ncols()) * f.transpose();
        stats.proposals += 1;
        let fresh = if fixed.is_none() {
            Some(ReplicaFamily::draw(rng, arch, 2, cfg.n_replicas))
        } else {
            None
        };
        let family = fresh.as_ref().or(fixed.as_ref()).expect("replicas drawn");
        let est = acceptance_estimate_from_z(family, &z1, y, cfg.delta, act)?;
        stats.acceptance_prob_sum += est;
        if rng.open01() <= est {
            stats.acceptances += 1;
            stats.wall_time = start.elapsed();
            return Ok((z1, stats));
        }
    }
    Err(Error::ProposalBudgetExceeded {
        layer: 1,
        proposals: stats.proposals,
    })
}

fn check_data(arch: &Architecture, x: &Matrix, y: &Matrix) -> Result<()> {
    if x.nrows() != arch.n_in() || y.nrows() != arch.n_out() || x.ncols() != y.ncols() {
        return Err(Error::invalid(
            "shape",
            format!(
                "inputs {:?} and targets {:?} do not fit widths {:?}",
                x.shape(),
                y.shape(),
                arch.widths()
            ),
        ));
    }
    Ok(())
}

/// One posterior draw of `Z⁽ᴸ⁺¹⁾` by layered rejection.
pub fn sample_posterior_deep(
    rng: &mut RngStream,
    arch: &Architecture,
    x: &Matrix,
    y: &Matrix,
    cfg: &RejectionConfig,
) -> Result<(Matrix, RejectionStats)> {
    check_data(arch, x, y)?;
    let mut stats = RejectionStats::with_depth(arch.depth() + 1);
    let mut z = match cfg.weighting {
        MixtureWeighting::Likelihood => {
            let (z1, s) = layer1_rejection_step(rng, x, arch, cfg, y)?;
            *stats.layer_mut(1) = s;
            z1
        }
        MixtureWeighting::Prior => sample_z1(rng, x, arch)?,
    };
    for layer in 2..=arch.depth() + 1 {
        let (next, s) = rejection_step(rng, &z, arch, layer, cfg, y)?;
        *stats.layer_mut(layer) = s;
        z = next;
    }
    Ok((z, stats))
}

/// Gaussian law of the last layer given `Z⁽¹⁾` and `V⁽¹⁾` in a one-hidden-layer
/// network.
///
/// With `Φ = (σ(z⁽¹⁾)ᵀ | 𝟏)` (`d × (n₁+1)`, no ones column when `C_B = 0`),
/// the weights `W_B⁽²⁾` have rows `𝒩(μ_r, S⁻¹)` where
/// `S = 2ΦᵀΦ + diag(C_W V, C_B)⁻¹` and `μ = 2𝐲ΦS⁻¹`; the output is `W_B Φᵀ`.
#[derive(Debug, Clone)]
pub struct ShallowConditional {
    pub phi: Matrix,
    pub prior_diag: Vector,
    pub s: Matrix,
    pub s_factor: SpdFactor,
    pub mu: Matrix,
}

impl ShallowConditional {
    pub fn new(z1: &Matrix, v: &Vector, arch: &Architecture, y: &Matrix) -> Result<Self> {
        let d = z1.ncols();
        let sig = arch.activation().apply_matrix(z1).transpose();
        let phi = if arch.has_bias() {
            hstack(&sig, &Matrix::from_element(d, 1, 1.0))?
        } else {
            sig
        };
        let mut prior_diag: Vec<f64> = v.iter().map(|&vj| arch.c_w() * vj).collect();
        if arch.has_bias() {
            prior_diag.push(arch.c_b());
        }
        let prior_diag = Vector::from_vec(prior_diag);
        let mut s = phi.transpose() * &phi * 2.0;
        for (k, &p) in prior_diag.iter().enumerate() {
            s[(k, k)] += 1.0 / p;
        }
        let s = symmetrize(&s);
        let s_factor = spd_factorize(&s, JitterPolicy::Escalating)?;
        let mu = crate::linalg::spd_solve(&s_factor, &(&phi.transpose() * y.transpose() * 2.0))?.transpose();
        Ok(Self {
            phi,
            prior_diag,
            s,
            s_factor,
            mu,
        })
    }

    /// `ν = μ Φᵀ`, the `n₂ × d` conditional mean.
    pub fn mean(&self) -> Matrix {
        &self.mu * self.phi.transpose()
    }

    /// `Φ S⁻¹ Φᵀ`, the covariance shared by the output rows.
    pub fn row_covariance(&self) -> Matrix {
        let t = crate::linalg::spd_solve(&self.s_factor, &self.phi.transpose()).expect("dims match");
        symmetrize(&(&self.phi * t))
    }

    /// Prior kernel of the output rows given `(z⁽¹⁾, V)`: `Φ diag(C_W V, C_B) Φᵀ`.
    pub fn prior_kernel(&self) -> Matrix {
        let mut scaled = self.phi.clone();
        for (j, mut col) in scaled.column_iter_mut().enumerate() {
            col *= self.prior_diag[j];
        }
        symmetrize(&(scaled * self.phi.transpose()))
    }

    pub fn sample(&self, rng: &mut RngStream) -> Matrix {
        let n_out = self.mu.nrows();
        let p = self.mu.ncols();
        let mut w = Matrix::zeros(n_out, p);
        for r in 0..n_out {
            let g = sample_std_normal(rng, p);
            let row = self.mu.row(r).transpose() + self.s_factor.solve_upper(&g);
            w.set_row(r, &row.transpose());
        }
        w * self.phi.transpose()
    }
}

/// One posterior draw of `Z⁽²⁾` for a one-hidden-layer network.
///
/// `(Z⁽¹⁾, V⁽¹⁾)` are proposed from the prior. Under
/// [`MixtureWeighting::Likelihood`] a proposal is kept with probability
/// `E[g | Z⁽¹⁾, V⁽¹⁾]`, which is available in closed form; under
/// [`MixtureWeighting::Prior`] the first proposal is used. The output is then
/// drawn from [`ShallowConditional`].
pub fn sample_posterior_shallow(
    rng: &mut RngStream,
    arch: &Architecture,
    x: &Matrix,
    y: &Matrix,
    weighting: MixtureWeighting,
    max_proposals: u64,
) -> Result<(Matrix, RejectionStats)> {
    if arch.depth() != 1 {
        return Err(Error::invalid("depth", "the shallow sampler needs exactly one hidden layer"));
    }
    check_data(arch, x, y)?;
    let start = Instant::now();
    let f = psd_factor(&layer1_covariance(x, arch))?;
    let n1 = arch.width(1);
    let mut stats = RejectionStats::with_depth(2);
    let mut layer = LayerStats::default();
    loop {
        if layer.proposals >= max_proposals {
            return Err(Error::ProposalBudgetExceeded {
                layer: 1,
                proposals: layer.proposals,
            });
        }
        let z1 = std_normal_matrix(rng, n1, x.ncols()) * f.transpose();
        let v = sample_variance_vector(rng, arch.variance_model(1), n1);
        let cond = ShallowConditional::new(&z1, &v, arch, y)?;
        layer.proposals += 1;
        if weighting == MixtureWeighting::Likelihood {
            let log_m = marginal_log_likelihood(&cond.prior_kernel(), y)?;
            layer.acceptance_prob_sum += log_m.exp();
            if rng.open01().ln() > log_m {
                continue;
            }
        } else {
            layer.acceptance_prob_sum += 1.0;
        }
        layer.acceptances += 1;
        layer.wall_time = start.elapsed();
        *stats.layer_mut(1) = layer;
        let out = cond.sample(rng);
        return Ok((out, stats));
    }
}
