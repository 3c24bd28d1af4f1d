//! Batch coordinate-ascent variational inference.
//!
//! Every operation is written once and applied to either side; the item side
//! uses ν₀, β and the transposed adjacency.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::empirical::run_evb_pass_batch;
use crate::error::{HemfError, Result, ResultExt};
use crate::math::{pd_inverse_and_solve, symmetrize, SymmetricPd};
use crate::model::{
    compute_elbo, init_state, CommunityPosterior, CommunityStats, CommunityUpdate, FactorPosterior,
    Hyperparameters, MembershipPosterior, ModelState, Side, SideState, StickPosterior,
};
use crate::ratings::SparseRatings;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Factors,
    Memberships,
    Sticks,
    Communities,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Factors => "factors",
            Phase::Memberships => "memberships",
            Phase::Sticks => "sticks",
            Phase::Communities => "communities",
        }
    }
}

/// The fixed phase order of one sweep.
pub const SWEEP_ORDER: [(Side, Phase); 8] = [
    (Side::User, Phase::Factors),
    (Side::User, Phase::Memberships),
    (Side::User, Phase::Sticks),
    (Side::User, Phase::Communities),
    (Side::Item, Phase::Factors),
    (Side::Item, Phase::Memberships),
    (Side::Item, Phase::Sticks),
    (Side::Item, Phase::Communities),
];

/// Likelihood precision σ⁻²Σ⟨bbᵀ⟩ and linear term σ⁻²Σ r⟨b⟩ of one entity.
pub(crate) fn likelihood_stats<I>(opposite: &SideState, neighbors: I, dim: usize, sigma2: f64) -> (DMatrix<f64>, DVector<f64>)
where
    I: IntoIterator<Item = (usize, f64)>,
{
    let mut prec = DMatrix::zeros(dim, dim);
    let mut lin = DVector::zeros(dim);
    for (j, r) in neighbors {
        let b = &opposite.factors[j];
        prec += &b.second_moment;
        lin.axpy(r, &b.mean, 1.0);
    }
    (prec / sigma2, lin / sigma2)
}

/// Gaussian posterior combining a likelihood (precision, linear term) with the
/// membership-weighted community priors.
pub(crate) fn factor_posterior(
    mut prec: DMatrix<f64>,
    mut lin: DVector<f64>,
    q: &MembershipPosterior,
    communities: &[CommunityPosterior],
) -> Result<FactorPosterior> {
    for (c, &w) in communities.iter().zip(&q.weights) {
        if w == 0.0 {
            continue;
        }
        prec += &c.exp_prec * w;
        lin += (&c.exp_prec * &c.mean) * w;
    }
    let (cov, mean) = pd_inverse_and_solve(&symmetrize(prec), &lin)?;
    Ok(FactorPosterior::from_mean_cov(mean, &cov))
}

/// q(a_i) given the opposite-side factors and this side's memberships and communities.
pub fn update_factor(state: &ModelState, ratings: &SparseRatings, side: Side, entity: usize) -> Result<FactorPosterior> {
    let own = state.side(side);
    if entity >= own.n_entities() {
        return Err(HemfError::IndexOutOfRange { what: side.name(), index: entity, len: own.n_entities() });
    }
    let (prec, lin) = likelihood_stats(
        state.side(side.other()),
        ratings.neighbors(side, entity),
        state.latent_dim(),
        state.hyper.sigma2,
    );
    factor_posterior(prec, lin, &own.memberships[entity], &own.communities)
        .context_with(|| format!("{} {entity} factor", side.name()))
}

/// γ(d) = ξ₁(d) + ξ₂(d) for every existing component.
pub fn membership_scores(factor: &FactorPosterior, communities: &[CommunityPosterior], sticks: &StickPosterior) -> Vec<f64> {
    communities
        .iter()
        .zip(sticks.expected_log_weights())
        .map(|(c, xi2)| c.expected_log_density(factor) + xi2)
        .collect()
}

pub fn update_membership(state: &ModelState, side: Side, entity: usize) -> Result<MembershipPosterior> {
    let s = state.side(side);
    let f = s.factors.get(entity).ok_or(HemfError::IndexOutOfRange {
        what: side.name(),
        index: entity,
        len: s.n_entities(),
    })?;
    Ok(MembershipPosterior::from_scores(&membership_scores(f, &s.communities, &s.sticks)))
}

/// Sticks from the current memberships.
pub fn update_sticks(state: &ModelState, side: Side) -> StickPosterior {
    let s = state.side(side);
    let mut mass = vec![0.0; s.n_components()];
    for q in &s.memberships {
        for (m, w) in mass.iter_mut().zip(&q.weights) {
            *m += w;
        }
    }
    StickPosterior::from_mass(&mass, state.hyper.concentration(side))
}

/// NIW posterior of component `d` from its soft sufficient statistics.
pub fn community_from_stats(stats: &CommunityStats, d: usize, hyper: &Hyperparameters, side: Side) -> Result<CommunityPosterior> {
    let rho = stats.mass[d];
    let s = &stats.sum[d];
    let mu0 = hyper.base_mean(side);
    let lambda0 = hyper.lambda0;
    let (mean, kappa) = match hyper.community_update {
        CommunityUpdate::Printed => ((s * lambda0 + mu0) / (lambda0 + rho), (lambda0 + rho) / lambda0),
        CommunityUpdate::Conjugate => ((mu0 * lambda0 + s) / (lambda0 + rho), lambda0 + rho),
    };
    let ms = &mean * s.transpose();
    let diff = &mean - mu0;
    let scale = hyper.w0.as_matrix() + &stats.sum_outer[d] - &ms - ms.transpose()
        + (&mean * mean.transpose()) * rho
        + (&diff * diff.transpose()) * hyper.prior_kappa();
    let scale = SymmetricPd::symmetrized(scale).context_with(|| format!("{} community {d} scale", side.name()))?;
    CommunityPosterior::new(mean, kappa, scale, hyper.iota0 + rho)
}

pub fn update_community(state: &ModelState, side: Side, d: usize) -> Result<CommunityPosterior> {
    let s = state.side(side);
    if d >= s.n_components() {
        return Err(HemfError::IndexOutOfRange { what: "component", index: d, len: s.n_components() });
    }
    let stats = CommunityStats::from_side(&s.factors, &s.memberships, s.n_components(), state.latent_dim());
    community_from_stats(&stats, d, &state.hyper, side)
}

/// Applies one phase to every entity or component of a side.
pub fn run_phase(state: &mut ModelState, ratings: &SparseRatings, side: Side, phase: Phase) -> Result<()> {
    let l = state.latent_dim();
    match phase {
        Phase::Factors => {
            let n = state.side(side).n_entities();
            let snapshot = &*state;
            let factors = (0..n)
                .into_par_iter()
                .map(|i| update_factor(snapshot, ratings, side, i))
                .collect::<Result<Vec<_>>>()?;
            state.side_mut(side).factors = factors;
        }
        Phase::Memberships => {
            let n = state.side(side).n_entities();
            let snapshot = &*state;
            let memberships = (0..n)
                .into_par_iter()
                .map(|i| update_membership(snapshot, side, i))
                .collect::<Result<Vec<_>>>()?;
            state.side_mut(side).memberships = memberships;
        }
        Phase::Sticks => {
            let sticks = update_sticks(state, side);
            let s = state.side_mut(side);
            s.stats = CommunityStats::from_side(&s.factors, &s.memberships, s.n_components(), l);
            s.sticks = sticks;
        }
        Phase::Communities => {
            let hyper = state.hyper.clone();
            let s = state.side_mut(side);
            s.stats = CommunityStats::from_side(&s.factors, &s.memberships, s.n_components(), l);
            s.communities = (0..s.n_components())
                .map(|d| community_from_stats(&s.stats, d, &hyper, side))
                .collect::<Result<Vec<_>>>()?;
        }
    }
    Ok(())
}

/// One full sweep in [`SWEEP_ORDER`]; appends and returns the ELBO.
pub fn run_sweep(state: &mut ModelState, ratings: &SparseRatings) -> Result<f64> {
    state.check_bound(ratings)?;
    for (side, phase) in SWEEP_ORDER {
        run_phase(state, ratings, side, phase)
            .context_with(|| format!("{} {} phase", side.name(), phase.name()))?;
    }
    let elbo = compute_elbo(state, ratings)?;
    state.elbo_trace.push(elbo);
    Ok(elbo)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchConfig {
    pub d_init: usize,
    pub k_init: usize,
    pub seed: u64,
    pub max_sweeps: usize,
    /// Stop when |ΔELBO| < tolerance · |ELBO|.
    pub tolerance: f64,
    /// Run an empirical-Bayes pass after every sweep.
    pub empirical: bool,
}

impl Default for BatchConfig {
    fn default() -> Self {
        BatchConfig { d_init: 1, k_init: 1, seed: 0, max_sweeps: 200, tolerance: 1e-6, empirical: false }
    }
}

impl BatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_sweeps == 0 || !(self.tolerance > 0.0) {
            return Err(HemfError::InvalidConfig("max_sweeps must be >= 1 and tolerance > 0".into()));
        }
        if self.d_init == 0 || self.k_init == 0 {
            return Err(HemfError::InvalidConfig("d_init and k_init must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct BatchFit {
    pub state: ModelState,
    pub sweeps: usize,
    pub converged: bool,
}

pub fn fit_batch(ratings: &SparseRatings, hyper: &Hyperparameters, config: &BatchConfig) -> Result<BatchFit> {
    fit_batch_observed(ratings, hyper, config, |_, _| Ok(()))
}

/// [`fit_batch`] calling `observer(state, sweep)` after every sweep (1-based).
pub fn fit_batch_observed<F>(ratings: &SparseRatings, hyper: &Hyperparameters, config: &BatchConfig, observer: F) -> Result<BatchFit>
where
    F: FnMut(&ModelState, usize) -> Result<()>,
{
    config.validate()?;
    let state = init_state(ratings, hyper, config.d_init, config.k_init, config.seed)?;
    continue_batch(state, ratings, config, observer)
}

/// Runs sweeps from an existing state.
pub fn continue_batch<F>(mut state: ModelState, ratings: &SparseRatings, config: &BatchConfig, mut observer: F) -> Result<BatchFit>
where
    F: FnMut(&ModelState, usize) -> Result<()>,
{
    config.validate()?;
    let mut previous: Option<f64> = None;
    for sweep in 1..=config.max_sweeps {
        let mut elbo = run_sweep(&mut state, ratings).context_with(|| format!("sweep {sweep}"))?;
        if config.empirical {
            elbo = run_evb_pass_batch(&mut state, ratings).context_with(|| format!("empirical pass {sweep}"))?;
        }
        observer(&state, sweep)?;
        if let Some(prev) = previous {
            if (elbo - prev).abs() < config.tolerance * elbo.abs() {
                return Ok(BatchFit { state, sweeps: sweep, converged: true });
            }
        }
        previous = Some(elbo);
    }
    log::debug!("batch inference stopped after {} sweeps without converging", config.max_sweeps);
    Ok(BatchFit { state, sweeps: config.max_sweeps, converged: false })
}
