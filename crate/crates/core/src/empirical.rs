//! Empirical-Bayes hyperparameter updates, interleaved with batch sweeps or online chunks.

use nalgebra::{DMatrix, DVector};

use crate::error::{HemfError, Result};
use crate::math::{digamma_pos, multivariate_digamma, pd_solve, symmetrize, SymmetricPd};
use crate::model::elbo::{expected_squared_residual, w0_logdet};
use crate::model::{compute_elbo, CommunityPosterior, CommunityUpdate, ModelState, Side};
use crate::ratings::{Rating, SparseRatings};

pub const SIGMA2_FLOOR: f64 = 1e-8;
pub const LAMBDA0_FLOOR: f64 = 1e-8;
pub const LAMBDA0_CEIL: f64 = 1e8;
pub const CONCENTRATION_RANGE: (f64, f64) = (1e-4, 1e4);
/// ι₀ is kept above L − 1 by this margin.
pub const IOTA0_MARGIN: f64 = 1e-6;

/// Mean expected squared residual over Ω.
pub fn update_sigma2(state: &ModelState, ratings: &SparseRatings) -> Result<f64> {
    if ratings.is_empty() {
        return Err(HemfError::Empty("noise variance needs at least one observed rating".into()));
    }
    state.check_bound(ratings)?;
    Ok((expected_squared_residual(state, ratings) / ratings.len() as f64).max(SIGMA2_FLOOR))
}

/// Streaming form: |Ω|/|Ω ∪ Ω′|·σ² plus the new-entry residuals over |Ω ∪ Ω′|.
pub fn update_sigma2_online(state: &ModelState, new_entries: &[Rating], n_before: usize) -> Result<f64> {
    let n_after = n_before + new_entries.len();
    if n_after == 0 {
        return Err(HemfError::Empty("noise variance needs at least one observed rating".into()));
    }
    if new_entries.is_empty() {
        return Ok(state.hyper.sigma2);
    }
    let mut sum = 0.0;
    for e in new_entries {
        let a = state.users.factors.get(e.user).ok_or(HemfError::IndexOutOfRange {
            what: "user",
            index: e.user,
            len: state.users.n_entities(),
        })?;
        let b = state.items.factors.get(e.item).ok_or(HemfError::IndexOutOfRange {
            what: "item",
            index: e.item,
            len: state.items.n_entities(),
        })?;
        sum += e.value * e.value - 2.0 * e.value * a.mean.dot(&b.mean)
            + crate::math::trace_product(&a.second_moment, &b.second_moment);
    }
    let n_after = n_after as f64;
    Ok((n_before as f64 / n_after * state.hyper.sigma2 + sum / n_after).max(SIGMA2_FLOOR))
}

/// d ELBO / d c = D/c + Σ_d ⟨ln(1 − v_d)⟩.
pub fn concentration_gradient(state: &ModelState, side: Side) -> f64 {
    let s = state.side(side);
    let c = state.hyper.concentration(side);
    let tail: f64 = (0..s.sticks.len())
        .map(|d| digamma_pos(s.sticks.eta2[d]) - digamma_pos(s.sticks.eta1[d] + s.sticks.eta2[d]))
        .sum();
    s.sticks.len() as f64 / c + tail
}

/// One clamped gradient-ascent step on α (users) or β (items).
pub fn update_concentration(state: &ModelState, side: Side) -> f64 {
    let c = state.hyper.concentration(side);
    let (lo, hi) = CONCENTRATION_RANGE;
    (c + state.hyper.lr_alpha * concentration_gradient(state, side)).clamp(lo, hi)
}

/// The ELBO maximizer (Σ_d P_d)⁻¹ Σ_d P_d ⟨μ_d⟩ for each side; with equal
/// expected precisions this is the plain average of the community means.
pub fn update_base_means(state: &ModelState) -> Result<(DVector<f64>, DVector<f64>)> {
    Ok((
        weighted_base_mean(&state.users.communities)?,
        weighted_base_mean(&state.items.communities)?,
    ))
}

fn weighted_base_mean(communities: &[CommunityPosterior]) -> Result<DVector<f64>> {
    let first = communities
        .first()
        .ok_or_else(|| HemfError::Empty("base mean needs at least one community".into()))?;
    let l = first.dim();
    let mut prec = DMatrix::zeros(l, l);
    let mut rhs = DVector::zeros(l);
    for c in communities {
        prec += &c.exp_prec;
        rhs += &c.exp_prec * &c.mean;
    }
    pd_solve(&symmetrize(prec), &rhs)
}

/// tr(P(⟨μμᵀ⟩ − 2 base⟨μ⟩ᵀ + base baseᵀ)) for one community.
pub fn community_dispersion(c: &CommunityPosterior, base: &DVector<f64>) -> f64 {
    let p = &c.exp_prec;
    crate::math::trace_product(&c.mean_outer, p) - 2.0 * base.dot(&(p * &c.mean)) + base.dot(&(p * base))
}

/// λ₀ from the summed dispersion of `count` communities.
pub fn lambda0_from_dispersion(total: f64, count: usize, latent_dim: usize, mode: CommunityUpdate) -> f64 {
    let denom = (latent_dim * count) as f64;
    let value = match mode {
        CommunityUpdate::Printed => total / denom,
        CommunityUpdate::Conjugate => denom / total,
    };
    if value.is_nan() {
        return LAMBDA0_FLOOR;
    }
    value.clamp(LAMBDA0_FLOOR, LAMBDA0_CEIL)
}

pub fn update_lambda0(state: &ModelState) -> f64 {
    let mut total = 0.0;
    let mut count = 0;
    for side in Side::BOTH {
        let base = state.hyper.base_mean(side);
        for c in &state.side(side).communities {
            total += community_dispersion(c, base);
            count += 1;
        }
    }
    lambda0_from_dispersion(total, count, state.latent_dim(), state.hyper.community_update)
}

fn all_communities(state: &ModelState) -> impl Iterator<Item = &CommunityPosterior> {
    state.users.communities.iter().chain(&state.items.communities)
}

/// W₀ = (D + K) ι₀ (Σ ⟨Σ⁻¹⟩)⁻¹ at the current ι₀.
pub fn update_w0(state: &ModelState) -> Result<SymmetricPd> {
    let l = state.latent_dim();
    let mut prec = DMatrix::zeros(l, l);
    let mut count = 0usize;
    for c in all_communities(state) {
        prec += &c.exp_prec;
        count += 1;
    }
    let (inv, _) = crate::math::cholesky_inverse_logdet(&symmetrize(prec))
        .map_err(|e| e.context("precision sum for W0"))?;
    SymmetricPd::symmetrized(inv * (count as f64 * state.hyper.iota0))
}

/// d ELBO / d ι₀ = (D+K)/2 [ln|W₀| − L ln 2 − ψ_L(ι₀/2)] − ½ Σ ⟨ln|Σ|⟩.
pub fn iota0_gradient(state: &ModelState) -> Result<f64> {
    let l = state.latent_dim();
    let count = all_communities(state).count() as f64;
    let logdets: f64 = all_communities(state).map(|c| c.exp_logdet).sum();
    let psi = multivariate_digamma(state.hyper.iota0 / 2.0, l)?;
    Ok(0.5 * count * (w0_logdet(&state.hyper) - l as f64 * std::f64::consts::LN_2 - psi) - 0.5 * logdets)
}

/// Closed-form W₀, then one clamped gradient step on ι₀ evaluated at the new W₀.
pub fn update_wishart_hypers(state: &ModelState) -> Result<(SymmetricPd, f64)> {
    let w0 = update_w0(state)?;
    let mut probe = state.clone();
    probe.hyper.w0 = w0.clone();
    let grad = iota0_gradient(&probe)?;
    let floor = state.latent_dim() as f64 - 1.0 + IOTA0_MARGIN;
    let iota0 = (state.hyper.iota0 + state.hyper.lr_iota * grad).max(floor);
    Ok((w0, iota0))
}

/// α/β, μ₀/ν₀, λ₀ and W₀/ι₀ in that order (σ² is handled by the caller).
fn update_priors(state: &mut ModelState) -> Result<()> {
    let alpha = update_concentration(state, Side::User);
    let beta = update_concentration(state, Side::Item);
    state.hyper.alpha = alpha;
    state.hyper.beta = beta;
    let (mu0, nu0) = update_base_means(state)?;
    state.hyper.mu0 = mu0;
    state.hyper.nu0 = nu0;
    state.hyper.lambda0 = update_lambda0(state);
    let (w0, iota0) = update_wishart_hypers(state)?;
    state.hyper.w0 = w0;
    state.hyper.iota0 = iota0;
    state.hyper.validate()
}

/// One empirical pass after a batch sweep; appends and returns the ELBO.
pub fn run_evb_pass_batch(state: &mut ModelState, ratings: &SparseRatings) -> Result<f64> {
    state.hyper.sigma2 = update_sigma2(state, ratings)?;
    update_priors(state)?;
    let elbo = compute_elbo(state, ratings)?;
    state.elbo_trace.push(elbo);
    Ok(elbo)
}

/// One empirical pass in streaming mode. `new_entries` are the ratings first
/// observed since the previous pass and `n_before` the observed count at that pass.
/// Returns the ELBO over `observed` without recording it.
pub fn run_evb_pass_online(
    state: &mut ModelState,
    observed: &SparseRatings,
    new_entries: &[Rating],
    n_before: usize,
) -> Result<f64> {
    state.hyper.sigma2 = update_sigma2_online(state, new_entries, n_before)?;
    update_priors(state)?;
    compute_elbo(state, observed)
}
