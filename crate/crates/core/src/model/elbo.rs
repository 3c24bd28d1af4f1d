use std::f64::consts::{LN_2, PI};

use crate::error::{HemfError, Result};
use crate::math::{beta_entropy, cholesky_inverse_logdet, ln_multivariate_gamma, symmetrize, trace_product};
use crate::model::{CommunityPosterior, Hyperparameters, ModelState, Side, SideState};
use crate::ratings::SparseRatings;

/// Per-side ELBO contributions.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SideElbo {
    /// Σ_i Σ_d q_i(d) ⟨ln N(a_i | μ_d, Σ_d)⟩
    pub factor_prior: f64,
    /// ⟨ln p(z | v)⟩ − ⟨ln q(z)⟩
    pub membership: f64,
    /// Entropy of the factor posteriors.
    pub factor_entropy: f64,
    /// ⟨ln p(v | c)⟩ + entropy of q(v).
    pub sticks: f64,
    /// ⟨ln p(μ, Σ)⟩ + entropy of q(μ, Σ).
    pub communities: f64,
}

impl SideElbo {
    pub fn total(&self) -> f64 {
        self.factor_prior + self.membership + self.factor_entropy + self.sticks + self.communities
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ElboTerms {
    pub likelihood: f64,
    pub users: SideElbo,
    pub items: SideElbo,
}

impl ElboTerms {
    pub fn total(&self) -> f64 {
        self.likelihood + self.users.total() + self.items.total()
    }
}

pub fn compute_elbo(state: &ModelState, ratings: &SparseRatings) -> Result<f64> {
    Ok(elbo_terms(state, ratings)?.total())
}

pub fn elbo_terms(state: &ModelState, ratings: &SparseRatings) -> Result<ElboTerms> {
    state.check_bound(ratings)?;
    let terms = ElboTerms {
        likelihood: likelihood_term(state, ratings),
        users: side_terms(state, Side::User)?,
        items: side_terms(state, Side::Item)?,
    };
    let named = [
        ("likelihood", terms.likelihood),
        ("user.factor_prior", terms.users.factor_prior),
        ("user.membership", terms.users.membership),
        ("user.factor_entropy", terms.users.factor_entropy),
        ("user.sticks", terms.users.sticks),
        ("user.communities", terms.users.communities),
        ("item.factor_prior", terms.items.factor_prior),
        ("item.membership", terms.items.membership),
        ("item.factor_entropy", terms.items.factor_entropy),
        ("item.sticks", terms.items.sticks),
        ("item.communities", terms.items.communities),
    ];
    for (name, v) in named {
        if !v.is_finite() {
            return Err(HemfError::NonFinite { module: "elbo", term: name.to_string() });
        }
    }
    Ok(terms)
}

/// Σ over Ω of r² − 2r⟨a⟩ᵀ⟨b⟩ + tr(⟨aaᵀ⟩⟨bbᵀ⟩).
pub(crate) fn expected_squared_residual(state: &ModelState, ratings: &SparseRatings) -> f64 {
    ratings
        .entries()
        .iter()
        .map(|e| {
            let a = &state.users.factors[e.user];
            let b = &state.items.factors[e.item];
            e.value * e.value - 2.0 * e.value * a.mean.dot(&b.mean)
                + trace_product(&a.second_moment, &b.second_moment)
        })
        .sum()
}

fn likelihood_term(state: &ModelState, ratings: &SparseRatings) -> f64 {
    if ratings.is_empty() {
        return 0.0;
    }
    let s2 = state.hyper.sigma2;
    let n = ratings.len() as f64;
    -0.5 * n * (2.0 * PI * s2).ln() - expected_squared_residual(state, ratings) / (2.0 * s2)
}

fn side_terms(state: &ModelState, side: Side) -> Result<SideElbo> {
    let s = state.side(side);
    let hyper = &state.hyper;
    let l = hyper.latent_dim as f64;
    let log_weights = s.sticks.expected_log_weights();
    let half_ln_2pi = 0.5 * (2.0 * PI).ln();

    let mut factor_prior = 0.0;
    let mut membership = 0.0;
    let mut factor_entropy = 0.0;
    for (i, (f, q)) in s.factors.iter().zip(&s.memberships).enumerate() {
        for (d, &w) in q.weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let c = &s.communities[d];
            factor_prior += w * (-l * half_ln_2pi + c.expected_log_density(f));
            membership += w * (log_weights[d] - w.ln());
        }
        let (_, logdet) = cholesky_inverse_logdet(&symmetrize(f.covariance()))
            .map_err(|e| e.context(format!("{} {i} covariance", side.name())))?;
        factor_entropy += 0.5 * l * (1.0 + (2.0 * PI).ln()) + 0.5 * logdet;
    }

    Ok(SideElbo {
        factor_prior,
        membership,
        factor_entropy,
        sticks: stick_terms(s, hyper.concentration(side)),
        communities: s
            .communities
            .iter()
            .map(|c| community_terms(c, hyper, side))
            .sum(),
    })
}

/// Σ_d [ln c + (c − 1)⟨ln(1 − v_d)⟩ + H(Beta(η₁_d, η₂_d))].
pub(crate) fn stick_terms(s: &SideState, concentration: f64) -> f64 {
    (0..s.sticks.len())
        .map(|d| {
            concentration.ln()
                + (concentration - 1.0) * s.sticks.expected_log_1mv(d)
                + beta_entropy(s.sticks.eta1[d], s.sticks.eta2[d])
        })
        .sum()
}

/// Prior log-density plus entropy of one NIW community; zero when q equals the prior.
pub(crate) fn community_terms(c: &CommunityPosterior, hyper: &Hyperparameters, side: Side) -> f64 {
    let l = hyper.latent_dim as f64;
    let ln_2pi = (2.0 * PI).ln();
    let kappa0 = hyper.prior_kappa();
    let diff = &c.mean - hyper.base_mean(side);
    let maha = diff.dot(&(&c.exp_prec * &diff));

    let prior_mean = -0.5 * l * ln_2pi + 0.5 * l * kappa0.ln() - 0.5 * c.exp_logdet
        - 0.5 * kappa0 * (maha + l / c.kappa);
    let w0_logdet = w0_logdet(hyper);
    let iota0 = hyper.iota0;
    let prior_cov = 0.5 * iota0 * w0_logdet
        - 0.5 * iota0 * l * LN_2
        - ln_multivariate_gamma(iota0 / 2.0, hyper.latent_dim)
        - 0.5 * (iota0 + l + 1.0) * c.exp_logdet
        - 0.5 * trace_product(hyper.w0.as_matrix(), &c.exp_prec);

    let entropy_mean = 0.5 * l * (1.0 + ln_2pi) - 0.5 * l * c.kappa.ln() + 0.5 * c.exp_logdet;
    let iota = c.dof;
    let entropy_cov = -0.5 * iota * c.scale_logdet + 0.5 * iota * l * LN_2
        + ln_multivariate_gamma(iota / 2.0, hyper.latent_dim)
        + 0.5 * (iota + l + 1.0) * c.exp_logdet
        + 0.5 * iota * l;

    prior_mean + prior_cov + entropy_mean + entropy_cov
}

pub(crate) fn w0_logdet(hyper: &Hyperparameters) -> f64 {
    hyper
        .w0
        .as_matrix()
        .clone()
        .cholesky()
        .map(|c| 2.0 * c.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>())
        .unwrap_or(f64::NAN)
}
