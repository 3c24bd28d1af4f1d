//! Variational state of the coupled Dirichlet-process factorization model.

pub(crate) mod elbo;
mod sampler;

pub use elbo::{compute_elbo, elbo_terms, ElboTerms, SideElbo};
pub use sampler::{sample_from_model, SyntheticData};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{HemfError, Result};
use crate::math::{
    cholesky_inverse_logdet, digamma_pos, inverse_wishart_expected_logdet, trace_product,
    SymmetricPd,
};
use crate::ratings::SparseRatings;

/// Variance of the seeded Gaussian used for initial and placeholder factors.
pub const INIT_VARIANCE: f64 = 0.1;

/// Components whose expected mass is below this are treated as empty.
pub const EMPTY_MASS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    User,
    Item,
}

impl Side {
    pub fn other(self) -> Side {
        match self {
            Side::User => Side::Item,
            Side::Item => Side::User,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Side::User => "user",
            Side::Item => "item",
        }
    }

    pub const BOTH: [Side; 2] = [Side::User, Side::Item];
}

/// How the community mean reacts to the base-mean scale λ₀.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CommunityUpdate {
    /// μ_d | Σ_d ~ N(μ₀, λ₀ Σ_d) with the literal mean recurrence
    /// (λ₀ Σq⟨a⟩ + μ₀)/(λ₀ + ρ_d). Exact coordinate ascent only at λ₀ = 1.
    #[default]
    Printed,
    /// μ_d | Σ_d ~ N(μ₀, Σ_d/λ₀), the textbook Normal–inverse-Wishart update.
    Conjugate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparameters {
    pub latent_dim: usize,
    pub mu0: DVector<f64>,
    pub nu0: DVector<f64>,
    pub lambda0: f64,
    pub w0: SymmetricPd,
    pub iota0: f64,
    pub alpha: f64,
    pub beta: f64,
    pub sigma2: f64,
    pub spawn_threshold: f64,
    pub merge_tau: f64,
    pub lr_alpha: f64,
    pub lr_iota: f64,
    pub community_update: CommunityUpdate,
}

impl Hyperparameters {
    /// Defaults: zero base means, λ₀ = 1, W₀ = I, ι₀ = L + 2, α = β = 1, σ² = 1.
    pub fn new(latent_dim: usize) -> Self {
        Hyperparameters {
            latent_dim,
            mu0: DVector::zeros(latent_dim),
            nu0: DVector::zeros(latent_dim),
            lambda0: 1.0,
            w0: SymmetricPd::identity(latent_dim.max(1)),
            iota0: latent_dim as f64 + 2.0,
            alpha: 1.0,
            beta: 1.0,
            sigma2: 1.0,
            spawn_threshold: 1e-3,
            merge_tau: 0.1,
            lr_alpha: 1e-3,
            lr_iota: 1e-3,
            community_update: CommunityUpdate::Printed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.latent_dim;
        if l == 0 {
            return Err(HemfError::InvalidConfig("latent dimension must be >= 1".into()));
        }
        if self.mu0.len() != l || self.nu0.len() != l || self.w0.dim() != l {
            return Err(HemfError::DimensionMismatch(format!(
                "latent dimension {l} but mu0 has {}, nu0 has {}, W0 is {}x{}",
                self.mu0.len(),
                self.nu0.len(),
                self.w0.dim(),
                self.w0.dim()
            )));
        }
        let positive = [
            ("sigma2", self.sigma2),
            ("lambda0", self.lambda0),
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("spawn_threshold", self.spawn_threshold),
            ("merge_tau", self.merge_tau),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(HemfError::InvalidConfig(format!("{name} must be > 0, got {v}")));
            }
        }
        if !(self.iota0 > l as f64 - 1.0) || !self.iota0.is_finite() {
            return Err(HemfError::InvalidConfig(format!(
                "iota0 must exceed L - 1 = {}, got {}",
                l - 1,
                self.iota0
            )));
        }
        if !(self.lr_alpha >= 0.0) || !(self.lr_iota >= 0.0) {
            return Err(HemfError::InvalidConfig("learning rates must be >= 0".into()));
        }
        Ok(())
    }

    pub fn base_mean(&self, side: Side) -> &DVector<f64> {
        match side {
            Side::User => &self.mu0,
            Side::Item => &self.nu0,
        }
    }

    pub fn concentration(&self, side: Side) -> f64 {
        match side {
            Side::User => self.alpha,
            Side::Item => self.beta,
        }
    }

    /// Precision scale κ₀ of the community mean around its base mean.
    pub fn prior_kappa(&self) -> f64 {
        match self.community_update {
            CommunityUpdate::Printed => 1.0 / self.lambda0,
            CommunityUpdate::Conjugate => self.lambda0,
        }
    }
}

/// Gaussian posterior over one user or item factor.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorPosterior {
    pub mean: DVector<f64>,
    pub second_moment: DMatrix<f64>,
}

impl FactorPosterior {
    pub fn from_mean_cov(mean: DVector<f64>, cov: &DMatrix<f64>) -> Self {
        let second_moment = cov + &mean * mean.transpose();
        FactorPosterior { mean, second_moment }
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        &self.second_moment - &self.mean * self.mean.transpose()
    }

    pub(crate) fn random(rng: &mut ChaCha8Rng, dim: usize) -> Self {
        let normal = Normal::new(0.0, INIT_VARIANCE.sqrt()).expect("valid std");
        let mean = DVector::from_fn(dim, |_, _| normal.sample(rng));
        let cov = DMatrix::identity(dim, dim) * INIT_VARIANCE;
        Self::from_mean_cov(mean, &cov)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Soft assignment q(z) of one entity over the current components.
#[derive(Debug, Clone, PartialEq)]
pub struct MembershipPosterior {
    pub weights: Vec<f64>,
}

impl MembershipPosterior {
    pub fn uniform(n: usize) -> Self {
        MembershipPosterior { weights: vec![1.0 / n as f64; n] }
    }

    /// Softmax with max-subtraction.
    pub fn from_scores(scores: &[f64]) -> Self {
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        MembershipPosterior { weights: exps.into_iter().map(|e| e / total).collect() }
    }

    pub fn argmax(&self) -> usize {
        self.weights
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (d, &w)| if w > best.1 { (d, w) } else { best })
            .0
    }
}

/// Beta(η₁_d, η₂_d) posteriors of the stick-breaking proportions.
#[derive(Debug, Clone, PartialEq)]
pub struct StickPosterior {
    pub eta1: Vec<f64>,
    pub eta2: Vec<f64>,
}

impl StickPosterior {
    pub fn prior(n: usize, concentration: f64) -> Self {
        StickPosterior { eta1: vec![1.0; n], eta2: vec![concentration; n] }
    }

    /// η₁_d = 1 + ρ_d, η₂_d = c + Σ_{j>d} ρ_j.
    pub fn from_mass(mass: &[f64], concentration: f64) -> Self {
        let n = mass.len();
        let mut eta1 = Vec::with_capacity(n);
        let mut eta2 = vec![0.0; n];
        let mut tail = 0.0;
        for d in (0..n).rev() {
            eta2[d] = concentration + tail;
            tail += mass[d];
        }
        for &m in mass {
            eta1.push(1.0 + m);
        }
        StickPosterior { eta1, eta2 }
    }

    pub fn len(&self) -> usize {
        self.eta1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eta1.is_empty()
    }

    /// ⟨ln v_d⟩
    pub fn expected_log_v(&self, d: usize) -> f64 {
        digamma_pos(self.eta1[d]) - digamma_pos(self.eta1[d] + self.eta2[d])
    }

    /// ⟨ln(1 − v_d)⟩
    pub fn expected_log_1mv(&self, d: usize) -> f64 {
        digamma_pos(self.eta2[d]) - digamma_pos(self.eta1[d] + self.eta2[d])
    }

    /// ξ₂(d) = ⟨ln v_d⟩ + Σ_{t<d} ⟨ln(1 − v_t)⟩ for every component.
    pub fn expected_log_weights(&self) -> Vec<f64> {
        let mut acc = 0.0;
        (0..self.len())
            .map(|d| {
                let w = self.expected_log_v(d) + acc;
                acc += self.expected_log_1mv(d);
                w
            })
            .collect()
    }

    /// ξ₂ of a fresh component appended after the existing ones, with a Beta(1, c) stick.
    pub fn expected_log_weight_new(&self, concentration: f64) -> f64 {
        let tail: f64 = (0..self.len()).map(|d| self.expected_log_1mv(d)).sum();
        digamma_pos(1.0) - digamma_pos(1.0 + concentration) + tail
    }
}

/// Normal–inverse-Wishart posterior over one community's mean and covariance:
/// μ | Σ ~ N(mean, Σ/kappa), Σ ~ iW(scale, dof).
#[derive(Debug, Clone, PartialEq)]
pub struct CommunityPosterior {
    pub mean: DVector<f64>,
    /// ⟨μμᵀ⟩, written as mean·meanᵀ + ⟨Σ⁻¹⟩⁻¹/kappa.
    pub mean_outer: DMatrix<f64>,
    pub scale: SymmetricPd,
    pub dof: f64,
    pub kappa: f64,
    /// ⟨Σ⁻¹⟩ = dof · scale⁻¹
    pub exp_prec: DMatrix<f64>,
    /// ⟨ln|Σ|⟩
    pub exp_logdet: f64,
    /// ln|scale|
    pub scale_logdet: f64,
}

impl CommunityPosterior {
    pub fn new(mean: DVector<f64>, kappa: f64, scale: SymmetricPd, dof: f64) -> Result<Self> {
        let l = scale.dim();
        if mean.len() != l {
            return Err(HemfError::DimensionMismatch(format!(
                "community mean has length {} but scale is {l}x{l}",
                mean.len()
            )));
        }
        if !(dof > l as f64 - 1.0) || !(kappa > 0.0) {
            return Err(HemfError::Domain(format!(
                "community needs dof > {} and kappa > 0, got dof {dof}, kappa {kappa}",
                l as f64 - 1.0
            )));
        }
        let (inv, scale_logdet) = cholesky_inverse_logdet(scale.as_matrix())?;
        let exp_prec = inv * dof;
        let exp_logdet = inverse_wishart_expected_logdet(scale_logdet, dof, l);
        let mean_outer = &mean * mean.transpose() + scale.as_matrix() / (dof * kappa);
        Ok(CommunityPosterior {
            mean,
            mean_outer,
            scale,
            dof,
            kappa,
            exp_prec,
            exp_logdet,
            scale_logdet,
        })
    }

    /// The prior itself, used for empty and freshly spawned components.
    pub fn prior(hyper: &Hyperparameters, side: Side) -> Result<Self> {
        Self::new(
            hyper.base_mean(side).clone(),
            hyper.prior_kappa(),
            hyper.w0.clone(),
            hyper.iota0,
        )
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// ξ₁: the expected Gaussian log-density of a factor under this community,
    /// without the −L/2 ln 2π constant.
    pub fn expected_log_density(&self, factor: &FactorPosterior) -> f64 {
        let p = &self.exp_prec;
        let pm = p * &self.mean;
        let quad = trace_product(&factor.second_moment, p) - 2.0 * pm.dot(&factor.mean)
            + trace_product(&self.mean_outer, p);
        -0.5 * (quad + self.exp_logdet)
    }
}

/// Soft sufficient statistics Σq, Σq⟨a⟩, Σq⟨aaᵀ⟩ per component.
#[derive(Debug, Clone, PartialEq)]
pub struct CommunityStats {
    pub mass: Vec<f64>,
    pub sum: Vec<DVector<f64>>,
    pub sum_outer: Vec<DMatrix<f64>>,
}

impl CommunityStats {
    pub fn zeros(n: usize, dim: usize) -> Self {
        CommunityStats {
            mass: vec![0.0; n],
            sum: vec![DVector::zeros(dim); n],
            sum_outer: vec![DMatrix::zeros(dim, dim); n],
        }
    }

    pub fn from_side(factors: &[FactorPosterior], memberships: &[MembershipPosterior], n: usize, dim: usize) -> Self {
        let mut stats = Self::zeros(n, dim);
        for (f, q) in factors.iter().zip(memberships) {
            stats.add_entity(f, q, 1.0);
        }
        stats
    }

    /// Adds `sign · q(d)·(1, ⟨a⟩, ⟨aaᵀ⟩)` to every component.
    pub fn add_entity(&mut self, factor: &FactorPosterior, q: &MembershipPosterior, sign: f64) {
        for (d, &w) in q.weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let w = sign * w;
            self.mass[d] += w;
            self.sum[d].axpy(w, &factor.mean, 1.0);
            self.sum_outer[d] += &factor.second_moment * w;
        }
    }

    pub fn push_empty(&mut self, dim: usize) {
        self.mass.push(0.0);
        self.sum.push(DVector::zeros(dim));
        self.sum_outer.push(DMatrix::zeros(dim, dim));
    }

    pub fn len(&self) -> usize {
        self.mass.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mass.is_empty()
    }
}

/// One side (users or items) of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct SideState {
    pub factors: Vec<FactorPosterior>,
    pub memberships: Vec<MembershipPosterior>,
    pub sticks: StickPosterior,
    pub communities: Vec<CommunityPosterior>,
    pub stats: CommunityStats,
}

impl SideState {
    pub fn n_entities(&self) -> usize {
        self.factors.len()
    }

    pub fn n_components(&self) -> usize {
        self.communities.len()
    }

    pub fn check_consistency(&self) -> Result<()> {
        let d = self.n_components();
        if self.memberships.len() != self.factors.len()
            || self.sticks.len() != d
            || self.stats.len() != d
            || self.memberships.iter().any(|q| q.weights.len() != d)
        {
            return Err(HemfError::DimensionMismatch(format!(
                "side with {} factors, {} memberships, {} sticks, {} stats, {} communities",
                self.factors.len(),
                self.memberships.len(),
                self.sticks.len(),
                self.stats.len(),
                d
            )));
        }
        Ok(())
    }
}

/// The full variational configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub users: SideState,
    pub items: SideState,
    pub hyper: Hyperparameters,
    pub elbo_trace: Vec<f64>,
    /// Seeded generator for any later random initialisation (online placeholders).
    pub rng: ChaCha8Rng,
}

impl ModelState {
    pub fn side(&self, side: Side) -> &SideState {
        match side {
            Side::User => &self.users,
            Side::Item => &self.items,
        }
    }

    pub fn side_mut(&mut self, side: Side) -> &mut SideState {
        match side {
            Side::User => &mut self.users,
            Side::Item => &mut self.items,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.hyper.latent_dim
    }

    pub fn n_components(&self, side: Side) -> usize {
        self.side(side).n_components()
    }

    /// Errors unless the factor counts equal the rating matrix index spaces.
    pub fn check_bound(&self, ratings: &SparseRatings) -> Result<()> {
        if self.users.n_entities() != ratings.n_users() || self.items.n_entities() != ratings.n_items() {
            return Err(HemfError::DimensionMismatch(format!(
                "state has {}x{} entities, ratings are {}x{}",
                self.users.n_entities(),
                self.items.n_entities(),
                ratings.n_users(),
                ratings.n_items()
            )));
        }
        Ok(())
    }
}

/// Seeded random factors, uniform memberships and prior sticks/communities.
pub fn init_state(
    ratings: &SparseRatings,
    hyper: &Hyperparameters,
    d_init: usize,
    k_init: usize,
    seed: u64,
) -> Result<ModelState> {
    init_state_sized(ratings.n_users(), ratings.n_items(), hyper, d_init, k_init, seed)
}

pub fn init_state_sized(
    n_users: usize,
    n_items: usize,
    hyper: &Hyperparameters,
    d_init: usize,
    k_init: usize,
    seed: u64,
) -> Result<ModelState> {
    hyper.validate()?;
    if d_init == 0 || k_init == 0 {
        return Err(HemfError::InvalidConfig("d_init and k_init must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = hyper.latent_dim;
    let mut make_side = |n: usize, comps: usize, side: Side| -> Result<SideState> {
        let factors: Vec<_> = (0..n).map(|_| FactorPosterior::random(&mut rng, l)).collect();
        let memberships = vec![MembershipPosterior::uniform(comps); n];
        let stats = CommunityStats::from_side(&factors, &memberships, comps, l);
        let community = CommunityPosterior::prior(hyper, side)?;
        Ok(SideState {
            factors,
            memberships,
            sticks: StickPosterior::prior(comps, hyper.concentration(side)),
            communities: vec![community; comps],
            stats,
        })
    };
    let users = make_side(n_users, d_init, Side::User)?;
    let items = make_side(n_items, k_init, Side::Item)?;
    Ok(ModelState { users, items, hyper: hyper.clone(), elbo_trace: Vec::new(), rng })
}

/// ⟨a_user⟩ᵀ⟨b_item⟩.
pub fn predict_entry(state: &ModelState, user: usize, item: usize) -> Result<f64> {
    let a = state.users.factors.get(user).ok_or(HemfError::IndexOutOfRange {
        what: "user",
        index: user,
        len: state.users.n_entities(),
    })?;
    let b = state.items.factors.get(item).ok_or(HemfError::IndexOutOfRange {
        what: "item",
        index: item,
        len: state.items.n_entities(),
    })?;
    Ok(a.mean.dot(&b.mean))
}

/// Like [`predict_entry`] but clipped to `range` when one is given.
pub fn predict_clamped(state: &ModelState, user: usize, item: usize, range: Option<(f64, f64)>) -> Result<f64> {
    let raw = predict_entry(state, user, item)?;
    Ok(match range {
        Some((lo, hi)) => raw.clamp(lo, hi),
        None => raw,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ratings::Rating;
    use approx::assert_abs_diff_eq;

    fn tiny_ratings() -> SparseRatings {
        SparseRatings::new(4, 3, vec![Rating::new(0, 0, 1.0), Rating::new(3, 2, 4.0)]).unwrap()
    }

    #[test]
    fn single_component_memberships_are_exactly_one() {
        let s = init_state(&tiny_ratings(), &Hyperparameters::new(2), 1, 1, 7).unwrap();
        for q in s.users.memberships.iter().chain(&s.items.memberships) {
            assert_eq!(q.weights, vec![1.0]);
        }
    }

    #[test]
    fn init_is_deterministic() {
        let h = Hyperparameters::new(3);
        let a = init_state(&tiny_ratings(), &h, 2, 3, 11).unwrap();
        let b = init_state(&tiny_ratings(), &h, 2, 3, 11).unwrap();
        assert_eq!(a, b);
        let c = init_state(&tiny_ratings(), &h, 2, 3, 12).unwrap();
        assert_ne!(a.users.factors, c.users.factors);
    }

    #[test]
    fn uniform_memberships_sum_to_one() {
        let s = init_state(&tiny_ratings(), &Hyperparameters::new(2), 3, 2, 1).unwrap();
        for q in &s.users.memberships {
            assert!((q.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(s.users.sticks.eta2, vec![1.0; 3]);
        s.users.check_consistency().unwrap();
    }

    #[test]
    fn init_rejects_mismatched_base_mean() {
        let mut h = Hyperparameters::new(2);
        h.mu0 = DVector::zeros(3);
        assert!(matches!(
            init_state(&tiny_ratings(), &h, 1, 1, 0),
            Err(HemfError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn prediction_is_dot_product() {
        let mut s = init_state(&tiny_ratings(), &Hyperparameters::new(2), 1, 1, 3).unwrap();
        s.users.factors[1].mean = DVector::from_vec(vec![1.0, 2.0]);
        s.items.factors[2].mean = DVector::from_vec(vec![3.0, 0.5]);
        assert_eq!(predict_entry(&s, 1, 2).unwrap(), 4.0);
        s.users.factors[0].mean = DVector::zeros(2);
        assert_eq!(predict_entry(&s, 0, 1).unwrap(), 0.0);
        assert!(predict_entry(&s, 4, 0).is_err());

        s.users.factors[1].mean = DVector::from_vec(vec![2.4, 0.0]);
        assert_abs_diff_eq!(predict_entry(&s, 1, 2).unwrap(), 7.2, epsilon = 1e-12);
        assert_eq!(predict_clamped(&s, 1, 2, Some((1.0, 5.0))).unwrap(), 5.0);
    }

    #[test]
    fn softmax_hand_value() {
        let q = MembershipPosterior::from_scores(&[2f64.ln(), 0.0]);
        assert_abs_diff_eq!(q.weights[0], 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(q.weights[1], 1.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn sticks_from_mass_hand_values() {
        let s = StickPosterior::from_mass(&[3.0, 2.0, 0.0], 1.0);
        assert_eq!(s.eta1, vec![4.0, 3.0, 1.0]);
        assert_eq!(s.eta2, vec![3.0, 1.0, 1.0]);
        let p = StickPosterior::from_mass(&[0.0, 0.0], 2.0);
        assert_eq!(p, StickPosterior::prior(2, 2.0));
    }

    #[test]
    fn community_caches_match_definition() {
        let w = SymmetricPd::new(DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0])).unwrap();
        let c = CommunityPosterior::new(DVector::from_vec(vec![0.5, -1.0]), 2.0, w.clone(), 5.0).unwrap();
        let (inv, ld) = w.inverse_logdet().unwrap();
        assert!((&c.exp_prec - inv.as_matrix() * 5.0).amax() < 1e-12);
        let expected = ld - digamma_pos(2.5) - digamma_pos(2.0) - 2.0 * std::f64::consts::LN_2;
        assert_abs_diff_eq!(c.exp_logdet, expected, epsilon = 1e-12);
    }

    proptest::proptest! {
        #[test]
        fn prediction_is_bilinear(scale in -5.0f64..5.0, seed in 0u64..100) {
            let mut s = init_state(&tiny_ratings(), &Hyperparameters::new(3), 1, 1, seed).unwrap();
            let base = predict_entry(&s, 2, 1).unwrap();
            s.users.factors[2].mean *= scale;
            let scaled = predict_entry(&s, 2, 1).unwrap();
            proptest::prop_assert!((scaled - scale * base).abs() < 1e-12);
        }

        #[test]
        fn softmax_shift_invariant(a in -50.0f64..50.0, b in -50.0f64..50.0, c in -50.0f64..50.0, shift in -1e3f64..1e3) {
            let q1 = MembershipPosterior::from_scores(&[a, b, c]);
            let q2 = MembershipPosterior::from_scores(&[a + shift, b + shift, c + shift]);
            for (x, y) in q1.weights.iter().zip(&q2.weights) {
                proptest::prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
