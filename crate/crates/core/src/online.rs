//! Streaming variational inference over rating chunks.
//!
//! Each chunk updates the touched factors in closed form from their previous
//! posterior, reassigns memberships (possibly spawning a component), folds the
//! membership/factor deltas into the sticks and communities, and optionally
//! merges near-duplicate communities and re-sweeps the touched neighbourhood.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::batch::{community_from_stats, factor_posterior, likelihood_stats, membership_scores, update_factor};
use crate::empirical::run_evb_pass_online;
use crate::error::{HemfError, Result, ResultExt};
use crate::math::{cholesky_inverse_logdet, sym_outer, symmetrize, SymmetricPd};
use crate::model::{
    init_state_sized, CommunityPosterior, CommunityUpdate, FactorPosterior, Hyperparameters, MembershipPosterior,
    ModelState, Side, StickPosterior, EMPTY_MASS,
};
use crate::ratings::{Rating, SparseRatings};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EntryKind {
    New,
    /// Re-rating of an observed pair; `previous` is the rating it replaces.
    Revision { previous: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChunkEntry {
    pub user: usize,
    pub item: usize,
    pub value: f64,
    pub kind: EntryKind,
}

impl ChunkEntry {
    fn entity(&self, side: Side) -> usize {
        match side {
            Side::User => self.user,
            Side::Item => self.item,
        }
    }

    fn counterpart(&self, side: Side) -> usize {
        self.entity(side.other())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RatingChunk {
    pub entries: Vec<ChunkEntry>,
}

impl RatingChunk {
    /// Labels each rating as new or as a revision of what `observed` holds.
    pub fn classify(ratings: impl IntoIterator<Item = Rating>, observed: &SparseRatings) -> Self {
        let entries = ratings
            .into_iter()
            .map(|r| {
                let kind = match observed.get(r.user, r.item) {
                    Some(previous) => EntryKind::Revision { previous },
                    None => EntryKind::New,
                };
                ChunkEntry { user: r.user, item: r.item, value: r.value, kind }
            })
            .collect();
        RatingChunk { entries }
    }

    /// All entries as new ratings.
    pub fn fresh(ratings: impl IntoIterator<Item = Rating>) -> Self {
        let entries = ratings
            .into_iter()
            .map(|r| ChunkEntry { user: r.user, item: r.item, value: r.value, kind: EntryKind::New })
            .collect();
        RatingChunk { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Checks the entries against what has been observed so far.
    pub fn validate(&self, observed: &SparseRatings) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (k, e) in self.entries.iter().enumerate() {
            if !e.value.is_finite() {
                return Err(HemfError::InvalidChunk(format!("entry {k} has a non-finite rating")));
            }
            if !seen.insert((e.user, e.item)) {
                return Err(HemfError::InvalidChunk(format!(
                    "pair (user {}, item {}) appears twice in one chunk",
                    e.user, e.item
                )));
            }
            match (e.kind, observed.get(e.user, e.item)) {
                (EntryKind::New, Some(_)) => {
                    return Err(HemfError::InvalidChunk(format!(
                        "entry {k}: pair (user {}, item {}) already observed",
                        e.user, e.item
                    )))
                }
                (EntryKind::Revision { .. }, None) => {
                    return Err(HemfError::InvalidChunk(format!(
                        "entry {k}: revision of unobserved pair (user {}, item {})",
                        e.user, e.item
                    )))
                }
                (EntryKind::Revision { previous }, Some(stored)) if previous != stored => {
                    return Err(HemfError::InvalidChunk(format!(
                        "entry {k}: previous rating {previous} does not match stored {stored}"
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// How sticks and communities absorb a chunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GlobalUpdate {
    /// Delta recurrences for η, ⟨μ⟩, ⟨μμᵀ⟩, W and ι.
    Printed,
    /// Running sufficient statistics and a fresh batch update.
    #[default]
    Recomputed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OnlineConfig {
    pub globals: GlobalUpdate,
    /// Local batch re-sweeps over the chunk neighbourhood after each chunk.
    pub propagation_sweeps: usize,
    /// Empirical-Bayes pass every this many chunks.
    pub empirical_every: Option<usize>,
    pub spawn: bool,
    pub merge: bool,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        OnlineConfig {
            globals: GlobalUpdate::Recomputed,
            propagation_sweeps: 0,
            empirical_every: None,
            spawn: true,
            merge: true,
        }
    }
}

/// Changes of the soft sufficient statistics and, for the printed recurrences,
/// of the community means.
#[derive(Debug, Clone, PartialEq)]
pub struct SideDeltas {
    /// ϑ₁(d) = Σ q′(d) − q(d)
    pub theta1: Vec<f64>,
    /// ϑ₂(d) = Σ q′(d)⟨a⟩′ − q(d)⟨a⟩
    pub theta2: Vec<DVector<f64>>,
    /// ϑ₃(d) = Σ q′(d)⟨aaᵀ⟩′ − q(d)⟨aaᵀ⟩
    pub theta3: Vec<DMatrix<f64>>,
    /// ϑ₄(d) = ⟨μ_d⟩′ − ⟨μ_d⟩ (filled by the printed update)
    pub theta4: Vec<DVector<f64>>,
    /// ϑ₅(d) = ⟨μ_dμ_dᵀ⟩′ − ⟨μ_dμ_dᵀ⟩ (filled by the printed update)
    pub theta5: Vec<DMatrix<f64>>,
    /// ϑ₆(d) = ⟨μ_d⟩′ Σ⟨a⟩′ᵀ − ⟨μ_d⟩ Σ⟨a⟩ᵀ (filled by the printed update)
    pub theta6: Vec<DMatrix<f64>>,
    /// Σ⟨a⟩ over touched entities after and before the chunk.
    pub touched_sum_after: DVector<f64>,
    pub touched_sum_before: DVector<f64>,
}

impl SideDeltas {
    pub fn zeros(n: usize, dim: usize) -> Self {
        SideDeltas {
            theta1: vec![0.0; n],
            theta2: vec![DVector::zeros(dim); n],
            theta3: vec![DMatrix::zeros(dim, dim); n],
            theta4: vec![DVector::zeros(dim); n],
            theta5: vec![DMatrix::zeros(dim, dim); n],
            theta6: vec![DMatrix::zeros(dim, dim); n],
            touched_sum_after: DVector::zeros(dim),
            touched_sum_before: DVector::zeros(dim),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.theta1.iter().all(|&v| v == 0.0)
            && self.theta2.iter().all(|v| v.iter().all(|&x| x == 0.0))
            && self.theta3.iter().all(|v| v.iter().all(|&x| x == 0.0))
    }
}

/// Posterior of an entity before a chunk touched it; `None` for entities first
/// seen in the chunk.
pub type Snapshot = Option<(MembershipPosterior, FactorPosterior)>;

/// Rank update of an existing factor from its previous posterior.
///
/// New ratings add r⟨b⟩ to Δ₁ and ⟨bbᵀ⟩ to Δ₂; revisions add (r − r_prev)⟨b⟩ to
/// Δ₁ only.
pub fn online_update_factor(state: &ModelState, side: Side, entity: usize, chunk: &RatingChunk) -> Result<FactorPosterior> {
    let own = state.side(side);
    let current = own.factors.get(entity).ok_or(HemfError::IndexOutOfRange {
        what: side.name(),
        index: entity,
        len: own.n_entities(),
    })?;
    let opposite = state.side(side.other());
    let l = state.latent_dim();
    let mut delta1 = DVector::zeros(l);
    let mut delta2 = DMatrix::zeros(l, l);
    let mut any = false;
    for e in chunk.entries.iter().filter(|e| e.entity(side) == entity) {
        let b = opposite.factors.get(e.counterpart(side)).ok_or(HemfError::IndexOutOfRange {
            what: side.other().name(),
            index: e.counterpart(side),
            len: opposite.n_entities(),
        })?;
        match e.kind {
            EntryKind::New => {
                delta1.axpy(e.value, &b.mean, 1.0);
                delta2 += &b.second_moment;
                any = true;
            }
            EntryKind::Revision { previous } => {
                let diff = e.value - previous;
                if diff != 0.0 {
                    delta1.axpy(diff, &b.mean, 1.0);
                    any = true;
                }
            }
        }
    }
    if !any {
        return Ok(current.clone());
    }
    let sigma2 = state.hyper.sigma2;
    let cov = current.covariance();
    let shifted = &current.mean + &cov * &delta1 / sigma2;
    // K = (σ²I + Δ₂Σ)⁻¹Δ₂
    let system = DMatrix::identity(l, l) * sigma2 + &delta2 * &cov;
    let gain = system
        .lu()
        .solve(&delta2)
        .ok_or_else(|| HemfError::Singular(format!("{} {entity}: sigma2 I + Delta2 Sigma", side.name())))?;
    let cov_gain = &cov * &gain;
    let mean = &shifted - &cov_gain * &shifted;
    let new_cov = symmetrize(&cov - &cov_gain * &cov);
    Ok(FactorPosterior::from_mean_cov(mean, &new_cov))
}

/// Batch formula on the chunk-local ratings, for an entity first seen in this chunk.
pub fn new_entity_factor(state: &ModelState, side: Side, entity: usize, chunk: &RatingChunk) -> Result<FactorPosterior> {
    let own = state.side(side);
    let q = own.memberships.get(entity).ok_or(HemfError::IndexOutOfRange {
        what: side.name(),
        index: entity,
        len: own.n_entities(),
    })?;
    let local = chunk
        .entries
        .iter()
        .filter(|e| e.entity(side) == entity)
        .map(|e| (e.counterpart(side), e.value));
    let (prec, lin) = likelihood_stats(state.side(side.other()), local, state.latent_dim(), state.hyper.sigma2);
    factor_posterior(prec, lin, q, &own.communities)
}

/// Appends a prior-initialised component to a side.
fn spawn_component(state: &mut ModelState, side: Side, community: CommunityPosterior) {
    let l = state.latent_dim();
    let conc = state.hyper.concentration(side);
    let s = state.side_mut(side);
    s.communities.push(community);
    s.sticks.eta1.push(1.0);
    s.sticks.eta2.push(conc);
    s.stats.push_empty(l);
    for q in &mut s.memberships {
        q.weights.push(0.0);
    }
}

/// Membership update that may introduce a new component.
///
/// The candidate is scored with the prior community and a fresh Beta(1, c)
/// stick. It is accepted when its log score beats the best existing component
/// by more than ln(spawn_threshold), and only while no existing component is
/// empty. Writes the new membership into the state.
pub fn online_update_membership(state: &mut ModelState, side: Side, entity: usize, allow_spawn: bool) -> Result<(MembershipPosterior, bool)> {
    let s = state.side(side);
    let factor = s.factors.get(entity).ok_or(HemfError::IndexOutOfRange {
        what: side.name(),
        index: entity,
        len: s.n_entities(),
    })?;
    let mut scores = membership_scores(factor, &s.communities, &s.sticks);
    let mut spawned = false;
    if allow_spawn && !s.stats.mass.iter().any(|&m| m < EMPTY_MASS) {
        let candidate = CommunityPosterior::prior(&state.hyper, side)?;
        let score = candidate.expected_log_density(factor)
            + s.sticks.expected_log_weight_new(state.hyper.concentration(side));
        let best = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if score - best > state.hyper.spawn_threshold.ln() {
            spawn_component(state, side, candidate);
            scores.push(score);
            spawned = true;
        }
    }
    let q = MembershipPosterior::from_scores(&scores);
    state.side_mut(side).memberships[entity] = q.clone();
    Ok((q, spawned))
}

/// ϑ₁..ϑ₃ and the touched-factor sums from before/after snapshots.
/// Snapshots taken before a spawn are padded with zero weight.
pub fn accumulate_deltas(state: &ModelState, side: Side, touched: &[(usize, Snapshot)]) -> Result<SideDeltas> {
    let s = state.side(side);
    let n = s.n_components();
    let l = state.latent_dim();
    let mut deltas = SideDeltas::zeros(n, l);
    for (entity, before) in touched {
        let f = &s.factors[*entity];
        let q = &s.memberships[*entity];
        for (d, &w) in q.weights.iter().enumerate() {
            deltas.theta1[d] += w;
            deltas.theta2[d].axpy(w, &f.mean, 1.0);
            deltas.theta3[d] += &f.second_moment * w;
        }
        deltas.touched_sum_after += &f.mean;
        if let Some((bq, bf)) = before {
            if bq.weights.len() > n {
                return Err(HemfError::DimensionMismatch(format!(
                    "snapshot has {} components, side has {n}",
                    bq.weights.len()
                )));
            }
            for (d, &w) in bq.weights.iter().enumerate() {
                deltas.theta1[d] -= w;
                deltas.theta2[d].axpy(-w, &bf.mean, 1.0);
                deltas.theta3[d] -= &bf.second_moment * w;
            }
            deltas.touched_sum_before += &bf.mean;
        }
    }
    Ok(deltas)
}

/// Folds deltas into sticks and communities. Running statistics are updated in
/// both modes; `Recomputed` rebuilds the posteriors from them, `Printed`
/// applies the delta recurrences.
pub fn online_update_globals(state: &mut ModelState, side: Side, deltas: &mut SideDeltas, mode: GlobalUpdate) -> Result<()> {
    if deltas.is_zero() {
        return Ok(());
    }
    let n = state.n_components(side);
    if deltas.theta1.len() != n {
        return Err(HemfError::DimensionMismatch(format!(
            "deltas sized for {} components, side has {n}",
            deltas.theta1.len()
        )));
    }
    let hyper = state.hyper.clone();
    let n_entities = state.side(side).n_entities() as f64;
    let s = state.side_mut(side);
    for d in 0..n {
        s.stats.mass[d] += deltas.theta1[d];
        s.stats.sum[d] += &deltas.theta2[d];
        s.stats.sum_outer[d] += &deltas.theta3[d];
    }
    match mode {
        GlobalUpdate::Recomputed => {
            s.sticks = StickPosterior::from_mass(&s.stats.mass, hyper.concentration(side));
            s.communities = (0..n)
                .map(|d| community_from_stats(&s.stats, d, &hyper, side))
                .collect::<Result<Vec<_>>>()?;
        }
        GlobalUpdate::Printed => {
            let mut tail = 0.0;
            for d in (0..n).rev() {
                s.sticks.eta1[d] += deltas.theta1[d];
                s.sticks.eta2[d] += tail;
                tail += deltas.theta1[d];
            }
            let lambda0 = hyper.lambda0;
            let kappa0 = hyper.prior_kappa();
            let mu0 = hyper.base_mean(side);
            for d in 0..n {
                let old = &s.communities[d];
                let rho = s.stats.mass[d];
                let (mean, kappa) = match hyper.community_update {
                    CommunityUpdate::Printed => (
                        &old.mean - (&old.mean * deltas.theta1[d] - &deltas.theta2[d] * lambda0) / (lambda0 + rho),
                        (lambda0 + rho) / lambda0,
                    ),
                    CommunityUpdate::Conjugate => (
                        &old.mean + (&deltas.theta2[d] - &old.mean * deltas.theta1[d]) / (lambda0 + rho),
                        lambda0 + rho,
                    ),
                };
                // ⟨Σ⁻¹⟩⁻¹ from the previous step
                let old_cov = old.scale.as_matrix() / old.dof;
                let mean_outer = &old_cov / kappa + &mean * mean.transpose();
                deltas.theta4[d] = &mean - &old.mean;
                deltas.theta5[d] = &mean_outer - &old.mean_outer;
                deltas.theta6[d] = &mean * deltas.touched_sum_after.transpose()
                    - &old.mean * deltas.touched_sum_before.transpose();
                let scale = old.scale.as_matrix() - sym_outer(mu0, &deltas.theta4[d]) * kappa0
                    - &deltas.theta6[d] * 2.0
                    + &deltas.theta5[d] * (n_entities + kappa0)
                    + &deltas.theta3[d];
                let scale = SymmetricPd::symmetrized(scale)
                    .context_with(|| format!("{} community {d} online scale", side.name()))?;
                let dof = old.dof + deltas.theta1[d];
                let mut updated = CommunityPosterior::new(mean, kappa, scale, dof)?;
                updated.mean_outer = mean_outer;
                s.communities[d] = updated;
            }
        }
    }
    Ok(())
}

/// Symmetric (Jeffreys) KL divergence between the Gaussians N(⟨μ⟩, S) of two
/// communities, S = W/(ι − L − 1), or W/ι when that mean does not exist.
pub fn community_divergence(a: &CommunityPosterior, b: &CommunityPosterior) -> Result<f64> {
    let l = a.dim() as f64;
    let cov = |c: &CommunityPosterior| {
        let denom = if c.dof > l + 1.0 { c.dof - l - 1.0 } else { c.dof };
        c.scale.as_matrix() / denom
    };
    let (sa, sb) = (cov(a), cov(b));
    let (ia, _) = cholesky_inverse_logdet(&sa)?;
    let (ib, _) = cholesky_inverse_logdet(&sb)?;
    let diff = &a.mean - &b.mean;
    let quad = diff.dot(&((&ia + &ib) * &diff));
    Ok(0.5 * ((&ib * &sa).trace() + (&ia * &sb).trace() - 2.0 * l + quad))
}

/// Greedily merges the closest community pair while its divergence is below
/// `merge_tau`. Returns the number of merges.
pub fn merge_communities(state: &mut ModelState, side: Side) -> Result<usize> {
    let tau = state.hyper.merge_tau;
    let hyper = state.hyper.clone();
    let mut merges = 0;
    loop {
        let s = state.side(side);
        let n = s.n_components();
        if n < 2 {
            break;
        }
        let mut best: Option<(f64, usize, usize)> = None;
        for d in 0..n {
            for e in d + 1..n {
                let div = community_divergence(&s.communities[d], &s.communities[e])?;
                if div < tau && best.is_none_or(|(b, _, _)| div < b) {
                    best = Some((div, d, e));
                }
            }
        }
        let Some((_, keep, drop)) = best else { break };
        let s = state.side_mut(side);
        for q in &mut s.memberships {
            let w = q.weights.remove(drop);
            q.weights[keep] += w;
        }
        let mass = s.stats.mass.remove(drop);
        let sum = s.stats.sum.remove(drop);
        let sum_outer = s.stats.sum_outer.remove(drop);
        s.stats.mass[keep] += mass;
        s.stats.sum[keep] += sum;
        s.stats.sum_outer[keep] += sum_outer;
        s.communities.remove(drop);
        s.sticks = StickPosterior::from_mass(&s.stats.mass, hyper.concentration(side));
        s.communities[keep] = community_from_stats(&s.stats, keep, &hyper, side)?;
        merges += 1;
    }
    Ok(merges)
}

/// What one chunk did to the component sets.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ChunkReport {
    pub new_users: usize,
    pub new_items: usize,
    pub spawned_users: usize,
    pub spawned_items: usize,
    pub merged_users: usize,
    pub merged_items: usize,
    pub empirical_pass: bool,
}

/// State of a stream: the model, everything observed so far and the
/// empirical-Bayes bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct OnlineSession {
    pub state: ModelState,
    pub observed: SparseRatings,
    pub config: OnlineConfig,
    pub chunks_processed: u64,
    /// Pairs first observed since the last empirical pass.
    pub pending_new: Vec<(usize, usize)>,
    /// Observed count at the last empirical pass.
    pub observed_at_last_pass: usize,
}

impl OnlineSession {
    /// A session with no entities yet and `d_init`/`k_init` prior components.
    pub fn new(hyper: &Hyperparameters, d_init: usize, k_init: usize, seed: u64, config: OnlineConfig) -> Result<Self> {
        let state = init_state_sized(0, 0, hyper, d_init, k_init, seed)?;
        Ok(Self::from_state(state, SparseRatings::empty(0, 0), config))
    }

    /// Continues from an existing state whose entities have seen `observed`.
    pub fn from_state(state: ModelState, observed: SparseRatings, config: OnlineConfig) -> Self {
        let n = observed.len();
        let mut observed = observed;
        observed.grow(state.users.n_entities(), state.items.n_entities());
        OnlineSession { state, observed, config, chunks_processed: 0, pending_new: Vec::new(), observed_at_last_pass: n }
    }

    /// Adds placeholder factors for entities with indices beyond the current range.
    fn grow_side(&mut self, side: Side, n: usize) -> Vec<usize> {
        let l = self.state.latent_dim();
        let current = self.state.side(side).n_entities();
        if n <= current {
            return Vec::new();
        }
        let sticks_q = {
            let s = self.state.side(side);
            MembershipPosterior::from_scores(&s.sticks.expected_log_weights())
        };
        for _ in current..n {
            let f = FactorPosterior::random(&mut self.state.rng, l);
            let s = self.state.side_mut(side);
            s.factors.push(f);
            s.memberships.push(sticks_q.clone());
        }
        (current..n).collect()
    }

    /// Factor and membership updates for one side followed by its global update.
    fn update_side(&mut self, side: Side, chunk: &RatingChunk, new: &BTreeSet<usize>) -> Result<usize> {
        let touched: BTreeSet<usize> = chunk.entries.iter().map(|e| e.entity(side)).chain(new.iter().copied()).collect();
        let touched: Vec<usize> = touched.into_iter().collect();
        let snapshots: Vec<(usize, Snapshot)> = touched
            .iter()
            .map(|&i| {
                let before = if new.contains(&i) {
                    None
                } else {
                    let s = self.state.side(side);
                    Some((s.memberships[i].clone(), s.factors[i].clone()))
                };
                (i, before)
            })
            .collect();

        let snapshot = &self.state;
        let factors = touched
            .par_iter()
            .map(|&i| {
                if new.contains(&i) {
                    new_entity_factor(snapshot, side, i, chunk)
                } else {
                    online_update_factor(snapshot, side, i, chunk)
                }
                .context_with(|| format!("{} {i} online factor", side.name()))
            })
            .collect::<Result<Vec<_>>>()?;
        for (&i, f) in touched.iter().zip(factors) {
            self.state.side_mut(side).factors[i] = f;
        }

        let mut spawned = 0;
        for &i in &touched {
            let (_, did_spawn) = online_update_membership(&mut self.state, side, i, false)?;
            spawned += did_spawn as usize;
        }

        let mut deltas = accumulate_deltas(&self.state, side, &snapshots)?;
        online_update_globals(&mut self.state, side, &mut deltas, self.config.globals)?;
        Ok(spawned)
    }

    /// Batch re-update of the given entities against all observed ratings.
    fn refresh_side(&mut self, side: Side, entities: &[usize]) -> Result<()> {
        let snapshots: Vec<(usize, Snapshot)> = entities
            .iter()
            .map(|&i| {
                let s = self.state.side(side);
                (i, Some((s.memberships[i].clone(), s.factors[i].clone())))
            })
            .collect();
        let snapshot = &self.state;
        let observed = &self.observed;
        let factors = entities
            .par_iter()
            .map(|&i| update_factor(snapshot, observed, side, i))
            .collect::<Result<Vec<_>>>()?;
        for (&i, f) in entities.iter().zip(factors) {
            self.state.side_mut(side).factors[i] = f;
        }
        for &i in entities {
            online_update_membership(&mut self.state, side, i, false)?;
        }
        let mut deltas = accumulate_deltas(&self.state, side, &snapshots)?;
        online_update_globals(&mut self.state, side, &mut deltas, self.config.globals)
    }

    /// Touched entities plus everything adjacent (in the observed ratings) to
    /// the chunk's entities on the other side.
    fn neighbourhood(&self, side: Side, chunk: &RatingChunk) -> Vec<usize> {
        let mut set: BTreeSet<usize> = chunk.entries.iter().map(|e| e.entity(side)).collect();
        let others: BTreeSet<usize> = chunk.entries.iter().map(|e| e.counterpart(side)).collect();
        for j in others {
            set.extend(self.observed.neighbors(side.other(), j).map(|(i, _)| i));
        }
        set.into_iter().collect()
    }

    pub fn process_chunk(&mut self, chunk: &RatingChunk) -> Result<ChunkReport> {
        let mut report = ChunkReport::default();
        if chunk.is_empty() {
            return Ok(report);
        }
        chunk.validate(&self.observed)?;
        let step = self.chunks_processed + 1;
        let max_user = chunk.entries.iter().map(|e| e.user + 1).max().unwrap_or(0);
        let max_item = chunk.entries.iter().map(|e| e.item + 1).max().unwrap_or(0);
        let new_users: BTreeSet<usize> = self.grow_side(Side::User, max_user).into_iter().collect();
        let new_items: BTreeSet<usize> = self.grow_side(Side::Item, max_item).into_iter().collect();
        report.new_users = new_users.len();
        report.new_items = new_items.len();
        self.observed.grow(self.state.users.n_entities(), self.state.items.n_entities());

        report.spawned_users = self
            .update_side(Side::User, chunk, &new_users)
            .context_with(|| format!("chunk {step} user side"))?;
        report.spawned_items = self
            .update_side(Side::Item, chunk, &new_items)
            .context_with(|| format!("chunk {step} item side"))?;
        if self.config.merge {
            report.merged_users = merge_communities(&mut self.state, Side::User)?;
            report.merged_items = merge_communities(&mut self.state, Side::Item)?;
        }

        for e in &chunk.entries {
            if self.observed.upsert(e.user, e.item, e.value).is_none() {
                self.pending_new.push((e.user, e.item));
            }
        }

        for _ in 0..self.config.propagation_sweeps {
            for side in Side::BOTH {
                let entities = self.neighbourhood(side, chunk);
                self.refresh_side(side, &entities)
                    .context_with(|| format!("chunk {step} {} propagation", side.name()))?;
            }
        }

        self.chunks_processed = step;
        if let Some(every) = self.config.empirical_every {
            if every > 0 && step.is_multiple_of(every as u64) {
                self.empirical_pass()?;
                report.empirical_pass = true;
            }
        }
        Ok(report)
    }

    /// Runs the streaming empirical-Bayes pass now and records its ELBO.
    pub fn empirical_pass(&mut self) -> Result<f64> {
        let new_entries: Vec<Rating> = self
            .pending_new
            .iter()
            .filter_map(|&(u, i)| self.observed.get(u, i).map(|v| Rating::new(u, i, v)))
            .collect();
        let elbo = run_evb_pass_online(&mut self.state, &self.observed, &new_entries, self.observed_at_last_pass)?;
        self.state.elbo_trace.push(elbo);
        self.pending_new.clear();
        self.observed_at_last_pass = self.observed.len();
        Ok(elbo)
    }
}
