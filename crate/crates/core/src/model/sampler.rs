use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, ChiSquared, Distribution, StandardNormal};

use crate::error::{HemfError, Result};
use crate::math::{cholesky_inverse_logdet, symmetrize};
use crate::model::{CommunityUpdate, Hyperparameters, Side};
use crate::ratings::{Rating, SparseRatings};

/// Ratings drawn from the generative model, with the latent truth kept for recovery tests.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub ratings: SparseRatings,
    pub user_labels: Vec<usize>,
    pub item_labels: Vec<usize>,
    pub user_factors: Vec<DVector<f64>>,
    pub item_factors: Vec<DVector<f64>>,
    /// Truncated stick-breaking weights actually used for the labels.
    pub user_weights: Vec<f64>,
    pub item_weights: Vec<f64>,
}

struct SideDraw {
    labels: Vec<usize>,
    factors: Vec<DVector<f64>>,
    weights: Vec<f64>,
}

/// Ancestral sampling with sticks truncated at `d_true`/`k_true` (last stick set to 1).
/// Exactly `round(density · n_users · n_items)` distinct pairs are observed.
pub fn sample_from_model(
    hyper: &Hyperparameters,
    d_true: usize,
    k_true: usize,
    n_users: usize,
    n_items: usize,
    density: f64,
    seed: u64,
) -> Result<SyntheticData> {
    hyper.validate()?;
    if !(density > 0.0 && density <= 1.0) {
        return Err(HemfError::InvalidConfig(format!("density must lie in (0, 1], got {density}")));
    }
    if d_true == 0 || k_true == 0 || n_users == 0 || n_items == 0 {
        return Err(HemfError::InvalidConfig("component and entity counts must be >= 1".into()));
    }
    if hyper.iota0 < hyper.latent_dim as f64 {
        return Err(HemfError::InvalidConfig(
            "sampling the inverse-Wishart needs iota0 >= L".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let users = draw_side(hyper, Side::User, d_true, n_users, &mut rng)?;
    let items = draw_side(hyper, Side::Item, k_true, n_items, &mut rng)?;

    let total = n_users * n_items;
    let n_obs = ((density * total as f64).round() as usize).clamp(1, total);
    let mut cells = sample_indices(&mut rng, total, n_obs).into_vec();
    cells.sort_unstable();
    let noise_sd = hyper.sigma2.sqrt();
    let entries = cells
        .into_iter()
        .map(|cell| {
            let (u, i) = (cell / n_items, cell % n_items);
            let eps: f64 = rng.sample(StandardNormal);
            Rating::new(u, i, users.factors[u].dot(&items.factors[i]) + noise_sd * eps)
        })
        .collect();

    Ok(SyntheticData {
        ratings: SparseRatings::new(n_users, n_items, entries)?,
        user_labels: users.labels,
        item_labels: items.labels,
        user_factors: users.factors,
        item_factors: items.factors,
        user_weights: users.weights,
        item_weights: items.weights,
    })
}

fn draw_side(hyper: &Hyperparameters, side: Side, comps: usize, n: usize, rng: &mut ChaCha8Rng) -> Result<SideDraw> {
    let l = hyper.latent_dim;
    let conc = hyper.concentration(side);
    let stick = Beta::new(1.0, conc).map_err(|e| HemfError::InvalidConfig(e.to_string()))?;
    let mut weights = Vec::with_capacity(comps);
    let mut remaining = 1.0;
    for d in 0..comps {
        let v = if d + 1 == comps { 1.0 } else { stick.sample(rng) };
        weights.push(remaining * v);
        remaining *= 1.0 - v;
    }

    let (w0_inv, _) = cholesky_inverse_logdet(hyper.w0.as_matrix())?;
    let mut means = Vec::with_capacity(comps);
    let mut chols = Vec::with_capacity(comps);
    for _ in 0..comps {
        let cov = sample_inverse_wishart(&w0_inv, hyper.iota0, rng)?;
        let mean_scale = match hyper.community_update {
            CommunityUpdate::Printed => hyper.lambda0,
            CommunityUpdate::Conjugate => 1.0 / hyper.lambda0,
        };
        let chol = cov
            .clone()
            .cholesky()
            .ok_or_else(|| HemfError::NotPositiveDefinite("sampled covariance".into()))?
            .l();
        let z = standard_normal_vector(l, rng);
        means.push(hyper.base_mean(side) + (&chol * z) * mean_scale.sqrt());
        chols.push(chol);
    }

    let mut labels = Vec::with_capacity(n);
    let mut factors = Vec::with_capacity(n);
    for _ in 0..n {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut label = comps - 1;
        for (d, w) in weights.iter().enumerate() {
            acc += w;
            if u < acc {
                label = d;
                break;
            }
        }
        let z = standard_normal_vector(l, rng);
        factors.push(&means[label] + &chols[label] * z);
        labels.push(label);
    }
    Ok(SideDraw { labels, factors, weights })
}

fn standard_normal_vector(l: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_fn(l, |_, _| rng.sample(StandardNormal))
}

/// Σ ~ iW(W₀, ι₀) via a Bartlett draw of Σ⁻¹ ~ Wishart(W₀⁻¹, ι₀).
fn sample_inverse_wishart(w0_inv: &DMatrix<f64>, dof: f64, rng: &mut ChaCha8Rng) -> Result<DMatrix<f64>> {
    let l = w0_inv.nrows();
    let chol = w0_inv
        .clone()
        .cholesky()
        .ok_or_else(|| HemfError::NotPositiveDefinite("W0 inverse".into()))?
        .l();
    let mut a = DMatrix::zeros(l, l);
    for i in 0..l {
        let chi = ChiSquared::new(dof - i as f64).map_err(|e| HemfError::InvalidConfig(e.to_string()))?;
        a[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = rng.sample(StandardNormal);
        }
    }
    let la = chol * a;
    let precision = symmetrize(&la * la.transpose());
    let (cov, _) = cholesky_inverse_logdet(&precision)?;
    Ok(cov)
}
