//! Prediction and scoring.

use std::collections::HashMap;

use nalgebra::DVector;
use rayon::prelude::*;

use crate::baselines::SgdModel;
use crate::error::{HemfError, Result};
use crate::model::{ModelState, Side};
use crate::ratings::SparseRatings;

/// sqrt of the mean squared error of `predictions` against the test entries, in entry order.
pub fn rmse(predictions: &[f64], test: &SparseRatings) -> Result<f64> {
    if test.is_empty() {
        return Err(HemfError::Empty("test set".into()));
    }
    if predictions.len() != test.len() {
        return Err(HemfError::DimensionMismatch(format!(
            "{} predictions for {} test entries",
            predictions.len(),
            test.len()
        )));
    }
    let sse: f64 = predictions.iter().zip(test.entries()).map(|(p, e)| (p - e.value).powi(2)).sum();
    Ok((sse / test.len() as f64).sqrt())
}

/// ⟨a⟩ for a known entity; for one the model has never seen, the mixture mean
/// Σ_d E[π_d]⟨μ_d⟩ renormalised over the instantiated components.
pub fn expected_factor(state: &ModelState, side: Side, entity: usize) -> DVector<f64> {
    let s = state.side(side);
    if let Some(f) = s.factors.get(entity) {
        return f.mean.clone();
    }
    let mut weights = Vec::with_capacity(s.n_components());
    let mut rest = 1.0;
    for (a, b) in s.sticks.eta1.iter().zip(&s.sticks.eta2) {
        let v = a / (a + b);
        weights.push(rest * v);
        rest *= 1.0 - v;
    }
    let total: f64 = weights.iter().sum();
    let mut mean = DVector::zeros(state.latent_dim());
    for (w, c) in weights.iter().zip(&s.communities) {
        mean.axpy(w / total, &c.mean, 1.0);
    }
    mean
}

/// ⟨a⟩ᵀ⟨b⟩ with the mixture-mean fallback for unseen entities, clipped to `range`.
pub fn predict_with_fallback(state: &ModelState, user: usize, item: usize, range: Option<(f64, f64)>) -> f64 {
    let p = match (state.users.factors.get(user), state.items.factors.get(item)) {
        (Some(a), Some(b)) => a.mean.dot(&b.mean),
        _ => expected_factor(state, Side::User, user).dot(&expected_factor(state, Side::Item, item)),
    };
    match range {
        Some((lo, hi)) => p.clamp(lo, hi),
        None => p,
    }
}

/// Predictions for every test entry, in entry order.
pub fn predict_all(state: &ModelState, test: &SparseRatings, range: Option<(f64, f64)>) -> Vec<f64> {
    test.entries()
        .par_iter()
        .map(|e| predict_with_fallback(state, e.user, e.item, range))
        .collect()
}

/// SGD predictions in entry order; pairs involving an entity the model never
/// saw get `fallback` (typically the training mean).
pub fn sgd_predict_all(model: &SgdModel, test: &SparseRatings, fallback: f64, range: Option<(f64, f64)>) -> Vec<f64> {
    test.entries()
        .iter()
        .map(|e| {
            let p = model.predict(e.user, e.item).unwrap_or(fallback);
            match range {
                Some((lo, hi)) => p.clamp(lo, hi),
                None => p,
            }
        })
        .collect()
}

/// Mean rating, the SGD fallback for unseen entities.
pub fn mean_rating(ratings: &SparseRatings) -> f64 {
    if ratings.is_empty() {
        return 0.0;
    }
    ratings.entries().iter().map(|e| e.value).sum::<f64>() / ratings.len() as f64
}

/// Fraction of entities whose predicted cluster's majority true label is their own.
pub fn purity(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(HemfError::DimensionMismatch(format!(
            "{} predicted labels for {} true labels",
            predicted.len(),
            truth.len()
        )));
    }
    if predicted.is_empty() {
        return Err(HemfError::Empty("labels".into()));
    }
    let mut counts: HashMap<usize, HashMap<usize, usize>> = HashMap::new();
    for (&p, &t) in predicted.iter().zip(truth) {
        *counts.entry(p).or_default().entry(t).or_default() += 1;
    }
    let hits: usize = counts.values().map(|c| c.values().copied().max().unwrap_or(0)).sum();
    Ok(hits as f64 / predicted.len() as f64)
}
