//! Comparison systems: plain SGD matrix factorization and the single-component
//! (BPMF) configuration of the batch model.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::batch::{fit_batch, BatchConfig, BatchFit};
use crate::error::{HemfError, Result};
use crate::model::{Hyperparameters, INIT_VARIANCE};
use crate::online::RatingChunk;
use crate::ratings::SparseRatings;

/// Factor norm beyond which SGD is declared divergent.
pub const DIVERGENCE_NORM: f64 = 1e6;

/// ε_t = initial / (1 + decay · t), t counting processed entries.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSchedule {
    pub initial: f64,
    pub decay: f64,
}

impl StepSchedule {
    pub fn at(&self, t: u64) -> f64 {
        self.initial / (1.0 + self.decay * t as f64)
    }
}

impl Default for StepSchedule {
    fn default() -> Self {
        StepSchedule { initial: 0.01, decay: 1e-4 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgdConfig {
    pub latent_dim: usize,
    pub schedule: StepSchedule,
    pub regularization: f64,
    pub seed: u64,
}

impl SgdConfig {
    pub fn new(latent_dim: usize) -> Self {
        SgdConfig { latent_dim, schedule: StepSchedule::default(), regularization: 0.02, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(HemfError::InvalidConfig("latent_dim must be >= 1".into()));
        }
        let s = self.schedule;
        if !(s.initial >= 0.0 && s.initial.is_finite() && s.decay >= 0.0 && s.decay.is_finite()) {
            return Err(HemfError::InvalidConfig("step schedule needs initial >= 0 and decay >= 0".into()));
        }
        if !(self.regularization >= 0.0 && self.regularization.is_finite()) {
            return Err(HemfError::InvalidConfig("regularization must be >= 0".into()));
        }
        Ok(())
    }
}

/// Point-estimate factorization trained one rating at a time.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdModel {
    pub user_factors: Vec<DVector<f64>>,
    pub item_factors: Vec<DVector<f64>>,
    pub schedule: StepSchedule,
    pub regularization: f64,
    /// Entries processed so far.
    pub steps: u64,
    pub latent_dim: usize,
    pub rng: ChaCha8Rng,
}

impl SgdModel {
    pub fn new(config: &SgdConfig) -> Result<Self> {
        config.validate()?;
        Ok(SgdModel {
            user_factors: Vec::new(),
            item_factors: Vec::new(),
            schedule: config.schedule,
            regularization: config.regularization,
            steps: 0,
            latent_dim: config.latent_dim,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        })
    }

    fn grow(&mut self, n_users: usize, n_items: usize) {
        let normal = Normal::new(0.0, INIT_VARIANCE.sqrt()).expect("valid normal");
        let l = self.latent_dim;
        while self.user_factors.len() < n_users {
            let v = DVector::from_fn(l, |_, _| normal.sample(&mut self.rng));
            self.user_factors.push(v);
        }
        while self.item_factors.len() < n_items {
            let v = DVector::from_fn(l, |_, _| normal.sample(&mut self.rng));
            self.item_factors.push(v);
        }
    }

    /// aᵀb, or `None` when either entity has never been seen.
    pub fn predict(&self, user: usize, item: usize) -> Option<f64> {
        Some(self.user_factors.get(user)?.dot(self.item_factors.get(item)?))
    }

    /// One simultaneous gradient step per entry, in chunk order.
    pub fn process_chunk(&mut self, chunk: &RatingChunk) -> Result<()> {
        let max_user = chunk.entries.iter().map(|e| e.user + 1).max().unwrap_or(0);
        let max_item = chunk.entries.iter().map(|e| e.item + 1).max().unwrap_or(0);
        self.grow(max_user, max_item);
        let reg = self.regularization;
        for e in &chunk.entries {
            let eps = self.schedule.at(self.steps);
            self.steps += 1;
            let a = &self.user_factors[e.user];
            let b = &self.item_factors[e.item];
            let err = e.value - a.dot(b);
            let new_a = a + (b * err - a * reg) * eps;
            let new_b = b + (a * err - b * reg) * eps;
            if !(new_a.norm() <= DIVERGENCE_NORM) {
                return Err(HemfError::Diverged { side: "user", index: e.user });
            }
            if !(new_b.norm() <= DIVERGENCE_NORM) {
                return Err(HemfError::Diverged { side: "item", index: e.item });
            }
            self.user_factors[e.user] = new_a;
            self.item_factors[e.item] = new_b;
        }
        Ok(())
    }

    /// Regularised squared error over a chunk.
    pub fn objective(&self, chunk: &RatingChunk) -> f64 {
        chunk
            .entries
            .iter()
            .filter_map(|e| {
                let a = self.user_factors.get(e.user)?;
                let b = self.item_factors.get(e.item)?;
                let r = e.value - a.dot(b);
                Some(r * r + self.regularization * (a.norm_squared() + b.norm_squared()))
            })
            .sum()
    }
}

pub fn sgd_process_chunk(model: &mut SgdModel, chunk: &RatingChunk) -> Result<()> {
    model.process_chunk(chunk)
}

/// The batch model with one component per side.
pub fn fit_bpmf(ratings: &SparseRatings, hyper: &Hyperparameters, config: &BatchConfig) -> Result<BatchFit> {
    let config = BatchConfig { d_init: 1, k_init: 1, ..config.clone() };
    fit_batch(ratings, hyper, &config)
}
