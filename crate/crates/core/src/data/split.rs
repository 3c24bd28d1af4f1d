//! Train/test protocols. All randomness comes from ChaCha8 seeded with the
//! split seed, so splits are reproducible across platforms.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{HemfError, Result};
use crate::model::Side;
use crate::ratings::SparseRatings;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SplitMode {
    /// Uniform entry split keeping `floor(fraction · n)` entries for training.
    Holdout(f64),
    /// One rating per user with at least two ratings goes to the test set.
    WeakGeneralization,
    /// Fold `fold` of a seeded `folds`-way partition is the test set.
    KFold { folds: usize, fold: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub mode: SplitMode,
    pub seed: u64,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        match self.mode {
            SplitMode::Holdout(f) if !(f > 0.0 && f < 1.0) => {
                Err(HemfError::InvalidConfig(format!("holdout fraction must lie in (0, 1), got {f}")))
            }
            SplitMode::KFold { folds, fold } if folds < 2 || fold >= folds => Err(HemfError::InvalidConfig(format!(
                "kfold needs folds >= 2 and fold < folds, got fold {fold} of {folds}"
            ))),
            _ => Ok(()),
        }
    }
}

fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

fn finish(ratings: &SparseRatings, mut train: Vec<usize>, mut test: Vec<usize>) -> Result<(SparseRatings, SparseRatings)> {
    if test.is_empty() {
        return Err(HemfError::DegenerateSplit("test set is empty".into()));
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((ratings.select(&train), ratings.select(&test)))
}

/// Splits into (train, test) over the same index spaces.
pub fn split_dataset(ratings: &SparseRatings, spec: &SplitSpec) -> Result<(SparseRatings, SparseRatings)> {
    spec.validate()?;
    let n = ratings.len();
    match spec.mode {
        SplitMode::Holdout(fraction) => {
            let order = permutation(n, spec.seed);
            let n_train = ((fraction * n as f64 + 1e-9).floor() as usize).min(n);
            let (train, test) = order.split_at(n_train);
            finish(ratings, train.to_vec(), test.to_vec())
        }
        SplitMode::WeakGeneralization => {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            let mut is_test = vec![false; n];
            let mut by_user: Vec<Vec<usize>> = vec![Vec::new(); ratings.n_users()];
            for (k, e) in ratings.entries().iter().enumerate() {
                by_user[e.user].push(k);
            }
            let mut skipped = 0;
            for positions in &by_user {
                match positions.len() {
                    0 => {}
                    1 => skipped += 1,
                    len => is_test[positions[rng.random_range(0..len)]] = true,
                }
            }
            if skipped > 0 {
                log::info!("{skipped} users with a single rating stay train-only");
            }
            let (test, train): (Vec<usize>, Vec<usize>) = (0..n).partition(|&k| is_test[k]);
            finish(ratings, train, test)
        }
        SplitMode::KFold { folds, fold } => {
            let order = permutation(n, spec.seed);
            let (mut train, mut test) = (Vec::new(), Vec::new());
            for (rank, &k) in order.iter().enumerate() {
                if rank % folds == fold {
                    test.push(k);
                } else {
                    train.push(k);
                }
            }
            finish(ratings, train, test)
        }
    }
}

/// Every fold of a seeded k-way partition.
pub fn kfold_splits(ratings: &SparseRatings, folds: usize, seed: u64) -> Result<Vec<(SparseRatings, SparseRatings)>> {
    (0..folds)
        .map(|fold| split_dataset(ratings, &SplitSpec { mode: SplitMode::KFold { folds, fold }, seed }))
        .collect()
}

/// Users with at least two ratings, the ones weak generalization tests.
pub fn eligible_users(ratings: &SparseRatings) -> usize {
    (0..ratings.n_users()).filter(|&u| ratings.degree(Side::User, u) >= 2).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ratings::Rating;
    use std::collections::HashSet;

    fn grid(users: usize, items: usize) -> SparseRatings {
        let entries = (0..users)
            .flat_map(|u| (0..items).map(move |i| Rating::new(u, i, (u * items + i) as f64)))
            .collect();
        SparseRatings::new(users, items, entries).unwrap()
    }

    fn pairs(r: &SparseRatings) -> HashSet<(usize, usize)> {
        r.entries().iter().map(|e| (e.user, e.item)).collect()
    }

    #[test]
    fn holdout_sizes_and_partition() {
        let r = grid(40, 25);
        let (train, test) = split_dataset(&r, &SplitSpec { mode: SplitMode::Holdout(0.9), seed: 1 }).unwrap();
        assert_eq!(test.len(), 100);
        assert_eq!(train.len(), 900);
        let (a, b) = (pairs(&train), pairs(&test));
        assert!(a.is_disjoint(&b));
        assert_eq!(a.union(&b).count(), 1000);
    }

    #[test]
    fn weak_generalization_one_per_user() {
        let mut entries: Vec<Rating> = (0..50).flat_map(|u| (0..3).map(move |i| Rating::new(u, i + u % 4, 1.0))).collect();
        entries.push(Rating::new(50, 0, 2.0));
        let r = SparseRatings::from_entries(entries).unwrap();
        assert_eq!(eligible_users(&r), 50);
        let (train, test) = split_dataset(&r, &SplitSpec { mode: SplitMode::WeakGeneralization, seed: 3 }).unwrap();
        assert_eq!(test.len(), 50);
        assert_eq!(train.len(), r.len() - 50);
        for u in 0..50 {
            assert_eq!(test.degree(Side::User, u), 1);
        }
        assert_eq!(train.degree(Side::User, 50), 1);
    }

    #[test]
    fn same_seed_same_split() {
        let r = grid(20, 20);
        for mode in [SplitMode::Holdout(0.8), SplitMode::WeakGeneralization, SplitMode::KFold { folds: 5, fold: 2 }] {
            let a = split_dataset(&r, &SplitSpec { mode, seed: 11 }).unwrap();
            let b = split_dataset(&r, &SplitSpec { mode, seed: 11 }).unwrap();
            assert_eq!(a, b);
            let c = split_dataset(&r, &SplitSpec { mode, seed: 12 }).unwrap();
            assert_ne!(a.1, c.1);
        }
    }

    /// Test sets of two independent seeds overlap like a hypergeometric draw:
    /// mean m²/n, variance m (m/n)(1 − m/n)(n − m)/(n − 1).
    #[test]
    fn seed_overlap_is_hypergeometric() {
        let r = grid(40, 25);
        let (n, m) = (1000.0f64, 100.0f64);
        let mean = m * m / n;
        let var = m * (m / n) * (1.0 - m / n) * (n - m) / (n - 1.0);
        let pairs_run = 60;
        let mut total = 0.0;
        for s in 0..pairs_run {
            let a = split_dataset(&r, &SplitSpec { mode: SplitMode::Holdout(0.9), seed: 2 * s }).unwrap().1;
            let b = split_dataset(&r, &SplitSpec { mode: SplitMode::Holdout(0.9), seed: 2 * s + 1 }).unwrap().1;
            total += pairs(&a).intersection(&pairs(&b)).count() as f64;
        }
        let avg = total / pairs_run as f64;
        let sd = (var / pairs_run as f64).sqrt();
        assert!((avg - mean).abs() < 4.0 * sd, "avg overlap {avg}, expected {mean} ± {sd}");
    }

    #[test]
    fn kfold_covers_every_entry_once() {
        let r = grid(10, 10);
        let folds = kfold_splits(&r, 4, 9).unwrap();
        let mut seen = HashSet::new();
        for (train, test) in &folds {
            assert_eq!(train.len() + test.len(), 100);
            for p in pairs(test) {
                assert!(seen.insert(p));
            }
        }
        assert_eq!(seen.len(), 100);
    }

    #[test]
    fn degenerate_and_invalid() {
        let r = grid(1, 3);
        let e = split_dataset(&r, &SplitSpec { mode: SplitMode::Holdout(0.9999999999), seed: 0 }).unwrap_err();
        assert!(matches!(e, HemfError::DegenerateSplit(_)));
        let single = SparseRatings::from_entries(vec![Rating::new(0, 0, 1.0), Rating::new(1, 1, 1.0)]).unwrap();
        assert!(split_dataset(&single, &SplitSpec { mode: SplitMode::WeakGeneralization, seed: 0 }).is_err());
        assert!(SplitSpec { mode: SplitMode::Holdout(1.0), seed: 0 }.validate().is_err());
        assert!(SplitSpec { mode: SplitMode::KFold { folds: 1, fold: 0 }, seed: 0 }.validate().is_err());
    }
}
