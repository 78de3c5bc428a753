use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Dataset;
use crate::error::{Error, Result};

/// Stratified assignment of subjects to folds, plus the trial seeds.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldPlan {
    pub n_folds: usize,
    /// Fold of each sample, aligned with `Dataset::samples`.
    pub fold_of: Vec<usize>,
    /// `master_seed + trial_index`.
    pub seeds: Vec<u64>,
}

impl FoldPlan {
    /// Sample indices in `fold`.
    pub fn validation(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of.len()).filter(|&i| self.fold_of[i] == fold).collect()
    }

    /// Sample indices outside `fold`.
    pub fn training(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of.len()).filter(|&i| self.fold_of[i] != fold).collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_folds];
        for &f in &self.fold_of {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Shuffles each class with a generator seeded from `master_seed` and deals
/// the subjects round-robin into `n_folds` folds. The dealing position
/// carries over from one class to the next, so fold sizes differ by at
/// most one overall as well as within each class.
pub fn make_folds(
    dataset: &Dataset,
    master_seed: u64,
    n_folds: usize,
    trials: usize,
) -> Result<FoldPlan> {
    if n_folds < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {n_folds}")));
    }
    if trials == 0 {
        return Err(Error::Config("need at least one trial".into()));
    }
    let counts = dataset.class_counts();
    for (class, &n) in counts.iter().enumerate() {
        if n == 0 {
            return Err(Error::Input(format!(
                "cannot stratify: no subjects with label {class}"
            )));
        }
        if n < n_folds {
            return Err(Error::Input(format!(
                "cannot stratify: label {class} has {n} subjects for {n_folds} folds"
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    let mut fold_of = vec![0; dataset.len()];
    let mut next = 0;
    for class in 0..2 {
        let mut members: Vec<usize> = (0..dataset.len())
            .filter(|&i| dataset.samples[i].label == class)
            .collect();
        members.shuffle(&mut rng);
        for i in members {
            fold_of[i] = next % n_folds;
            next += 1;
        }
    }
    let seeds = (0..trials as u64).map(|t| master_seed.wrapping_add(t)).collect();
    Ok(FoldPlan {
        n_folds,
        fold_of,
        seeds,
    })
}
