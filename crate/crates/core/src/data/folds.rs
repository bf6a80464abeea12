use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

/// Repeated stratified k-fold assignment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    pub n_folds: usize,
    pub n_repeats: usize,
    pub seed: u64,
    /// `assignments[repeat][bag]` is the test fold of that bag in that repeat.
    pub assignments: Vec<Vec<usize>>,
    /// True when some class has fewer members than folds, so some test folds
    /// lack that class.
    pub sparse_classes: bool,
}

impl FoldPlan {
    pub fn test_indices(&self, repeat: usize, fold: usize) -> Vec<usize> {
        self.assignments[repeat]
            .iter()
            .enumerate()
            .filter(|(_, &f)| f == fold)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn train_indices(&self, repeat: usize, fold: usize) -> Vec<usize> {
        self.assignments[repeat]
            .iter()
            .enumerate()
            .filter(|(_, &f)| f != fold)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn n_bags(&self) -> usize {
        self.assignments.first().map_or(0, Vec::len)
    }
}

/// Deals each class's shuffled members round-robin over the folds, carrying
/// the dealing position from one class to the next so fold sizes differ by at
/// most one.
pub fn stratified_folds(labels: &[u8], n_folds: usize, n_repeats: usize, seed: u64) -> Result<FoldPlan> {
    if n_folds < 2 {
        return Err(Error::contract(format!("need at least 2 folds, got {n_folds}")));
    }
    if n_repeats == 0 {
        return Err(Error::contract("need at least 1 repeat"));
    }
    if labels.len() < n_folds {
        return Err(Error::contract(format!(
            "{} bags cannot fill {n_folds} folds",
            labels.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes: [Vec<usize>; 2] = [
        (0..labels.len()).filter(|&i| labels[i] == 1).collect(),
        (0..labels.len()).filter(|&i| labels[i] != 1).collect(),
    ];
    let sparse_classes = classes.iter().any(|c| !c.is_empty() && c.len() < n_folds);
    let mut assignments = Vec::with_capacity(n_repeats);
    for _ in 0..n_repeats {
        let mut fold_of = alloc::vec![0usize; labels.len()];
        let mut cursor = rng.random_range(0..n_folds);
        for members in &classes {
            let mut members = members.clone();
            members.shuffle(&mut rng);
            for idx in members {
                fold_of[idx] = cursor;
                cursor = (cursor + 1) % n_folds;
            }
        }
        assignments.push(fold_of);
    }
    Ok(FoldPlan {
        n_folds,
        n_repeats,
        seed,
        assignments,
        sparse_classes,
    })
}
