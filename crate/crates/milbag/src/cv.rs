//! Repeated stratified cross-validation, one model per fold, folds trained
//! in parallel.
//!
//! Every fold's model seed is a function of the base seed, the repeat and the
//! fold only, and results are collected in plan order, so the outcome does
//! not depend on the number of worker threads.

use milbag_core::data::{stratified_folds, Bag, FoldPlan};
use milbag_core::metrics::{Confusion, MetricSet};
use milbag_core::train::{evaluate, mix_seed, train_fold, EpochRecord, TrainConfig, VirtualProvenance};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::CvConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BagScore {
    pub bag_id: String,
    pub label: u8,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FoldResult {
    pub repeat: usize,
    pub fold: usize,
    pub model_seed: u64,
    pub train_bags: usize,
    pub train_positive: usize,
    pub test_bags: usize,
    pub test_positive: usize,
    pub confusion: Confusion,
    pub metrics: MetricSet,
    pub virtual_bags_trained: usize,
    pub final_epoch: Option<EpochSummary>,
    pub predictions: Vec<BagScore>,
    #[serde(skip)]
    pub provenance: Vec<(usize, VirtualProvenance)>,
}

/// The last epoch's losses, without its provenance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_mil_loss: f64,
    pub mean_ssl_loss: Option<f64>,
    pub mean_total_loss: f64,
    pub train_accuracy: f64,
}

impl From<&EpochRecord> for EpochSummary {
    fn from(r: &EpochRecord) -> Self {
        Self {
            epoch: r.epoch,
            mean_mil_loss: r.mean_mil_loss,
            mean_ssl_loss: r.mean_ssl_loss,
            mean_total_loss: r.mean_total_loss,
            train_accuracy: r.train_accuracy,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CvOutcome {
    pub plan: FoldPlan,
    pub folds: Vec<FoldResult>,
}

pub fn fold_seed(base: u64, repeat: usize, fold: usize) -> u64 {
    mix_seed(base, ((repeat as u64) << 32 | fold as u64) + 1)
}

/// Trains on `train` and scores `test` with a model seeded by `seed`.
pub fn train_and_score(
    bags: &[Bag],
    train: &[usize],
    test: &[usize],
    config: &TrainConfig,
) -> milbag_core::Result<(FoldResult, milbag_core::milnet::MilModel<f32>)> {
    let train_bags: Vec<Bag> = train.iter().map(|&i| bags[i].clone()).collect();
    let test_bags: Vec<Bag> = test.iter().map(|&i| bags[i].clone()).collect();
    let outcome = train_fold(&train_bags, config)?;
    let eval = evaluate(&outcome.model, &test_bags, config.threshold)?;
    let predictions = eval
        .bag_ids
        .iter()
        .zip(&eval.labels)
        .zip(&eval.probabilities)
        .map(|((id, &label), &probability)| BagScore {
            bag_id: id.clone(),
            label,
            probability,
        })
        .collect();
    let provenance = outcome
        .history
        .epochs
        .iter()
        .flat_map(|e| e.generated.iter().map(move |p| (e.epoch, p.clone())))
        .collect();
    let result = FoldResult {
        repeat: 0,
        fold: 0,
        model_seed: config.seed,
        train_bags: train_bags.len(),
        train_positive: train_bags.iter().filter(|b| b.label == 1).count(),
        test_bags: test_bags.len(),
        test_positive: test_bags.iter().filter(|b| b.label == 1).count(),
        confusion: eval.confusion,
        metrics: eval.metrics,
        virtual_bags_trained: outcome.history.total_virtual_bags(),
        final_epoch: outcome.history.epochs.last().map(EpochSummary::from),
        predictions,
        provenance,
    };
    Ok((result, outcome.model))
}

/// A thread pool of `workers` threads; 0 uses one per core.
pub fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))
}

/// Runs every `(repeat, fold)` of the plan. `on_fold` is called as folds
/// finish, in completion order; the returned folds are in plan order.
pub fn run_cv(
    bags: &[Bag],
    config: &TrainConfig,
    cv: &CvConfig,
    workers: usize,
    on_fold: impl Fn(&FoldResult) + Sync,
) -> Result<CvOutcome> {
    let labels: Vec<u8> = bags.iter().map(|b| b.label).collect();
    let plan = stratified_folds(&labels, cv.folds, cv.repeats, cv.seed)?;
    let jobs: Vec<(usize, usize)> = (0..cv.repeats)
        .flat_map(|r| (0..cv.folds).map(move |f| (r, f)))
        .collect();
    let folds = pool(workers)?.install(|| {
        jobs.par_iter()
            .map(|&(repeat, fold)| {
                let config = TrainConfig {
                    seed: fold_seed(config.seed, repeat, fold),
                    ..config.clone()
                };
                let (mut result, _) = train_and_score(
                    bags,
                    &plan.train_indices(repeat, fold),
                    &plan.test_indices(repeat, fold),
                    &config,
                )
                .map_err(|source| Error::Fold { repeat, fold, source })?;
                result.repeat = repeat;
                result.fold = fold;
                on_fold(&result);
                Ok(result)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(CvOutcome { plan, folds })
}

/// Splits `indices` into (fit, validation), holding out `fraction` of each
/// class (at least one member of a class with two or more).
pub fn stratified_holdout(bags: &[Bag], indices: &[usize], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let (mut fit, mut val) = (Vec::new(), Vec::new());
    for label in [0u8, 1] {
        let mut members: Vec<usize> = indices.iter().copied().filter(|&i| bags[i].label == label).collect();
        members.shuffle(&mut rng);
        let n_val = ((members.len() as f64 * fraction).round() as usize)
            .clamp(usize::from(members.len() >= 2), members.len().saturating_sub(1));
        val.extend_from_slice(&members[..n_val]);
        fit.extend_from_slice(&members[n_val..]);
    }
    fit.sort_unstable();
    val.sort_unstable();
    (fit, val)
}
