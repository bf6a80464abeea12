//! The per-fold training loop and bag-level evaluation.
//!
//! Epoch `k` trains on the real bags plus the virtual bags generated at the
//! end of epoch `k − 1`, in one seeded shuffle. Each step: forward one bag,
//! binary cross-entropy on the bag label, plus (real bags only, when enabled)
//! the pretext loss combined as `(L_mil + μ L_ssl) / (1 + μ)`; backward; Adam.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Bag;
use crate::metrics::{Confusion, MetricSet};
use crate::milnet::{bag_forward_on_tape, predict, prediction_from_graph, BagGraph, BoundModel, MilConfig, MilModel};
use crate::numcore::{AdamConfig, AdamState, Real, Tape, Var};
use crate::ssl::{ssl_loss_on_tape, total_loss_on_tape, SslConfig, SslTask};
use crate::vbag::{augmentation_schedule, generate_virtual_bags, AugmentSchedule, InstanceStore};
use crate::{Error, Result};

/// Ablation configurations: which of the two auxiliary components are on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Ablation {
    /// A: MIL only.
    #[cfg_attr(feature = "serde", serde(rename = "A"))]
    MilOnly,
    /// B: MIL + virtual-bag augmentation.
    #[cfg_attr(feature = "serde", serde(rename = "B"))]
    MilAug,
    /// C: MIL + pretext loss.
    #[cfg_attr(feature = "serde", serde(rename = "C"))]
    MilSsl,
    /// D: MIL + both.
    #[cfg_attr(feature = "serde", serde(rename = "D"))]
    MilBoth,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::MilOnly, Ablation::MilAug, Ablation::MilSsl, Ablation::MilBoth];

    pub fn uses_augmentation(self) -> bool {
        matches!(self, Ablation::MilAug | Ablation::MilBoth)
    }

    pub fn uses_ssl(self) -> bool {
        matches!(self, Ablation::MilSsl | Ablation::MilBoth)
    }

    pub fn letter(self) -> char {
        match self {
            Ablation::MilOnly => 'A',
            Ablation::MilAug => 'B',
            Ablation::MilSsl => 'C',
            Ablation::MilBoth => 'D',
        }
    }

    pub fn from_letter(c: char) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.letter() == c.to_ascii_uppercase())
    }

    pub fn description(self) -> &'static str {
        match self {
            Ablation::MilOnly => "MIL only",
            Ablation::MilAug => "MIL + augmentation",
            Ablation::MilSsl => "MIL + self-supervised",
            Ablation::MilBoth => "MIL + both",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Key-instance fraction.
    pub alpha: f64,
    /// Regular-instance harvest fraction.
    pub gamma: f64,
    pub aug_start_epoch: usize,
    /// Upper bound on virtual bags generated per epoch; the default count is
    /// `N_neg − N_pos` of the training split.
    pub max_virtual_bags: usize,
    pub ssl: SslConfig,
    pub threshold: f64,
    pub seed: u64,
    pub ablation: Ablation,
    pub model: MilConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::paper_defaults()
    }
}

impl TrainConfig {
    /// Optimiser, schedule and model sizes as used for the clinical data.
    pub fn paper_defaults() -> Self {
        Self {
            epochs: 50,
            batch_size: 1,
            adam: AdamConfig {
                learning_rate: 1e-4,
                beta1: 0.9,
                beta2: 0.999,
                epsilon: 1e-8,
                weight_decay: 5e-4,
            },
            alpha: 0.025,
            gamma: 0.2,
            aug_start_epoch: 26,
            max_virtual_bags: 1000,
            ssl: SslConfig::default(),
            threshold: 0.5,
            seed: 0,
            ablation: Ablation::MilBoth,
            model: MilConfig::default(),
        }
    }

    /// Narrower network (12/12/16 filters, M = 64, L = 32), a larger step and
    /// a shorter schedule for the synthetic bags. `α` and `γ` are raised so a
    /// 36-instance bag yields whole key instances and a handful of correctly
    /// scored positives fill a virtual bag.
    pub fn synthetic() -> Self {
        let base = Self::paper_defaults();
        Self {
            epochs: 40,
            adam: AdamConfig {
                learning_rate: 1e-3,
                ..base.adam
            },
            alpha: 0.1,
            gamma: 0.5,
            aug_start_epoch: 21,
            ssl: SslConfig {
                hidden_width: 64,
                ..base.ssl
            },
            model: MilConfig {
                channels: [12, 12, 16],
                feature_dim: 64,
                attention_dim: 32,
                ..base.model
            },
            ..base
        }
    }

    pub fn schedule(&self) -> AugmentSchedule {
        AugmentSchedule {
            start_epoch: self.aug_start_epoch,
            total_epochs: self.epochs,
        }
    }

    pub fn ssl_task(&self) -> SslTask {
        if self.ablation.uses_ssl() {
            self.ssl.task
        } else {
            SslTask::None
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::contract("epochs and batch_size must be positive"));
        }
        if !(0.0 < self.alpha && self.alpha < self.gamma && self.gamma < 1.0) {
            return Err(Error::contract(format!(
                "need 0 < alpha < gamma < 1, got alpha={}, gamma={}",
                self.alpha, self.gamma
            )));
        }
        if self.ablation.uses_ssl() && (self.ssl.task == SslTask::None || !(self.ssl.mu > 0.0)) {
            return Err(Error::contract("ablation with pretext loss needs a task and mu > 0"));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::contract(format!("threshold {} outside [0, 1]", self.threshold)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_mil_loss: f64,
    /// Mean pretext loss over the real bags that had one; `None` when the
    /// pretext loss is disabled.
    pub mean_ssl_loss: Option<f64>,
    pub mean_total_loss: f64,
    pub real_bags: usize,
    /// Virtual bags trained on in this epoch (generated in the previous one).
    pub virtual_bags_used: usize,
    pub virtual_bags_generated: usize,
    pub key_harvested: usize,
    pub regular_harvested: usize,
    pub train_accuracy: f64,
    /// Where each instance of the virtual bags generated this epoch came from.
    pub generated: Vec<VirtualProvenance>,
}

#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct VirtualProvenance {
    pub bag_id: alloc::string::String,
    pub n_key: usize,
    /// `(source bag id, instance index)`, key instances first.
    pub sources: Vec<(alloc::string::String, usize)>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn total_virtual_bags(&self) -> usize {
        self.epochs.iter().map(|e| e.virtual_bags_used).sum()
    }

    pub fn uses_ssl(&self) -> bool {
        self.epochs.iter().any(|e| e.mean_ssl_loss.is_some())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: MilModel<f32>,
    pub history: History,
}

/// Loss graph of one bag.
#[derive(Debug, Clone, Copy)]
pub struct StepGraph {
    pub bag: BagGraph,
    pub mil: Var,
    pub ssl: Option<Var>,
    pub total: Var,
}

/// Builds the training loss of one bag on `tape`. The pretext term is added
/// only for real bags with at least one complete slice.
pub fn bag_loss_on_tape<T: Real>(tape: &mut Tape<T>, model: &BoundModel, bag: &Bag, mu: f64) -> Result<StepGraph> {
    let graph = bag_forward_on_tape(tape, model, bag)?;
    let mil = tape.bce_with_logits_mean(graph.logit, &[bag.label])?;
    let slices = if bag.is_virtual {
        Vec::new()
    } else {
        bag.complete_slices()
    };
    let (ssl, total) = match (&model.ssl_head, slices.is_empty()) {
        (Some(head), false) => {
            let ssl = ssl_loss_on_tape(tape, head, graph.features, &slices)?;
            let total = total_loss_on_tape(tape, mil, ssl, mu)?;
            (Some(ssl), total)
        }
        _ => (None, mil),
    };
    Ok(StepGraph {
        bag: graph,
        mil,
        ssl,
        total,
    })
}

/// Derives an independent seed from `seed` and `salt`.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    // splitmix64 finaliser
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn train_fold(train: &[Bag], config: &TrainConfig) -> Result<TrainOutcome> {
    train_fold_with(train, config, |_, _| {})
}

/// Trains one model, calling `on_epoch` with the record and the model after
/// each epoch.
pub fn train_fold_with<F: FnMut(&EpochRecord, &MilModel<f32>)>(
    train: &[Bag],
    config: &TrainConfig,
    mut on_epoch: F,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.iter().any(|b| b.is_virtual) {
        return Err(Error::contract("training split must contain real bags only"));
    }
    let n_pos = train.iter().filter(|b| b.label == 1).count();
    let n_neg = train.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::contract(format!(
            "training split needs both classes, got {n_pos} positive and {n_neg} negative"
        )));
    }
    let k_bar = train.iter().map(Bag::len).sum::<usize>() as f64 / train.len() as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model: MilModel<f32> = MilModel::new(config.model, config.ssl_task(), config.ssl.hidden_width, &mut rng)?;
    model.config.threshold = config.threshold;
    let mut adam = AdamState::new(config.adam);
    let mut store = InstanceStore::new(config.alpha, config.gamma, k_bar)?;
    let virtual_count = (n_neg - n_pos).min(config.max_virtual_bags);
    let schedule = config.schedule();
    let augment = config.ablation.uses_augmentation();

    let mut pending: Vec<Bag> = Vec::new();
    let mut history = History::default();
    for epoch in 1..=config.epochs {
        let harvesting = augment && augmentation_schedule(epoch, &schedule);
        store.clear();
        let virtual_bags = core::mem::take(&mut pending);
        let mut order: Vec<(bool, usize)> = (0..train.len())
            .map(|i| (false, i))
            .chain((0..virtual_bags.len()).map(|i| (true, i)))
            .collect();
        order.shuffle(&mut rng);

        let mut record = EpochRecord {
            epoch,
            real_bags: train.len(),
            virtual_bags_used: virtual_bags.len(),
            ..EpochRecord::default()
        };
        let (mut mil_sum, mut ssl_sum, mut total_sum) = (0.0f64, 0.0f64, 0.0f64);
        let mut ssl_terms = 0usize;
        let mut correct = 0usize;
        let mut in_batch = 0usize;
        model.zero_grads();
        for &(is_virtual, i) in &order {
            let bag = if is_virtual { &virtual_bags[i] } else { &train[i] };
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let step = bag_loss_on_tape(&mut tape, &bound, bag, config.ssl.mu)?;
            let loss = if config.batch_size > 1 {
                tape.scale(step.total, 1.0 / config.batch_size as f64)
            } else {
                step.total
            };
            tape.backward(loss)?;
            model.absorb_grads(&tape, &bound);

            mil_sum += tape.scalar(step.mil).as_f64();
            total_sum += tape.scalar(step.total).as_f64();
            if let Some(s) = step.ssl {
                ssl_sum += tape.scalar(s).as_f64();
                ssl_terms += 1;
            }
            let prediction = prediction_from_graph(&tape, &step.bag, config.threshold);
            if !is_virtual {
                correct += usize::from(prediction.label == bag.label);
            }
            if harvesting && !is_virtual {
                let got = store.harvest(bag, &prediction, epoch)?;
                record.key_harvested += got.key.len();
                record.regular_harvested += got.regular.len();
            }
            drop(tape);

            in_batch += 1;
            if in_batch == config.batch_size {
                adam.step(&mut model.params_mut())?;
                model.zero_grads();
                in_batch = 0;
            }
        }
        if in_batch > 0 {
            adam.step(&mut model.params_mut())?;
            model.zero_grads();
        }

        let steps = order.len() as f64;
        record.mean_mil_loss = mil_sum / steps;
        record.mean_total_loss = total_sum / steps;
        record.mean_ssl_loss = (ssl_terms > 0).then(|| ssl_sum / ssl_terms as f64);
        record.train_accuracy = correct as f64 / train.len() as f64;

        if harvesting && virtual_count > 0 {
            let generated = generate_virtual_bags(&store, virtual_count, mix_seed(config.seed, epoch as u64))?;
            record.virtual_bags_generated = generated.len();
            for (j, vb) in generated.into_iter().enumerate() {
                let id = format!("virtual-e{epoch}-{j}");
                record.generated.push(VirtualProvenance {
                    bag_id: id.clone(),
                    n_key: vb.n_key,
                    sources: vb.provenance.clone(),
                });
                pending.push(vb.into_bag(id));
            }
        }
        on_epoch(&record, &model);
        history.epochs.push(record);
    }
    Ok(TrainOutcome { model, history })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub confusion: Confusion,
    pub metrics: MetricSet,
    pub bag_ids: Vec<alloc::string::String>,
    pub labels: Vec<u8>,
    pub probabilities: Vec<f64>,
}

/// Scores every test bag and computes confusion counts at `threshold` plus
/// AUC over the raw probabilities.
pub fn evaluate<T: Real>(model: &MilModel<T>, test: &[Bag], threshold: f64) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::contract("empty test set"));
    }
    if let Some(b) = test.iter().find(|b| b.is_virtual) {
        return Err(Error::contract(format!("virtual bag {} in a test set", b.id)));
    }
    let mut probabilities = Vec::with_capacity(test.len());
    for bag in test {
        probabilities.push(predict(bag, model)?.probability);
    }
    let labels: Vec<u8> = test.iter().map(|b| b.label).collect();
    let (confusion, metrics) = MetricSet::compute(&probabilities, &labels, threshold)?;
    Ok(EvalReport {
        confusion,
        metrics,
        bag_ids: test.iter().map(|b| b.id.clone()).collect(),
        labels,
        probabilities,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_defaults_match_published_values() {
        let c = TrainConfig::paper_defaults();
        assert_eq!(c.epochs, 50);
        assert_eq!(c.batch_size, 1);
        assert_eq!(c.adam.learning_rate, 1e-4);
        assert_eq!(c.adam.weight_decay, 5e-4);
        assert_eq!((c.adam.beta1, c.adam.beta2), (0.9, 0.999));
        assert_eq!((c.alpha, c.gamma), (0.025, 0.2));
        assert_eq!(c.aug_start_epoch, 26);
        assert_eq!(c.ssl.mu, 0.3);
        assert_eq!(c.threshold, 0.5);
        assert_eq!(c.model.feature_dim, 512);
        assert_eq!(c.model.attention_dim, 128);
    }

    #[test]
    fn ablation_switches() {
        assert!(!Ablation::MilOnly.uses_augmentation() && !Ablation::MilOnly.uses_ssl());
        assert!(Ablation::MilAug.uses_augmentation() && !Ablation::MilAug.uses_ssl());
        assert!(!Ablation::MilSsl.uses_augmentation() && Ablation::MilSsl.uses_ssl());
        assert!(Ablation::MilBoth.uses_augmentation() && Ablation::MilBoth.uses_ssl());
        assert_eq!(Ablation::from_letter('c'), Some(Ablation::MilSsl));
    }

    #[test]
    fn single_class_split_is_rejected() {
        let ds = crate::data::generate_synthetic(&crate::data::DatasetSpec {
            n_positive: 1,
            n_negative: 2,
            slices_per_bag: 1,
            key_fraction: 0.25,
            ..Default::default()
        })
        .unwrap();
        let negatives: Vec<Bag> = ds.bags.into_iter().filter(|b| b.label == 0).collect();
        let config = TrainConfig {
            model: MilConfig::reduced(),
            ..TrainConfig::paper_defaults()
        };
        assert!(matches!(train_fold(&negatives, &config), Err(Error::Contract(_))));
    }
}
