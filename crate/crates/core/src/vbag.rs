//! Instance-level augmentation with virtual positive bags.
//!
//! After the forward pass of a correctly predicted positive bag, its
//! `⌊αK⌋` highest-attention instances join the key list and its `⌊γK⌋`
//! lowest-attention instances join the regular list. At the end of an epoch,
//! virtual bags are packed from `⌊αK̄⌋` key and `⌊(1−α)K̄⌋` regular
//! instances drawn without replacement, and are trained on in the next epoch.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Bag, Instance};
use crate::milnet::BagPrediction;
use crate::{Error, Result};

/// `⌊fraction · n⌋`, tolerant of representation error in decimal fractions
/// (so `0.29 · 100` counts as 29).
pub fn floor_count(fraction: f64, n: f64) -> usize {
    num_traits::Float::floor(fraction * n + 1e-9).max(0.0) as usize
}

#[derive(Debug, Clone, PartialEq)]
pub struct HarvestedInstance {
    pub pixels: Vec<f32>,
    pub source_bag: String,
    pub instance_index: usize,
    pub epoch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceStore {
    pub key_list: Vec<HarvestedInstance>,
    pub regular_list: Vec<HarvestedInstance>,
    pub alpha: f64,
    pub gamma: f64,
    /// Mean instances per bag over the training split.
    pub k_bar: f64,
}

/// What a single [`InstanceStore::harvest`] call appended.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct HarvestOutcome {
    pub key: Vec<usize>,
    pub regular: Vec<usize>,
}

impl InstanceStore {
    pub fn new(alpha: f64, gamma: f64, k_bar: f64) -> Result<Self> {
        if !(0.0 < alpha && alpha < gamma && gamma < 1.0) {
            return Err(Error::contract(format!(
                "need 0 < alpha < gamma < 1, got alpha={alpha}, gamma={gamma}"
            )));
        }
        if !(k_bar > 0.0) {
            return Err(Error::contract(format!("mean bag size must be positive, got {k_bar}")));
        }
        Ok(Self {
            key_list: Vec::new(),
            regular_list: Vec::new(),
            alpha,
            gamma,
            k_bar,
        })
    }

    pub fn clear(&mut self) {
        self.key_list.clear();
        self.regular_list.clear();
    }

    pub fn key_per_virtual_bag(&self) -> usize {
        floor_count(self.alpha, self.k_bar)
    }

    pub fn regular_per_virtual_bag(&self) -> usize {
        floor_count(1.0 - self.alpha, self.k_bar)
    }

    /// Appends key and regular instances of a correctly predicted real
    /// positive bag. Any other bag leaves the store untouched.
    pub fn harvest(&mut self, bag: &Bag, prediction: &BagPrediction, epoch: usize) -> Result<HarvestOutcome> {
        if bag.label != 1 || prediction.label != 1 || bag.is_virtual {
            return Ok(HarvestOutcome::default());
        }
        if prediction.attention.len() != bag.len() {
            return Err(Error::contract(format!(
                "{} attention weights for a bag of {}",
                prediction.attention.len(),
                bag.len()
            )));
        }
        let outcome = select_instances(&prediction.attention, self.alpha, self.gamma);
        let take = |i: usize| HarvestedInstance {
            pixels: bag.instances[i].pixels.clone(),
            source_bag: bag.id.clone(),
            instance_index: i,
            epoch,
        };
        self.key_list.extend(outcome.key.iter().map(|&i| take(i)));
        self.regular_list.extend(outcome.regular.iter().map(|&i| take(i)));
        Ok(outcome)
    }
}

/// Ranks instances by attention (ties: lower index first) and picks the top
/// `⌊αK⌋` as key and the bottom `⌊γK⌋` of the remainder as regular.
pub fn select_instances(attention: &[f64], alpha: f64, gamma: f64) -> HarvestOutcome {
    let k = attention.len();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| attention[b].total_cmp(&attention[a]).then(a.cmp(&b)));
    let n_key = floor_count(alpha, k as f64).min(k);
    let key: Vec<usize> = order[..n_key].to_vec();
    let n_regular = floor_count(gamma, k as f64).min(k - n_key);
    // lowest weights; among equal weights the lower index is taken first
    let mut ascending: Vec<usize> = order[n_key..].to_vec();
    ascending.sort_by(|&a, &b| attention[a].total_cmp(&attention[b]).then(a.cmp(&b)));
    let regular = ascending[..n_regular].to_vec();
    HarvestOutcome { key, regular }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VirtualBag {
    pub instances: Vec<Instance>,
    /// `(source bag id, instance index)`; key draws come first.
    pub provenance: Vec<(String, usize)>,
    pub n_key: usize,
}

impl VirtualBag {
    pub fn label(&self) -> u8 {
        1
    }

    pub fn into_bag(self, id: String) -> Bag {
        Bag {
            id,
            label: 1,
            instances: self.instances,
            is_virtual: true,
        }
    }
}

/// Packs `count` virtual positive bags. Returns an empty list when the store
/// cannot fill one bag, including when `⌊αK̄⌋ = 0`.
pub fn generate_virtual_bags(store: &InstanceStore, count: usize, seed: u64) -> Result<Vec<VirtualBag>> {
    if count == 0 {
        return Err(Error::contract("virtual bag count must be positive"));
    }
    let n_key = store.key_per_virtual_bag();
    let n_regular = store.regular_per_virtual_bag();
    if n_key == 0 || store.key_list.len() < n_key || store.regular_list.len() < n_regular {
        return Ok(Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bags = Vec::with_capacity(count);
    for _ in 0..count {
        let keys = sample(&mut rng, store.key_list.len(), n_key);
        let regulars = sample(&mut rng, store.regular_list.len(), n_regular);
        let picks = keys
            .iter()
            .map(|i| &store.key_list[i])
            .chain(regulars.iter().map(|i| &store.regular_list[i]));
        let mut instances = Vec::with_capacity(n_key + n_regular);
        let mut provenance = Vec::with_capacity(n_key + n_regular);
        for h in picks {
            instances.push(Instance {
                pixels: h.pixels.clone(),
                slice_index: 0,
                grid_position: 0,
                metadata_valid: false,
            });
            provenance.push((h.source_bag.clone(), h.instance_index));
        }
        bags.push(VirtualBag {
            instances,
            provenance,
            n_key,
        });
    }
    Ok(bags)
}

/// When virtual bags are generated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentSchedule {
    pub start_epoch: usize,
    pub total_epochs: usize,
}

impl Default for AugmentSchedule {
    fn default() -> Self {
        Self {
            start_epoch: 26,
            total_epochs: 50,
        }
    }
}

/// True iff harvesting and generation run in this (1-based) epoch. Bags
/// generated in epoch `k` are trained on in epoch `k + 1`.
pub fn augmentation_schedule(epoch: usize, schedule: &AugmentSchedule) -> bool {
    epoch >= schedule.start_epoch && epoch <= schedule.total_epochs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::PATCH_PIXELS;
    use alloc::string::ToString;
    use alloc::vec;

    fn bag(label: u8, k: usize) -> Bag {
        Bag {
            id: "src".to_string(),
            label,
            instances: (0..k)
                .map(|i| Instance {
                    pixels: vec![i as f32 / k as f32; PATCH_PIXELS],
                    slice_index: 0,
                    grid_position: (i % 12) as u8,
                    metadata_valid: true,
                })
                .collect(),
            is_virtual: false,
        }
    }

    fn prediction(label: u8, attention: Vec<f64>) -> BagPrediction {
        BagPrediction {
            probability: if label == 1 { 0.9 } else { 0.1 },
            label,
            attention,
            bag_embedding: vec![],
        }
    }

    fn ramp(k: usize) -> Vec<f64> {
        let total = (k * (k + 1) / 2) as f64;
        (1..=k).map(|i| i as f64 / total).collect()
    }

    #[test]
    fn clinical_scale_counts() {
        let mut store = InstanceStore::new(0.025, 0.2, 217.0).unwrap();
        let out = store.harvest(&bag(1, 217), &prediction(1, ramp(217)), 26).unwrap();
        assert_eq!(out.key.len(), 5);
        assert_eq!(out.regular.len(), 43);
        // highest attention is the last instance
        assert_eq!(out.key[0], 216);
        assert_eq!(out.regular[0], 0);
        assert_eq!(store.key_per_virtual_bag(), 5);
        assert_eq!(store.regular_per_virtual_bag(), 211);
    }

    #[test]
    fn negatives_and_misses_are_ignored() {
        let mut store = InstanceStore::new(0.1, 0.2, 36.0).unwrap();
        store.harvest(&bag(0, 36), &prediction(1, ramp(36)), 30).unwrap();
        store.harvest(&bag(0, 36), &prediction(0, ramp(36)), 30).unwrap();
        store.harvest(&bag(1, 36), &prediction(0, ramp(36)), 30).unwrap();
        assert!(store.key_list.is_empty() && store.regular_list.is_empty());
    }

    #[test]
    fn ties_break_to_lower_index() {
        let out = select_instances(&[0.25, 0.25, 0.25, 0.25], 0.5, 0.6);
        assert_eq!(out.key, vec![0, 1]);
        assert_eq!(out.regular, vec![2, 3]);
    }

    #[test]
    fn empty_store_generates_nothing() {
        let store = InstanceStore::new(0.1, 0.2, 36.0).unwrap();
        assert!(generate_virtual_bags(&store, 3, 0).unwrap().is_empty());
        assert!(generate_virtual_bags(&store, 0, 0).is_err());
    }

    #[test]
    fn generated_composition_and_determinism() {
        let mut store = InstanceStore::new(0.1, 0.2, 36.0).unwrap();
        for b in 0..6 {
            let mut src = bag(1, 36);
            src.id = alloc::format!("p{b}");
            store.harvest(&src, &prediction(1, ramp(36)), 30).unwrap();
        }
        let bags = generate_virtual_bags(&store, 4, 11).unwrap();
        assert_eq!(bags.len(), 4);
        for vb in &bags {
            assert_eq!(vb.instances.len(), 3 + 32);
            assert_eq!(vb.n_key, 3);
            assert!(vb.instances.iter().all(|i| !i.metadata_valid));
        }
        let again = generate_virtual_bags(&store, 4, 11).unwrap();
        let prov = |v: &[VirtualBag]| v.iter().map(|b| b.provenance.clone()).collect::<Vec<_>>();
        assert_eq!(prov(&bags), prov(&again));
    }

    #[test]
    fn schedule_boundaries() {
        let s = AugmentSchedule::default();
        assert!(!augmentation_schedule(25, &s));
        assert!(augmentation_schedule(26, &s));
        assert!(augmentation_schedule(50, &s));
    }

    #[test]
    fn invalid_fractions() {
        assert!(InstanceStore::new(0.3, 0.2, 10.0).is_err());
        assert!(InstanceStore::new(0.0, 0.2, 10.0).is_err());
        assert!(InstanceStore::new(0.1, 1.0, 10.0).is_err());
    }
}
