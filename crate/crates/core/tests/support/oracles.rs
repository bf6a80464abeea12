//! Independent oracles for pooling, augmentation, pretext labels and metrics.
//!
//! Each check returns a one-line summary on success and the first
//! counterexample on failure, so the same code backs the unit-level
//! integration tests and the acceptance report.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, HashSet};

use milbag_core::data::{Bag, Instance, PATCHES_PER_SLICE, PATCH_PIXELS};
use milbag_core::metrics::{roc_auc, Confusion, MetricSet};
use milbag_core::milnet::{key_instance, predict, BagPrediction, MilConfig, MilModel};
use milbag_core::numcore::Tensor;
use milbag_core::ssl::{absolute_loss, build_pairs, relative_loss, SslHead, SslTask};
use milbag_core::vbag::{generate_virtual_bags, InstanceStore};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = Result<String, String>;

fn instance(rng: &mut ChaCha8Rng, slice: u32, pos: u8) -> Instance {
    Instance {
        pixels: (0..PATCH_PIXELS).map(|_| rng.random_range(0.0f32..1.0)).collect(),
        slice_index: slice,
        grid_position: pos,
        metadata_valid: true,
    }
}

fn random_bag(rng: &mut ChaCha8Rng, k: usize, label: u8) -> Bag {
    Bag {
        id: format!("bag-{}", rng.random::<u32>()),
        label,
        instances: (0..k)
            .map(|i| instance(rng, (i / PATCHES_PER_SLICE) as u32, (i % PATCHES_PER_SLICE) as u8))
            .collect(),
        is_virtual: false,
    }
}

/// Attention sums to one, the bag probability ignores instance order, and
/// the most-attended instance follows its patch through the permutation.
pub fn pooling_invariants(n_bags: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst_sum = 0.0f64;
    let mut worst_prob = 0.0f64;
    let mut ties = 0usize;
    for b in 0..n_bags {
        // a fresh small model every 50 bags, with sharpened attention so the
        // argmax is meaningful
        let mut model = MilModel::<f64>::new(
            MilConfig::reduced(),
            SslTask::None,
            1,
            &mut ChaCha8Rng::seed_from_u64(seed ^ (b / 50) as u64),
        )
        .map_err(|e| e.to_string())?;
        model.attention_w.data_mut().iter_mut().for_each(|w| *w *= 5.0);
        // positive biases keep the ReLU features alive; an all-zero encoder
        // would tie every instance
        let mut bias_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB1A5 ^ (b / 50) as u64);
        for p in model.params_mut() {
            if p.shape().len() == 1 {
                p.data_mut()
                    .iter_mut()
                    .for_each(|v| *v = bias_rng.random_range(0.0..0.1));
            }
        }
        let k = rng.random_range(1..=64);
        let bag = random_bag(&mut rng, k, 1);
        let p = predict(&bag, &model).map_err(|e| e.to_string())?;
        let sum: f64 = p.attention.iter().sum();
        worst_sum = worst_sum.max((sum - 1.0).abs());
        if (sum - 1.0).abs() > 1e-6 || p.attention.iter().any(|a| !(*a >= 0.0)) {
            return Err(format!("bag {b} (K={k}): attention sums to {sum}"));
        }

        let mut perm: Vec<usize> = (0..k).collect();
        perm.shuffle(&mut rng);
        let permuted = Bag {
            instances: perm.iter().map(|&i| bag.instances[i].clone()).collect(),
            ..bag.clone()
        };
        let q = predict(&permuted, &model).map_err(|e| e.to_string())?;
        let dp = (p.probability - q.probability).abs();
        worst_prob = worst_prob.max(dp);
        if dp > 1e-6 {
            return Err(format!(
                "bag {b} (K={k}): probability moved by {dp:e} under permutation"
            ));
        }
        // the set of maximally attended instances must map exactly onto
        // itself, and the key instance must come from it
        let argmax_set = |a: &[f64]| -> BTreeSet<usize> {
            let m = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (0..a.len()).filter(|&i| a[i] == m).collect()
        };
        let before = argmax_set(&p.attention);
        let after: BTreeSet<usize> = argmax_set(&q.attention).into_iter().map(|i| perm[i]).collect();
        if before != after {
            return Err(format!("bag {b} (K={k}): argmax set {before:?} became {after:?}"));
        }
        let key = key_instance(&q.attention).unwrap();
        if !before.contains(&perm[key]) {
            return Err(format!(
                "bag {b} (K={k}): key instance {} is not a maximiser",
                perm[key]
            ));
        }
        ties += usize::from(before.len() > 1);
    }
    Ok(format!(
        "{n_bags} bags, K in [1, 64]: max |Σa − 1| = {worst_sum:.1e}, max permutation Δp = {worst_prob:.1e}, argmax consistent ({ties} tied)"
    ))
}

fn prediction(attention: Vec<f64>) -> BagPrediction {
    BagPrediction {
        probability: 0.9,
        label: 1,
        attention,
        bag_embedding: Vec::new(),
    }
}

/// Harvest and generation counts against exact integer arithmetic, plus key
/// and regular list purity via provenance.
pub fn augmentation_oracle(n_triples: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    const DEN: u64 = 1000;
    for t in 0..n_triples {
        let k = rng.random_range(1..=256usize);
        // α = a/1000 < γ = g/1000 < 1
        let a = rng.random_range(1..DEN - 1);
        let g = rng.random_range(a + 1..DEN);
        let (alpha, gamma) = (a as f64 / DEN as f64, g as f64 / DEN as f64);
        let n_key = (a * k as u64 / DEN) as usize;
        let n_regular = ((g * k as u64 / DEN) as usize).min(k - n_key);

        // three positive bags of size K with distinct attention values
        let mut store = InstanceStore::new(alpha, gamma, k as f64).map_err(|e| e.to_string())?;
        let mut expected_keys = BTreeSet::new();
        let mut expected_regulars = BTreeSet::new();
        for j in 0..3 {
            let mut bag = random_bag(&mut rng, k, 1);
            bag.id = format!("t{t}-b{j}");
            let mut attention: Vec<f64> = (0..k)
                .map(|i| (i as f64 + 1.0) / (k as f64 * (k as f64 + 1.0) / 2.0))
                .collect();
            attention.shuffle(&mut rng);
            let mut order: Vec<usize> = (0..k).collect();
            order.sort_by(|&x, &y| attention[y].total_cmp(&attention[x]));
            expected_keys.extend(order[..n_key].iter().map(|&i| (bag.id.clone(), i)));
            let rest = &order[n_key..];
            expected_regulars.extend(rest[rest.len() - n_regular..].iter().map(|&i| (bag.id.clone(), i)));
            let got = store
                .harvest(&bag, &prediction(attention), 1)
                .map_err(|e| e.to_string())?;
            if got.key.len() != n_key || got.regular.len() != n_regular {
                return Err(format!(
                    "triple {t} (K={k}, α={alpha}, γ={gamma}): harvested {}+{}, expected {n_key}+{n_regular}",
                    got.key.len(),
                    got.regular.len()
                ));
            }
        }
        let listed = |l: &[milbag_core::vbag::HarvestedInstance]| -> BTreeSet<(String, usize)> {
            l.iter().map(|h| (h.source_bag.clone(), h.instance_index)).collect()
        };
        if listed(&store.key_list) != expected_keys || listed(&store.regular_list) != expected_regulars {
            return Err(format!(
                "triple {t}: key/regular lists differ from the attention ranking"
            ));
        }

        // generation with a fractional mean bag size K̄ = s / n
        let n = rng.random_range(1..=8u64);
        let s = rng.random_range(n..=n * 256);
        store.k_bar = s as f64 / n as f64;
        let gk = (a * s / (DEN * n)) as usize;
        let gr = ((DEN - a) * s / (DEN * n)) as usize;
        if store.key_per_virtual_bag() != gk || store.regular_per_virtual_bag() != gr {
            return Err(format!(
                "triple {t}: K̄={s}/{n}, α={alpha}: per-bag counts {}+{}, expected {gk}+{gr}",
                store.key_per_virtual_bag(),
                store.regular_per_virtual_bag()
            ));
        }
        let count = rng.random_range(1..=4);
        let bags = generate_virtual_bags(&store, count, t as u64).map_err(|e| e.to_string())?;
        let feasible = gk > 0 && store.key_list.len() >= gk && store.regular_list.len() >= gr;
        if bags.len() != if feasible { count } else { 0 } {
            return Err(format!(
                "triple {t}: generated {} bags, feasible={feasible}, requested {count}",
                bags.len()
            ));
        }
        for vb in &bags {
            if vb.n_key != gk || vb.instances.len() != gk + gr {
                return Err(format!(
                    "triple {t}: virtual bag has {}+{}",
                    vb.n_key,
                    vb.instances.len() - vb.n_key
                ));
            }
            let (keys, regs) = vb.provenance.split_at(gk);
            let unique: HashSet<_> = vb.provenance.iter().collect();
            if unique.len() != vb.provenance.len() {
                return Err(format!("triple {t}: an instance was drawn twice"));
            }
            if !keys.iter().all(|p| expected_keys.contains(p)) || !regs.iter().all(|p| expected_regulars.contains(p)) {
                return Err(format!("triple {t}: provenance mixes key and regular lists"));
            }
            if vb.instances.iter().any(|i| i.metadata_valid) {
                return Err(format!("triple {t}: virtual instance kept slice metadata"));
            }
        }
    }

    // the clinical configuration
    let store = InstanceStore::new(0.025, 0.2, 217.0).map_err(|e| e.to_string())?;
    let (k, r) = (store.key_per_virtual_bag(), store.regular_per_virtual_bag());
    if (k, r) != (5, 211) {
        return Err(format!("K̄=217, α=0.025 gives {k}+{r}, expected 5+211"));
    }
    Ok(format!(
        "{n_triples} (K, α, γ) triples exact; K̄=217, α=0.025 → {k} key + {r} regular; provenance pure"
    ))
}

/// Exhaustive 3×4 grid enumeration and uniform-head losses.
pub fn ssl_oracle(seed: u64) -> Check {
    let (rows, cols) = (3i64, 4i64);
    let mut valid = Vec::new();
    for ar in 0..rows {
        for ac in 0..cols {
            let neighbours: Vec<(i64, i64)> = (-1..=1)
                .flat_map(|dr| (-1..=1).map(move |dc| (dr, dc)))
                .filter(|&d| d != (0, 0))
                .collect();
            let inside = |(dr, dc): (i64, i64)| (0..rows).contains(&(ar + dr)) && (0..cols).contains(&(ac + dc));
            // an anchor qualifies only when all eight neighbours exist
            if neighbours.iter().all(|&d| inside(d)) {
                for d in neighbours {
                    valid.push(((ar * cols + ac) as usize, ((ar + d.0) * cols + ac + d.1) as usize));
                }
            }
        }
    }
    if valid.len() != 16 {
        return Err(format!("enumeration found {} pairs", valid.len()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for trial in 0..50 {
        let mut positions: Vec<u8> = (0..PATCHES_PER_SLICE as u8).collect();
        positions.shuffle(&mut rng);
        let pairs = build_pairs(&positions).map_err(|e| e.to_string())?;
        let got: BTreeSet<(usize, usize)> = pairs
            .iter()
            .map(|p| (positions[p.anchor] as usize, positions[p.neighbor] as usize))
            .collect();
        let want: BTreeSet<(usize, usize)> = valid.iter().copied().collect();
        if pairs.len() != 16 || got != want {
            return Err(format!("trial {trial}: pairs {got:?} differ from enumeration"));
        }
        let mut per_anchor: BTreeMap<usize, BTreeMap<u8, (i64, i64)>> = BTreeMap::new();
        for p in &pairs {
            let (a, n) = (positions[p.anchor] as i64, positions[p.neighbor] as i64);
            let offset = (n / cols - a / cols, n % cols - a % cols);
            if per_anchor
                .entry(a as usize)
                .or_default()
                .insert(p.relative_class, offset)
                .is_some()
            {
                return Err(format!(
                    "trial {trial}: class {} used twice for anchor {a}",
                    p.relative_class
                ));
            }
        }
        for classes in per_anchor.values() {
            if classes.len() != 8 {
                return Err(format!("trial {trial}: anchor has {} classes", classes.len()));
            }
        }
        // same class ↔ same offset across both anchors
        let a: Vec<_> = per_anchor.values().collect();
        if a[0] != a[1] {
            return Err(format!("trial {trial}: class→offset maps differ between anchors"));
        }
    }

    // absolute labels are the grid positions: a head that puts all mass on
    // the true cell has zero loss, and the uniform head gives ln 12
    let m = 3;
    let mut head_rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let mut results = Vec::new();
    for (task, classes, terms) in [(SslTask::Relative, 8.0f64, 16.0), (SslTask::Absolute, 12.0, 12.0)] {
        let mut head = SslHead::<f64>::new(task, m, 4, &mut head_rng);
        for p in head.output.params_mut() {
            p.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let n_slices = 3;
        let features = Tensor::new(
            &[n_slices * PATCHES_PER_SLICE, m],
            (0..n_slices * PATCHES_PER_SLICE * m)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
        .map_err(|e| e.to_string())?;
        let slices: Vec<[usize; PATCHES_PER_SLICE]> = (0..n_slices)
            .map(|s| {
                let mut idx: [usize; PATCHES_PER_SLICE] = core::array::from_fn(|i| s * PATCHES_PER_SLICE + i);
                idx.shuffle(&mut rng);
                idx
            })
            .collect();
        let loss = match task {
            SslTask::Relative => relative_loss(&features, &head, &slices),
            _ => absolute_loss(&features, &head, &slices),
        }
        .map_err(|e| e.to_string())?;
        let per_term = loss / terms;
        if (per_term - classes.ln()).abs() > 1e-9 {
            return Err(format!(
                "{task:?}: uniform head gives {per_term} per term, expected ln {classes}"
            ));
        }
        results.push(per_term);
    }

    // absolute targets: bias the uniform head toward one cell and check the
    // loss falls only for patches in that cell
    let mut head = SslHead::<f64>::new(SslTask::Absolute, m, 4, &mut head_rng);
    for p in head.output.params_mut() {
        p.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let bias = head.output.bias.as_mut().unwrap();
    bias.data_mut()[5] = 2.0;
    let features = Tensor::new(&[PATCHES_PER_SLICE, m], vec![0.5; PATCHES_PER_SLICE * m]).unwrap();
    let slice: [usize; PATCHES_PER_SLICE] = core::array::from_fn(|i| i);
    let loss = absolute_loss(&features, &head, &[slice]).map_err(|e| e.to_string())?;
    let z = 11.0 + 2f64.exp();
    let expected = 11.0 * z.ln() + (z.ln() - 2.0);
    if (loss - expected).abs() > 1e-9 {
        return Err(format!(
            "absolute labels: loss {loss}, expected {expected} for label l_6 = cell 5"
        ));
    }
    Ok(format!(
        "16 pairs, 8-class bijection per anchor, absolute labels = cell index; uniform heads {:.12} (ln 8) and {:.12} (ln 12)",
        results[0], results[1]
    ))
}

/// Confusion counts and rates by hand; AUC against a brute-force
/// Mann–Whitney count.
pub fn metric_oracle(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for trial in 0..200 {
        let n = rng.random_range(1..40);
        let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let probs: Vec<f64> = (0..n).map(|_| (rng.random_range(0..=20) as f64) / 20.0).collect();
        let threshold = [0.5, 0.25, 0.75, 0.0, 1.0][trial % 5];
        let (mut tp, mut fp, mut tn, mut fn_) = (0u64, 0u64, 0u64, 0u64);
        for (&p, &y) in probs.iter().zip(&labels) {
            match (p >= threshold, y == 1) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, false) => tn += 1,
                (false, true) => fn_ += 1,
            }
        }
        let (c, m) = MetricSet::compute(&probs, &labels, threshold).map_err(|e| e.to_string())?;
        if c != (Confusion { tp, fp, tn, fn_ }) {
            return Err(format!(
                "trial {trial}: confusion {c:?}, expected tp={tp} fp={fp} tn={tn} fn={fn_}"
            ));
        }
        let div = |a: u64, b: u64| (b > 0).then(|| a as f64 / b as f64);
        let accuracy = div(tp + tn, tp + fp + tn + fn_);
        let sensitivity = div(tp, tp + fn_);
        let specificity = div(tn, tn + fp);
        let f1 = (tp + fn_ > 0).then(|| tp as f64 / (tp as f64 + 0.5 * (fp + fn_) as f64));
        if (m.accuracy, m.sensitivity, m.specificity, m.f1) != (accuracy, sensitivity, specificity, f1) {
            return Err(format!("trial {trial}: rates {m:?} differ from hand values"));
        }
    }
    let mut worst = 0.0f64;
    for trial in 0..100 {
        let n = rng.random_range(2..60);
        let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        labels[0] = 0;
        labels[1] = 1;
        // coarse scores so ties occur
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..12) as f64 / 11.0).collect();
        let (mut wins, mut pairs) = (0.0f64, 0.0f64);
        for i in (0..n).filter(|&i| labels[i] == 1) {
            for j in (0..n).filter(|&j| labels[j] == 0) {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
        let auc = roc_auc(&scores, &labels).ok_or_else(|| format!("trial {trial}: AUC undefined"))?;
        let d = (auc - wins / pairs).abs();
        worst = worst.max(d);
        if d > 1e-9 {
            return Err(format!("trial {trial}: AUC {auc} vs Mann–Whitney {}", wins / pairs));
        }
    }
    if roc_auc(&[0.3, 0.7], &[1, 1]).is_some() {
        return Err("AUC defined without negatives".into());
    }
    Ok(format!(
        "200 confusion matrices exact; 100 AUCs within {worst:.1e} of Mann–Whitney"
    ))
}
