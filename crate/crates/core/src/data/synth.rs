//! Synthetic surrogate for CT-patch bags.
//!
//! Every bag holds `slices_per_bag` slices of twelve 60×60 patches. A patch is
//! a smooth random texture plus white noise plus a faint grating whose
//! orientation depends on the grid cell, so a patch's absolute position is
//! recoverable from its content. Small bright or dark "vessel" spots appear
//! in bags of both classes. Positive bags additionally carry the "lesion"
//! motif — a Gaussian envelope on an oriented carrier — in
//! `⌈key_fraction · K⌉` randomly chosen patches. The carrier keeps the motif
//! close to zero-mean, so it changes neither the patch mean nor (much) the
//! patch range and survives min-max normalisation, which is applied last.
//! Each bag draws its own acquisition gains for texture, noise and spots.

use alloc::format;
use alloc::vec::Vec;
use core::f64::consts::PI;

#[allow(unused_imports)]
use num_traits::Float;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Bag, Instance, PATCHES_PER_SLICE, PATCH_PIXELS, PATCH_SIZE};
use crate::numcore::minmax_normalize_in_place;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct DatasetSpec {
    pub n_positive: usize,
    pub n_negative: usize,
    pub slices_per_bag: usize,
    /// Fraction of a positive bag's patches that carry the lesion motif.
    pub key_fraction: f64,
    pub seed: u64,
    pub motif_sigma: f64,
    /// Peak height of the motif.
    pub motif_amplitude: f64,
    /// Carrier frequency of the motif in cycles per pixel; 0 gives a plain
    /// Gaussian blob. A non-zero carrier makes the motif (nearly) zero-mean,
    /// so it survives min-max normalisation without shifting patch intensity.
    pub motif_frequency: f64,
    pub texture_amplitude: f64,
    /// Spatial-frequency band of the background texture, in cycles per pixel.
    pub texture_frequency: (f64, f64),
    pub noise_std: f64,
    /// Peak-to-peak height of an intensity ramp whose direction depends on
    /// the grid cell.
    pub ramp_amplitude: f64,
    /// Amplitude of a faint full-patch grating at the motif's carrier
    /// frequency whose orientation encodes the grid cell.
    pub position_grating_amplitude: f64,
    /// Expected fraction of patches (either class) with a distractor spot,
    /// bright or dark with equal probability.
    pub distractor_fraction: f64,
    pub distractor_sigma: f64,
    pub distractor_amplitude: f64,
    /// Relative spread of per-bag acquisition gains: each bag scales its
    /// texture, ramp, noise and spot parameters by factors drawn from
    /// `U(1 − v, 1 + v)`.
    pub bag_variability: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_positive: 10,
            n_negative: 36,
            slices_per_bag: 3,
            key_fraction: 0.15,
            seed: 0,
            motif_sigma: 8.0,
            motif_amplitude: 1.5,
            motif_frequency: 0.3,
            texture_amplitude: 0.5,
            texture_frequency: (0.04, 0.15),
            noise_std: 0.15,
            ramp_amplitude: 0.0,
            position_grating_amplitude: 0.1,
            distractor_fraction: 0.15,
            distractor_sigma: 2.5,
            distractor_amplitude: 0.6,
            bag_variability: 0.5,
        }
    }
}

impl DatasetSpec {
    pub fn instances_per_bag(&self) -> usize {
        self.slices_per_bag * PATCHES_PER_SLICE
    }

    /// Number of motif patches in each positive bag.
    pub fn key_instances_per_positive(&self) -> usize {
        // the small epsilon keeps e.g. 0.15 · 40 = 6.000000000000001 at 6
        (self.key_fraction * self.instances_per_bag() as f64 - 1e-9)
            .ceil()
            .max(0.0) as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_positive == 0 {
            return Err(Error::Spec("at least one positive bag is required".into()));
        }
        if self.n_negative < self.n_positive {
            return Err(Error::Spec(format!(
                "n_negative ({}) must be at least n_positive ({})",
                self.n_negative, self.n_positive
            )));
        }
        if self.slices_per_bag == 0 {
            return Err(Error::Spec("slices_per_bag must be positive".into()));
        }
        let k = self.instances_per_bag() as f64;
        if !(self.key_fraction * k >= 1.0) || self.key_fraction > 1.0 {
            return Err(Error::Spec(format!(
                "key_fraction {} gives fewer than one key instance in a bag of {k}",
                self.key_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.distractor_fraction) {
            return Err(Error::Spec("distractor_fraction must lie in [0, 1]".into()));
        }
        let (lo, hi) = self.texture_frequency;
        if !(0.0 < lo && lo < hi) {
            return Err(Error::Spec(format!("texture frequency band ({lo}, {hi}) is empty")));
        }
        if !(0.0..1.0).contains(&self.bag_variability) {
            return Err(Error::Spec("bag_variability must lie in [0, 1)".into()));
        }
        if !(0.0..=0.5).contains(&self.motif_frequency) {
            return Err(Error::Spec(
                "motif_frequency must lie in [0, 0.5] cycles per pixel".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.bag_variability) {
            return Err(Error::Spec("bag_variability must lie in [0, 1)".into()));
        }
        if !(0.0..=0.5).contains(&self.motif_frequency) {
            return Err(Error::Spec(
                "motif_frequency must lie in [0, 0.5] cycles per pixel".into(),
            ));
        }
        if self.motif_sigma <= 0.0 || self.distractor_sigma <= 0.0 {
            return Err(Error::Spec("blob widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub bags: Vec<Bag>,
    /// Indices of the motif-bearing instances of each bag (empty for
    /// negatives).
    pub planted: Vec<Vec<usize>>,
}

impl SyntheticDataset {
    pub fn labels(&self) -> Vec<u8> {
        self.bags.iter().map(|b| b.label).collect()
    }
}

/// Gaussian envelope times a plane-wave carrier along `angle`.
fn add_motif(pixels: &mut [f64], (cx, cy): (f64, f64), angle: f64, phase: f64, spec: &DatasetSpec) {
    let sigma = spec.motif_sigma;
    let inv = 1.0 / (2.0 * sigma * sigma);
    let k = 2.0 * PI * spec.motif_frequency;
    let (ux, uy) = (angle.cos(), angle.sin());
    // a zero carrier is the plain blob, peaking at the centre
    let phase = if spec.motif_frequency == 0.0 { 0.0 } else { phase };
    for y in 0..PATCH_SIZE {
        for x in 0..PATCH_SIZE {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let envelope = (-(dx * dx + dy * dy) * inv).exp();
            pixels[y * PATCH_SIZE + x] += spec.motif_amplitude * envelope * (k * (dx * ux + dy * uy) + phase).cos();
        }
    }
}

fn add_blob(pixels: &mut [f64], cx: f64, cy: f64, sigma: f64, amplitude: f64) {
    let inv = 1.0 / (2.0 * sigma * sigma);
    let reach = (4.0 * sigma).ceil() as isize;
    let (x0, x1) = (
        (cx as isize - reach).max(0),
        (cx as isize + reach).min(PATCH_SIZE as isize - 1),
    );
    let (y0, y1) = (
        (cy as isize - reach).max(0),
        (cy as isize + reach).min(PATCH_SIZE as isize - 1),
    );
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            pixels[y as usize * PATCH_SIZE + x as usize] += amplitude * (-(dx * dx + dy * dy) * inv).exp();
        }
    }
}

/// The spec with this bag's acquisition gains applied.
fn acquisition<R: Rng>(spec: &DatasetSpec, rng: &mut R) -> DatasetSpec {
    let v = spec.bag_variability;
    let mut gain = || {
        if v > 0.0 {
            rng.random_range(1.0 - v..1.0 + v)
        } else {
            1.0
        }
    };
    DatasetSpec {
        texture_amplitude: spec.texture_amplitude * gain(),
        ramp_amplitude: spec.ramp_amplitude * gain(),
        position_grating_amplitude: spec.position_grating_amplitude * gain(),
        noise_std: spec.noise_std * gain(),
        distractor_amplitude: spec.distractor_amplitude * gain(),
        distractor_fraction: (spec.distractor_fraction * gain()).min(1.0),
        ..spec.clone()
    }
}

fn render_patch<R: Rng>(spec: &DatasetSpec, grid_position: usize, lesion: bool, rng: &mut R) -> Vec<f32> {
    let mut pixels = alloc::vec![0.0f64; PATCH_PIXELS];
    let waves: [(f64, f64, f64, f64); 3] = core::array::from_fn(|_| {
        let angle = rng.random_range(0.0..PI);
        let freq = rng.random_range(spec.texture_frequency.0..spec.texture_frequency.1) * 2.0 * PI;
        (
            freq * angle.cos(),
            freq * angle.sin(),
            rng.random_range(0.0..2.0 * PI),
            rng.random_range(0.5..1.0),
        )
    });
    let direction = 2.0 * PI * grid_position as f64 / PATCHES_PER_SLICE as f64;
    let (ux, uy) = (direction.cos(), direction.sin());
    let orientation = PI * grid_position as f64 / PATCHES_PER_SLICE as f64;
    let k = 2.0 * PI * spec.motif_frequency;
    let (gx, gy) = (k * orientation.cos(), k * orientation.sin());
    let grating_phase = rng.random_range(0.0..2.0 * PI);
    let half = (PATCH_SIZE - 1) as f64 / 2.0;
    for y in 0..PATCH_SIZE {
        for x in 0..PATCH_SIZE {
            let (fx, fy) = (x as f64, y as f64);
            let texture: f64 = waves
                .iter()
                .map(|&(kx, ky, phase, amp)| amp * (kx * fx + ky * fy + phase).sin())
                .sum::<f64>()
                / waves.len() as f64;
            let ramp = ((fx - half) * ux + (fy - half) * uy) / (2.0 * half);
            let noise: f64 = StandardNormal.sample(rng);
            let grating = (gx * fx + gy * fy + grating_phase).cos();
            pixels[y * PATCH_SIZE + x] = spec.texture_amplitude * texture
                + spec.ramp_amplitude * ramp
                + spec.position_grating_amplitude * grating
                + spec.noise_std * noise;
        }
    }
    if rng.random_bool(spec.distractor_fraction) {
        let margin = 2.0 * spec.distractor_sigma;
        let (cx, cy) = (
            rng.random_range(margin..PATCH_SIZE as f64 - margin),
            rng.random_range(margin..PATCH_SIZE as f64 - margin),
        );
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        add_blob(
            &mut pixels,
            cx,
            cy,
            spec.distractor_sigma,
            sign * spec.distractor_amplitude,
        );
    }
    if lesion {
        let margin = spec.motif_sigma.min(PATCH_SIZE as f64 / 4.0);
        let (cx, cy) = (
            rng.random_range(margin..PATCH_SIZE as f64 - margin),
            rng.random_range(margin..PATCH_SIZE as f64 - margin),
        );
        let angle = rng.random_range(0.0..PI);
        let phase = rng.random_range(0.0..2.0 * PI);
        add_motif(&mut pixels, (cx, cy), angle, phase, spec);
    }
    minmax_normalize_in_place(&mut pixels);
    pixels.into_iter().map(|p| p as f32).collect()
}

/// Generates `n_positive` positive bags followed by `n_negative` negative
/// ones. Each bag draws from its own ChaCha stream, so the output is a pure
/// function of the spec.
pub fn generate_synthetic(spec: &DatasetSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let k = spec.instances_per_bag();
    let n_keys = spec.key_instances_per_positive();
    let total = spec.n_positive + spec.n_negative;
    let mut bags = Vec::with_capacity(total);
    let mut planted = Vec::with_capacity(total);
    for b in 0..total {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(b as u64 + 1);
        let label = u8::from(b < spec.n_positive);
        let mut keys: Vec<usize> = if label == 1 {
            sample(&mut rng, k, n_keys).into_vec()
        } else {
            Vec::new()
        };
        keys.sort_unstable();
        let bag_spec = acquisition(spec, &mut rng);
        let instances = (0..k)
            .map(|i| Instance {
                pixels: render_patch(
                    &bag_spec,
                    i % PATCHES_PER_SLICE,
                    keys.binary_search(&i).is_ok(),
                    &mut rng,
                ),
                slice_index: (i / PATCHES_PER_SLICE) as u32,
                grid_position: (i % PATCHES_PER_SLICE) as u8,
                metadata_valid: true,
            })
            .collect();
        bags.push(Bag {
            id: format!("synth-{b:04}"),
            label,
            instances,
            is_virtual: false,
        });
        planted.push(keys);
    }
    Ok(SyntheticDataset { bags, planted })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetSpec {
        DatasetSpec {
            n_positive: 2,
            n_negative: 3,
            slices_per_bag: 1,
            key_fraction: 0.25,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn counts_and_geometry() {
        let ds = generate_synthetic(&small()).unwrap();
        assert_eq!(ds.bags.len(), 5);
        for (bag, keys) in ds.bags.iter().zip(&ds.planted) {
            assert_eq!(bag.len(), 12);
            assert_eq!(keys.len(), if bag.label == 1 { 3 } else { 0 });
            crate::data::validate_bag(bag).unwrap();
        }
    }

    #[test]
    fn default_key_count() {
        assert_eq!(DatasetSpec::default().key_instances_per_positive(), 6);
    }

    #[test]
    fn too_small_key_fraction_is_rejected() {
        let spec = DatasetSpec {
            key_fraction: 0.01,
            ..DatasetSpec::default()
        };
        assert!(matches!(generate_synthetic(&spec), Err(Error::Spec(_))));
    }

    #[test]
    fn more_positives_than_negatives_is_rejected() {
        let spec = DatasetSpec {
            n_positive: 5,
            n_negative: 4,
            ..small()
        };
        assert!(matches!(generate_synthetic(&spec), Err(Error::Spec(_))));
    }
}
