//! Bags of 60×60 patches, the synthetic bag generator, and stratified
//! cross-validation folds.

mod folds;
mod synth;

use alloc::string::String;
use alloc::vec::Vec;

pub use folds::{stratified_folds, FoldPlan};
pub use synth::{generate_synthetic, DatasetSpec, SyntheticDataset};

pub const PATCH_SIZE: usize = 60;
pub const PATCH_PIXELS: usize = PATCH_SIZE * PATCH_SIZE;
pub const GRID_ROWS: usize = 3;
pub const GRID_COLS: usize = 4;
/// Patches per slice: a 240×180 lung crop cut into 60×60 tiles.
pub const PATCHES_PER_SLICE: usize = GRID_ROWS * GRID_COLS;

/// One patch. `metadata_valid` is false for instances copied into virtual
/// bags, whose slice/grid fields no longer describe a real slice.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub pixels: Vec<f32>,
    pub slice_index: u32,
    pub grid_position: u8,
    pub metadata_valid: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bag {
    pub id: String,
    pub label: u8,
    pub instances: Vec<Instance>,
    pub is_virtual: bool,
}

impl Bag {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn is_positive(&self) -> bool {
        self.label == 1
    }

    /// Instance indices grouped by slice, for slices whose twelve grid cells
    /// are all present with valid metadata. Each group is ordered by grid
    /// position.
    pub fn complete_slices(&self) -> Vec<[usize; PATCHES_PER_SLICE]> {
        let mut by_slice: alloc::collections::BTreeMap<u32, [Option<usize>; PATCHES_PER_SLICE]> = Default::default();
        let mut broken: alloc::collections::BTreeSet<u32> = Default::default();
        for (i, inst) in self.instances.iter().enumerate() {
            if !inst.metadata_valid || inst.grid_position as usize >= PATCHES_PER_SLICE {
                continue;
            }
            let cells = by_slice.entry(inst.slice_index).or_insert([None; PATCHES_PER_SLICE]);
            let cell = &mut cells[inst.grid_position as usize];
            if cell.is_some() {
                broken.insert(inst.slice_index);
            }
            *cell = Some(i);
        }
        by_slice
            .into_iter()
            .filter(|(s, _)| !broken.contains(s))
            .filter_map(|(_, cells)| {
                let mut out = [0usize; PATCHES_PER_SLICE];
                for (dst, c) in out.iter_mut().zip(cells) {
                    *dst = c?;
                }
                Some(out)
            })
            .collect()
    }
}

/// Checks the per-bag invariants: `K ≥ 1`, 3600 pixels in `[0, 1]` per
/// patch, grid positions below 12.
pub fn validate_bag(bag: &Bag) -> crate::Result<()> {
    use crate::Error;
    if bag.instances.is_empty() {
        return Err(Error::EmptyBag);
    }
    if bag.label > 1 {
        return Err(Error::contract(alloc::format!(
            "bag {}: label {} is not 0/1",
            bag.id,
            bag.label
        )));
    }
    for (i, inst) in bag.instances.iter().enumerate() {
        if inst.pixels.len() != PATCH_PIXELS {
            return Err(Error::contract(alloc::format!(
                "bag {}: instance {i} has {} pixels",
                bag.id,
                inst.pixels.len()
            )));
        }
        if inst.grid_position as usize >= PATCHES_PER_SLICE {
            return Err(Error::contract(alloc::format!(
                "bag {}: instance {i} grid position {}",
                bag.id,
                inst.grid_position
            )));
        }
        if inst.pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::contract(alloc::format!(
                "bag {}: instance {i} has pixels outside [0, 1]",
                bag.id
            )));
        }
    }
    Ok(())
}
