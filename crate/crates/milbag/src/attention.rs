//! Per-instance attention export.

use std::io::Write;

use milbag_core::data::Bag;
use milbag_core::milnet::{attention_by_slice, MilModel};
use serde::Serialize;

use crate::error::Result;

pub const CSV_COLUMNS: [&str; 5] = [
    "bag_id",
    "slice_index",
    "grid_position",
    "raw_attention",
    "slice_rescaled_attention",
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttentionRow {
    pub bag_id: String,
    pub slice_index: u32,
    pub grid_position: u8,
    pub raw_attention: f64,
    /// Attention renormalised to sum to one within the slice.
    pub slice_rescaled_attention: f64,
}

pub fn attention_rows(model: &MilModel<f32>, bag: &Bag) -> Result<Vec<AttentionRow>> {
    let (prediction, rescaled) = attention_by_slice(bag, model)?;
    Ok(bag
        .instances
        .iter()
        .zip(prediction.attention.iter().zip(rescaled))
        .map(|(inst, (&raw, scaled))| AttentionRow {
            bag_id: bag.id.clone(),
            slice_index: inst.slice_index,
            grid_position: inst.grid_position,
            raw_attention: raw,
            slice_rescaled_attention: scaled,
        })
        .collect())
}

/// Writes one CSV row per instance of every bag.
pub fn write_attention_csv<W: Write>(out: W, model: &MilModel<f32>, bags: &[Bag]) -> Result<usize> {
    let mut w = csv::Writer::from_writer(out);
    let mut n = 0;
    for bag in bags {
        for row in attention_rows(model, bag)? {
            w.serialize(row)?;
            n += 1;
        }
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(n)
}
