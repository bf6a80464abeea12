//! The single-bag file.
//!
//! ```text
//! "MILBAGB1"            8 bytes
//! header length H       u32, little-endian
//! header                H bytes of UTF-8 JSON
//! pixels                K × 3600 f32, little-endian, instance-major
//! ```
//!
//! The header carries the bag id, its label, `K`, and per-instance slice
//! index, grid position and metadata flag.

use std::path::Path;

use milbag_core::data::{validate_bag, Bag, Instance, PATCHES_PER_SLICE, PATCH_PIXELS};
use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};

pub const BAG_MAGIC: &[u8; 8] = b"MILBAGB1";
pub const BAG_EXTENSION: &str = "milbag";

const PREFIX: usize = BAG_MAGIC.len() + 4;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BagHeader {
    id: String,
    label: u8,
    #[serde(rename = "K")]
    k: usize,
    #[serde(default)]
    is_virtual: bool,
    instances: Vec<InstanceHeader>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceHeader {
    slice_index: u32,
    grid_position: u8,
    metadata_valid: bool,
}

/// Serialises a bag after checking its invariants.
pub fn encode_bag(bag: &Bag) -> milbag_core::Result<Vec<u8>> {
    validate_bag(bag)?;
    let header = BagHeader {
        id: bag.id.clone(),
        label: bag.label,
        k: bag.len(),
        is_virtual: bag.is_virtual,
        instances: bag
            .instances
            .iter()
            .map(|i| InstanceHeader {
                slice_index: i.slice_index,
                grid_position: i.grid_position,
                metadata_valid: i.metadata_valid,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serialises");
    let mut out = Vec::with_capacity(PREFIX + json.len() + bag.len() * PATCH_PIXELS * 4);
    out.extend_from_slice(BAG_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for inst in &bag.instances {
        for p in &inst.pixels {
            out.extend_from_slice(&p.to_le_bytes());
        }
    }
    Ok(out)
}

/// Byte offset of a serde_json error position inside `text`.
pub(crate) fn json_error_offset(text: &[u8], err: &serde_json::Error) -> usize {
    let (line, column) = (err.line(), err.column());
    if line == 0 {
        return 0;
    }
    let mut start = 0;
    for _ in 1..line {
        match text[start..].iter().position(|&b| b == b'\n') {
            Some(nl) => start += nl + 1,
            None => break,
        }
    }
    (start + column.saturating_sub(1)).min(text.len())
}

pub fn decode_bag(bytes: &[u8]) -> Result<Bag, FormatError> {
    if bytes.len() < BAG_MAGIC.len() || &bytes[..BAG_MAGIC.len()] != BAG_MAGIC {
        let bad = bytes
            .iter()
            .zip(BAG_MAGIC)
            .position(|(a, b)| a != b)
            .unwrap_or(bytes.len());
        return Err(FormatError::new(
            bad as u64,
            "not a bag file (expected magic \"MILBAGB1\")",
        ));
    }
    if bytes.len() < PREFIX {
        return Err(FormatError::new(bytes.len() as u64, "truncated before header length"));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header_end = PREFIX
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| {
            FormatError::new(
                bytes.len() as u64,
                format!(
                    "truncated header: length field says {header_len} bytes, file has {}",
                    bytes.len() - PREFIX
                ),
            )
        })?;
    let raw = &bytes[PREFIX..header_end];
    let header: BagHeader = serde_json::from_slice(raw)
        .map_err(|e| FormatError::new((PREFIX + json_error_offset(raw, &e)) as u64, format!("bad header: {e}")))?;
    let at_header = PREFIX as u64;
    if header.label > 1 {
        return Err(FormatError::new(
            at_header,
            format!("label {} is not 0 or 1", header.label),
        ));
    }
    if header.k == 0 {
        return Err(FormatError::new(at_header, "bag has K = 0 instances"));
    }
    if header.instances.len() != header.k {
        return Err(FormatError::new(
            at_header,
            format!("K = {} but {} instance records", header.k, header.instances.len()),
        ));
    }
    if let Some(i) = header
        .instances
        .iter()
        .position(|i| i.grid_position as usize >= PATCHES_PER_SLICE)
    {
        return Err(FormatError::new(
            at_header,
            format!(
                "instance {i}: grid position {} is not below {PATCHES_PER_SLICE}",
                header.instances[i].grid_position
            ),
        ));
    }

    let payload = header.k * PATCH_PIXELS * 4;
    let available = bytes.len() - header_end;
    if available < payload {
        return Err(FormatError::new(
            bytes.len() as u64,
            format!("truncated pixel data: expected {payload} bytes, found {available}"),
        ));
    }
    if available > payload {
        return Err(FormatError::new(
            (header_end + payload) as u64,
            format!("{} trailing bytes after pixel data", available - payload),
        ));
    }
    let mut instances = Vec::with_capacity(header.k);
    for (i, meta) in header.instances.into_iter().enumerate() {
        let base = header_end + i * PATCH_PIXELS * 4;
        let mut pixels = Vec::with_capacity(PATCH_PIXELS);
        for (j, chunk) in bytes[base..base + PATCH_PIXELS * 4].chunks_exact(4).enumerate() {
            let p = f32::from_le_bytes(chunk.try_into().unwrap());
            if !(0.0..=1.0).contains(&p) {
                return Err(FormatError::new(
                    (base + 4 * j) as u64,
                    format!("instance {i}, pixel {j}: value {p} outside [0, 1]"),
                ));
            }
            pixels.push(p);
        }
        instances.push(Instance {
            pixels,
            slice_index: meta.slice_index,
            grid_position: meta.grid_position,
            metadata_valid: meta.metadata_valid,
        });
    }
    Ok(Bag {
        id: header.id,
        label: header.label,
        instances,
        is_virtual: header.is_virtual,
    })
}

pub fn write_bag(path: &Path, bag: &Bag) -> Result<()> {
    let bytes = encode_bag(bag)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_bag(path: &Path) -> Result<Bag> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_bag(&bytes).map_err(|e| Error::format(path, e))
}
