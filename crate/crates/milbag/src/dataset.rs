//! A dataset directory: one bag file per bag plus `index.json`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use milbag_core::data::{Bag, DatasetSpec};
use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};
use crate::format::{json_error_offset, read_bag, write_bag, BAG_EXTENSION};

pub const INDEX_FILE: &str = "index.json";
pub const INDEX_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexEntry {
    /// Path relative to the dataset directory.
    pub file: String,
    pub id: String,
    pub label: u8,
    pub instances: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetIndex {
    pub schema_version: u32,
    pub bags: Vec<IndexEntry>,
    /// Bag count per label, keyed `"0"` and `"1"`.
    pub label_histogram: BTreeMap<String, usize>,
    /// Generator settings, for synthetic datasets.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<DatasetSpec>,
}

impl DatasetIndex {
    pub fn for_bags(bags: &[Bag], synthetic: Option<DatasetSpec>) -> Self {
        let width = bags.len().max(1).to_string().len().max(4);
        let entries = bags
            .iter()
            .enumerate()
            .map(|(i, b)| IndexEntry {
                file: format!("bag-{i:0width$}.{BAG_EXTENSION}"),
                id: b.id.clone(),
                label: b.label,
                instances: b.len(),
            })
            .collect();
        Self {
            schema_version: INDEX_SCHEMA_VERSION,
            bags: entries,
            label_histogram: histogram(bags.iter().map(|b| b.label)),
            synthetic,
        }
    }
}

fn histogram(labels: impl Iterator<Item = u8>) -> BTreeMap<String, usize> {
    let mut h: BTreeMap<String, usize> = [("0".to_string(), 0), ("1".to_string(), 0)].into();
    for l in labels {
        *h.entry(l.to_string()).or_default() += 1;
    }
    h
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub index: DatasetIndex,
    pub bags: Vec<Bag>,
}

impl Dataset {
    pub fn labels(&self) -> Vec<u8> {
        self.bags.iter().map(|b| b.label).collect()
    }
}

/// Writes every bag and the index into `dir`, creating it if needed.
pub fn write_dataset(dir: &Path, bags: &[Bag], synthetic: Option<DatasetSpec>) -> Result<DatasetIndex> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let index = DatasetIndex::for_bags(bags, synthetic);
    for (bag, entry) in bags.iter().zip(&index.bags) {
        write_bag(&dir.join(&entry.file), bag)?;
    }
    let path = dir.join(INDEX_FILE);
    let json = serde_json::to_string_pretty(&index)?;
    std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(index)
}

pub fn read_index(dir: &Path) -> Result<DatasetIndex> {
    let path = dir.join(INDEX_FILE);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let index: DatasetIndex = serde_json::from_slice(&bytes).map_err(|e| {
        Error::format(
            &path,
            FormatError::new(json_error_offset(&bytes, &e) as u64, e.to_string()),
        )
    })?;
    if index.schema_version != INDEX_SCHEMA_VERSION {
        return Err(Error::dataset(
            &path,
            format!(
                "schema_version {} is not supported (expected {INDEX_SCHEMA_VERSION})",
                index.schema_version
            ),
        ));
    }
    Ok(index)
}

/// Reads the index and every bag it lists, checking that each bag agrees with
/// its index entry and that the label histogram matches.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let index = read_index(dir)?;
    let index_path = dir.join(INDEX_FILE);
    let mut bags = Vec::with_capacity(index.bags.len());
    for entry in &index.bags {
        let path = dir.join(&entry.file);
        let bag = read_bag(&path)?;
        if bag.id != entry.id || bag.label != entry.label || bag.len() != entry.instances {
            return Err(Error::dataset(
                &path,
                format!(
                    "file has id {:?}, label {}, K {} but the index says id {:?}, label {}, K {}",
                    bag.id,
                    bag.label,
                    bag.len(),
                    entry.id,
                    entry.label,
                    entry.instances
                ),
            ));
        }
        bags.push(bag);
    }
    let actual = histogram(bags.iter().map(|b| b.label));
    if actual != index.label_histogram {
        return Err(Error::dataset(
            &index_path,
            format!(
                "label_histogram {:?} does not match the bags {:?}",
                index.label_histogram, actual
            ),
        ));
    }
    let mut seen = std::collections::HashSet::new();
    if let Some(dup) = bags.iter().find(|b| !seen.insert(b.id.as_str())) {
        return Err(Error::dataset(&index_path, format!("duplicate bag id {:?}", dup.id)));
    }
    Ok(Dataset {
        dir: dir.to_path_buf(),
        index,
        bags,
    })
}
