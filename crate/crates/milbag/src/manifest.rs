//! Run manifests and the virtual-bag provenance dump.

use std::io::Write;
use std::path::{Path, PathBuf};

use milbag_core::train::VirtualProvenance;
use serde::Serialize;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::report::{now_rfc3339, ToolInfo};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub tool: ToolInfo,
    pub command: String,
    pub arguments: Vec<String>,
    pub created_at: String,
    pub seed: u64,
    pub config_preset: String,
    pub config_hash: String,
    pub dataset: Option<PathBuf>,
    pub workers: usize,
    pub os: &'static str,
    pub arch: &'static str,
    pub elapsed_seconds: f64,
    pub outputs: Vec<PathBuf>,
}

impl Manifest {
    pub fn new(command: &str, config: &Config) -> Self {
        Self {
            tool: ToolInfo::current(),
            command: command.into(),
            arguments: std::env::args().collect(),
            created_at: now_rfc3339(),
            seed: config.train.seed,
            config_preset: config.preset.clone(),
            config_hash: config.hash(),
            dataset: None,
            workers: 0,
            os: std::env::consts::OS,
            arch: std::env::consts::ARCH,
            elapsed_seconds: 0.0,
            outputs: Vec::new(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        crate::report::write_json(&path, self)?;
        Ok(path)
    }
}

#[derive(Debug, Clone, Serialize)]
struct SourceRef<'a> {
    bag_id: &'a str,
    instance: usize,
    role: &'static str,
}

#[derive(Debug, Clone, Serialize)]
struct ProvenanceLine<'a> {
    #[serde(skip_serializing_if = "Option::is_none")]
    repeat: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    fold: Option<usize>,
    epoch: usize,
    virtual_bag: &'a str,
    sources: Vec<SourceRef<'a>>,
}

/// One JSON object per line per virtual bag: where each of its instances
/// came from and whether it was drawn as a key or a regular instance.
pub fn write_provenance<W: Write>(
    mut out: W,
    records: impl IntoIterator<Item = (Option<(usize, usize)>, usize, VirtualProvenance)>,
) -> Result<usize> {
    let mut n = 0;
    for (split, epoch, p) in records {
        let line = ProvenanceLine {
            repeat: split.map(|s| s.0),
            fold: split.map(|s| s.1),
            epoch,
            virtual_bag: &p.bag_id,
            sources: p
                .sources
                .iter()
                .enumerate()
                .map(|(i, (bag_id, instance))| SourceRef {
                    bag_id,
                    instance: *instance,
                    role: if i < p.n_key { "key" } else { "regular" },
                })
                .collect(),
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")
            .map_err(|e| Error::io(Path::new("<provenance>"), e))?;
        n += 1;
    }
    Ok(n)
}
