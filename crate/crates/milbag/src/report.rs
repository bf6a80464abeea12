//! JSON reports for cross-validation, ablation and sweep runs, and the
//! plain-text tables printed alongside them.

use std::collections::BTreeMap;
use std::path::Path;

use milbag_core::data::Bag;
use milbag_core::metrics::{summarize, MetricSet, Summary};
use milbag_core::train::Ablation;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{hex, Config};
use crate::cv::{CvOutcome, FoldResult};
use crate::error::{Error, Result};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const STD_DEFINITION: &str = "population standard deviation (divide by n) over the defined values";
/// Keys removed before comparing two reports of the same run.
pub const TIMESTAMP_KEYS: [&str; 1] = ["created_at"];

pub fn now_rfc3339() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

#[derive(Debug, Clone, Serialize)]
pub struct ToolInfo {
    pub name: &'static str,
    pub version: &'static str,
    pub core_version: &'static str,
}

impl ToolInfo {
    pub fn current() -> Self {
        Self {
            name: "milbag",
            version: env!("CARGO_PKG_VERSION"),
            core_version: milbag_core::VERSION,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DatasetSummary {
    pub bags: usize,
    pub positive: usize,
    pub negative: usize,
    pub mean_instances: f64,
    /// SHA-256 over every bag's id, label and pixels.
    pub fingerprint: String,
}

impl DatasetSummary {
    pub fn of(bags: &[Bag]) -> Self {
        let mut h = Sha256::new();
        for b in bags {
            h.update(b.id.as_bytes());
            h.update([0, b.label]);
            for inst in &b.instances {
                h.update(inst.slice_index.to_le_bytes());
                h.update([inst.grid_position]);
                for p in &inst.pixels {
                    h.update(p.to_le_bytes());
                }
            }
        }
        let positive = bags.iter().filter(|b| b.label == 1).count();
        Self {
            bags: bags.len(),
            positive,
            negative: bags.len() - positive,
            mean_instances: bags.iter().map(Bag::len).sum::<usize>() as f64 / bags.len().max(1) as f64,
            fingerprint: hex(&h.finalize()),
        }
    }
}

/// Spread of one metric, both over every fold value and over the per-repeat
/// means.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricSummary {
    pub over_folds: Summary,
    pub over_repeat_means: Summary,
}

pub fn summarize_folds(folds: &[FoldResult]) -> BTreeMap<&'static str, MetricSummary> {
    let repeats: std::collections::BTreeSet<usize> = folds.iter().map(|f| f.repeat).collect();
    MetricSet::NAMES
        .iter()
        .enumerate()
        .map(|(m, &name)| {
            let all: Vec<Option<f64>> = folds.iter().map(|f| f.metrics.values()[m]).collect();
            let repeat_means: Vec<Option<f64>> = repeats
                .iter()
                .map(|&r| {
                    let v: Vec<Option<f64>> = folds
                        .iter()
                        .filter(|f| f.repeat == r)
                        .map(|f| f.metrics.values()[m])
                        .collect();
                    summarize(&v).mean
                })
                .collect();
            (
                name,
                MetricSummary {
                    over_folds: summarize(&all),
                    over_repeat_means: summarize(&repeat_means),
                },
            )
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct PlanSummary {
    pub folds: usize,
    pub repeats: usize,
    pub seed: u64,
    /// Some test folds lack a class, so their sensitivity or specificity is
    /// undefined.
    pub sparse_classes: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct CvReport {
    pub schema_version: u32,
    pub tool: ToolInfo,
    pub created_at: String,
    pub config_hash: String,
    pub config: Config,
    pub dataset: DatasetSummary,
    pub plan: PlanSummary,
    pub std_definition: &'static str,
    pub summary: BTreeMap<&'static str, MetricSummary>,
    pub folds: Vec<FoldResult>,
}

impl CvReport {
    pub fn new(config: &Config, bags: &[Bag], outcome: &CvOutcome) -> Self {
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            tool: ToolInfo::current(),
            created_at: now_rfc3339(),
            config_hash: config.hash(),
            config: config.clone(),
            dataset: DatasetSummary::of(bags),
            plan: PlanSummary {
                folds: outcome.plan.n_folds,
                repeats: outcome.plan.n_repeats,
                seed: outcome.plan.seed,
                sparse_classes: outcome.plan.sparse_classes,
            },
            std_definition: STD_DEFINITION,
            summary: summarize_folds(&outcome.folds),
            folds: outcome.folds.clone(),
        }
    }
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report serialises") + "\n"
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, to_json(value)).map_err(|e| Error::io(path, e))
}

/// Removes every timestamp field, at any depth, and re-serialises.
pub fn strip_timestamps(json: &str) -> Result<String> {
    fn strip(v: &mut serde_json::Value) {
        match v {
            serde_json::Value::Object(map) => {
                for k in TIMESTAMP_KEYS {
                    map.remove(k);
                }
                map.values_mut().for_each(strip);
            }
            serde_json::Value::Array(items) => items.iter_mut().for_each(strip),
            _ => {}
        }
    }
    let mut v: serde_json::Value = serde_json::from_str(json)?;
    strip(&mut v);
    Ok(serde_json::to_string_pretty(&v)?)
}

fn pm(s: &Summary, percent: bool) -> String {
    let k = if percent { 100.0 } else { 1.0 };
    match (s.mean, s.std) {
        (Some(m), Some(sd)) if percent => format!("{:.2} ± {:.2}", m * k, sd * k),
        (Some(m), Some(sd)) => format!("{m:.4} ± {sd:.4}"),
        _ => "n/a".into(),
    }
}

/// Fixed-width table: one row per label, one `mean ± std` column per metric
/// (rates in percent, AUC as a fraction).
pub fn metric_table(rows: &[(String, BTreeMap<&'static str, Summary>)]) -> String {
    let header = ["accuracy (%)", "sensitivity (%)", "specificity (%)", "F1 (%)", "AUC"];
    let label_w = rows.iter().map(|(l, _)| l.chars().count()).max().unwrap_or(0).max(13);
    let mut out = format!("{:label_w$}", "configuration");
    for h in header {
        out += &format!("  {h:>17}");
    }
    out.push('\n');
    for (label, s) in rows {
        out += &format!("{label:label_w$}");
        for name in MetricSet::NAMES {
            let cell = s.get(name).map_or("n/a".into(), |v| pm(v, name != "auc"));
            out += &format!("  {cell:>17}");
        }
        out.push('\n');
    }
    out
}

pub fn fold_level(summary: &BTreeMap<&'static str, MetricSummary>) -> BTreeMap<&'static str, Summary> {
    summary.iter().map(|(k, v)| (*k, v.over_folds)).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub ablation: Ablation,
    pub description: &'static str,
    pub seeds: Vec<u64>,
    /// Mean over folds within each seed, one entry per seed.
    pub per_seed: Vec<BTreeMap<&'static str, Option<f64>>>,
    /// Spread of the per-seed means.
    pub over_seeds: BTreeMap<&'static str, Summary>,
    /// Spread of every fold value of every seed.
    pub over_folds: BTreeMap<&'static str, Summary>,
}

impl AblationRow {
    pub fn new(ablation: Ablation, runs: &[(u64, Vec<FoldResult>)]) -> Self {
        let per_seed: Vec<BTreeMap<&'static str, Option<f64>>> = runs
            .iter()
            .map(|(_, folds)| {
                summarize_folds(folds)
                    .into_iter()
                    .map(|(k, v)| (k, v.over_folds.mean))
                    .collect()
            })
            .collect();
        let all: Vec<FoldResult> = runs.iter().flat_map(|(_, f)| f.iter().cloned()).collect();
        let over_seeds = MetricSet::NAMES
            .iter()
            .map(|&n| (n, summarize(&per_seed.iter().map(|s| s[n]).collect::<Vec<_>>())))
            .collect();
        Self {
            ablation,
            description: ablation.description(),
            seeds: runs.iter().map(|(s, _)| *s).collect(),
            per_seed,
            over_seeds,
            over_folds: fold_level(&summarize_folds(&all)),
        }
    }

    pub fn label(&self) -> String {
        format!("{} {}", self.ablation.letter(), self.description)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationReport {
    pub schema_version: u32,
    pub tool: ToolInfo,
    pub created_at: String,
    pub config_hash: String,
    pub config: Config,
    pub dataset: DatasetSummary,
    pub std_definition: &'static str,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn table(&self) -> String {
        let rows: Vec<_> = self.rows.iter().map(|r| (r.label(), r.over_seeds.clone())).collect();
        metric_table(&rows)
    }
}
