//! Paired multi-seed experiments: the four-row module ablation and one-key sweeps.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tfsod_core::anchor_sampler::SamplerKind;
use tfsod_core::CombineOp;
use tfsod_detector::RunConfig;

use crate::config::with_overrides;
use crate::pipeline::{config_hash, run_all, RunResult};
use crate::HarnessError;

/// Rows of the module ablation, each adding one component to the row before.
pub const ABLATION_ROWS: [&str; 4] = ["baseline", "+hsamp", "+ternary", "+contrastive"];

/// The config of ablation row `row` derived from a full config.
///
/// The baseline samples anchors uniformly, never opens the gate, ranks by the
/// object logit alone and has no objectness contrastive term. The RoI
/// contrastive term stays on in every row.
pub fn ablation_config(full: &RunConfig, row: usize) -> RunConfig {
    let mut cfg = full.clone();
    if row < 1 {
        cfg.sampler = SamplerKind::Random;
    }
    if row < 2 {
        cfg.thre_cls = 1.0;
        cfg.combine_op = CombineOp::Object;
    }
    if row < 3 {
        cfg.lambda = 0.0;
    }
    cfg
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub bap50: f64,
    pub nap50: f64,
    pub run_dir: PathBuf,
    pub manifest_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub label: String,
    pub seeds: Vec<SeedResult>,
    pub median_bap50: f64,
    pub median_nap50: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentTable {
    pub title: String,
    pub rows: Vec<TableRow>,
}

pub fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn row(label: String, seeds: Vec<SeedResult>) -> TableRow {
    let b: Vec<f64> = seeds.iter().map(|s| s.bap50).collect();
    let n: Vec<f64> = seeds.iter().map(|s| s.nap50).collect();
    TableRow {
        label,
        median_bap50: median(&b),
        median_nap50: median(&n),
        seeds,
    }
}

fn seed_result(seed: u64, r: RunResult) -> SeedResult {
    SeedResult {
        seed,
        bap50: r.report.bap50,
        nap50: r.report.nap50,
        run_dir: r.paths.dir,
        manifest_hash: r.report.manifest_hash,
    }
}

/// Every row must have seen the same dataset for a given seed.
fn check_paired(rows: &[TableRow]) -> Result<(), HarnessError> {
    let Some(first) = rows.first() else { return Ok(()) };
    for r in &rows[1..] {
        for (a, b) in first.seeds.iter().zip(&r.seeds) {
            if a.seed != b.seed || a.manifest_hash != b.manifest_hash {
                return Err(HarnessError::Unpaired {
                    seed: a.seed,
                    rows: (first.label.clone(), r.label.clone()),
                });
            }
        }
    }
    Ok(())
}

/// Runs each of `configs` (label, config) for every seed, pairing data by seed.
pub fn run_table(
    root: &Path,
    title: &str,
    configs: &[(String, RunConfig)],
    seeds: &[u64],
    mut progress: impl FnMut(&str, u64),
) -> Result<ExperimentTable, HarnessError> {
    let mut rows = Vec::new();
    for (label, cfg) in configs {
        let mut results = Vec::new();
        for &seed in seeds {
            progress(label, seed);
            let c = RunConfig { seed, ..cfg.clone() };
            results.push(seed_result(seed, run_all(root, &c)?));
        }
        rows.push(row(label.clone(), results));
    }
    check_paired(&rows)?;
    Ok(ExperimentTable {
        title: title.to_string(),
        rows,
    })
}

pub fn ablate(
    root: &Path,
    full: &RunConfig,
    seeds: &[u64],
    progress: impl FnMut(&str, u64),
) -> Result<ExperimentTable, HarnessError> {
    let configs: Vec<(String, RunConfig)> = ABLATION_ROWS
        .iter()
        .enumerate()
        .map(|(i, l)| (l.to_string(), ablation_config(full, i)))
        .collect();
    run_table(root, "ablation", &configs, seeds, progress)
}

/// One row per value of `key`, every other setting taken from `base`.
pub fn sweep(
    root: &Path,
    base: &RunConfig,
    key: &str,
    values: &[String],
    seeds: &[u64],
    progress: impl FnMut(&str, u64),
) -> Result<ExperimentTable, HarnessError> {
    let mut configs = Vec::new();
    for v in values {
        let cfg = with_overrides(base, &[format!("{key}={v}")])?;
        configs.push((format!("{key}={v}"), cfg));
    }
    run_table(root, &format!("sweep {key}"), &configs, seeds, progress)
}

impl ExperimentTable {
    /// Markdown table: one row per configuration, medians then per-seed values.
    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let seeds: Vec<u64> = self
            .rows
            .first()
            .map(|r| r.seeds.iter().map(|x| x.seed).collect())
            .unwrap_or_default();
        let _ = write!(s, "| {} | bAP50 | nAP50 |", self.title);
        for seed in &seeds {
            let _ = write!(s, " nAP50 s{seed} |");
        }
        s.push('\n');
        s.push_str(&"|---".repeat(3 + seeds.len()));
        s.push_str("|\n");
        for r in &self.rows {
            let _ = write!(
                s,
                "| {} | {:.1} | {:.1} |",
                r.label,
                100.0 * r.median_bap50,
                100.0 * r.median_nap50
            );
            for x in &r.seeds {
                let _ = write!(s, " {:.1} |", 100.0 * x.nap50);
            }
            s.push('\n');
        }
        s
    }

    /// Writes `<stem>.md` and `<stem>.json` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<(), HarnessError> {
        fs::create_dir_all(dir).map_err(|source| HarnessError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        for (ext, text) in [
            ("md", self.to_markdown()),
            ("json", serde_json::to_string_pretty(self).expect("table serializes")),
        ] {
            let path = dir.join(format!("{stem}.{ext}"));
            fs::write(&path, text).map_err(|source| HarnessError::Io { path, source })?;
        }
        Ok(())
    }
}

/// Directory for an experiment's tables, keyed by its inputs.
pub fn experiment_dir(root: &Path, kind: &str, base: &RunConfig, extra: &str) -> PathBuf {
    let key = crate::pipeline::sha256_hex(format!("{}{extra}", config_hash(base)).as_bytes());
    root.join(format!("{kind}-{}", &key[..12]))
}
