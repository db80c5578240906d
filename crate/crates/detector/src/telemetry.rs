//! Per-iteration training records: a CSV stream plus a JSON-lines mirror.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tfsod_core::Stage;

use crate::step::AnchorCounts;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryRecord {
    pub stage: Stage,
    pub iteration: u64,
    pub loss_total: f64,
    pub loss_cls: f64,
    pub loss_bbox: f64,
    pub loss_obj: f64,
    pub loss_tcon: f64,
    pub loss_contra: f64,
    pub lr: f64,
    pub images: usize,
    pub counts: AnchorCounts,
    /// Milliseconds since the run started; zero in deterministic mode.
    pub elapsed_ms: u64,
}

impl TelemetryRecord {
    pub fn active(&self) -> usize {
        self.counts.active.iter().sum()
    }

    pub fn negative(&self) -> usize {
        self.counts.negative.iter().sum()
    }

    pub fn potential(&self) -> usize {
        self.counts.potential.iter().sum()
    }

    /// CSV header for a pyramid of `levels` levels.
    pub fn csv_header(levels: usize) -> String {
        let mut cols: Vec<String> = [
            "stage",
            "iteration",
            "loss_total",
            "loss_cls",
            "loss_bbox",
            "loss_obj",
            "loss_tcon",
            "loss_contra",
            "lr",
            "images",
            "active",
            "negative",
            "potential",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        for role in ["active", "negative", "potential"] {
            cols.extend((0..levels).map(|l| format!("{role}_l{l}")));
        }
        cols.push("elapsed_ms".into());
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cols = vec![
            self.stage.to_string(),
            self.iteration.to_string(),
            self.loss_total.to_string(),
            self.loss_cls.to_string(),
            self.loss_bbox.to_string(),
            self.loss_obj.to_string(),
            self.loss_tcon.to_string(),
            self.loss_contra.to_string(),
            self.lr.to_string(),
            self.images.to_string(),
            self.active().to_string(),
            self.negative().to_string(),
            self.potential().to_string(),
        ];
        for v in [&self.counts.active, &self.counts.negative, &self.counts.potential] {
            cols.extend(v.iter().map(|c| c.to_string()));
        }
        cols.push(self.elapsed_ms.to_string());
        cols.join(",")
    }
}

/// Receives one record per training iteration.
pub trait TelemetrySink {
    fn record(&mut self, rec: &TelemetryRecord) -> std::io::Result<()>;
    fn flush(&mut self) -> std::io::Result<()>;
}

/// Keeps records in memory.
#[derive(Debug, Default, Clone)]
pub struct MemorySink {
    pub records: Vec<TelemetryRecord>,
}

impl TelemetrySink for MemorySink {
    fn record(&mut self, rec: &TelemetryRecord) -> std::io::Result<()> {
        self.records.push(rec.clone());
        Ok(())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

/// Appends to `<stem>.csv` and `<stem>.jsonl`, flushing every `flush_every` records.
pub struct FileSink {
    csv: BufWriter<File>,
    jsonl: BufWriter<File>,
    levels: usize,
    flush_every: usize,
    pending: usize,
    header_written: bool,
    pub csv_path: PathBuf,
    pub jsonl_path: PathBuf,
}

impl FileSink {
    pub fn create(dir: &Path, stem: &str, levels: usize, flush_every: usize) -> std::io::Result<Self> {
        let csv_path = dir.join(format!("{stem}.csv"));
        let jsonl_path = dir.join(format!("{stem}.jsonl"));
        Self::from_files(
            File::create(&csv_path)?,
            File::create(&jsonl_path)?,
            csv_path,
            jsonl_path,
            levels,
            flush_every,
        )
    }

    /// Writes to already-open files; lets callers point a stream at special files.
    pub fn from_files(
        csv: File,
        jsonl: File,
        csv_path: PathBuf,
        jsonl_path: PathBuf,
        levels: usize,
        flush_every: usize,
    ) -> std::io::Result<Self> {
        Ok(Self {
            csv: BufWriter::new(csv),
            jsonl: BufWriter::new(jsonl),
            levels,
            flush_every: flush_every.clamp(1, 50),
            pending: 0,
            header_written: false,
            csv_path,
            jsonl_path,
        })
    }
}

impl TelemetrySink for FileSink {
    fn record(&mut self, rec: &TelemetryRecord) -> std::io::Result<()> {
        if !self.header_written {
            writeln!(self.csv, "{}", TelemetryRecord::csv_header(self.levels))?;
            self.header_written = true;
        }
        writeln!(self.csv, "{}", rec.csv_row())?;
        serde_json::to_writer(&mut self.jsonl, rec)?;
        self.jsonl.write_all(b"\n")?;
        self.pending += 1;
        if self.pending >= self.flush_every {
            self.flush()?;
        }
        Ok(())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.pending = 0;
        // Flush both streams even if one fails, so the other stays complete.
        let csv = self.csv.flush();
        let jsonl = self.jsonl.flush();
        csv.and(jsonl)
    }
}

impl Drop for FileSink {
    fn drop(&mut self) {
        let _ = self.flush();
    }
}
