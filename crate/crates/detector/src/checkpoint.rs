//! Checkpoint container.
//!
//! ```text
//! offset 0   8 bytes   magic "TFSODCK\0"
//! offset 8   u32 LE    format version
//! offset 12  u64 LE    manifest length M
//! offset 20  M bytes   manifest, UTF-8 JSON
//! then       f32 LE    every tensor listed in the manifest, in order, row-major
//! ```
//!
//! The manifest records the stage, iteration, category names, network
//! dimensions, the run config and each tensor's name, group and shape.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tfsod_core::Stage;

use crate::config::RunConfig;
use crate::model::{Arch, Detector};
use crate::params::ParamMeta;
use crate::DetectorError;

pub const MAGIC: &[u8; 8] = b"TFSODCK\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub stage: Stage,
    pub iteration: u64,
    /// Foreground category names in classifier order (class 1 first).
    pub categories: Vec<String>,
    pub arch: Arch,
    pub config: RunConfig,
    pub params: Vec<ParamMeta>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub detector: Detector,
}

impl Checkpoint {
    pub fn new(detector: Detector, stage: Stage, iteration: u64, categories: Vec<String>, config: RunConfig) -> Self {
        let manifest = CheckpointManifest {
            format_version: FORMAT_VERSION,
            stage,
            iteration,
            categories,
            arch: detector.arch.clone(),
            config,
            params: detector.params.meta.clone(),
        };
        Self { manifest, detector }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = serde_json::to_vec(&self.manifest).expect("manifest serializes");
        let floats: usize = self.detector.params.values.iter().map(Vec::len).sum();
        let mut out = Vec::with_capacity(20 + manifest.len() + 4 * floats);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for v in &self.detector.params.values {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DetectorError> {
        let bad = |m: String| DetectorError::Checkpoint(m);
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic or too short)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(bad(format!(
                "checkpoint format version {version} is not supported (expected {FORMAT_VERSION})"
            )));
        }
        let mlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = &bytes[20..];
        if body.len() < mlen {
            return Err(bad("truncated manifest".into()));
        }
        let manifest: CheckpointManifest =
            serde_json::from_slice(&body[..mlen]).map_err(|e| bad(format!("manifest: {e}")))?;
        let mut detector = Detector::skeleton(manifest.arch.clone());
        if detector.params.meta != manifest.params {
            return Err(bad("parameter layout does not match the recorded architecture".into()));
        }
        let mut data = &body[mlen..];
        for v in detector.params.values.iter_mut() {
            let need = v.len() * 4;
            if data.len() < need {
                return Err(bad("truncated tensor data".into()));
            }
            for (x, chunk) in v.iter_mut().zip(data[..need].chunks_exact(4)) {
                *x = f32::from_le_bytes(chunk.try_into().unwrap());
            }
            data = &data[need..];
        }
        if !data.is_empty() {
            return Err(bad(format!("{} trailing bytes after tensor data", data.len())));
        }
        Ok(Self { manifest, detector })
    }

    pub fn save(&self, path: &Path) -> Result<(), DetectorError> {
        let io = |source| DetectorError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut file = fs::File::create(path).map_err(io)?;
        file.write_all(&self.to_bytes()).map_err(io)?;
        file.sync_all().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, DetectorError> {
        let bytes = fs::read(path).map_err(|source| DetectorError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}
