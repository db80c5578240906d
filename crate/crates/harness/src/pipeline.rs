//! Stage runners and the on-disk layout of a run.
//!
//! ```text
//! <root>/data/<params-hash>/          exported dataset, shared by every run using it
//! <root>/<config-hash>-seed<seed>/    one run
//!     config.toml
//!     pretrain.ckpt  pretrain.csv  pretrain.jsonl
//!     finetune.ckpt  finetune.csv  finetune.jsonl
//!     eval.json
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};
use tfsod_core::Stage;
use tfsod_detector::train::{image_to_fmap, TrainFailure};
use tfsod_detector::{finetune, pretrain, Checkpoint, FileSink, RunConfig, TelemetrySink, TransferPolicy};
use tfsod_synth::{generate, CategoryTaxonomy, Dataset, GenParams, RenderConfig, SceneCounts, Split};

use crate::config::to_toml;
use crate::eval::{compute_ap50, EvalReport};
use crate::HarnessError;

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn json_hash<T: Serialize>(v: &T) -> String {
    sha256_hex(&serde_json::to_vec(v).expect("serializable"))
}

/// Content hash of a config; the seed is part of the content.
pub fn config_hash(cfg: &RunConfig) -> String {
    json_hash(cfg)
}

/// Directory name of a run: identical configs share it, any change moves it.
pub fn run_dir_name(cfg: &RunConfig) -> String {
    format!("{}-seed{}", &config_hash(cfg)[..16], cfg.seed)
}

pub fn gen_params(cfg: &RunConfig) -> GenParams {
    GenParams {
        seed: cfg.seed,
        k_shot: cfg.k_shot,
        unseen_rate: cfg.unseen_rate,
        counts: SceneCounts {
            pretrain: cfg.data_pretrain_images,
            novel_pool: cfg.data_novel_pool,
            test: cfg.data_test_images,
        },
        render: RenderConfig {
            large_unlabeled: cfg.large_unlabeled,
            ..RenderConfig::default()
        },
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Paths of one run under a runs root.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub root: PathBuf,
    pub dir: PathBuf,
    pub data: PathBuf,
}

impl RunPaths {
    pub fn new(root: &Path, cfg: &RunConfig) -> Self {
        let data_key = &json_hash(&gen_params(cfg))[..16];
        Self {
            root: root.to_path_buf(),
            dir: root.join(run_dir_name(cfg)),
            data: root.join("data").join(data_key),
        }
    }

    pub fn checkpoint(&self, stage: Stage) -> PathBuf {
        self.dir.join(format!("{stage}.ckpt"))
    }

    pub fn last_good(&self, stage: Stage) -> PathBuf {
        self.dir.join(format!("{stage}.last-good.ckpt"))
    }

    pub fn telemetry_stem(stage: Stage) -> String {
        stage.to_string()
    }

    pub fn eval_report(&self) -> PathBuf {
        self.dir.join("eval.json")
    }

    pub fn plots(&self) -> PathBuf {
        self.dir.join("plots")
    }

    /// Creates the run directory and records the config in it.
    pub fn prepare(&self, cfg: &RunConfig) -> Result<(), HarnessError> {
        fs::create_dir_all(&self.dir).map_err(io_err(&self.dir))?;
        let path = self.dir.join("config.toml");
        fs::write(&path, to_toml(cfg)).map_err(io_err(&path))
    }
}

/// A dataset plus the hash of its exported manifest.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub dataset: Dataset,
    pub manifest_hash: String,
}

/// Generates and exports the run's dataset, or loads it when already on disk.
pub fn ensure_dataset(paths: &RunPaths, cfg: &RunConfig) -> Result<LoadedData, HarnessError> {
    let manifest = paths.data.join("manifest.json");
    if !manifest.exists() {
        let p = gen_params(cfg);
        let dataset = generate(
            &CategoryTaxonomy::toy(),
            p.counts,
            p.k_shot,
            p.seed,
            p.unseen_rate,
            p.render,
        )?;
        // Export to a scratch directory first so a half-written dataset is never picked up.
        let scratch = paths.data.with_extension("partial");
        if scratch.exists() {
            fs::remove_dir_all(&scratch).map_err(io_err(&scratch))?;
        }
        tfsod_synth::export(&dataset, &scratch)?;
        fs::rename(&scratch, &paths.data).map_err(io_err(&paths.data))?;
    }
    let bytes = fs::read(&manifest).map_err(io_err(&manifest))?;
    Ok(LoadedData {
        dataset: tfsod_synth::load(&paths.data)?,
        manifest_hash: sha256_hex(&bytes),
    })
}

fn file_sink(paths: &RunPaths, cfg: &RunConfig, stage: Stage) -> Result<FileSink, HarnessError> {
    let levels = tfsod_core::boxgeom::PyramidSpec::toy().num_levels();
    FileSink::create(
        &paths.dir,
        &RunPaths::telemetry_stem(stage),
        levels,
        cfg.telemetry_flush_every,
    )
    .map_err(io_err(&paths.dir))
}

fn handle_failure(paths: &RunPaths, stage: Stage, f: Box<TrainFailure>) -> HarnessError {
    let path = paths.last_good(stage);
    let saved = f.last_good.save(&path).is_ok();
    HarnessError::Training {
        stage,
        source: f.error,
        last_good: saved.then_some(path),
    }
}

/// Pretrains and writes the checkpoint; telemetry goes to `sink`.
pub fn run_pretrain_with(
    paths: &RunPaths,
    cfg: &RunConfig,
    data: &LoadedData,
    sink: &mut dyn TelemetrySink,
) -> Result<Checkpoint, HarnessError> {
    paths.prepare(cfg)?;
    let ckpt = pretrain(&data.dataset, cfg, sink).map_err(|f| handle_failure(paths, Stage::Pretrain, f))?;
    ckpt.save(&paths.checkpoint(Stage::Pretrain))?;
    Ok(ckpt)
}

pub fn run_pretrain(paths: &RunPaths, cfg: &RunConfig, data: &LoadedData) -> Result<Checkpoint, HarnessError> {
    paths.prepare(cfg)?;
    let mut sink = file_sink(paths, cfg, Stage::Pretrain)?;
    run_pretrain_with(paths, cfg, data, &mut sink)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, HarnessError> {
    if !path.exists() {
        return Err(HarnessError::MissingArtifact {
            path: path.to_path_buf(),
            source: None,
        });
    }
    Ok(Checkpoint::load(path)?)
}

pub fn run_finetune(
    paths: &RunPaths,
    cfg: &RunConfig,
    data: &LoadedData,
    pretrained: &Checkpoint,
) -> Result<Checkpoint, HarnessError> {
    paths.prepare(cfg)?;
    let mut sink = file_sink(paths, cfg, Stage::Finetune)?;
    let ckpt = finetune(pretrained, &data.dataset, cfg, &TransferPolicy::default(), &mut sink)
        .map_err(|f| handle_failure(paths, Stage::Finetune, f))?;
    ckpt.save(&paths.checkpoint(Stage::Finetune))?;
    Ok(ckpt)
}

/// Detects on every test image and scores the result.
pub fn evaluate(ckpt: &Checkpoint, cfg: &RunConfig, data: &LoadedData) -> EvalReport {
    let dets: Vec<_> = data
        .dataset
        .scenes_in(Split::Test)
        .map(|s| {
            ckpt.detector
                .infer(&image_to_fmap(&s.image), cfg, cfg.score_thresh, cfg.nms_iou)
        })
        .collect();
    compute_ap50(&data.dataset, &ckpt.manifest.categories, &dets, &data.manifest_hash)
}

pub fn write_report(paths: &RunPaths, report: &EvalReport) -> Result<(), HarnessError> {
    let path = paths.eval_report();
    let text = serde_json::to_string_pretty(report).expect("report serializes");
    fs::write(&path, text).map_err(io_err(&path))
}

/// Everything a full run produced.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub paths: RunPaths,
    pub report: EvalReport,
}

/// Data, pretrain, finetune and eval, reusing any stage whose output exists.
pub fn run_all(root: &Path, cfg: &RunConfig) -> Result<RunResult, HarnessError> {
    let paths = RunPaths::new(root, cfg);
    let data = ensure_dataset(&paths, cfg)?;
    if paths.eval_report().exists() {
        let path = paths.eval_report();
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        if let Ok(report) = serde_json::from_str::<EvalReport>(&text) {
            if report.manifest_hash == data.manifest_hash {
                return Ok(RunResult { paths, report });
            }
        }
    }
    let pre_path = paths.checkpoint(Stage::Pretrain);
    let pre = match Checkpoint::load(&pre_path) {
        Ok(c) => c,
        Err(_) => run_pretrain(&paths, cfg, &data)?,
    };
    let ft_path = paths.checkpoint(Stage::Finetune);
    let ft = match Checkpoint::load(&ft_path) {
        Ok(c) => c,
        Err(_) => run_finetune(&paths, cfg, &data, &pre)?,
    };
    let report = evaluate(&ft, cfg, &data);
    write_report(&paths, &report)?;
    Ok(RunResult { paths, report })
}
