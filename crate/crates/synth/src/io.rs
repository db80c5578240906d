//! On-disk dataset layout.
//!
//! ```text
//! <root>/manifest.json            schema version, taxonomy, generator params, splits
//! <root>/images/<scene>.png       8-bit RGB
//! <root>/annotations/<scene>.json scene id, image path, visible and hidden objects
//! ```
//!
//! Annotation objects are `{"category": "<name>", "bbox": [x_min, y_min, x_max, y_max]}`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use image::codecs::png::PngEncoder;
use image::{ExtendedColorType, ImageEncoder, ImageReader};
use serde::{Deserialize, Serialize};
use tfsod_core::BBox;

use crate::dataset::{Annotation, Dataset, GenParams, Image, SceneRecord, Splits};
use crate::taxonomy::CategoryTaxonomy;
use crate::SynthError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Manifest {
    schema_version: u32,
    taxonomy: CategoryTaxonomy,
    params: GenParams,
    scenes: Vec<String>,
    splits: Splits,
}

/// Only the version, so a mismatch is reported before the rest is parsed.
#[derive(Deserialize)]
struct VersionProbe {
    schema_version: u32,
}

#[derive(Serialize, Deserialize)]
struct AnnotationFile {
    scene: String,
    image: String,
    width: usize,
    height: usize,
    visible: Vec<ObjectEntry>,
    hidden: Vec<ObjectEntry>,
}

#[derive(Serialize, Deserialize)]
struct ObjectEntry {
    category: String,
    bbox: BBox,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn json_err(path: &Path) -> impl FnOnce(serde_json::Error) -> SynthError + '_ {
    move |source| SynthError::Json {
        path: path.to_path_buf(),
        source,
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), SynthError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value).map_err(json_err(path))?;
    w.write_all(b"\n").map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

fn image_rel(id: &str) -> String {
    format!("images/{id}.png")
}

pub fn export(dataset: &Dataset, root: &Path) -> Result<(), SynthError> {
    for sub in ["images", "annotations"] {
        let dir = root.join(sub);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    }
    let tax = &dataset.taxonomy;
    let entries = |v: &[Annotation]| -> Vec<ObjectEntry> {
        v.iter()
            .map(|a| ObjectEntry {
                category: tax.name(a.category).to_string(),
                bbox: a.bbox,
            })
            .collect()
    };
    for scene in &dataset.scenes {
        let img_path = root.join(image_rel(&scene.id));
        let file = fs::File::create(&img_path).map_err(io_err(&img_path))?;
        let mut w = BufWriter::new(file);
        PngEncoder::new(&mut w)
            .write_image(
                &scene.image.pixels,
                scene.image.width as u32,
                scene.image.height as u32,
                ExtendedColorType::Rgb8,
            )
            .map_err(|source| SynthError::Image {
                path: img_path.clone(),
                source,
            })?;
        w.flush().map_err(io_err(&img_path))?;

        let ann = AnnotationFile {
            scene: scene.id.clone(),
            image: image_rel(&scene.id),
            width: scene.image.width,
            height: scene.image.height,
            visible: entries(&scene.visible),
            hidden: entries(&scene.hidden),
        };
        write_json(&annotation_path(root, &scene.id), &ann)?;
    }
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        taxonomy: dataset.taxonomy.clone(),
        params: dataset.params.clone(),
        scenes: dataset.scenes.iter().map(|s| s.id.clone()).collect(),
        splits: dataset.splits.clone(),
    };
    write_json(&root.join("manifest.json"), &manifest)
}

fn annotation_path(root: &Path, id: &str) -> PathBuf {
    root.join("annotations").join(format!("{id}.json"))
}

pub fn load(root: &Path) -> Result<Dataset, SynthError> {
    let manifest_path = root.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let probe: VersionProbe = serde_json::from_str(&text).map_err(json_err(&manifest_path))?;
    if probe.schema_version != SCHEMA_VERSION {
        return Err(SynthError::SchemaVersion {
            found: probe.schema_version,
            expected: SCHEMA_VERSION,
        });
    }
    let manifest: Manifest = serde_json::from_str(&text).map_err(json_err(&manifest_path))?;
    let tax = &manifest.taxonomy;
    let total = manifest.scenes.len();
    for idx in manifest
        .splits
        .pretrain
        .iter()
        .chain(&manifest.splits.finetune)
        .chain(&manifest.splits.test)
    {
        if *idx >= total {
            return Err(SynthError::Inconsistent(format!(
                "split refers to scene {idx} but only {total} scenes exist"
            )));
        }
    }

    let mut scenes = Vec::with_capacity(total);
    for id in &manifest.scenes {
        let path = annotation_path(root, id);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let ann: AnnotationFile = serde_json::from_str(&text).map_err(json_err(&path))?;
        if &ann.scene != id {
            return Err(SynthError::Inconsistent(format!(
                "{} describes scene `{}`",
                path.display(),
                ann.scene
            )));
        }
        let objects = |v: Vec<ObjectEntry>| -> Result<Vec<Annotation>, SynthError> {
            v.into_iter()
                .map(|e| {
                    let kind = e.category.parse().map_err(SynthError::Taxonomy)?;
                    let category = tax.id_of(kind).ok_or_else(|| {
                        SynthError::Inconsistent(format!("category `{}` not in taxonomy", e.category))
                    })?;
                    Ok(Annotation { bbox: e.bbox, category })
                })
                .collect()
        };
        let img_path = root.join(&ann.image);
        let decoded = ImageReader::open(&img_path)
            .map_err(io_err(&img_path))?
            .with_guessed_format()
            .map_err(io_err(&img_path))?
            .decode()
            .map_err(|source| SynthError::Image {
                path: img_path.clone(),
                source,
            })?
            .into_rgb8();
        let (w, h) = (decoded.width() as usize, decoded.height() as usize);
        if (w, h) != (ann.width, ann.height) {
            return Err(SynthError::Inconsistent(format!(
                "{} is {w}x{h}, annotation says {}x{}",
                img_path.display(),
                ann.width,
                ann.height
            )));
        }
        scenes.push(SceneRecord {
            id: ann.scene,
            image: Image {
                width: w,
                height: h,
                pixels: decoded.into_raw(),
            },
            visible: objects(ann.visible)?,
            hidden: objects(ann.hidden)?,
        });
    }
    Ok(Dataset {
        taxonomy: manifest.taxonomy,
        params: manifest.params,
        scenes,
        splits: manifest.splits,
    })
}
