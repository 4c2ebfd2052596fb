//! Loading train/eval frames and writing synthetic data to disk.
//!
//! On-disk layout, one directory per split:
//!
//! ```text
//! velodyne/000000.bin    x, y, z, reflectance as little-endian f32
//! labels/000000.label    one little-endian u32 per point
//! image_2/000000.png     8-bit RGB
//! ```

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use symseg::dataset::synthetic::{render_dense, sample_cloud};
use symseg::dataset::{generate_frames, load_external_frame, write_color, SceneSpec};
use symseg::geometry::{write_labels, write_scan, ProjectedFrame, ProjectionConfig};
use symseg::{Error, Result};

use crate::config::{DatasetKind, RunConfig};

pub struct Splits {
    pub train: Vec<ProjectedFrame>,
    pub eval: Vec<ProjectedFrame>,
}

pub fn load(cfg: &RunConfig) -> Result<Splits> {
    let d = &cfg.dataset;
    match d.kind {
        DatasetKind::Synthetic => {
            let train = cfg.scene_spec();
            let eval = SceneSpec {
                seed: cfg.eval_seed(),
                ..train.clone()
            };
            Ok(Splits {
                train: generate_frames(&train, d.train_frames)?,
                eval: generate_frames(&eval, d.eval_frames)?,
            })
        }
        DatasetKind::External => {
            let missing = |key: &str| Error::Config(format!("dataset.{key} is required for external data"));
            let proj = d.projection.as_ref().ok_or_else(|| missing("projection"))?;
            let map = cfg.label_map()?;
            let read = |dir: &Option<PathBuf>, key: &str| -> Result<Vec<ProjectedFrame>> {
                let dir = dir.as_ref().ok_or_else(|| missing(key))?;
                frame_stems(dir)?
                    .iter()
                    .map(|stem| {
                        let (scan, label, image) = frame_paths(dir, stem);
                        load_external_frame(&scan, &label, &image, proj, &map)
                    })
                    .collect()
            };
            Ok(Splits {
                train: read(&d.train_dir, "train_dir")?,
                eval: read(&d.eval_dir, "eval_dir")?,
            })
        }
    }
}

fn frame_paths(dir: &Path, stem: &str) -> (PathBuf, PathBuf, PathBuf) {
    (
        dir.join("velodyne").join(format!("{stem}.bin")),
        dir.join("labels").join(format!("{stem}.label")),
        dir.join("image_2").join(format!("{stem}.png")),
    )
}

/// Sorted scan stems under `dir/velodyne`.
pub fn frame_stems(dir: &Path) -> Result<Vec<String>> {
    let scans = dir.join("velodyne");
    let entries = fs::read_dir(&scans).map_err(|e| Error::Io {
        path: scans.clone(),
        source: e,
    })?;
    let mut stems = Vec::new();
    for entry in entries {
        let path = entry
            .map_err(|e| Error::Io {
                path: scans.clone(),
                source: e,
            })?
            .path();
        if path.extension().is_some_and(|e| e == "bin") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                stems.push(stem.to_string());
            }
        }
    }
    if stems.is_empty() {
        return Err(Error::Io {
            path: scans,
            source: io::Error::new(io::ErrorKind::NotFound, "no .bin scans"),
        });
    }
    stems.sort();
    Ok(stems)
}

/// Summary written next to generated data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataManifest {
    pub config_digest: String,
    pub num_classes: usize,
    pub label_map: String,
    pub projection: ProjectionConfig,
    pub train_frames: usize,
    pub eval_frames: usize,
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Writes `count` frames of `spec` under `dir` in the on-disk layout.
pub fn write_split(dir: &Path, spec: &SceneSpec, count: usize) -> Result<()> {
    for sub in ["velodyne", "labels", "image_2"] {
        create_dir(&dir.join(sub))?;
    }
    for i in 0..count {
        let frame = spec.frame(i as u64);
        let dense = render_dense(&frame)?;
        let cloud = sample_cloud(&frame, &dense)?;
        let (scan, label, image) = frame_paths(dir, &format!("{i:06}"));
        write_scan(&scan, &cloud)?;
        write_labels(&label, cloud.labels().expect("sampled clouds carry labels"))?;
        write_color(&image, &dense.color)?;
    }
    Ok(())
}

/// Writes the synthetic train and eval splits of `cfg` under `root` and
/// returns the manifest.
pub fn write_dataset(cfg: &RunConfig, root: &Path) -> Result<DataManifest> {
    if cfg.dataset.kind != DatasetKind::Synthetic {
        return Err(Error::Config("generate-data needs dataset.kind = \"synthetic\"".into()));
    }
    let train = cfg.scene_spec();
    let eval = SceneSpec {
        seed: cfg.eval_seed(),
        ..train.clone()
    };
    write_split(&root.join("train"), &train, cfg.dataset.train_frames)?;
    write_split(&root.join("eval"), &eval, cfg.dataset.eval_frames)?;
    Ok(DataManifest {
        config_digest: cfg.digest(),
        num_classes: cfg.dataset.num_classes,
        label_map: "identity".into(),
        projection: train.projection(),
        train_frames: cfg.dataset.train_frames,
        eval_frames: cfg.dataset.eval_frames,
    })
}

/// Configuration that trains on data written by [`write_dataset`].
pub fn external_config(cfg: &RunConfig, root: &Path, manifest: &DataManifest) -> RunConfig {
    let mut out = cfg.clone();
    let d = &mut out.dataset;
    d.kind = DatasetKind::External;
    d.train_dir = Some(root.join("train"));
    d.eval_dir = Some(root.join("eval"));
    d.label_map = manifest.label_map.clone();
    d.num_classes = manifest.num_classes;
    d.projection = Some(manifest.projection.clone());
    out
}
