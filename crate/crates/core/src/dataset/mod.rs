//! Training data: synthetic scenes, external frames and class schedules.

pub mod schedule;
pub mod synthetic;
pub mod taxonomy;

use std::path::Path;

use crate::diffcore::DiffTensor;
use crate::error::{Error, Result};
use crate::geometry::{self, ClassId, ProjectedFrame, ProjectionConfig};

pub use schedule::{build_schedule, ClassSchedule, Preset};
pub use synthetic::{generate_frames, generate_scene, SceneSpec};
pub use taxonomy::{LabelMap, NUM_CLASSES, TABLE_ORDER};

/// Keeps only labels in `step_classes`; everything else becomes 0.
///
/// Pixels and modality data are untouched: every step sees the same samples
/// with a different label set.
pub fn mask_labels(frame: &ProjectedFrame, step_classes: &[ClassId]) -> ProjectedFrame {
    let mut out = frame.clone();
    for l in &mut out.labels {
        if *l != 0 && !step_classes.contains(l) {
            *l = 0;
        }
    }
    out
}

/// Reads an RGB image into a `[3, H, W]` tensor scaled to `[0, 1]`.
pub fn read_color(path: &Path) -> Result<DiffTensor> {
    let img = image::open(path)
        .map_err(|e| Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            message: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let n = h * w;
    let mut v = vec![0.0; 3 * n];
    for (i, px) in img.pixels().enumerate() {
        for k in 0..3 {
            v[k * n + i] = px.0[k] as f64 / 255.0;
        }
    }
    DiffTensor::new(vec![3, h, w], v)
}

/// Writes a `[3, H, W]` tensor in `[0, 1]` as an 8-bit PNG.
pub fn write_color(path: &Path, color: &DiffTensor) -> Result<()> {
    let (_, h, w) = color.chw()?;
    let n = h * w;
    let v = color.values();
    let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        image::Rgb([0, 1, 2].map(|k| (v[k * n + p].clamp(0.0, 1.0) * 255.0).round() as u8))
    });
    img.save(path).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        offset: 0,
        message: e.to_string(),
    })
}

/// Loads a scan, its per-point labels and the matching camera image, then
/// projects them into one frame.
pub fn load_external_frame(
    scan_path: &Path,
    label_path: &Path,
    image_path: &Path,
    cfg: &ProjectionConfig,
    map: &LabelMap,
) -> Result<ProjectedFrame> {
    let cloud = geometry::read_scan(scan_path)?;
    let raw = geometry::read_labels(label_path)?;
    if raw.len() != cloud.len() {
        let offset = 4 * raw.len().min(cloud.len()) as u64;
        return Err(Error::Format {
            path: label_path.to_path_buf(),
            offset,
            message: format!("{} labels for {} points", raw.len(), cloud.len()),
        });
    }
    let cloud = cloud.with_labels(raw.into_iter().map(|r| map.map(r)).collect())?;
    let color = read_color(image_path)?;
    geometry::project(&cloud, cfg, &color)
}
