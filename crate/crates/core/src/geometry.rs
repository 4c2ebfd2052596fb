//! Pinhole projection of LiDAR points into the camera image plane.
//!
//! Each surviving point writes five channels `(d, x, y, z, reflectance)` at
//! its pixel, where `d` is the Euclidean distance to the camera. Pixels that
//! receive no point stay zero and carry label 0.
//!
//! Binary scan layout: little-endian `f32` records `(x, y, z, reflectance)`.
//! Label layout: one little-endian `u32` per point, class id in the low 16 bits.

use std::fs;
use std::io::Write;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use serde::{Deserialize, Serialize};

use crate::diffcore::DiffTensor;
use crate::error::{Error, Result};

pub type ClassId = u16;

/// Number of channels in the projected LiDAR image.
pub const LIDAR_CHANNELS: usize = 5;
pub const COLOR_CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<[f64; 3]>,
    reflectance: Vec<f64>,
    labels: Option<Vec<ClassId>>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>, reflectance: Vec<f64>, labels: Option<Vec<ClassId>>) -> Result<Self> {
        if reflectance.len() != points.len() {
            return Err(Error::shape(
                "point cloud",
                format!("{} points but {} reflectance values", points.len(), reflectance.len()),
            ));
        }
        if let Some(l) = &labels {
            if l.len() != points.len() {
                return Err(Error::shape(
                    "point cloud",
                    format!("{} points but {} labels", points.len(), l.len()),
                ));
            }
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::NonFinite(format!("point {i} coordinates")));
        }
        if let Some(i) = reflectance.iter().position(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::InvalidArgument(format!(
                "reflectance {} at point {i} outside [0, 1]",
                reflectance[i]
            )));
        }
        Ok(PointCloud {
            points,
            reflectance,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn reflectance(&self) -> &[f64] {
        &self.reflectance
    }

    pub fn labels(&self) -> Option<&[ClassId]> {
        self.labels.as_deref()
    }

    pub fn with_labels(mut self, labels: Vec<ClassId>) -> Result<Self> {
        if labels.len() != self.points.len() {
            return Err(Error::shape(
                "point cloud",
                format!("{} points but {} labels", self.points.len(), labels.len()),
            ));
        }
        self.labels = Some(labels);
        Ok(self)
    }
}

/// Camera intrinsics and image size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionConfig {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub height: usize,
    pub width: usize,
    /// Points closer than this along the optical axis are dropped.
    pub near: f64,
}

impl ProjectionConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy, self.near]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 || self.near <= 0.0 || self.height == 0 || self.width == 0 {
            return Err(Error::InvalidArgument(format!("invalid projection config {self:?}")));
        }
        Ok(())
    }

    /// Pixel `(row, col)` hit by a camera-frame point, if it lies in the image.
    pub fn pixel_of(&self, p: [f64; 3]) -> Option<(usize, usize)> {
        let [x, y, z] = p;
        if !(z >= self.near) {
            return None;
        }
        let u = self.fx * x / z + self.cx;
        let v = self.fy * y / z + self.cy;
        let (col, row) = (u.floor(), v.floor());
        if col < 0.0 || row < 0.0 || col >= self.width as f64 || row >= self.height as f64 {
            return None;
        }
        Some((row as usize, col as usize))
    }

    /// Inverse mapping through the pixel centre at the given depth.
    pub fn back_project(&self, row: usize, col: usize, depth: f64) -> [f64; 3] {
        let u = col as f64 + 0.5;
        let v = row as f64 + 0.5;
        [(u - self.cx) * depth / self.fx, (v - self.cy) * depth / self.fy, depth]
    }
}

/// Color image aligned with the projected LiDAR image.
///
/// `color` is `[3, H, W]`, `lidar` is `[5, H, W]` with channels
/// `(d, x, y, z, reflectance)`; `labels` and `valid_mask` are row-major `H*W`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedFrame {
    pub color: DiffTensor,
    pub lidar: DiffTensor,
    pub labels: Vec<ClassId>,
    pub valid_mask: Vec<bool>,
}

impl ProjectedFrame {
    pub fn height(&self) -> usize {
        self.color.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.color.shape()[2]
    }

    pub fn pixels(&self) -> usize {
        self.labels.len()
    }

    pub fn valid_count(&self) -> usize {
        self.valid_mask.iter().filter(|&&v| v).count()
    }

    /// Checks the structural invariants of a projected frame.
    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.color.chw()?;
        let (l, lh, lw) = self.lidar.chw()?;
        if c != COLOR_CHANNELS || l != LIDAR_CHANNELS || (lh, lw) != (h, w) {
            return Err(Error::shape(
                "projected frame",
                format!("color {:?}, lidar {:?}", self.color.shape(), self.lidar.shape()),
            ));
        }
        let n = h * w;
        if self.labels.len() != n || self.valid_mask.len() != n {
            return Err(Error::shape("projected frame", "label or mask size differs from image"));
        }
        let lidar = self.lidar.values();
        for p in 0..n {
            let ch = |k: usize| lidar[k * n + p];
            if self.valid_mask[p] {
                let d = (ch(1).powi(2) + ch(2).powi(2) + ch(3).powi(2)).sqrt();
                if (ch(0) - d).abs() >= 1e-6 {
                    return Err(Error::InvalidArgument(format!("pixel {p}: distance {} != {d}", ch(0))));
                }
            } else if (0..LIDAR_CHANNELS).any(|k| ch(k) != 0.0) || self.labels[p] != 0 {
                return Err(Error::InvalidArgument(format!("pixel {p} is invalid but carries data")));
            }
        }
        Ok(())
    }
}

/// Counts gathered while projecting.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ProjectionStats {
    /// Behind the near plane or outside the image.
    pub dropped: usize,
    /// Landed on a pixel already holding a closer point.
    pub occluded: usize,
    pub occupied_pixels: usize,
}

pub fn project(cloud: &PointCloud, cfg: &ProjectionConfig, color: &DiffTensor) -> Result<ProjectedFrame> {
    project_with_stats(cloud, cfg, color).map(|(f, _)| f)
}

/// Projects with a z-buffer: the smallest distance wins a pixel, exact ties
/// go to the lowest point index.
pub fn project_with_stats(
    cloud: &PointCloud,
    cfg: &ProjectionConfig,
    color: &DiffTensor,
) -> Result<(ProjectedFrame, ProjectionStats)> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    if color.shape() != [COLOR_CHANNELS, h, w] {
        return Err(Error::shape(
            "project",
            format!("color image {:?} but config is {h}x{w}", color.shape()),
        ));
    }
    let n = h * w;
    let mut best: Vec<Option<(f64, usize)>> = vec![None; n];
    let mut stats = ProjectionStats::default();
    for (i, &p) in cloud.points().iter().enumerate() {
        let Some((row, col)) = cfg.pixel_of(p) else {
            stats.dropped += 1;
            continue;
        };
        let d = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        let slot = &mut best[row * w + col];
        match slot {
            Some((bd, _)) if d >= *bd => stats.occluded += 1,
            Some(_) => {
                stats.occluded += 1;
                *slot = Some((d, i));
            }
            None => *slot = Some((d, i)),
        }
    }

    let mut lidar = vec![0.0; LIDAR_CHANNELS * n];
    let mut labels = vec![0; n];
    let mut valid_mask = vec![false; n];
    for (pix, entry) in best.iter().enumerate() {
        let Some((d, i)) = *entry else { continue };
        let [x, y, z] = cloud.points()[i];
        for (k, v) in [d, x, y, z, cloud.reflectance()[i]].into_iter().enumerate() {
            lidar[k * n + pix] = v;
        }
        labels[pix] = cloud.labels().map_or(0, |l| l[i]);
        valid_mask[pix] = true;
        stats.occupied_pixels += 1;
    }
    let frame = ProjectedFrame {
        color: color.clone(),
        lidar: DiffTensor::new(vec![LIDAR_CHANNELS, h, w], lidar)?,
        labels,
        valid_mask,
    };
    Ok((frame, stats))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Reads a scan of `f32` quadruples. Reflectance is clamped into `[0, 1]`.
pub fn read_scan(path: &Path) -> Result<PointCloud> {
    let bytes = read_bytes(path)?;
    if bytes.len() % 16 != 0 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: (bytes.len() - bytes.len() % 16) as u64,
            message: format!("trailing {} bytes do not form a 16-byte record", bytes.len() % 16),
        });
    }
    let mut points = Vec::with_capacity(bytes.len() / 16);
    let mut refl = Vec::with_capacity(bytes.len() / 16);
    for (i, rec) in bytes.chunks_exact(16).enumerate() {
        let mut v = [0f32; 4];
        LittleEndian::read_f32_into(rec, &mut v);
        if v.iter().any(|c| !c.is_finite()) {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset: (i * 16) as u64,
                message: "non-finite value in point record".into(),
            });
        }
        points.push([v[0] as f64, v[1] as f64, v[2] as f64]);
        refl.push((v[3] as f64).clamp(0.0, 1.0));
    }
    PointCloud::new(points, refl, None)
}

/// Reads per-point `u32` labels, keeping the low 16 bits (the semantic id).
pub fn read_labels(path: &Path) -> Result<Vec<u32>> {
    let bytes = read_bytes(path)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: (bytes.len() - bytes.len() % 4) as u64,
            message: "label file length is not a multiple of 4".into(),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| LittleEndian::read_u32(b) & 0xFFFF)
        .collect())
}

pub fn write_scan(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut buf = vec![0u8; cloud.len() * 16];
    for (i, (p, r)) in cloud.points().iter().zip(cloud.reflectance()).enumerate() {
        let rec = [p[0] as f32, p[1] as f32, p[2] as f32, *r as f32];
        LittleEndian::write_f32_into(&rec, &mut buf[i * 16..(i + 1) * 16]);
    }
    write_file(path, &buf)
}

pub fn write_labels(path: &Path, labels: &[ClassId]) -> Result<()> {
    let mut buf = vec![0u8; labels.len() * 4];
    for (i, &l) in labels.iter().enumerate() {
        LittleEndian::write_u32(&mut buf[i * 4..], l as u32);
    }
    write_file(path, &buf)
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}
