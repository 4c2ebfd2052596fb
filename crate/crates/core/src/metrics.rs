//! Confusion matrices, per-class IoU and the modality table.
//!
//! Only pixels with a LiDAR return and a nonzero label are scored.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::{mask_labels, TABLE_ORDER};
use crate::diffcore::DiffTensor;
use crate::error::{Error, Result};
use crate::geometry::{ClassId, ProjectedFrame};
use crate::network::{ModalityAvailability, Predictor};

/// `counts[i * C + j]`: pixels of true class `classes[i]` predicted as
/// `classes[j]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: Vec<ClassId>,
    counts: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    pub classes: Vec<ClassId>,
    /// `None` where the class was neither present nor predicted.
    pub per_class: Vec<Option<f64>>,
    /// Mean over defined classes; `None` if no class is defined.
    pub miou: Option<f64>,
}

impl IouReport {
    pub fn get(&self, class: ClassId) -> Option<f64> {
        self.classes
            .iter()
            .position(|&c| c == class)
            .and_then(|i| self.per_class[i])
    }

    /// Mean IoU over the listed classes that are defined.
    pub fn miou_over(&self, subset: &[ClassId]) -> Option<f64> {
        let v: Vec<f64> = subset.iter().filter_map(|&c| self.get(c)).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

impl ConfusionMatrix {
    pub fn new(classes: &[ClassId]) -> Result<Self> {
        if classes.is_empty() || classes.contains(&0) {
            return Err(Error::InvalidArgument(format!("invalid class list {classes:?}")));
        }
        Ok(ConfusionMatrix {
            classes: classes.to_vec(),
            counts: vec![0; classes.len() * classes.len()],
        })
    }

    /// Builds a matrix from explicit counts, row-major by true class.
    pub fn from_counts(classes: &[ClassId], counts: Vec<u64>) -> Result<Self> {
        let mut cm = Self::new(classes)?;
        if counts.len() != cm.counts.len() {
            return Err(Error::shape(
                "confusion matrix",
                format!("{} counts for {} classes", counts.len(), classes.len()),
            ));
        }
        cm.counts = counts;
        Ok(cm)
    }

    pub fn classes(&self) -> &[ClassId] {
        &self.classes
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn count(&self, truth: ClassId, pred: ClassId) -> u64 {
        match (self.index(truth), self.index(pred)) {
            (Some(i), Some(j)) => self.counts[i * self.classes.len() + j],
            _ => 0,
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    fn index(&self, class: ClassId) -> Option<usize> {
        self.classes.iter().position(|&c| c == class)
    }

    /// Adds one frame, scoring valid labeled pixels only.
    pub fn accumulate(&mut self, pred: &[ClassId], frame: &ProjectedFrame) -> Result<()> {
        if pred.len() != frame.pixels() {
            return Err(Error::shape(
                "accumulate",
                format!("{} predictions for {} pixels", pred.len(), frame.pixels()),
            ));
        }
        let c = self.classes.len();
        for ((&p, &l), &valid) in pred.iter().zip(&frame.labels).zip(&frame.valid_mask) {
            if !valid || l == 0 {
                continue;
            }
            let i = self
                .index(l)
                .ok_or_else(|| Error::InvalidArgument(format!("label {l} outside {:?}", self.classes)))?;
            let j = self
                .index(p)
                .ok_or_else(|| Error::InvalidArgument(format!("prediction {p} outside {:?}", self.classes)))?;
            self.counts[i * c + j] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.classes != other.classes {
            return Err(Error::InvalidArgument(
                "merging confusion matrices over different classes".into(),
            ));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn iou(&self) -> IouReport {
        let c = self.classes.len();
        let per_class: Vec<Option<f64>> = (0..c)
            .map(|k| {
                let tp = self.counts[k * c + k];
                let row: u64 = self.counts[k * c..(k + 1) * c].iter().sum();
                let col: u64 = (0..c).map(|i| self.counts[i * c + k]).sum();
                let denom = row + col - tp;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect();
        let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
        let miou = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
        IouReport {
            classes: self.classes.clone(),
            per_class,
            miou,
        }
    }
}

/// Per-pixel argmax of a `[C, H, W]` map, mapped through `classes`.
/// Ties resolve to the lowest channel.
pub fn argmax_classes(probs: &DiffTensor, classes: &[ClassId]) -> Result<Vec<ClassId>> {
    let (c, h, w) = probs.chw()?;
    if classes.len() != c {
        return Err(Error::shape(
            "argmax_classes",
            format!("{} classes for {c} channels", classes.len()),
        ));
    }
    let n = h * w;
    let v = probs.values();
    Ok((0..n)
        .map(|p| {
            let mut best = 0;
            for k in 1..c {
                if v[k * n + p] > v[best * n + p] {
                    best = k;
                }
            }
            classes[best]
        })
        .collect())
}

/// Confusion matrices of both branches under one availability setting.
/// Labels outside the model's classes are ignored.
pub fn evaluate<P: Predictor + ?Sized>(
    model: &P,
    frames: &[ProjectedFrame],
    avail: ModalityAvailability,
) -> Result<(ConfusionMatrix, ConfusionMatrix)> {
    let classes = model.classes();
    let mut color = ConfusionMatrix::new(classes)?;
    let mut lidar = ConfusionMatrix::new(classes)?;
    for frame in frames {
        let frame = mask_labels(frame, classes);
        let pred = model.predict(&frame, avail)?;
        color.accumulate(&argmax_classes(&pred.color, classes)?, &frame)?;
        lidar.accumulate(&argmax_classes(&pred.lidar, classes)?, &frame)?;
    }
    Ok((color, lidar))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityRow {
    pub input: ModalityAvailability,
    pub color_miou: f64,
    pub lidar_miou: f64,
}

/// Both branches' mIoU with both inputs, color only and LiDAR only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityTable {
    pub rows: Vec<ModalityRow>,
    pub color_average: f64,
    pub lidar_average: f64,
}

impl ModalityTable {
    pub fn row(&self, input: ModalityAvailability) -> Option<&ModalityRow> {
        self.rows.iter().find(|r| r.input == input)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("input,rgb_branch_miou,lidar_branch_miou\n");
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{}",
                r.input.name(),
                fmt_score(Some(r.color_miou)),
                fmt_score(Some(r.lidar_miou))
            )
            .unwrap();
        }
        writeln!(
            out,
            "average,{},{}",
            fmt_score(Some(self.color_average)),
            fmt_score(Some(self.lidar_average))
        )
        .unwrap();
        out
    }
}

pub const SETTINGS: [ModalityAvailability; 3] = [
    ModalityAvailability::BOTH,
    ModalityAvailability::COLOR_ONLY,
    ModalityAvailability::LIDAR_ONLY,
];

/// Undefined mIoU (nothing to score) is reported as 0.
pub fn modality_table<P: Predictor + ?Sized>(model: &P, frames: &[ProjectedFrame]) -> Result<ModalityTable> {
    let mut rows = Vec::with_capacity(SETTINGS.len());
    for input in SETTINGS {
        let (c, l) = evaluate(model, frames, input)?;
        rows.push(ModalityRow {
            input,
            color_miou: c.iou().miou.unwrap_or(0.0),
            lidar_miou: l.iou().miou.unwrap_or(0.0),
        });
    }
    let k = rows.len() as f64;
    Ok(ModalityTable {
        color_average: rows.iter().map(|r| r.color_miou).sum::<f64>() / k,
        lidar_average: rows.iter().map(|r| r.lidar_miou).sum::<f64>() / k,
        rows,
    })
}

/// Fixed-precision score text; undefined values print as `nan`.
pub fn fmt_score(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.6}"),
        None => "nan".to_string(),
    }
}

/// `classes` sorted by report column order, unknown ids last by value.
pub fn report_order(classes: &[ClassId]) -> Vec<ClassId> {
    let mut v = classes.to_vec();
    v.sort_by_key(|&c| (TABLE_ORDER.iter().position(|&t| t == c).unwrap_or(usize::MAX), c));
    v
}

/// One `label,class,iou` line per class in report order, plus `mIoU`.
pub fn iou_csv(label: &str, report: &IouReport) -> String {
    let mut out = String::new();
    for c in report_order(&report.classes) {
        writeln!(out, "{label},{c},{}", fmt_score(report.get(c))).unwrap();
    }
    writeln!(out, "{label},mIoU,{}", fmt_score(report.miou)).unwrap();
    out
}
