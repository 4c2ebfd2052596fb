//! Training objectives: masked cross-entropy, feature alignment, pairwise
//! distillation with its four composites, and pseudo-label inpainting.
//!
//! Probability maps are `[C, H, W]` with channel `i` predicting the `i`-th
//! entry of the model's class list. Distillation subscripts read
//! teacher-modality then student-modality: `CL` means the previous color
//! branch supervises the current LiDAR branch.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffcore::{DiffTensor, Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::{ClassId, ProjectedFrame};
use crate::network::PredictionPair;

/// Mean `-log p(label)` over pixels whose label is not 0.
///
/// `classes[i]` names channel `i` of `probs`. A nonzero label missing from
/// `classes` is rejected. Returns a constant 0 when nothing is labeled.
pub fn seg_ce(g: &mut Graph, probs: Var, labels: &[ClassId], classes: &[ClassId]) -> Result<Var> {
    let (c, h, w) = match g.shape(probs) {
        &[c, h, w] => (c, h, w),
        other => return Err(Error::shape("seg_ce", format!("expected [C, H, W], got {other:?}"))),
    };
    if labels.len() != h * w || classes.len() != c {
        return Err(Error::shape(
            "seg_ce",
            format!(
                "{} labels and {} classes for probabilities {:?}",
                labels.len(),
                classes.len(),
                [c, h, w]
            ),
        ));
    }
    let n = h * w;
    let mut picks = Vec::new();
    for (p, &l) in labels.iter().enumerate() {
        if l == 0 {
            continue;
        }
        let ch = classes
            .iter()
            .position(|&k| k == l)
            .ok_or_else(|| Error::InvalidArgument(format!("label {l} is not one of the classes {classes:?}")))?;
        picks.push(ch * n + p);
    }
    if picks.is_empty() {
        return g.constant(vec![1], vec![0.0]);
    }
    let mut weights = vec![0.0; c * n];
    let share = -1.0 / picks.len() as f64;
    for i in picks {
        weights[i] = share;
    }
    let weights = g.constant(vec![c, h, w], weights)?;
    let logp = g.log(probs);
    let terms = g.mul(weights, logp)?;
    Ok(g.sum(terms))
}

/// Sum over levels of `|F_C - F_L|_2 + 1 - cos(F_C, F_L)`, each level
/// flattened to one vector.
pub fn feature_align_loss(g: &mut Graph, color: &[Var], lidar: &[Var]) -> Result<Var> {
    if color.len() != lidar.len() || color.is_empty() {
        return Err(Error::shape(
            "feature_align_loss",
            format!("{} color levels vs {} lidar levels", color.len(), lidar.len()),
        ));
    }
    let mut total: Option<Var> = None;
    for (&fc, &fl) in color.iter().zip(lidar) {
        if g.shape(fc) != g.shape(fl) {
            return Err(Error::shape(
                "feature_align_loss",
                format!("{:?} vs {:?}", g.shape(fc), g.shape(fl)),
            ));
        }
        let diff = g.sub(fc, fl)?;
        let dist = g.l2_norm(diff);
        let cos = g.cosine_similarity(fc, fl)?;
        let level = g.sub(dist, cos)?;
        total = Some(match total {
            Some(t) => g.add(t, level)?,
            None => level,
        });
    }
    let one_per_level = g.constant(vec![1], vec![color.len() as f64])?;
    g.add(total.expect("at least one level"), one_per_level)
}

/// Distillation from `teacher` (`[C_old, H, W]`) to `student`
/// (`[C_new, H, W]`, `C_new >= C_old`): the student is cut to the first
/// `C_old` channels and renormalized, then
/// `-mean_pixels sum_c teacher_c * log student_c`.
///
/// The teacher is read as a constant even if it carries gradients.
pub fn kd_pair(g: &mut Graph, teacher: Var, student: Var) -> Result<Var> {
    kd_pair_with_temperature(g, teacher, student, 1.0)
}

/// [`kd_pair`] on distributions softened by `p^(1/T)` and renormalized.
pub fn kd_pair_with_temperature(g: &mut Graph, teacher: Var, student: Var, temperature: f64) -> Result<Var> {
    let (ts, ss) = (g.shape(teacher).to_vec(), g.shape(student).to_vec());
    if ts.len() != 3 || ss.len() != 3 || ts[1..] != ss[1..] || ss[0] < ts[0] {
        return Err(Error::shape("kd_pair", format!("teacher {ts:?} vs student {ss:?}")));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "temperature {temperature} must be positive"
        )));
    }
    let pixels = (ts[1] * ts[2]) as f64;
    let mut t = g.tensor(teacher);
    let sliced = g.narrow(student, 0, 0, ts[0])?;
    let mut s = g.normalize(sliced, 0)?;
    if temperature != 1.0 {
        t = soften(&t, temperature)?;
        let logs = g.log(s);
        let scaled = g.scale(logs, 1.0 / temperature);
        let e = g.exp(scaled);
        s = g.normalize(e, 0)?;
    }
    let t = g.constant(ts, t.into_values())?;
    let logs = g.log(s);
    let prod = g.mul(t, logs)?;
    let total = g.sum(prod);
    Ok(g.scale(total, -1.0 / pixels))
}

fn soften(p: &DiffTensor, temperature: f64) -> Result<DiffTensor> {
    let (c, h, w) = p.chw()?;
    let n = h * w;
    let mut v: Vec<f64> = p.values().iter().map(|x| x.max(0.0).powf(1.0 / temperature)).collect();
    for px in 0..n {
        let s: f64 = (0..c).map(|k| v[k * n + px]).sum();
        if s <= 0.0 {
            return Err(Error::NonFinite("softened teacher distribution sums to 0".into()));
        }
        (0..c).for_each(|k| v[k * n + px] /= s);
    }
    DiffTensor::new(vec![c, h, w], v)
}

/// Which teacher/student modality pairs enter the distillation sum.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KdVariant {
    /// `CC + LL`
    Same,
    /// `CC + LL + CL`
    Img,
    /// `CC + LL + LC`
    Pcd,
    /// `CC + LL + CL + LC`
    Cross,
}

impl KdVariant {
    pub const ALL: [KdVariant; 4] = [KdVariant::Same, KdVariant::Img, KdVariant::Pcd, KdVariant::Cross];

    pub fn name(self) -> &'static str {
        match self {
            KdVariant::Same => "same",
            KdVariant::Img => "img",
            KdVariant::Pcd => "pcd",
            KdVariant::Cross => "cross",
        }
    }

    /// `(color teaches lidar, lidar teaches color)`.
    fn cross_terms(self) -> (bool, bool) {
        match self {
            KdVariant::Same => (false, false),
            KdVariant::Img => (true, false),
            KdVariant::Pcd => (false, true),
            KdVariant::Cross => (true, true),
        }
    }
}

impl fmt::Display for KdVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for KdVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        KdVariant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown distillation variant {s:?}")))
    }
}

/// Teacher and student probability handles for one frame.
#[derive(Clone, Copy, Debug)]
pub struct ProbVars {
    pub color: Var,
    pub lidar: Var,
}

pub fn kd_composite(g: &mut Graph, variant: KdVariant, teacher: ProbVars, student: ProbVars) -> Result<Var> {
    kd_composite_with_temperature(g, variant, teacher, student, 1.0)
}

pub fn kd_composite_with_temperature(
    g: &mut Graph,
    variant: KdVariant,
    teacher: ProbVars,
    student: ProbVars,
    temperature: f64,
) -> Result<Var> {
    let cc = kd_pair_with_temperature(g, teacher.color, student.color, temperature)?;
    let ll = kd_pair_with_temperature(g, teacher.lidar, student.lidar, temperature)?;
    let mut total = g.add(cc, ll)?;
    let (cl, lc) = variant.cross_terms();
    if cl {
        let t = kd_pair_with_temperature(g, teacher.color, student.lidar, temperature)?;
        total = g.add(total, t)?;
    }
    if lc {
        let t = kd_pair_with_temperature(g, teacher.lidar, student.color, temperature)?;
        total = g.add(total, t)?;
    }
    Ok(total)
}

/// Value-level [`kd_composite`] for two prediction pairs.
pub fn kd_composite_value(variant: KdVariant, teacher: &PredictionPair, student: &PredictionPair) -> Result<f64> {
    let mut g = Graph::new();
    let t = ProbVars {
        color: g.leaf(&teacher.color),
        lidar: g.leaf(&teacher.lidar),
    };
    let s = ProbVars {
        color: g.leaf(&student.color),
        lidar: g.leaf(&student.lidar),
    };
    let v = kd_composite(&mut g, variant, t, s)?;
    Ok(g.scalar_value(v))
}

/// Fills unknown valid pixels with the argmax of the averaged teacher
/// prediction. `classes[i]` names channel `i` of the teacher maps.
///
/// Labeled pixels and pixels outside the valid mask are left untouched.
/// Ties resolve to the lowest channel.
pub fn inpaint_labels(
    masked: &ProjectedFrame,
    teacher: &PredictionPair,
    classes: &[ClassId],
) -> Result<ProjectedFrame> {
    let (c, h, w) = teacher.color.chw()?;
    if teacher.lidar.shape() != teacher.color.shape()
        || (h, w) != (masked.height(), masked.width())
        || classes.len() != c
    {
        return Err(Error::shape(
            "inpaint_labels",
            format!(
                "teacher {:?}/{:?} with {} classes for a {}x{} frame",
                teacher.color.shape(),
                teacher.lidar.shape(),
                classes.len(),
                masked.height(),
                masked.width()
            ),
        ));
    }
    let n = h * w;
    let (pc, pl) = (teacher.color.values(), teacher.lidar.values());
    let mut out = masked.clone();
    for p in 0..n {
        if out.labels[p] != 0 || !out.valid_mask[p] {
            continue;
        }
        let mut best = 0;
        let mut best_v = f64::NEG_INFINITY;
        for k in 0..c {
            let v = (pc[k * n + p] + pl[k * n + p]) / 2.0;
            if v > best_v {
                best = k;
                best_v = v;
            }
        }
        out.labels[p] = classes[best];
    }
    Ok(out)
}
