//! Finite-difference checks of every loss and of the whole network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use symseg::diffcore::{
    finite_difference_check, finite_difference_check_subset, DiffTensor, GradCheckReport, Graph, Var,
};
use symseg::geometry::{ClassId, ProjectedFrame};
use symseg::losses::{feature_align_loss, kd_composite, seg_ce, KdVariant, ProbVars};
use symseg::network::{ModalityAvailability, Model, ModelConfig};
use symseg::Result;

pub const EPS: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Network parameters probed per run.
pub const NETWORK_PROBES: usize = 96;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub passed: bool,
}

impl CheckResult {
    fn new(name: impl Into<String>, r: &GradCheckReport) -> Self {
        CheckResult {
            name: name.into(),
            max_rel_error: r.max_rel_error,
            checked: r.checked,
            passed: r.passes(TOLERANCE),
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> DiffTensor {
    DiffTensor::from_vec((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn random_probs(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Result<DiffTensor> {
    let n = h * w;
    let mut v: Vec<f64> = (0..c * n).map(|_| rng.gen_range(0.05..1.0)).collect();
    for p in 0..n {
        let s: f64 = (0..c).map(|k| v[k * n + p]).sum();
        (0..c).for_each(|k| v[k * n + p] /= s);
    }
    DiffTensor::new(vec![c, h, w], v)
}

/// Runs every check against `frame`, labelled with `config.classes`.
/// The network objective is both segmentation losses plus the alignment
/// term at `align_weight`.
pub fn run_suite(
    config: &ModelConfig,
    align_weight: f64,
    frame: &ProjectedFrame,
    seed: u64,
) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes: Vec<ClassId> = config.classes.clone();
    let (c, h, w) = (classes.len(), frame.height(), frame.width());
    let n = c * h * w;
    let labels = &frame.labels;
    let mut out = Vec::new();

    let ce = |g: &mut Graph, th: Var| {
        let logits = g.reshape(th, vec![c, h, w])?;
        let p = g.softmax(logits, 0)?;
        seg_ce(g, p, labels, &classes)
    };
    out.push(CheckResult::new(
        "seg_ce",
        &finite_difference_check(ce, &uniform(&mut rng, n), EPS)?,
    ));

    let level = |k: usize| (2 << k, (h >> k).max(1), (w >> k).max(1));
    let sizes: Vec<usize> = (0..3)
        .map(|k| {
            let (a, b, d) = level(k);
            a * b * d
        })
        .collect();
    let total: usize = sizes.iter().sum();
    let align = |g: &mut Graph, th: Var| {
        let (mut color, mut lidar, mut at) = (Vec::new(), Vec::new(), 0);
        for (k, &len) in sizes.iter().enumerate() {
            let (a, b, d) = level(k);
            let fc = g.narrow(th, 0, at, len)?;
            color.push(g.reshape(fc, vec![a, b, d])?);
            let fl = g.narrow(th, 0, total + at, len)?;
            lidar.push(g.reshape(fl, vec![a, b, d])?);
            at += len;
        }
        feature_align_loss(g, &color, &lidar)
    };
    out.push(CheckResult::new(
        "feature_align",
        &finite_difference_check(align, &uniform(&mut rng, 2 * total), EPS)?,
    ));

    let teacher = (
        random_probs(&mut rng, c - 1, h, w)?,
        random_probs(&mut rng, c - 1, h, w)?,
    );
    for variant in KdVariant::ALL {
        let f = |g: &mut Graph, th: Var| {
            let sc = g.narrow(th, 0, 0, n)?;
            let sc = g.reshape(sc, vec![c, h, w])?;
            let sl = g.narrow(th, 0, n, n)?;
            let sl = g.reshape(sl, vec![c, h, w])?;
            let student = ProbVars {
                color: g.softmax(sc, 0)?,
                lidar: g.softmax(sl, 0)?,
            };
            let t = ProbVars {
                color: g.leaf(&teacher.0),
                lidar: g.leaf(&teacher.1),
            };
            kd_composite(g, variant, t, student)
        };
        let r = finite_difference_check(f, &uniform(&mut rng, 2 * n), EPS)?;
        out.push(CheckResult::new(format!("kd_{variant}"), &r));
    }

    let model = Model::new(config.clone())?;
    let theta = model.flat_params();
    let probes: Vec<usize> = (0..NETWORK_PROBES).map(|_| rng.gen_range(0..theta.numel())).collect();
    let net = |g: &mut Graph, th: Var| {
        let p = model.bind_flat(g, th)?;
        let o = model.forward(g, &p, frame, ModalityAvailability::BOTH)?;
        let a = seg_ce(g, o.color_probs, labels, &classes)?;
        let b = seg_ce(g, o.lidar_probs, labels, &classes)?;
        let f = feature_align_loss(g, &o.color_pyramid, &o.lidar_pyramid)?;
        let f = g.scale(f, align_weight);
        let s = g.add(a, b)?;
        g.add(s, f)
    };
    let r = finite_difference_check_subset(net, &theta, EPS, Some(&probes))?;
    out.push(CheckResult::new("network", &r));
    Ok(out)
}
