//! Offline and class-incremental training.
//!
//! Step 0 trains from scratch on its classes with momentum SGD on the color
//! branch and Adam on the LiDAR branch under a warmup-cosine schedule. Every
//! later step snapshots the previous model as a frozen teacher, grows the
//! classifier, optionally inpaints unknown pixels with the teacher's
//! averaged prediction and adds the distillation loss, training both
//! branches with momentum SGD under a linear decay.

mod optim;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use optim::{LrSchedule, Optimizer, OptimizerHyper, OptimizerKind};

use crate::dataset::{mask_labels, ClassSchedule};
use crate::diffcore::{Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::{ClassId, ProjectedFrame};
use crate::losses::{feature_align_loss, inpaint_labels, kd_composite_with_temperature, seg_ce, KdVariant, ProbVars};
use crate::metrics::{self, IouReport};
use crate::network::{
    BoundParams, FusionConfig, ModalityAvailability, Model, ModelConfig, ParamGroup, PredictionPair, Predictor,
    DEFAULT_INIT_GAIN, LEVELS,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub align: f64,
    pub kd: f64,
    pub temperature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            align: 0.01,
            kd: 1.0,
            temperature: 1.0,
        }
    }
}

/// Everything needed to reproduce a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepPlan {
    pub schedule: ClassSchedule,
    /// `None` trains incremental steps without distillation.
    pub kd_variant: Option<KdVariant>,
    pub inpainting: bool,
    pub iterations: usize,
    pub warmup: usize,
    pub color_peak_lr: f64,
    pub lidar_peak_lr: f64,
    pub color_optimizer: OptimizerKind,
    pub lidar_optimizer: OptimizerKind,
    pub incremental_optimizer: OptimizerKind,
    /// Linear decay endpoints for steps after the first.
    pub incremental_lr: (f64, f64),
    pub hyper: OptimizerHyper,
    pub loss: LossWeights,
    /// Probability of hiding one modality (chosen uniformly) per iteration.
    pub modality_dropout: f64,
    pub widths: [usize; LEVELS],
    pub fusion: FusionConfig,
    pub init_gain: f64,
    pub seed: u64,
}

impl StepPlan {
    /// Desk-scale defaults for `schedule`.
    pub fn new(schedule: ClassSchedule, seed: u64) -> Self {
        StepPlan {
            schedule,
            kd_variant: Some(KdVariant::Same),
            inpainting: true,
            iterations: 400,
            warmup: 40,
            color_peak_lr: 0.05,
            lidar_peak_lr: 0.005,
            color_optimizer: OptimizerKind::Sgd,
            lidar_optimizer: OptimizerKind::Adam,
            incremental_optimizer: OptimizerKind::Sgd,
            incremental_lr: (0.01, 0.005),
            hyper: OptimizerHyper::default(),
            loss: LossWeights::default(),
            modality_dropout: 0.0,
            widths: [8, 16, 32, 64],
            fusion: FusionConfig::default(),
            init_gain: DEFAULT_INIT_GAIN,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if self.warmup > self.iterations {
            return Err(Error::Config(format!(
                "warmup {} exceeds iterations {}",
                self.warmup, self.iterations
            )));
        }
        for (name, v) in [
            ("color_peak_lr", self.color_peak_lr),
            ("lidar_peak_lr", self.lidar_peak_lr),
            ("incremental_lr start", self.incremental_lr.0),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.incremental_lr.1 >= 0.0) {
            return Err(Error::Config("incremental_lr end must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.modality_dropout) {
            return Err(Error::Config(format!(
                "modality_dropout {} outside [0, 1]",
                self.modality_dropout
            )));
        }
        if !(self.loss.temperature > 0.0) || self.loss.align < 0.0 || self.loss.kd < 0.0 {
            return Err(Error::Config(format!("bad loss weights {:?}", self.loss)));
        }
        self.model_config(self.schedule.step(0).to_vec()).validate()
    }

    pub fn model_config(&self, classes: Vec<ClassId>) -> ModelConfig {
        ModelConfig {
            init_gain: self.init_gain,
            ..ModelConfig::new(self.widths, classes, self.fusion.clone(), self.seed)
        }
    }

    /// SHA-256 of the plan's JSON form, as lowercase hex.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("plan serializes")))
    }
}

/// A model that can only be queried.
#[derive(Clone, Debug)]
pub struct FrozenModel {
    model: Model,
}

impl FrozenModel {
    pub fn predict(&self, frame: &ProjectedFrame, avail: ModalityAvailability) -> Result<PredictionPair> {
        self.model.predict(frame, avail)
    }

    pub fn classes(&self) -> &[ClassId] {
        self.model.classes()
    }

    pub fn model(&self) -> &Model {
        &self.model
    }
}

impl Predictor for FrozenModel {
    fn classes(&self) -> &[ClassId] {
        self.model.classes()
    }

    fn predict(&self, frame: &ProjectedFrame, avail: ModalityAvailability) -> Result<PredictionPair> {
        self.model.predict(frame, avail)
    }
}

pub fn snapshot_teacher(model: &Model) -> FrozenModel {
    FrozenModel { model: model.clone() }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    /// Every class seen so far, in schedule order.
    pub classes: Vec<ClassId>,
    pub new_classes: Vec<ClassId>,
    pub color: IouReport,
    pub lidar: IouReport,
    /// Total loss per iteration.
    pub losses: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config_digest: String,
    pub seed: u64,
    pub schedule: Vec<Vec<ClassId>>,
    pub kd_variant: Option<KdVariant>,
    pub inpainting: bool,
    pub steps: Vec<StepReport>,
    /// Not serialized, so reports stay byte-stable across runs.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl TrainReport {
    /// `step,branch,class,iou` rows; undefined IoU prints as `nan`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,branch,class,iou\n");
        for s in &self.steps {
            for (branch, r) in [("rgb", &s.color), ("lidar", &s.lidar)] {
                for c in metrics::report_order(&s.classes) {
                    writeln!(out, "{},{branch},{c},{}", s.step, metrics::fmt_score(r.get(c))).unwrap();
                }
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn last(&self) -> &StepReport {
        self.steps.last().expect("reports hold at least one step")
    }

    /// Final-step mIoU of each branch over the first step's classes.
    pub fn base_class_miou(&self) -> (Option<f64>, Option<f64>) {
        let base = &self.steps[0].new_classes;
        let last = self.last();
        (last.color.miou_over(base), last.lidar.miou_over(base))
    }
}

pub struct ContinualOutcome {
    /// Model after each step.
    pub models: Vec<Model>,
    pub report: TrainReport,
}

/// Single-step training on every class of an offline schedule.
pub fn run_offline(plan: &StepPlan, train: &[ProjectedFrame], eval: &[ProjectedFrame]) -> Result<(Model, TrainReport)> {
    if plan.schedule.step_count() != 1 {
        return Err(Error::Config(format!(
            "offline training needs a one-step schedule, got {} steps",
            plan.schedule.step_count()
        )));
    }
    let mut out = run_steps(plan, train, eval)?;
    Ok((out.models.pop().expect("one model"), out.report))
}

pub fn run_continual(plan: &StepPlan, train: &[ProjectedFrame], eval: &[ProjectedFrame]) -> Result<ContinualOutcome> {
    if plan.schedule.step_count() < 2 {
        return Err(Error::Config("continual training needs at least two steps".into()));
    }
    run_steps(plan, train, eval)
}

fn run_steps(plan: &StepPlan, train: &[ProjectedFrame], eval: &[ProjectedFrame]) -> Result<ContinualOutcome> {
    run_schedule(plan, train, eval, Vec::new(), |_, _| Ok(()))
}

/// Runs every step of the plan's schedule after the `completed` ones,
/// calling `on_step` with each freshly trained model and its report.
///
/// Steps are seeded independently, so resuming from saved steps gives the
/// same result as an uninterrupted run.
pub fn run_schedule<F>(
    plan: &StepPlan,
    train: &[ProjectedFrame],
    eval: &[ProjectedFrame],
    completed: Vec<(Model, StepReport)>,
    mut on_step: F,
) -> Result<ContinualOutcome>
where
    F: FnMut(&Model, &StepReport) -> Result<()>,
{
    plan.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("no training frames".into()));
    }
    if completed.len() > plan.schedule.step_count() {
        return Err(Error::Config(format!(
            "{} completed steps for a {}-step schedule",
            completed.len(),
            plan.schedule.step_count()
        )));
    }
    let started = Instant::now();
    let mut models: Vec<Model> = Vec::with_capacity(plan.schedule.step_count());
    let mut steps = Vec::with_capacity(plan.schedule.step_count());
    for (k, (model, report)) in completed.into_iter().enumerate() {
        let seen = plan.schedule.seen_through(k);
        if report.step != k || report.classes != seen || model.classes() != seen.as_slice() {
            return Err(Error::Config(format!("saved step {k} does not match the schedule")));
        }
        models.push(model);
        steps.push(report);
    }
    for k in models.len()..plan.schedule.step_count() {
        let seen = plan.schedule.seen_through(k);
        let (mut model, teacher) = match models.last() {
            None => (Model::new(plan.model_config(seen.clone()))?, None),
            Some(prev) => (prev.extend_classifier(&seen)?, Some(snapshot_teacher(prev))),
        };
        let losses = train_step(plan, k, &mut model, teacher.as_ref(), train)?;
        let (color, lidar) = metrics::evaluate(&model, eval, ModalityAvailability::BOTH)?;
        log::info!(
            "step {k}: final loss {:.4}, rgb mIoU {}, lidar mIoU {}",
            losses.last().copied().unwrap_or(f64::NAN),
            metrics::fmt_score(color.iou().miou),
            metrics::fmt_score(lidar.iou().miou)
        );
        steps.push(StepReport {
            step: k,
            classes: seen,
            new_classes: plan.schedule.step(k).to_vec(),
            color: color.iou(),
            lidar: lidar.iou(),
            losses,
        });
        on_step(&model, steps.last().expect("just pushed"))?;
        models.push(model);
    }
    Ok(ContinualOutcome {
        models,
        report: TrainReport {
            config_digest: plan.digest(),
            seed: plan.seed,
            schedule: plan.schedule.steps().to_vec(),
            kd_variant: plan.kd_variant,
            inpainting: plan.inpainting,
            steps,
            wall_clock_secs: started.elapsed().as_secs_f64(),
        },
    })
}

struct Group {
    optimizer: Optimizer,
    schedule: LrSchedule,
    members: Vec<usize>,
}

fn optimizer_groups(plan: &StepPlan, step: usize, model: &Model) -> Vec<Group> {
    let sizes: Vec<usize> = model.params().iter().map(|(_, _, t)| t.numel()).collect();
    let groups = model.param_groups();
    let members =
        |want: &[ParamGroup]| -> Vec<usize> { (0..groups.len()).filter(|&i| want.contains(&groups[i])).collect() };
    let build = |kind, schedule, members: Vec<usize>| {
        let shapes: Vec<usize> = members.iter().map(|&i| sizes[i]).collect();
        Group {
            optimizer: Optimizer::new(kind, plan.hyper, &shapes),
            schedule,
            members,
        }
    };
    let total = plan.iterations;
    if step == 0 {
        let cosine = |peak| LrSchedule::WarmupCosine {
            warmup: plan.warmup,
            total,
            peak,
        };
        vec![
            build(
                plan.color_optimizer,
                cosine(plan.color_peak_lr),
                members(&[ParamGroup::Color, ParamGroup::Fusion]),
            ),
            build(
                plan.lidar_optimizer,
                cosine(plan.lidar_peak_lr),
                members(&[ParamGroup::Lidar]),
            ),
        ]
    } else {
        let linear = LrSchedule::Linear {
            total,
            start: plan.incremental_lr.0,
            end: plan.incremental_lr.1,
        };
        vec![build(
            plan.incremental_optimizer,
            linear,
            members(&[ParamGroup::Color, ParamGroup::Lidar, ParamGroup::Fusion]),
        )]
    }
}

fn train_step(
    plan: &StepPlan,
    step: usize,
    model: &mut Model,
    teacher: Option<&FrozenModel>,
    frames: &[ProjectedFrame],
) -> Result<Vec<f64>> {
    let step_classes = plan.schedule.step(step);
    let masked: Vec<ProjectedFrame> = frames.iter().map(|f| mask_labels(f, step_classes)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut order: Vec<usize> = Vec::new();
    let mut groups = optimizer_groups(plan, step, model);
    let mut teacher_cache: HashMap<(usize, ModalityAvailability), PredictionPair> = HashMap::new();
    let mut losses = Vec::with_capacity(plan.iterations);

    for it in 0..plan.iterations {
        if order.is_empty() {
            order = (0..masked.len()).collect();
            order.shuffle(&mut rng);
            order.reverse();
        }
        let idx = order.pop().expect("refilled above");
        let avail = if plan.modality_dropout > 0.0 && rng.gen_bool(plan.modality_dropout) {
            if rng.gen_bool(0.5) {
                ModalityAvailability::COLOR_ONLY
            } else {
                ModalityAvailability::LIDAR_ONLY
            }
        } else {
            ModalityAvailability::BOTH
        };

        let teacher_pred = match teacher {
            Some(t) if plan.kd_variant.is_some() || plan.inpainting => {
                if let std::collections::hash_map::Entry::Vacant(e) = teacher_cache.entry((idx, avail)) {
                    e.insert(t.predict(&frames[idx], avail)?);
                }
                Some(&teacher_cache[&(idx, avail)])
            }
            _ => None,
        };
        let frame = match (teacher_pred, teacher) {
            (Some(pred), Some(t)) if plan.inpainting => inpaint_labels(&masked[idx], pred, t.classes())?,
            _ => masked[idx].clone(),
        };

        let mut g = Graph::new();
        let params = model.bind(&mut g, true);
        let diverged = |detail: String| Error::Divergence {
            step,
            iteration: it,
            detail,
        };
        let loss = iteration_loss(plan, model, &mut g, &params, &frame, avail, teacher_pred).map_err(|e| match e {
            Error::NonFinite(d) => diverged(d),
            other => other,
        })?;
        let value = g.scalar_value(loss);
        if !value.is_finite() {
            return Err(diverged(format!("loss is {value}")));
        }
        g.backward(loss)?;
        let grads: Vec<Vec<f64>> = params
            .vars()
            .iter()
            .zip(model.params())
            .map(|(&v, (_, _, t))| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect();
        if let Some(i) = grads.iter().position(|gr| gr.iter().any(|x| !x.is_finite())) {
            return Err(diverged(format!("non-finite gradient for {}", model.params()[i].0)));
        }

        let mut slots: Vec<Option<&mut crate::diffcore::DiffTensor>> =
            model.params_mut().into_iter().map(Some).collect();
        for group in &mut groups {
            let mut ps: Vec<_> = group
                .members
                .iter()
                .map(|&i| slots[i].take().expect("each parameter in one group"))
                .collect();
            let gs: Vec<Vec<f64>> = group.members.iter().map(|&i| grads[i].clone()).collect();
            group.optimizer.step(&mut ps, &gs, group.schedule.lr(it))?;
        }
        losses.push(value);
    }
    Ok(losses)
}

fn iteration_loss(
    plan: &StepPlan,
    model: &Model,
    g: &mut Graph,
    params: &BoundParams,
    frame: &ProjectedFrame,
    avail: ModalityAvailability,
    teacher_pred: Option<&PredictionPair>,
) -> Result<Var> {
    let out = model.forward(g, params, frame, avail)?;
    let ce_c = seg_ce(g, out.color_probs, &frame.labels, model.classes())?;
    let ce_l = seg_ce(g, out.lidar_probs, &frame.labels, model.classes())?;
    let mut loss = g.add(ce_c, ce_l)?;
    if avail == ModalityAvailability::BOTH && plan.loss.align > 0.0 {
        let align = feature_align_loss(g, &out.color_pyramid, &out.lidar_pyramid)?;
        let weighted = g.scale(align, plan.loss.align);
        loss = g.add(loss, weighted)?;
    }
    if let (Some(variant), Some(pred)) = (plan.kd_variant, teacher_pred) {
        if plan.loss.kd > 0.0 {
            let t = ProbVars {
                color: g.leaf(&pred.color),
                lidar: g.leaf(&pred.lidar),
            };
            let s = ProbVars {
                color: out.color_probs,
                lidar: out.lidar_probs,
            };
            let kd = kd_composite_with_temperature(g, variant, t, s, plan.loss.temperature)?;
            let weighted = g.scale(kd, plan.loss.kd);
            loss = g.add(loss, weighted)?;
        }
    }
    Ok(loss)
}
