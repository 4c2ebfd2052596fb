//! Run configuration: one TOML file, every key optional.
//!
//! ```toml
//! seed = 7
//! out = "runs/demo"
//!
//! [dataset]
//! kind = "synthetic"        # or "external"
//! train_frames = 64
//! eval_frames = 16
//!
//! [model]
//! widths = [8, 16, 32, 64]
//! r = 0.5
//!
//! [training]
//! iterations = 400
//!
//! [continual]
//! preset = "2-1"
//! kd = "same"               # same | img | pcd | cross | none
//! inpainting = true
//! ```

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use symseg::continual::{LossWeights, OptimizerHyper, OptimizerKind, StepPlan};
use symseg::dataset::{build_schedule, ClassSchedule, LabelMap, Preset, SceneSpec, NUM_CLASSES, TABLE_ORDER};
use symseg::geometry::{ClassId, ProjectionConfig};
use symseg::losses::KdVariant;
use symseg::network::{FusionConfig, DEFAULT_INIT_GAIN, LEVELS};
use symseg::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root of every random stream in the run.
    pub seed: u64,
    /// Output directory; not part of the digest.
    pub out: PathBuf,
    pub dataset: DatasetConfig,
    pub model: ModelSection,
    pub training: TrainingSection,
    pub continual: ContinualSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            out: PathBuf::from("runs/default"),
            dataset: DatasetConfig::default(),
            model: ModelSection::default(),
            training: TrainingSection::default(),
            continual: ContinualSection::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Synthetic,
    External,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub train_frames: usize,
    pub eval_frames: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub density: usize,
    pub objects: [usize; 2],
    /// Directories laid out as `velodyne/*.bin`, `labels/*.label`,
    /// `image_2/*.png` (external data only).
    pub train_dir: Option<PathBuf>,
    pub eval_dir: Option<PathBuf>,
    /// `semantic-kitti`, `identity`, or a path to a `raw mapped` file.
    pub label_map: String,
    pub projection: Option<ProjectionConfig>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        let spec = SceneSpec::default();
        DatasetConfig {
            kind: DatasetKind::Synthetic,
            train_frames: 64,
            eval_frames: 16,
            height: spec.height,
            width: spec.width,
            num_classes: spec.num_classes,
            density: spec.density,
            objects: [spec.objects.0, spec.objects.1],
            train_dir: None,
            eval_dir: None,
            label_map: "semantic-kitti".into(),
            projection: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub widths: [usize; LEVELS],
    pub r: f64,
    pub write_back: bool,
    pub learnable_fusion: bool,
    pub init_gain: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let f = FusionConfig::default();
        ModelSection {
            widths: [8, 16, 32, 64],
            r: f.r,
            write_back: f.write_back,
            learnable_fusion: f.learnable,
            init_gain: DEFAULT_INIT_GAIN,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub iterations: usize,
    pub warmup: usize,
    pub color_peak_lr: f64,
    pub lidar_peak_lr: f64,
    pub color_optimizer: OptimizerKind,
    pub lidar_optimizer: OptimizerKind,
    pub incremental_optimizer: OptimizerKind,
    pub incremental_lr: [f64; 2],
    pub momentum: f64,
    pub weight_decay: f64,
    pub align_weight: f64,
    pub kd_weight: f64,
    pub temperature: f64,
    pub modality_dropout: f64,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let p = StepPlan::new(ClassSchedule::new(1, vec![vec![1]]).expect("trivial schedule"), 0);
        TrainingSection {
            iterations: p.iterations,
            warmup: p.warmup,
            color_peak_lr: p.color_peak_lr,
            lidar_peak_lr: p.lidar_peak_lr,
            color_optimizer: p.color_optimizer,
            lidar_optimizer: p.lidar_optimizer,
            incremental_optimizer: p.incremental_optimizer,
            incremental_lr: [p.incremental_lr.0, p.incremental_lr.1],
            momentum: p.hyper.momentum,
            weight_decay: p.hyper.weight_decay,
            align_weight: p.loss.align,
            kd_weight: p.loss.kd,
            temperature: p.loss.temperature,
            modality_dropout: p.modality_dropout,
        }
    }
}

/// Distillation choice, `none` disabling it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct KdChoice(pub Option<KdVariant>);

impl FromStr for KdChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("none") {
            Ok(KdChoice(None))
        } else {
            s.parse().map(|v| KdChoice(Some(v)))
        }
    }
}

impl fmt::Display for KdChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            Some(v) => write!(f, "{v}"),
            None => f.write_str("none"),
        }
    }
}

impl TryFrom<String> for KdChoice {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<KdChoice> for String {
    fn from(k: KdChoice) -> String {
        k.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContinualSection {
    pub preset: Preset,
    pub kd: KdChoice,
    pub inpainting: bool,
    /// Incremental class order; defaults to the report column order for
    /// the 19-class taxonomy and to ascending ids otherwise.
    pub class_order: Option<Vec<ClassId>>,
    /// Explicit split file, overriding `preset` and `class_order`.
    pub split_file: Option<PathBuf>,
}

impl Default for ContinualSection {
    fn default() -> Self {
        ContinualSection {
            preset: Preset::Offline,
            kd: KdChoice(Some(KdVariant::Same)),
            inpainting: true,
            class_order: None,
            split_file: None,
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub preset: Option<Preset>,
    pub kd: Option<KdChoice>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        if let Some(p) = &o.preset {
            self.continual.preset = p.clone();
        }
        if let Some(k) = o.kd {
            self.continual.kd = k;
        }
    }

    /// SHA-256 over the configuration with the output directory blanked.
    pub fn digest_bytes(&self) -> [u8; 32] {
        let mut c = self.clone();
        c.out = PathBuf::new();
        Sha256::digest(serde_json::to_vec(&c).expect("config serializes")).into()
    }

    pub fn digest(&self) -> String {
        hex::encode(self.digest_bytes())
    }

    pub fn total_classes(&self) -> usize {
        match self.dataset.kind {
            DatasetKind::Synthetic => self.dataset.num_classes,
            DatasetKind::External => self.dataset.num_classes.max(1),
        }
    }

    pub fn scene_spec(&self) -> SceneSpec {
        let d = &self.dataset;
        SceneSpec {
            seed: self.train_seed(),
            height: d.height,
            width: d.width,
            num_classes: d.num_classes,
            objects: (d.objects[0], d.objects[1]),
            density: d.density,
        }
    }

    pub fn train_seed(&self) -> u64 {
        self.seed.wrapping_mul(1_000_003)
    }

    pub fn eval_seed(&self) -> u64 {
        self.train_seed().wrapping_add(1 << 32)
    }

    pub fn label_map(&self) -> Result<LabelMap> {
        match self.dataset.label_map.as_str() {
            "semantic-kitti" => Ok(LabelMap::semantic_kitti()),
            "identity" => Ok(LabelMap::identity(self.total_classes() as ClassId)),
            path => LabelMap::from_file(Path::new(path)),
        }
    }

    pub fn class_order(&self) -> Vec<ClassId> {
        let n = self.total_classes();
        match &self.continual.class_order {
            Some(order) => order.clone(),
            None if n == NUM_CLASSES => TABLE_ORDER.to_vec(),
            None => (1..=n as ClassId).collect(),
        }
    }

    pub fn schedule(&self) -> Result<ClassSchedule> {
        let n = self.total_classes();
        match &self.continual.split_file {
            Some(path) => ClassSchedule::from_split_file(path, n),
            None => build_schedule(&self.continual.preset, n, &self.class_order()),
        }
        .map_err(|e| match e {
            Error::InvalidArgument(m) => Error::Config(m),
            other => other,
        })
    }

    pub fn plan(&self) -> Result<StepPlan> {
        let t = &self.training;
        let m = &self.model;
        let plan = StepPlan {
            schedule: self.schedule()?,
            kd_variant: self.continual.kd.0,
            inpainting: self.continual.inpainting,
            iterations: t.iterations,
            warmup: t.warmup,
            color_peak_lr: t.color_peak_lr,
            lidar_peak_lr: t.lidar_peak_lr,
            color_optimizer: t.color_optimizer,
            lidar_optimizer: t.lidar_optimizer,
            incremental_optimizer: t.incremental_optimizer,
            incremental_lr: (t.incremental_lr[0], t.incremental_lr[1]),
            hyper: OptimizerHyper {
                momentum: t.momentum,
                weight_decay: t.weight_decay,
                ..OptimizerHyper::default()
            },
            loss: LossWeights {
                align: t.align_weight,
                kd: t.kd_weight,
                temperature: t.temperature,
            },
            modality_dropout: t.modality_dropout,
            widths: m.widths,
            fusion: FusionConfig {
                r: m.r,
                write_back: m.write_back,
                learnable: m.learnable_fusion,
            },
            init_gain: m.init_gain,
            seed: self.seed,
        };
        plan.validate()?;
        Ok(plan)
    }

    /// Checks ranges and referenced paths.
    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        if d.train_frames == 0 && d.kind == DatasetKind::Synthetic {
            return Err(Error::Config("dataset.train_frames must be at least 1".into()));
        }
        match d.kind {
            DatasetKind::Synthetic => self.scene_spec().validate().map_err(|e| Error::Config(e.to_string()))?,
            DatasetKind::External => {
                for (key, dir) in [("dataset.train_dir", &d.train_dir), ("dataset.eval_dir", &d.eval_dir)] {
                    match dir {
                        Some(p) if p.is_dir() => {}
                        Some(p) => return Err(Error::Config(format!("{key}: {} is not a directory", p.display()))),
                        None => return Err(Error::Config(format!("{key} is required for external data"))),
                    }
                }
                let proj = d
                    .projection
                    .as_ref()
                    .ok_or_else(|| Error::Config("dataset.projection is required for external data".into()))?;
                proj.validate().map_err(|e| Error::Config(e.to_string()))?;
                if !matches!(d.label_map.as_str(), "semantic-kitti" | "identity") && !Path::new(&d.label_map).is_file()
                {
                    return Err(Error::Config(format!("dataset.label_map: {} not found", d.label_map)));
                }
            }
        }
        if let Some(p) = &self.continual.split_file {
            if !p.is_file() {
                return Err(Error::Config(format!(
                    "continual.split_file: {} not found",
                    p.display()
                )));
            }
        }
        self.plan().map(|_| ())
    }
}
