//! Symmetric two-branch encoder-decoder with weighted-sum fusion.
//!
//! Both branches run four stride-2 conv + ReLU stages. After every stage the
//! two feature maps are mixed as `r * color + (1 - r) * lidar`; with
//! write-back enabled the mixture is what both branches carry into the next
//! stage. Each branch has its own decoder, fed with the fused maps through
//! skip connections, ending in a per-pixel softmax.
//!
//! When a modality is absent its input is zero-filled and the mixing weight
//! is pinned to the present branch at every level, so the absent input has
//! no path to either output.

mod checkpoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use crate::diffcore::{DiffTensor, Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::{ClassId, ProjectedFrame, COLOR_CHANNELS, LIDAR_CHANNELS};

pub const LEVELS: usize = 4;

/// `sqrt(6)`: keeps activation variance roughly constant through ReLU stages.
pub const DEFAULT_INIT_GAIN: f64 = 2.449_489_742_783_178;

/// Brings range and coordinates (metres) near the unit range of
/// reflectance and color.
pub const LIDAR_INPUT_SCALE: [f64; LIDAR_CHANNELS] = [0.05, 0.05, 0.05, 0.05, 1.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchConfig {
    pub in_channels: usize,
    pub widths: [usize; LEVELS],
    /// Per-channel factor applied to the raw input.
    pub input_scale: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub r: f64,
    pub write_back: bool,
    /// Learn one mixing weight per level instead of using `r`.
    #[serde(default)]
    pub learnable: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            r: 0.5,
            write_back: true,
            learnable: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub color: BranchConfig,
    pub lidar: BranchConfig,
    pub fusion: FusionConfig,
    /// Output channel `i` predicts `classes[i]`.
    pub classes: Vec<ClassId>,
    pub init_seed: u64,
    /// Parameters start uniform in `±init_gain / sqrt(fan_in)`.
    pub init_gain: f64,
}

impl ModelConfig {
    pub fn new(widths: [usize; LEVELS], classes: Vec<ClassId>, fusion: FusionConfig, init_seed: u64) -> Self {
        ModelConfig {
            color: BranchConfig {
                in_channels: COLOR_CHANNELS,
                widths,
                input_scale: vec![1.0; COLOR_CHANNELS],
            },
            lidar: BranchConfig {
                in_channels: LIDAR_CHANNELS,
                widths,
                input_scale: LIDAR_INPUT_SCALE.to_vec(),
            },
            fusion,
            classes,
            init_seed,
            init_gain: DEFAULT_INIT_GAIN,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.color.widths != self.lidar.widths {
            return Err(Error::Config("fusion needs equal widths in both branches".into()));
        }
        if self.color.widths.contains(&0) || self.color.in_channels == 0 || self.lidar.in_channels == 0 {
            return Err(Error::Config(
                "branch widths and input channels must be positive".into(),
            ));
        }
        for b in [&self.color, &self.lidar] {
            if b.input_scale.len() != b.in_channels || b.input_scale.iter().any(|x| !x.is_finite()) {
                return Err(Error::Config(format!(
                    "input_scale needs {} finite entries",
                    b.in_channels
                )));
            }
        }
        if self.classes.len() < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.classes.len()
            )));
        }
        if self.classes.contains(&0) {
            return Err(Error::Config("class 0 is reserved for ignore".into()));
        }
        if !(self.init_gain > 0.0 && self.init_gain.is_finite()) {
            return Err(Error::Config(format!("init_gain {} must be positive", self.init_gain)));
        }
        if !(0.0..=1.0).contains(&self.fusion.r) {
            return Err(Error::Config(format!(
                "fusion weight r = {} outside [0, 1]",
                self.fusion.r
            )));
        }
        Ok(())
    }
}

/// Which inputs are present for a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModalityAvailability {
    pub color_present: bool,
    pub lidar_present: bool,
}

impl ModalityAvailability {
    pub const BOTH: Self = ModalityAvailability {
        color_present: true,
        lidar_present: true,
    };
    pub const COLOR_ONLY: Self = ModalityAvailability {
        color_present: true,
        lidar_present: false,
    };
    pub const LIDAR_ONLY: Self = ModalityAvailability {
        color_present: false,
        lidar_present: true,
    };

    pub fn validate(self) -> Result<()> {
        if !self.color_present && !self.lidar_present {
            return Err(Error::InvalidArgument("at least one modality must be present".into()));
        }
        Ok(())
    }

    pub fn name(self) -> &'static str {
        match (self.color_present, self.lidar_present) {
            (true, true) => "both",
            (true, false) => "rgb",
            (false, true) => "lidar",
            (false, false) => "none",
        }
    }
}

/// Convex combination `r * color + (1 - r) * lidar`.
///
/// `r = 1` and `r = 0` return the selected input node itself.
pub fn fuse(g: &mut Graph, color: Var, lidar: Var, r: f64) -> Result<Var> {
    if g.shape(color) != g.shape(lidar) {
        return Err(Error::shape(
            "fuse",
            format!("{:?} vs {:?}", g.shape(color), g.shape(lidar)),
        ));
    }
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::InvalidArgument(format!("fusion weight {r} outside [0, 1]")));
    }
    if r == 1.0 {
        return Ok(color);
    }
    if r == 0.0 {
        return Ok(lidar);
    }
    let a = g.scale(color, r);
    let b = g.scale(lidar, 1.0 - r);
    g.add(a, b)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub kernel: DiffTensor,
    pub bias: DiffTensor,
}

impl ConvLayer {
    fn init(cout: usize, cin: usize, k: usize, seed: u64, gain: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = gain / ((cin * k * k) as f64).sqrt();
        let kernel = (0..cout * cin * k * k).map(|_| rng.gen_range(-bound..bound)).collect();
        let bias = (0..cout).map(|_| rng.gen_range(-bound..bound)).collect();
        ConvLayer {
            kernel: DiffTensor::new(vec![cout, cin, k, k], kernel).expect("consistent shape"),
            bias: DiffTensor::new(vec![cout], bias).expect("consistent shape"),
        }
    }

    fn out_channels(&self) -> usize {
        self.kernel.shape()[0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Branch {
    pub encoder: [ConvLayer; LEVELS],
    /// Decoder stages for levels 0..=2, each fed by the level above.
    pub decoder: [ConvLayer; LEVELS - 1],
    pub head: ConvLayer,
}

impl Branch {
    fn init(cfg: &BranchConfig, classes: usize, seed: u64, gain: f64) -> Self {
        let w = cfg.widths;
        let s = |i: u64| seed.wrapping_mul(1_000_003).wrapping_add(i);
        let encoder = std::array::from_fn(|i| {
            let cin = if i == 0 { cfg.in_channels } else { w[i - 1] };
            ConvLayer::init(w[i], cin, 3, s(i as u64), gain)
        });
        let decoder = std::array::from_fn(|j| ConvLayer::init(w[j], w[j + 1] + w[j], 3, s(10 + j as u64), gain));
        let head = ConvLayer::init(classes, w[0], 3, s(20 + classes as u64), gain);
        Branch { encoder, decoder, head }
    }

    fn layers(&self) -> impl Iterator<Item = (String, &ConvLayer)> {
        let enc = self.encoder.iter().enumerate().map(|(i, l)| (format!("enc{i}"), l));
        let dec = self.decoder.iter().enumerate().map(|(i, l)| (format!("dec{i}"), l));
        enc.chain(dec).chain(std::iter::once(("head".to_string(), &self.head)))
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut ConvLayer> {
        self.encoder
            .iter_mut()
            .chain(self.decoder.iter_mut())
            .chain(std::iter::once(&mut self.head))
    }
}

/// Which optimizer group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Color,
    Lidar,
    Fusion,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    pub color: Branch,
    pub lidar: Branch,
    /// Per-level mixing logits, present when the fusion weight is learned.
    pub fusion_logits: Option<DiffTensor>,
}

/// Maps a frame to per-branch class probabilities over `classes()`.
pub trait Predictor {
    fn classes(&self) -> &[ClassId];
    fn predict(&self, frame: &ProjectedFrame, avail: ModalityAvailability) -> Result<PredictionPair>;
}

impl Predictor for Model {
    fn classes(&self) -> &[ClassId] {
        Model::classes(self)
    }

    fn predict(&self, frame: &ProjectedFrame, avail: ModalityAvailability) -> Result<PredictionPair> {
        Model::predict(self, frame, avail)
    }
}

/// Per-branch class probabilities, each `[C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionPair {
    pub color: DiffTensor,
    pub lidar: DiffTensor,
}

impl PredictionPair {
    pub fn num_classes(&self) -> usize {
        self.color.shape()[0]
    }
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub color_logits: Var,
    pub lidar_logits: Var,
    pub color_probs: Var,
    pub lidar_probs: Var,
    /// Per-branch stage outputs before fusion.
    pub color_pyramid: [Var; LEVELS],
    pub lidar_pyramid: [Var; LEVELS],
    pub fused: [Var; LEVELS],
}

/// Parameters placed on a graph, in [`Model::params`] order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = config.num_classes();
        let color = Branch::init(
            &config.color,
            c,
            config.init_seed.wrapping_mul(2).wrapping_add(1),
            config.init_gain,
        );
        let lidar = Branch::init(
            &config.lidar,
            c,
            config.init_seed.wrapping_mul(2).wrapping_add(2),
            config.init_gain,
        );
        let fusion_logits = config.fusion.learnable.then(|| {
            // logit of r, so the learned weights start at the configured value
            let r = config.fusion.r.clamp(1e-6, 1.0 - 1e-6);
            DiffTensor::filled(&[LEVELS], (r / (1.0 - r)).ln())
        });
        Ok(Model {
            config,
            color,
            lidar,
            fusion_logits,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn classes(&self) -> &[ClassId] {
        &self.config.classes
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes()
    }

    /// Named parameters in a fixed order.
    pub fn params(&self) -> Vec<(String, ParamGroup, &DiffTensor)> {
        let mut out = Vec::new();
        for (prefix, group, branch) in [
            ("color", ParamGroup::Color, &self.color),
            ("lidar", ParamGroup::Lidar, &self.lidar),
        ] {
            for (name, layer) in branch.layers() {
                out.push((format!("{prefix}.{name}.weight"), group, &layer.kernel));
                out.push((format!("{prefix}.{name}.bias"), group, &layer.bias));
            }
        }
        if let Some(l) = &self.fusion_logits {
            out.push(("fusion.logits".to_string(), ParamGroup::Fusion, l));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut DiffTensor> {
        let mut out = Vec::new();
        for branch in [&mut self.color, &mut self.lidar] {
            for layer in branch.layers_mut() {
                out.push(&mut layer.kernel);
                out.push(&mut layer.bias);
            }
        }
        if let Some(l) = &mut self.fusion_logits {
            out.push(l);
        }
        out
    }

    pub fn param_groups(&self) -> Vec<ParamGroup> {
        self.params().into_iter().map(|(_, g, _)| g).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, _, t)| t.numel()).sum()
    }

    /// Puts every parameter on `g`; `trainable` controls gradient tracking.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundParams {
        let vars = self
            .params()
            .into_iter()
            .map(|(_, _, t)| {
                let mut t = t.clone();
                t.set_requires_grad(trainable);
                g.leaf(&t)
            })
            .collect();
        BoundParams { vars }
    }

    /// Binds parameters from a flat vector laid out in [`Model::params`] order.
    /// Used for finite-difference checks over the whole network.
    pub fn bind_flat(&self, g: &mut Graph, flat: Var) -> Result<BoundParams> {
        let params = self.params();
        let total: usize = params.iter().map(|(_, _, t)| t.numel()).sum();
        if g.shape(flat) != [total] {
            return Err(Error::shape(
                "bind_flat",
                format!("{:?} for {total} parameter values", g.shape(flat)),
            ));
        }
        let mut vars = Vec::with_capacity(params.len());
        let mut at = 0;
        for (_, _, t) in params {
            let piece = g.narrow(flat, 0, at, t.numel())?;
            at += t.numel();
            vars.push(g.reshape(piece, t.shape().to_vec())?);
        }
        Ok(BoundParams { vars })
    }

    pub fn flat_params(&self) -> DiffTensor {
        let v: Vec<f64> = self
            .params()
            .iter()
            .flat_map(|(_, _, t)| t.values().iter().copied())
            .collect();
        DiffTensor::from_vec(v)
    }

    fn effective_r(&self, avail: ModalityAvailability) -> Option<f64> {
        match (avail.color_present, avail.lidar_present) {
            (true, false) => Some(1.0),
            (false, true) => Some(0.0),
            _ if self.fusion_logits.is_some() => None,
            _ => Some(self.config.fusion.r),
        }
    }

    fn fuse_level(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        level: usize,
        c: Var,
        l: Var,
        avail: ModalityAvailability,
    ) -> Result<Var> {
        match self.effective_r(avail) {
            Some(r) => fuse(g, c, l, r),
            None => {
                let logits = *p.vars.last().expect("fusion logits bound last");
                let logit = g.narrow(logits, 0, level, 1)?;
                let zero = g.constant(vec![1], vec![0.0])?;
                let pair = g.concat(&[logit, zero])?;
                let w = g.softmax(pair, 0)?;
                let (wc, wl) = (g.narrow(w, 0, 0, 1)?, g.narrow(w, 0, 1, 1)?);
                let a = g.mul(c, wc)?;
                let b = g.mul(l, wl)?;
                g.add(a, b)
            }
        }
    }

    /// Runs both branches on raw `[C_in, H, W]` inputs. Absent modalities
    /// must already be zero-filled by the caller.
    pub fn forward_inputs(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        color_in: Var,
        lidar_in: Var,
        avail: ModalityAvailability,
    ) -> Result<ForwardOutput> {
        avail.validate()?;
        let (cin, h, w) = chw(g, color_in)?;
        let (lin, lh, lw) = chw(g, lidar_in)?;
        if cin != self.config.color.in_channels || lin != self.config.lidar.in_channels || (h, w) != (lh, lw) {
            return Err(Error::shape(
                "forward",
                format!(
                    "inputs {:?} / {:?} for model {:?}",
                    g.shape(color_in),
                    g.shape(lidar_in),
                    self.config
                ),
            ));
        }
        let layers_per_branch = 2 * (2 * LEVELS);
        let (cp, lp) = (
            &p.vars[..layers_per_branch],
            &p.vars[layers_per_branch..2 * layers_per_branch],
        );
        let conv = |g: &mut Graph, params: &[Var], layer: usize, x: Var, stride: usize| -> Result<Var> {
            let y = g.conv2d(x, params[2 * layer], stride, 1)?;
            g.channel_bias(y, params[2 * layer + 1])
        };

        let xc = scale_channels(g, color_in, &self.config.color.input_scale)?;
        let xl = scale_channels(g, lidar_in, &self.config.lidar.input_scale)?;
        let (mut xc, mut xl) = (xc, xl);
        let mut color_pyramid = Vec::with_capacity(LEVELS);
        let mut lidar_pyramid = Vec::with_capacity(LEVELS);
        let mut fused = Vec::with_capacity(LEVELS);
        for level in 0..LEVELS {
            let yc = conv(g, cp, level, xc, 2)?;
            let fc = g.relu(yc);
            let yl = conv(g, lp, level, xl, 2)?;
            let fl = g.relu(yl);
            let f = self.fuse_level(g, p, level, fc, fl, avail)?;
            color_pyramid.push(fc);
            lidar_pyramid.push(fl);
            fused.push(f);
            if self.config.fusion.write_back {
                (xc, xl) = (f, f);
            } else {
                (xc, xl) = (fc, fl);
            }
        }

        let decode = |g: &mut Graph, params: &[Var]| -> Result<Var> {
            let mut x = fused[LEVELS - 1];
            for j in (0..LEVELS - 1).rev() {
                let skip = fused[j];
                let (_, sh, sw) = chw(g, skip)?;
                let up = g.upsample_nearest(x, sh, sw)?;
                let cat = g.concat(&[up, skip])?;
                let y = conv(g, params, LEVELS + j, cat, 1)?;
                x = g.relu(y);
            }
            let up = g.upsample_nearest(x, h, w)?;
            conv(g, params, 2 * LEVELS - 1, up, 1)
        };
        let color_logits = decode(g, cp)?;
        let lidar_logits = decode(g, lp)?;
        let color_probs = g.softmax(color_logits, 0)?;
        let lidar_probs = g.softmax(lidar_logits, 0)?;
        Ok(ForwardOutput {
            color_logits,
            lidar_logits,
            color_probs,
            lidar_probs,
            color_pyramid: color_pyramid.try_into().expect("LEVELS entries"),
            lidar_pyramid: lidar_pyramid.try_into().expect("LEVELS entries"),
            fused: fused.try_into().expect("LEVELS entries"),
        })
    }

    /// Forward on a frame, zero-filling whichever modality is absent.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        frame: &ProjectedFrame,
        avail: ModalityAvailability,
    ) -> Result<ForwardOutput> {
        avail.validate()?;
        let color = if avail.color_present {
            g.leaf(&frame.color)
        } else {
            g.leaf(&DiffTensor::zeros(frame.color.shape()))
        };
        let lidar = if avail.lidar_present {
            g.leaf(&frame.lidar)
        } else {
            g.leaf(&DiffTensor::zeros(frame.lidar.shape()))
        };
        self.forward_inputs(g, p, color, lidar, avail)
    }

    /// Gradient-free prediction.
    pub fn predict(&self, frame: &ProjectedFrame, avail: ModalityAvailability) -> Result<PredictionPair> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let out = self.forward(&mut g, &p, frame, avail)?;
        Ok(PredictionPair {
            color: g.tensor(out.color_probs),
            lidar: g.tensor(out.lidar_probs),
        })
    }

    /// Grows the classifier to `classes`, which must extend the current list.
    /// Existing output channels keep their weights bit-for-bit.
    pub fn extend_classifier(&self, classes: &[ClassId]) -> Result<Model> {
        let old = self.classes();
        if classes.len() < old.len() {
            return Err(Error::InvalidArgument(format!(
                "cannot shrink classifier from {} to {} classes",
                old.len(),
                classes.len()
            )));
        }
        if &classes[..old.len()] != old {
            return Err(Error::InvalidArgument(
                "new class list must start with the current classes".into(),
            ));
        }
        let mut config = self.config.clone();
        config.classes = classes.to_vec();
        config.validate()?;
        let mut next = self.clone();
        next.config = config;
        if classes.len() == old.len() {
            return Ok(next);
        }
        let fresh = Model::new(next.config.clone())?;
        for (dst, src) in [
            (&mut next.color.head, &fresh.color.head),
            (&mut next.lidar.head, &fresh.lidar.head),
        ] {
            let per_out = dst.kernel.numel() / dst.out_channels();
            let mut kernel = dst.kernel.values().to_vec();
            kernel.extend_from_slice(&src.kernel.values()[old.len() * per_out..]);
            let mut bias = dst.bias.values().to_vec();
            bias.extend_from_slice(&src.bias.values()[old.len()..]);
            dst.kernel = DiffTensor::new(src.kernel.shape().to_vec(), kernel)?;
            dst.bias = DiffTensor::new(src.bias.shape().to_vec(), bias)?;
        }
        Ok(next)
    }

    /// Replaces parameter values from a list in [`Model::params`] order.
    pub fn load_params(&mut self, values: Vec<DiffTensor>) -> Result<()> {
        let mut slots = self.params_mut();
        if slots.len() != values.len() {
            return Err(Error::shape(
                "load_params",
                format!("{} tensors for {} parameters", values.len(), slots.len()),
            ));
        }
        for (slot, v) in slots.iter_mut().zip(values) {
            if slot.shape() != v.shape() {
                return Err(Error::shape(
                    "load_params",
                    format!("{:?} vs {:?}", slot.shape(), v.shape()),
                ));
            }
            **slot = v;
        }
        Ok(())
    }
}

fn scale_channels(g: &mut Graph, x: Var, scale: &[f64]) -> Result<Var> {
    if scale.iter().all(|&s| s == 1.0) {
        return Ok(x);
    }
    let (_, h, w) = chw(g, x)?;
    let factors = scale.iter().flat_map(|&s| std::iter::repeat_n(s, h * w)).collect();
    let f = g.constant(g.shape(x).to_vec(), factors)?;
    g.mul(x, f)
}

fn chw(g: &Graph, v: Var) -> Result<(usize, usize, usize)> {
    match g.shape(v) {
        &[c, h, w] => Ok((c, h, w)),
        other => Err(Error::shape("forward", format!("expected [C, H, W], got {other:?}"))),
    }
}

#[cfg(test)]
mod tests;
