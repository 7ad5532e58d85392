//! Models A, B, C, their ablations and two-illuminant variants.
//!
//! A stage is a backbone, optional histogram and Exif branches broadcast to
//! the backbone's resolution and concatenated, a 6x6 conv to 64 channels, a
//! 1x1 conv to 3 (or 6) channels, ReLU, global average pooling and
//! normalization. Cascades correct the input by each stage's estimate before
//! the next stage; the final estimate is the normalized product of all
//! stage estimates.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Conv2dSpec, Tape, Var};
use crate::backbone::{Backbone, BackboneConfig, BackboneScale};
use crate::checkpoint;
use crate::error::{AwbError, Result};
use crate::exif::{ExifMlp, ExifRecord};
use crate::hist::{HistHeadConfig, HistLayer};
use crate::layers::ConvLayer;
use crate::metrics::{IlluminantVector, TwoIlluminantLabel};
use crate::optim::{adam_step, AdamConfig, ParamStore};
use crate::tensor::{Real, Tensor};

/// Added to the pooled head output before normalization.
pub const OUTPUT_EPS: f64 = 1e-6;
pub const HEAD_CHANNELS: usize = 64;
pub const HEAD_KERNEL: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// Backbone only.
    B,
    /// Three chained backbone-only stages.
    B3,
    /// Backbone plus histogram branch.
    AHist,
    /// Backbone, histogram and Exif branches.
    A,
    /// A followed by two B stages.
    C,
    /// A with a left and right output.
    A2,
    /// C whose last stage has a left and right output.
    C2,
}

impl ModelKind {
    pub const ALL: [ModelKind; 7] = [
        ModelKind::B,
        ModelKind::B3,
        ModelKind::AHist,
        ModelKind::A,
        ModelKind::C,
        ModelKind::A2,
        ModelKind::C2,
    ];

    pub fn stages(self) -> usize {
        match self {
            ModelKind::B | ModelKind::AHist | ModelKind::A | ModelKind::A2 => 1,
            ModelKind::B3 | ModelKind::C | ModelKind::C2 => 3,
        }
    }

    /// Histogram branch in the first stage.
    pub fn uses_hist(self) -> bool {
        !matches!(self, ModelKind::B | ModelKind::B3)
    }

    /// Exif branch in the first stage.
    pub fn uses_exif(self) -> bool {
        matches!(
            self,
            ModelKind::A | ModelKind::C | ModelKind::A2 | ModelKind::C2
        )
    }

    pub fn two_illuminant(self) -> bool {
        matches!(self, ModelKind::A2 | ModelKind::C2)
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::B => "b",
            ModelKind::B3 => "b3",
            ModelKind::AHist => "a-hist",
            ModelKind::A => "a",
            ModelKind::C => "c",
            ModelKind::A2 => "a2",
            ModelKind::C2 => "c2",
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ModelKind {
    type Err = AwbError;
    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                AwbError::InvalidArgument(format!(
                    "unknown model kind `{s}` (b, b3, a-hist, a, c, a2, c2)"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub backbone: BackboneConfig,
    pub hist: HistHeadConfig,
    /// Width of the Exif feature.
    pub exif_channels: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(kind: ModelKind, scale: BackboneScale, seed: u64) -> Self {
        ModelConfig {
            kind,
            backbone: BackboneConfig::for_scale(scale),
            hist: HistHeadConfig::default(),
            exif_channels: 512,
            seed,
        }
    }

    pub fn tiny(kind: ModelKind, seed: u64) -> Self {
        Self::new(kind, BackboneScale::Tiny, seed)
    }
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub backbone: Backbone,
    pub hist: Option<HistLayer>,
    pub exif: Option<ExifMlp>,
    pub head_conv: ConvLayer,
    pub head_out: ConvLayer,
}

impl Stage {
    fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &ModelConfig,
        hist: bool,
        exif: bool,
        outputs: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let backbone = Backbone::new(
            store,
            &format!("{name}.backbone"),
            cfg.backbone.clone(),
            rng,
        )?;
        let mut c_in = cfg.backbone.out_channels();
        let hist = if hist {
            c_in += cfg.hist.out_channels;
            Some(HistLayer::new(
                store,
                &format!("{name}.hist"),
                cfg.hist.clone(),
                rng,
            )?)
        } else {
            None
        };
        let exif = if exif {
            c_in += cfg.exif_channels;
            Some(ExifMlp::new(
                store,
                &format!("{name}.exif"),
                cfg.exif_channels,
                rng,
            )?)
        } else {
            None
        };
        let head_conv = ConvLayer::new(
            store,
            &format!("{name}.head.conv"),
            c_in,
            HEAD_CHANNELS,
            HEAD_KERNEL,
            Conv2dSpec::same(HEAD_KERNEL),
            rng,
        )?;
        let head_out = ConvLayer::new(
            store,
            &format!("{name}.head.out"),
            HEAD_CHANNELS,
            outputs,
            1,
            Conv2dSpec::new(1, 0),
            rng,
        )?;
        Ok(Stage {
            backbone,
            hist,
            exif,
            head_conv,
            head_out,
        })
    }

    /// Pooled, non-negative head output `[3]` or `[6]`, not yet normalized.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        image: Var,
        exif: Option<&ExifRecord>,
    ) -> Result<Var> {
        let feat = self.backbone.forward(tape, image)?;
        let (_, h, w) = tape.value(feat).chw()?;
        let mut parts = vec![feat];
        if let Some(hist) = &self.hist {
            let v = hist.forward(tape, image)?;
            parts.push(tape.broadcast_spatial(v, h, w)?);
        }
        if let Some(mlp) = &self.exif {
            let rec =
                exif.ok_or_else(|| AwbError::InvalidArgument("model needs an Exif record".into()))?;
            let v = mlp.forward_record(tape, rec)?;
            parts.push(tape.broadcast_spatial(v, h, w)?);
        }
        let x = if parts.len() == 1 {
            feat
        } else {
            tape.concat_channels(&parts)?
        };
        let x = self.head_conv.forward(tape, x)?;
        let x = tape.relu(x);
        let x = self.head_out.forward(tape, x)?;
        let x = tape.relu(x);
        tape.global_avg_pool(x)
    }
}

/// Architecture: stage layout and parameter ids, no values.
#[derive(Clone, Debug)]
pub struct Architecture {
    pub config: ModelConfig,
    pub stages: Vec<Stage>,
}

/// Graph nodes of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    /// Normalized estimate of each stage; for a two-illuminant last stage this
    /// is its left half.
    pub raw: Vec<Var>,
    /// `normalize(c_1 * ... * c_k)` for each k.
    pub cumulative: Vec<Var>,
    /// Two-illuminant models: `(raw, cumulative)` right estimate of the last stage.
    pub right: Option<(Var, Var)>,
}

impl ForwardVars {
    pub fn final_left(&self) -> Var {
        *self.cumulative.last().unwrap()
    }
}

impl Architecture {
    pub fn build<T: Real>(config: ModelConfig, store: &mut ParamStore<T>) -> Result<Self> {
        config.hist.validate()?;
        config.backbone.validate()?;
        let kind = config.kind;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let n = kind.stages();
        let mut stages = Vec::with_capacity(n);
        for s in 0..n {
            let first = s == 0;
            let outputs = if kind.two_illuminant() && s + 1 == n {
                6
            } else {
                3
            };
            stages.push(Stage::new(
                store,
                &format!("stage{s}"),
                &config,
                first && kind.uses_hist(),
                first && kind.uses_exif(),
                outputs,
                &mut rng,
            )?);
        }
        Ok(Architecture { config, stages })
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        image: Var,
        exif: Option<&ExifRecord>,
    ) -> Result<ForwardVars> {
        let eps = T::lit(OUTPUT_EPS);
        let n = self.stages.len();
        let mut raw = Vec::with_capacity(n);
        let mut cumulative = Vec::with_capacity(n);
        let mut right = None;
        let mut img = image;
        let mut product: Option<Var> = None;
        for (s, stage) in self.stages.iter().enumerate() {
            let out = stage.forward(tape, img, exif)?;
            let compose = |tape: &mut Tape<'_, T>, c: Var| -> Result<Var> {
                match product {
                    None => Ok(c),
                    Some(p) => {
                        let m = tape.mul(p, c)?;
                        tape.normalize_eps(m, T::zero())
                    }
                }
            };
            let left = if tape.value(out).len() == 6 {
                let l = tape.slice(out, 0, 3)?;
                let r = tape.slice(out, 3, 3)?;
                let (l, r) = (tape.normalize_eps(l, eps)?, tape.normalize_eps(r, eps)?);
                let rc = compose(tape, r)?;
                right = Some((r, rc));
                l
            } else {
                tape.normalize_eps(out, eps)?
            };
            let cum = compose(tape, left)?;
            raw.push(left);
            cumulative.push(cum);
            product = Some(cum);
            if s + 1 < n {
                img = tape.color_correct(img, left)?;
            }
        }
        Ok(ForwardVars {
            raw,
            cumulative,
            right,
        })
    }

    /// Training loss in radians. Single-illuminant: mean recovery error of the
    /// cumulative estimates. Two-illuminant: half left plus half right error
    /// of the final pair; earlier cascade stages are scored against both
    /// targets and averaged in with equal weight.
    pub fn loss<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        fwd: &ForwardVars,
        gt: &TwoIlluminantLabel,
    ) -> Result<Var> {
        let (l, r) = (gt.left.to_array(), gt.right.to_array());
        let half = T::lit(0.5);
        let mut terms = Vec::with_capacity(fwd.cumulative.len());
        match fwd.right {
            None => {
                for &c in &fwd.cumulative {
                    terms.push(tape.angular_loss(c, l)?);
                }
            }
            Some((_, right)) => {
                let last = fwd.cumulative.len() - 1;
                for (i, &c) in fwd.cumulative.iter().enumerate() {
                    let el = tape.angular_loss(c, l)?;
                    let er = if i == last {
                        tape.angular_loss(right, r)?
                    } else {
                        tape.angular_loss(c, r)?
                    };
                    terms.push(tape.weighted_sum(&[(el, half), (er, half)])?);
                }
            }
        }
        let w = T::one() / T::lit(terms.len() as f64);
        let weighted: Vec<(Var, T)> = terms.into_iter().map(|t| (t, w)).collect();
        tape.weighted_sum(&weighted)
    }

    pub fn clamp_widths<T: Real>(&self, store: &mut ParamStore<T>) {
        for s in &self.stages {
            if let Some(h) = &s.hist {
                h.clamp_widths(store);
            }
        }
    }
}

/// Read-back of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub illuminant: IlluminantVector,
    pub second_illuminant: Option<IlluminantVector>,
    /// Each stage's own estimate.
    pub per_stage: Vec<IlluminantVector>,
    /// Running normalized products of the stage estimates.
    pub per_stage_cumulative: Vec<IlluminantVector>,
    pub confidence_map: Option<Tensor<f64>>,
}

impl Prediction {
    pub fn label(&self) -> TwoIlluminantLabel {
        TwoIlluminantLabel {
            left: self.illuminant,
            right: self.second_illuminant.unwrap_or(self.illuminant),
        }
    }
}

fn read_vec<T: Real>(tape: &Tape<'_, T>, v: Var) -> IlluminantVector {
    let d = tape.value(v).data();
    IlluminantVector {
        r: d[0].as_f64(),
        g: d[1].as_f64(),
        b: d[2].as_f64(),
    }
}

pub fn read_prediction<T: Real>(tape: &Tape<'_, T>, fwd: &ForwardVars) -> Prediction {
    Prediction {
        illuminant: read_vec(tape, fwd.final_left()),
        second_illuminant: fwd.right.map(|(_, c)| read_vec(tape, c)),
        per_stage: fwd.raw.iter().map(|&v| read_vec(tape, v)).collect(),
        per_stage_cumulative: fwd.cumulative.iter().map(|&v| read_vec(tape, v)).collect(),
        confidence_map: None,
    }
}

/// A training example as seen by the model.
#[derive(Clone, Debug)]
pub struct Example<T> {
    pub image: Tensor<T>,
    pub exif: Option<ExifRecord>,
    pub gt: TwoIlluminantLabel,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    format: String,
    config: ModelConfig,
    step: u64,
}

/// Architecture plus parameter values.
#[derive(Clone, Debug)]
pub struct ModelGraph<T: Real> {
    pub arch: Architecture,
    pub params: ParamStore<T>,
    /// Optimizer steps taken.
    pub step: u64,
}

impl<T: Real> ModelGraph<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let mut params = ParamStore::new();
        let arch = Architecture::build(config, &mut params)?;
        Ok(ModelGraph {
            arch,
            params,
            step: 0,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.arch.kind()
    }

    pub fn config(&self) -> &ModelConfig {
        &self.arch.config
    }

    /// Same architecture with parameters cast to `U`.
    pub fn cast<U: Real>(&self) -> ModelGraph<U> {
        let mut params = ParamStore::new();
        for p in self.params.iter() {
            params
                .add(p.name.clone(), p.value.cast())
                .expect("names already unique");
        }
        ModelGraph {
            arch: self.arch.clone(),
            params,
            step: self.step,
        }
    }

    pub fn predict(&self, image: &Tensor<T>, exif: Option<&ExifRecord>) -> Result<Prediction> {
        let mut tape = Tape::new(&self.params);
        let x = tape.input(image.clone());
        let fwd = self.arch.forward(&mut tape, x, exif)?;
        Ok(read_prediction(&tape, &fwd))
    }

    /// Loss of one example, without gradients.
    pub fn eval_loss(&self, ex: &Example<T>) -> Result<f64> {
        let mut tape = Tape::new(&self.params);
        let x = tape.input(ex.image.clone());
        let fwd = self.arch.forward(&mut tape, x, ex.exif.as_ref())?;
        let loss = self.arch.loss(&mut tape, &fwd, &ex.gt)?;
        Ok(tape.value(loss).data()[0].as_f64())
    }

    /// Adds the batch-mean gradient into the parameter buffers and returns the
    /// per-example losses.
    pub fn accumulate_gradients(&mut self, batch: &[&Example<T>]) -> Result<Vec<f64>> {
        let scale = T::one() / T::lit(batch.len() as f64);
        let mut losses = Vec::with_capacity(batch.len());
        for ex in batch {
            let grads = {
                let mut tape = Tape::new(&self.params);
                let x = tape.input(ex.image.clone());
                let fwd = self.arch.forward(&mut tape, x, ex.exif.as_ref())?;
                let loss = self.arch.loss(&mut tape, &fwd, &ex.gt)?;
                let v = tape.value(loss).data()[0].as_f64();
                if !v.is_finite() {
                    return Err(AwbError::NonFinite("training loss".into()));
                }
                losses.push(v);
                tape.backward(loss)?.into_params()
            };
            self.params.accumulate(&grads, scale);
        }
        Ok(losses)
    }

    /// One Adam step on the batch mean loss; returns per-example losses.
    pub fn train_step(&mut self, batch: &[&Example<T>], adam: &mut AdamConfig) -> Result<Vec<f64>> {
        if batch.is_empty() {
            return Err(AwbError::InvalidArgument("empty batch".into()));
        }
        self.params.zero_grad();
        let losses = self.accumulate_gradients(batch)?;
        adam_step(&mut self.params, adam)?;
        self.arch.clamp_widths(&mut self.params);
        self.step += 1;
        Ok(losses)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = CheckpointMeta {
            format: "sdeawb-model".into(),
            config: self.arch.config.clone(),
            step: self.step,
        };
        let meta = serde_json::to_value(meta).map_err(|e| AwbError::Checkpoint(e.to_string()))?;
        let tensors: Vec<(&str, &Tensor<T>)> = self
            .params
            .iter()
            .map(|p| (p.name.as_str(), &p.value))
            .collect();
        checkpoint::encode(meta, &tensors)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, tensors) = checkpoint::decode::<T>(bytes)?;
        let meta: CheckpointMeta = serde_json::from_value(header.meta)
            .map_err(|e| AwbError::Checkpoint(format!("invalid model header: {e}")))?;
        let mut g = ModelGraph::new(meta.config)?;
        if tensors.len() != g.params.len() {
            return Err(AwbError::Checkpoint(format!(
                "checkpoint has {} tensors, model expects {}",
                tensors.len(),
                g.params.len()
            )));
        }
        for (name, t) in tensors {
            let id = g
                .params
                .find(&name)
                .ok_or_else(|| AwbError::Checkpoint(format!("unexpected tensor `{name}`")))?;
            if g.params.value(id).shape() != t.shape() {
                return Err(AwbError::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    g.params.value(id).shape()
                )));
            }
            g.params.get_mut(id).value = t;
        }
        g.step = meta.step;
        Ok(g)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// A loaded checkpoint of either precision.
#[derive(Clone, Debug)]
pub enum AnyModel {
    F32(ModelGraph<f32>),
    F64(ModelGraph<f64>),
}

impl AnyModel {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let (header, _) = checkpoint::decode_header(&bytes)?;
        match header.dtype() {
            Some("f32") => Ok(AnyModel::F32(ModelGraph::from_bytes(&bytes)?)),
            Some("f64") => Ok(AnyModel::F64(ModelGraph::from_bytes(&bytes)?)),
            other => Err(AwbError::Checkpoint(format!("unsupported dtype {other:?}"))),
        }
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            AnyModel::F32(g) => g.kind(),
            AnyModel::F64(g) => g.kind(),
        }
    }

    pub fn predict(&self, image: &Tensor<f32>, exif: Option<&ExifRecord>) -> Result<Prediction> {
        match self {
            AnyModel::F32(g) => g.predict(image, exif),
            AnyModel::F64(g) => g.predict(&image.cast(), exif),
        }
    }
}
