//! TOML experiment configuration with `[model]`, `[train]`, `[data]` and
//! `[output]` sections. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use sdeawb_core::backbone::BackboneScale;
use sdeawb_core::data::augment::AugmentConfig;
use sdeawb_core::data::expansion::{DEFAULT_GRID, MARGIN_BINS};
use sdeawb_core::data::Track;
use sdeawb_core::hist::HistHeadConfig;
use sdeawb_core::models::{ModelConfig, ModelKind};
use sdeawb_core::train::TrainConfig;

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub backbone: BackboneScale,
    /// Histogram bins per uv axis.
    pub bins: usize,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            kind: ModelKind::B,
            backbone: BackboneScale::Tiny,
            bins: 32,
            seed: 0,
            precision: Precision::F32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Defaults to 450, 500 or 350 for the general, indoor and
    /// two-illuminant tracks.
    pub epochs: Option<usize>,
    pub augment: bool,
    pub patch: usize,
    pub rotation_range: f64,
    pub two_illuminant_rotation_range: f64,
    pub resize_range: (f64, f64),
    /// Track assigned to samples whose illuminants are less than 2 degrees
    /// apart.
    pub track: Track,
    /// Write a checkpoint every K epochs; 0 writes only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let aug = AugmentConfig::default();
        TrainSection {
            learning_rate: 3e-4,
            batch_size: 16,
            epochs: None,
            augment: true,
            patch: aug.patch,
            rotation_range: aug.rotation_range,
            two_illuminant_rotation_range: aug.two_illuminant_rotation_range,
            resize_range: aug.resize_range,
            track: Track::General,
            checkpoint_every: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub trainset1: Option<PathBuf>,
    /// Candidate pool filtered by chroma coverage of `trainset1`.
    pub trainset2: Option<PathBuf>,
    /// Fraction of the training samples held out for validation.
    pub val_split: f64,
    pub expansion_threshold: f64,
    /// Cells per side of the ground-truth uv grid.
    pub grid_bins: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            trainset1: None,
            trainset2: None,
            val_split: 0.0,
            expansion_threshold: 0.0,
            grid_bins: DEFAULT_GRID,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub checkpoint_dir: PathBuf,
    /// Merged manifest written by `prepare`.
    pub prepared_dir: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            checkpoint_dir: PathBuf::from("runs/default"),
            prepared_dir: None,
            report: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub train: TrainSection,
    pub data: DataSection,
    pub output: OutputSection,
}

impl ExperimentConfig {
    /// Parses and validates; relative paths are resolved against the
    /// directory holding the file.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg =
            Self::parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [
            &mut self.data.trainset1,
            &mut self.data.trainset2,
            &mut self.output.prepared_dir,
            &mut self.output.report,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        fix(&mut self.output.checkpoint_dir);
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        for p in [&self.data.trainset1, &self.data.trainset2]
            .into_iter()
            .flatten()
        {
            if !p.is_dir() {
                return bad(format!("dataset path {} does not exist", p.display()));
            }
        }
        if !(0.0..1.0).contains(&self.data.val_split) {
            return bad(format!(
                "data.val_split {} not in [0, 1)",
                self.data.val_split
            ));
        }
        if self.data.grid_bins <= 2 * MARGIN_BINS + 1 {
            return bad(format!(
                "data.grid_bins must exceed {}",
                2 * MARGIN_BINS + 1
            ));
        }
        if self.model.kind.two_illuminant() != (self.train.track == Track::TwoIlluminant) {
            return bad(format!(
                "model kind {} does not match train.track {}",
                self.model.kind, self.train.track
            ));
        }
        if self.data.expansion_threshold < 0.0 {
            return bad("data.expansion_threshold must be >= 0".into());
        }
        self.model_config()
            .hist
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.train_config()
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.augment_config()
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn epochs(&self) -> usize {
        self.train.epochs.unwrap_or(match self.train.track {
            Track::General => 450,
            Track::Indoor => 500,
            Track::TwoIlluminant => 350,
        })
    }

    pub fn model_config(&self) -> ModelConfig {
        let mut cfg = ModelConfig::new(self.model.kind, self.model.backbone, self.model.seed);
        cfg.hist = HistHeadConfig {
            bins_per_axis: self.model.bins,
            ..cfg.hist
        };
        cfg
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs(),
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate,
            seed: self.model.seed,
        }
    }

    pub fn augment_config(&self) -> AugmentConfig {
        AugmentConfig {
            patch: self.train.patch,
            rotation_range: self.train.rotation_range,
            two_illuminant_rotation_range: self.train.two_illuminant_rotation_range,
            resize_range: self.train.resize_range,
            seed: self.model.seed,
        }
    }
}
