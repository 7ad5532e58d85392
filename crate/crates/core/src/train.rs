//! Epoch loop: seeded shuffling, optional augmentation, Adam steps and
//! validation error.

use log::info;
use serde::{Deserialize, Serialize};

use crate::data::augment::{augment, sample_rng, AugmentConfig};
use crate::data::batch::batch_iter;
use crate::data::dataset::Track;
use crate::error::{AwbError, Result};
use crate::metrics::{angular_error, two_illum_error};
use crate::models::{Example, ModelGraph};
use crate::optim::AdamConfig;
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 450,
            batch_size: 16,
            learning_rate: 3e-4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(AwbError::InvalidArgument(
                "epochs and batch size must be >= 1".into(),
            ));
        }
        AdamConfig::with_learning_rate(self.learning_rate).validate()
    }
}

#[derive(Clone, Debug)]
pub struct TrainItem<T> {
    pub id: String,
    pub example: Example<T>,
    pub track: Track,
}

/// One row of the training log. Errors are in degrees.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_error: Option<f64>,
    /// Samples dropped by augmentation this epoch.
    pub skipped: usize,
}

/// Angular error of the final estimate: recovery error for single-illuminant
/// models, the two-illuminant error otherwise.
pub fn example_error<T: Real>(model: &ModelGraph<T>, ex: &Example<T>) -> Result<f64> {
    let p = model.predict(&ex.image, ex.exif.as_ref())?;
    if model.kind().two_illuminant() {
        two_illum_error(&p.label(), &ex.gt)
    } else {
        angular_error(&p.illuminant, &ex.gt.left)
    }
}

pub fn mean_error<T: Real>(model: &ModelGraph<T>, examples: &[Example<T>]) -> Result<f64> {
    if examples.is_empty() {
        return Err(AwbError::Dataset("no examples to evaluate".into()));
    }
    let mut sum = 0.0;
    for ex in examples {
        sum += example_error(model, ex)?;
    }
    Ok(sum / examples.len() as f64)
}

/// Trains for `cfg.epochs` epochs (numbered from 1). `on_epoch` sees each
/// log row and the model after that epoch.
pub fn train<T: Real>(
    model: &mut ModelGraph<T>,
    items: &[TrainItem<T>],
    val: &[Example<T>],
    cfg: &TrainConfig,
    aug: Option<&AugmentConfig>,
    mut on_epoch: impl FnMut(&EpochLog, &ModelGraph<T>) -> Result<()>,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if let Some(a) = aug {
        a.validate()?;
    }
    if items.is_empty() {
        return Err(AwbError::Dataset("empty training set".into()));
    }
    let mut adam = AdamConfig::with_learning_rate(cfg.learning_rate);
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut losses: Vec<Option<f64>> = vec![None; items.len()];
        let mut skipped = 0;
        for idx in batch_iter(items.len(), cfg.batch_size, cfg.seed, epoch as u64)? {
            let mut owned = Vec::new();
            let mut used = Vec::new();
            for &i in &idx {
                let it = &items[i];
                match aug {
                    None => used.push(i),
                    Some(a) => {
                        let mut rng = sample_rng(a, epoch as u64, i as u64);
                        match augment(&it.example.image, &it.example.gt, it.track, a, &mut rng)? {
                            Some((image, gt)) => {
                                owned.push(Example {
                                    image,
                                    exif: it.example.exif,
                                    gt,
                                });
                                used.push(i);
                            }
                            None => skipped += 1,
                        }
                    }
                }
            }
            if used.is_empty() {
                continue;
            }
            let batch: Vec<&Example<T>> = if aug.is_some() {
                owned.iter().collect()
            } else {
                used.iter().map(|&i| &items[i].example).collect()
            };
            let step = model.train_step(&batch, &mut adam).map_err(|e| match e {
                AwbError::NonFinite(_) | AwbError::Domain { .. } => {
                    let ids: Vec<&str> = used.iter().map(|&i| items[i].id.as_str()).collect();
                    AwbError::NonFinite(format!("{e}; batch image_ids: {}", ids.join(",")))
                }
                e => e,
            })?;
            for (&i, l) in used.iter().zip(step) {
                losses[i] = Some(l);
            }
        }
        let seen: Vec<f64> = losses.into_iter().flatten().collect();
        if seen.is_empty() {
            return Err(AwbError::Dataset(format!(
                "epoch {epoch}: augmentation skipped all {} samples",
                items.len()
            )));
        }
        let train_loss = (seen.iter().sum::<f64>() / seen.len() as f64).to_degrees();
        let val_error = if val.is_empty() {
            None
        } else {
            Some(mean_error(model, val)?)
        };
        let log = EpochLog {
            epoch,
            train_loss,
            val_error,
            skipped,
        };
        info!(
            "epoch {epoch}: train loss {train_loss:.4} deg, val error {}",
            val_error.map_or("-".into(), |v| format!("{v:.4} deg"))
        );
        on_epoch(&log, model)?;
        logs.push(log);
    }
    Ok(logs)
}
