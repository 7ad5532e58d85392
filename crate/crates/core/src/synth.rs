//! Synthetic scenes with known illuminants.
//!
//! Reflectances are piecewise constant on a square grid of cells, share a
//! non-neutral mean (so Gray World is biased) and are lit by an illuminant
//! drawn from one of two chroma clusters. Exif fields follow the cluster.
//! Two-illuminant scenes light the left half with a cluster-0 illuminant and
//! the right half with a cluster-1 illuminant.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::batch::seeded_rng;
use crate::data::dataset::{classify_track, write_manifest, LabeledSample, Manifest, Track};
use crate::data::pnm::save_image;
use crate::error::{AwbError, Result};
use crate::exif::ExifRecord;
use crate::metrics::{rgb_to_uv, uv_to_rgb, IlluminantVector, TwoIlluminantLabel};
use crate::models::Example;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub count: usize,
    /// Square image side in pixels.
    pub size: usize,
    /// Reflectance cells per side.
    pub cells: usize,
    pub two_illuminant: bool,
    /// Mean reflectance per channel.
    pub reflectance_bias: [f64; 3],
    /// Relative per-cell chroma spread around the mean.
    pub chroma_spread: f64,
    /// Cluster centers as `(r, g, b)` illuminants.
    pub clusters: [[f64; 3]; 2],
    /// Standard deviation of the uv jitter around a center.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            count: 512,
            size: 64,
            cells: 4,
            two_illuminant: false,
            reflectance_bias: [1.0, 0.8, 0.6],
            chroma_spread: 0.1,
            clusters: [[0.75, 0.55, 0.3], [0.45, 0.55, 0.7]],
            jitter: 0.08,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.size >= 16
            && self.cells >= 1
            && self.cells <= self.size
            && self.reflectance_bias.iter().all(|&b| b > 0.0 && b <= 1.0)
            && (0.0..1.0).contains(&self.chroma_spread)
            && self.jitter >= 0.0
            && self.clusters.iter().all(|c| c.iter().all(|&v| v > 0.0));
        if ok {
            Ok(())
        } else {
            Err(AwbError::InvalidArgument(format!(
                "invalid synth config {self:?}"
            )))
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthScene {
    pub id: String,
    pub image: Tensor<f64>,
    pub gt: TwoIlluminantLabel,
    pub exif: ExifRecord,
    /// Cluster of the (left) illuminant.
    pub cluster: usize,
}

impl SynthScene {
    pub fn example<T: Real>(&self) -> Example<T> {
        Example {
            image: self.image.cast(),
            exif: Some(self.exif),
            gt: self.gt,
        }
    }
}

fn draw_illuminant(
    cfg: &SynthConfig,
    cluster: usize,
    rng: &mut impl Rng,
) -> Result<IlluminantVector> {
    let (u, v) = rgb_to_uv(&IlluminantVector::from_array(cfg.clusters[cluster])?)?;
    let n = Normal::new(0.0, cfg.jitter.max(1e-12)).expect("positive std");
    Ok(uv_to_rgb(u + n.sample(rng), v + n.sample(rng)).normalized())
}

/// Cluster 0 looks like dim indoor light, cluster 1 like daylight.
fn draw_exif(cluster: usize, rng: &mut impl Rng) -> ExifRecord {
    let wobble = |rng: &mut dyn rand::RngCore| 2f64.powf(rng.random_range(-0.5..0.5));
    if cluster == 0 {
        ExifRecord {
            aperture: 2.0 * wobble(rng),
            exposure_time: (1.0 / 15.0) * wobble(rng),
            iso: 1600.0 * wobble(rng),
            orientation: 0,
        }
    } else {
        ExifRecord {
            aperture: 8.0 * wobble(rng),
            exposure_time: (1.0 / 500.0) * wobble(rng),
            iso: 100.0 * wobble(rng),
            orientation: 0,
        }
    }
}

/// Scene `index` of the dataset described by `cfg`.
pub fn scene(cfg: &SynthConfig, index: usize) -> Result<SynthScene> {
    let mut rng = seeded_rng(&[cfg.seed, index as u64, 0x5e7_e5e7]);
    let cluster = if cfg.two_illuminant {
        0
    } else {
        rng.random_range(0..2)
    };
    let left = draw_illuminant(cfg, cluster, &mut rng)?;
    let right = if cfg.two_illuminant {
        draw_illuminant(cfg, 1, &mut rng)?
    } else {
        left
    };
    let exif = draw_exif(cluster, &mut rng);
    let brightness = rng.random_range(0.5..0.95);

    let n = cfg.size;
    let cell = n.div_ceil(cfg.cells);
    let refl: Vec<[f64; 3]> = (0..cfg.cells * cfg.cells)
        .map(|_| {
            let level = rng.random_range(0.2..1.0);
            cfg.reflectance_bias.map(|b| {
                b * level * (1.0 + rng.random_range(-cfg.chroma_spread..cfg.chroma_spread))
            })
        })
        .collect();
    let lit = |c: &IlluminantVector| {
        let a = c.to_array();
        let peak = a.iter().cloned().fold(0.0, f64::max);
        a.map(|v| brightness * v / peak)
    };
    let (ll, lr) = (lit(&left), lit(&right));
    let mut image = Tensor::zeros(&[3, n, n]);
    let d = image.data_mut();
    for y in 0..n {
        for x in 0..n {
            let r = refl[(y / cell) * cfg.cells + x / cell];
            let l = if x < n / 2 { ll } else { lr };
            for ch in 0..3 {
                d[(ch * n + y) * n + x] = (r[ch] * l[ch]).clamp(0.0, 1.0);
            }
        }
    }
    Ok(SynthScene {
        id: format!("synth{index:05}"),
        image,
        gt: TwoIlluminantLabel { left, right },
        exif,
        cluster,
    })
}

pub fn generate(cfg: &SynthConfig) -> Result<Vec<SynthScene>> {
    cfg.validate()?;
    (0..cfg.count).map(|i| scene(cfg, i)).collect()
}

/// Writes a manifest directory (16-bit images) and returns its samples.
pub fn write_dataset(root: &Path, cfg: &SynthConfig) -> Result<Vec<LabeledSample>> {
    let scenes = generate(cfg)?;
    let by_id: BTreeMap<&str, &SynthScene> = scenes.iter().map(|s| (s.id.as_str(), s)).collect();
    let gt = scenes.iter().map(|s| (s.id.clone(), s.gt)).collect();
    let exif = scenes.iter().map(|s| (s.id.clone(), s.exif)).collect();
    write_manifest(root, &gt, &exif, |id, path| {
        save_image(path, &by_id[id].image, 65535)
    })?;
    scenes
        .iter()
        .map(|s| {
            Ok(LabeledSample {
                image_id: s.id.clone(),
                image_path: Manifest::image_path(root, &s.id),
                gt: s.gt,
                exif: s.exif,
                track: classify_track(&s.gt, Track::General)?,
            })
        })
        .collect()
}
