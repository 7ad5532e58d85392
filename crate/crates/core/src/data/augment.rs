//! Random rotation, inscribed-square crop, resize and patch crop, applied as
//! one composite bilinear resampling.

use log::warn;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::batch::seeded_rng;
use super::dataset::Track;
use crate::error::{AwbError, Result};
use crate::metrics::TwoIlluminantLabel;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub patch: usize,
    /// Rotation drawn uniformly from `[-rotation_range, rotation_range]`.
    pub rotation_range: f64,
    /// Rotation bound for two-illuminant samples.
    pub two_illuminant_rotation_range: f64,
    pub resize_range: (f64, f64),
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            patch: 512,
            rotation_range: 60.0,
            two_illuminant_rotation_range: 15.0,
            resize_range: (0.1, 1.0),
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.resize_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) || self.patch < 16 || self.rotation_range < 0.0 {
            return Err(AwbError::InvalidArgument(format!(
                "invalid augmentation config {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub angle_deg: f64,
    pub ratio: f64,
    /// Top-left corner of the patch inside the resized square, `(x, y)`.
    pub offset: (usize, usize),
}

/// Side of the largest axis-aligned square centered in a `w x h` image
/// rotated by `angle_deg` whose corners stay inside the image.
pub fn inscribed_square(w: usize, h: usize, angle_deg: f64) -> f64 {
    let (s, c) = angle_deg.to_radians().sin_cos();
    w.min(h) as f64 / (s.abs() + c.abs())
}

/// Draws angle, ratio and offset; `None` if the resized square is smaller
/// than the patch.
pub fn draw_params(
    w: usize,
    h: usize,
    track: Track,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Option<AugmentParams> {
    let max_angle = if track == Track::TwoIlluminant {
        cfg.two_illuminant_rotation_range.min(cfg.rotation_range)
    } else {
        cfg.rotation_range
    };
    let angle_deg = if max_angle > 0.0 {
        rng.random_range(-max_angle..=max_angle)
    } else {
        0.0
    };
    let (lo, hi) = cfg.resize_range;
    let ratio = if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    };
    let side = (inscribed_square(w, h, angle_deg) * ratio).floor() as usize;
    if side < cfg.patch {
        return None;
    }
    let slack = side - cfg.patch;
    let offset = (rng.random_range(0..=slack), rng.random_range(0..=slack));
    Some(AugmentParams {
        angle_deg,
        ratio,
        offset,
    })
}

fn bilinear<T: Real>(plane: &[T], w: usize, h: usize, x: f64, y: f64) -> f64 {
    let (sx, sy) = (x - 0.5, y - 0.5);
    let (x0, y0) = (sx.floor(), sy.floor());
    let (fx, fy) = (sx - x0, sy - y0);
    let at = |xi: f64, yi: f64| {
        let xi = xi.clamp(0.0, (w - 1) as f64) as usize;
        let yi = yi.clamp(0.0, (h - 1) as f64) as usize;
        plane[yi * w + xi].as_f64()
    };
    let top = at(x0, y0) * (1.0 - fx) + at(x0 + 1.0, y0) * fx;
    let bot = at(x0, y0 + 1.0) * (1.0 - fx) + at(x0 + 1.0, y0 + 1.0) * fx;
    top * (1.0 - fy) + bot * fy
}

/// Resamples a `patch x patch` window through the rotate, square-crop and
/// resize chain described by `p`.
pub fn apply<T: Real>(image: &Tensor<T>, p: &AugmentParams, patch: usize) -> Result<Tensor<T>> {
    let (c, h, w) = image.chw()?;
    let side = inscribed_square(w, h, p.angle_deg);
    let (s, co) = p.angle_deg.to_radians().sin_cos();
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let n = h * w;
    let mut out = Tensor::zeros(&[c, patch, patch]);
    let od = out.data_mut();
    for py in 0..patch {
        for px in 0..patch {
            let dx = (p.offset.0 + px) as f64 + 0.5;
            let dy = (p.offset.1 + py) as f64 + 0.5;
            let (dx, dy) = (dx / p.ratio - side / 2.0, dy / p.ratio - side / 2.0);
            let x = cx + co * dx + s * dy;
            let y = cy - s * dx + co * dy;
            for ch in 0..c {
                od[(ch * patch + py) * patch + px] =
                    T::lit(bilinear(&image.data()[ch * n..(ch + 1) * n], w, h, x, y));
            }
        }
    }
    Ok(out)
}

/// Augmented patch and unchanged ground truth, or `None` (with a warning)
/// when the image is too small for the drawn resize.
pub fn augment<T: Real>(
    image: &Tensor<T>,
    gt: &TwoIlluminantLabel,
    track: Track,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Option<(Tensor<T>, TwoIlluminantLabel)>> {
    let (_, h, w) = image.chw()?;
    match draw_params(w, h, track, cfg, rng) {
        Some(p) => Ok(Some((apply(image, &p, cfg.patch)?, *gt))),
        None => {
            warn!(
                "skipping {w}x{h} image: too small for a {} patch after resize",
                cfg.patch
            );
            Ok(None)
        }
    }
}

/// RNG for sample `index` in `epoch`.
pub fn sample_rng(cfg: &AugmentConfig, epoch: u64, index: u64) -> ChaCha8Rng {
    seeded_rng(&[cfg.seed, epoch, index])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{angular_error, gray_world, IlluminantVector};

    fn cfg(patch: usize) -> AugmentConfig {
        AugmentConfig {
            patch,
            ..Default::default()
        }
    }

    #[test]
    fn identity_params_on_constant_image() {
        let img = Tensor::<f64>::full(&[3, 40, 40], 0.3);
        let p = AugmentParams {
            angle_deg: 0.0,
            ratio: 1.0,
            offset: (12, 12),
        };
        let out = apply(&img, &p, 16).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
    }

    #[test]
    fn identity_params_copy_pixels() {
        let mut rng = seeded_rng(&[1]);
        let img = Tensor::<f64>::rand_uniform(&[3, 20, 20], 0.0, 1.0, &mut rng);
        let p = AugmentParams {
            angle_deg: 0.0,
            ratio: 1.0,
            offset: (2, 3),
        };
        let out = apply(&img, &p, 16).unwrap();
        for ch in 0..3 {
            for y in 0..16 {
                for x in 0..16 {
                    assert!((out.at3(ch, y, x) - img.at3(ch, y + 3, x + 2)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn same_seed_same_patch() {
        let mut rng = seeded_rng(&[2]);
        let img = Tensor::<f32>::rand_uniform(&[3, 120, 90], 0.0, 1.0, &mut rng);
        let gt = TwoIlluminantLabel::single(IlluminantVector::achromatic());
        let c = AugmentConfig {
            resize_range: (0.5, 1.0),
            ..cfg(32)
        };
        let a = augment(&img, &gt, Track::General, &c, &mut sample_rng(&c, 3, 7))
            .unwrap()
            .unwrap();
        let b = augment(&img, &gt, Track::General, &c, &mut sample_rng(&c, 3, 7))
            .unwrap()
            .unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, gt);
    }

    #[test]
    fn too_small_is_skipped() {
        let img = Tensor::<f32>::full(&[3, 64, 64], 0.5);
        let gt = TwoIlluminantLabel::single(IlluminantVector::achromatic());
        let c = cfg(512);
        assert!(
            augment(&img, &gt, Track::General, &c, &mut sample_rng(&c, 0, 0))
                .unwrap()
                .is_none()
        );
    }

    #[test]
    fn two_illuminant_rotation_is_bounded() {
        let c = AugmentConfig {
            resize_range: (1.0, 1.0),
            ..cfg(16)
        };
        for i in 0..200 {
            let p = draw_params(
                100,
                100,
                Track::TwoIlluminant,
                &c,
                &mut sample_rng(&c, 0, i),
            )
            .unwrap();
            assert!(p.angle_deg.abs() <= 15.0);
        }
        let wide = (0..200)
            .map(|i| {
                draw_params(100, 100, Track::General, &c, &mut sample_rng(&c, 0, i))
                    .unwrap()
                    .angle_deg
                    .abs()
            })
            .fold(0.0, f64::max);
        assert!(wide > 15.0 && wide <= 60.0);
    }

    #[test]
    fn tinted_uniform_image_keeps_gray_world() {
        let tint = IlluminantVector::new(0.7, 0.5, 0.3).unwrap();
        let mut img = Tensor::<f64>::zeros(&[3, 200, 160]);
        let n = 200 * 160;
        for (k, t) in tint.to_array().iter().enumerate() {
            img.data_mut()[k * n..(k + 1) * n]
                .iter_mut()
                .for_each(|v| *v = 0.8 * t);
        }
        let gt = TwoIlluminantLabel::single(tint);
        let c = AugmentConfig {
            resize_range: (0.4, 1.0),
            ..cfg(48)
        };
        for i in 0..10 {
            let (patch, g) = augment(&img, &gt, Track::General, &c, &mut sample_rng(&c, 1, i))
                .unwrap()
                .unwrap();
            assert_eq!(g, gt);
            assert!(angular_error(&gray_world(&patch).unwrap(), &tint).unwrap() < 0.1);
        }
    }

    #[test]
    fn inscribed_square_sizes() {
        assert_eq!(inscribed_square(100, 80, 0.0), 80.0);
        let s45 = inscribed_square(100, 100, 45.0);
        assert!((s45 - 100.0 / 2f64.sqrt()).abs() < 1e-9);
    }
}
