//! Trainset expansion by ground-truth chroma coverage.
//!
//! Ground-truth illuminants of a reference set are hard-binned into a uv grid
//! and blurred with a small Gaussian. Candidates from another pool are kept
//! iff their own ground truth lands on a cell with positive mass.

use super::dataset::{LabeledSample, Track};
use crate::error::{AwbError, Result};
use crate::metrics::{rgb_to_uv, IlluminantVector};
use crate::tensor::Tensor;

pub const DEFAULT_GRID: usize = 64;
pub const DEFAULT_BLUR: usize = 7;
pub const DEFAULT_SIGMA: f64 = 1.5;
/// Empty cells on each side of the ground-truth bounding box.
pub const MARGIN_BINS: usize = 3;
/// Bin width used when every sample shares one coordinate.
pub const MIN_BIN_WIDTH: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GtUvHistogram {
    /// Hard counts before blurring, `[Bg, Bg]` indexed `[u, v]`.
    pub raw: Tensor<f64>,
    /// Blurred grid, `[Bg, Bg]`.
    pub grid: Tensor<f64>,
    pub u_range: (f64, f64),
    pub v_range: (f64, f64),
    pub blur_size: usize,
    pub sigma: f64,
}

/// Normalized, truncated 1D Gaussian of odd length `size`.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let k: Vec<f64> = (0..size)
        .map(|i| {
            let x = i as f64 - r;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable blur of an `n x n` grid with zero padding.
pub fn blur(grid: &[f64], n: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let taps = |j: usize| {
        kernel.iter().enumerate().filter_map(move |(t, &k)| {
            let o = j as isize + t as isize - r;
            (0..n as isize).contains(&o).then_some((o as usize, k))
        })
    };
    let mut rows = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            rows[i * n + j] = taps(j).map(|(o, k)| k * grid[i * n + o]).sum();
        }
    }
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = taps(i).map(|(o, k)| k * rows[o * n + j]).sum();
        }
    }
    out
}

/// Illuminants that a sample contributes: one for single-illuminant samples,
/// left and right for two-illuminant ones.
pub fn sample_illuminants(s: &LabeledSample) -> Vec<IlluminantVector> {
    if s.track == Track::TwoIlluminant {
        vec![s.gt.left, s.gt.right]
    } else {
        vec![s.gt.left]
    }
}

impl GtUvHistogram {
    pub fn bins(&self) -> usize {
        self.grid.shape()[0]
    }

    fn width(range: (f64, f64), bins: usize) -> f64 {
        (range.1 - range.0) / bins as f64
    }

    /// Grid cell of a uv point, `None` outside the grid.
    pub fn cell(&self, u: f64, v: f64) -> Option<(usize, usize)> {
        let n = self.bins();
        let idx = |x: f64, range: (f64, f64)| {
            let k = ((x - range.0) / Self::width(range, n)).floor();
            (k >= 0.0 && k < n as f64).then_some(k as usize)
        };
        Some((idx(u, self.u_range)?, idx(v, self.v_range)?))
    }

    /// Blurred mass at an illuminant's cell; `None` outside the grid.
    pub fn mass_at(&self, c: &IlluminantVector) -> Result<Option<f64>> {
        let (u, v) = rgb_to_uv(c)?;
        Ok(self
            .cell(u, v)
            .map(|(i, j)| self.grid.data()[i * self.bins() + j]))
    }

    pub fn build(
        samples: &[LabeledSample],
        grid_bins: usize,
        blur_size: usize,
        sigma: f64,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(AwbError::Dataset(
                "cannot build a uv histogram from no samples".into(),
            ));
        }
        if grid_bins <= 2 * MARGIN_BINS + 1 || blur_size.is_multiple_of(2) || sigma <= 0.0 {
            return Err(AwbError::InvalidArgument(format!(
                "uv histogram needs grid > {} bins, odd blur size and sigma > 0",
                2 * MARGIN_BINS + 1
            )));
        }
        let mut pts = Vec::new();
        for s in samples {
            for c in sample_illuminants(s) {
                pts.push(rgb_to_uv(&c)?);
            }
        }
        let span = |f: fn(&(f64, f64)) -> f64| {
            let lo = pts.iter().map(f).fold(f64::INFINITY, f64::min);
            let hi = pts.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
            // Extremes sit mid-cell, not on a bin edge, so rounding cannot
            // push them into the margin.
            let w = ((hi - lo) / (grid_bins - 2 * MARGIN_BINS - 1) as f64).max(MIN_BIN_WIDTH);
            let start = lo - (MARGIN_BINS as f64 + 0.5) * w;
            (start, start + grid_bins as f64 * w)
        };
        let u_range = span(|p| p.0);
        let v_range = span(|p| p.1);
        let mut hist = GtUvHistogram {
            raw: Tensor::zeros(&[grid_bins, grid_bins]),
            grid: Tensor::zeros(&[grid_bins, grid_bins]),
            u_range,
            v_range,
            blur_size,
            sigma,
        };
        for &(u, v) in &pts {
            let (i, j) = hist
                .cell(u, v)
                .expect("bounding box lies inside the padded grid");
            hist.raw.data_mut()[i * grid_bins + j] += 1.0;
        }
        let blurred = blur(
            hist.raw.data(),
            grid_bins,
            &gaussian_kernel(blur_size, sigma),
        );
        hist.grid = Tensor::new(&[grid_bins, grid_bins], blurred)?;
        Ok(hist)
    }

    /// Grid rescaled to 8-bit gray for inspection.
    pub fn to_image(&self) -> Tensor<f64> {
        let n = self.bins();
        let max = self
            .grid
            .data()
            .iter()
            .cloned()
            .fold(0.0, f64::max)
            .max(f64::MIN_POSITIVE);
        let plane: Vec<f64> = self.grid.data().iter().map(|v| v / max).collect();
        let mut data = plane.clone();
        data.extend_from_slice(&plane);
        data.extend_from_slice(&plane);
        Tensor::new(&[3, n, n], data).expect("3 planes")
    }
}

/// Candidates whose every illuminant lands on a cell with mass above
/// `threshold`, in input order.
pub fn expansion_filter(
    candidates: &[LabeledSample],
    hist: &GtUvHistogram,
    threshold: f64,
) -> Result<Vec<LabeledSample>> {
    let mut out = Vec::new();
    for c in candidates {
        let mut keep = true;
        for il in sample_illuminants(c) {
            match hist.mass_at(&il)? {
                Some(m) if m > threshold => {}
                _ => keep = false,
            }
        }
        if keep {
            out.push(c.clone());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exif::ExifRecord;
    use crate::metrics::{uv_to_rgb, TwoIlluminantLabel};
    use proptest::prelude::*;
    use std::path::PathBuf;

    fn sample(id: &str, u: f64, v: f64) -> LabeledSample {
        LabeledSample {
            image_id: id.into(),
            image_path: PathBuf::from(id),
            gt: TwoIlluminantLabel::single(uv_to_rgb(u, v)),
            exif: ExifRecord {
                aperture: 2.0,
                exposure_time: 0.01,
                iso: 100.0,
                orientation: 0,
            },
            track: Track::General,
        }
    }

    #[test]
    fn kernel_sums_to_one() {
        let k = gaussian_kernel(7, 1.5);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(k[0], k[6]);
        assert!(k[3] > k[2]);
    }

    #[test]
    fn single_sample_impulse() {
        let h = GtUvHistogram::build(&[sample("a", 0.2, -0.1)], 64, 7, 1.5).unwrap();
        assert_eq!(h.raw.data().iter().filter(|&&v| v != 0.0).count(), 1);
        let n = 64;
        let k = h.raw.data().iter().position(|&v| v != 0.0).unwrap();
        let (ci, cj) = (k / n, k % n);
        for (idx, &v) in h.grid.data().iter().enumerate() {
            let (i, j) = (idx / n, idx % n);
            if v != 0.0 {
                assert!(i.abs_diff(ci) <= 3 && j.abs_diff(cj) <= 3);
            }
        }
        assert!((h.grid.sum() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn identical_samples_stack() {
        let h = GtUvHistogram::build(&[sample("a", 0.2, 0.3), sample("b", 0.2, 0.3)], 64, 7, 1.5)
            .unwrap();
        assert_eq!(h.raw.data().iter().filter(|&&v| v != 0.0).count(), 1);
        assert_eq!(h.raw.sum(), 2.0);
    }

    #[test]
    fn filter_examples() {
        let train: Vec<_> = (0..10)
            .map(|i| sample(&format!("t{i}"), 0.1 * i as f64, 0.05 * i as f64))
            .collect();
        let h = GtUvHistogram::build(&train, 64, 7, 1.5).unwrap();
        let same = sample("c0", 0.3, 0.15);
        let far = sample("c1", 5.0, -5.0);
        let acc = expansion_filter(&[same.clone(), far], &h, 0.0).unwrap();
        assert_eq!(acc, vec![same]);
        // 10 cells from any mass inside the grid
        let du = (h.u_range.1 - h.u_range.0) / 64.0;
        let lonely = sample("c2", 0.0 + 10.0 * du, 0.45);
        assert!(expansion_filter(&[lonely], &h, 0.0).unwrap().is_empty());
    }

    /// Direct binning plus an explicit 2D convolution with a kernel built
    /// from the Gaussian formula.
    fn oracle_accepts(train: &[LabeledSample], cands: &[LabeledSample]) -> Vec<String> {
        let n = 64usize;
        let pts: Vec<(f64, f64)> = train
            .iter()
            .map(|s| rgb_to_uv(&s.gt.left).unwrap())
            .collect();
        let bounds = |sel: fn(&(f64, f64)) -> f64| {
            let lo = pts.iter().map(sel).fold(f64::INFINITY, f64::min);
            let hi = pts.iter().map(sel).fold(f64::NEG_INFINITY, f64::max);
            let w = ((hi - lo) / 57.0).max(1e-3);
            (lo - 3.5 * w, w)
        };
        let (u0, wu) = bounds(|p| p.0);
        let (v0, wv) = bounds(|p| p.1);
        let idx = |x: f64, x0: f64, w: f64| {
            let k = ((x - x0) / (n as f64 * w) * n as f64).floor();
            (0.0..n as f64).contains(&k).then_some(k as i64)
        };
        let mut raw = vec![vec![0.0; n]; n];
        for &(u, v) in &pts {
            raw[idx(u, u0, wu).unwrap() as usize][idx(v, v0, wv).unwrap() as usize] += 1.0;
        }
        let mut k2 = [[0.0; 7]; 7];
        let mut total = 0.0;
        for (a, row) in k2.iter_mut().enumerate() {
            for (b, k) in row.iter_mut().enumerate() {
                let (x, y) = (a as f64 - 3.0, b as f64 - 3.0);
                *k = (-(x * x + y * y) / (2.0 * 1.5 * 1.5)).exp();
                total += *k;
            }
        }
        let mass = |i: i64, j: i64| {
            let mut m = 0.0;
            for a in 0..7i64 {
                for b in 0..7i64 {
                    let (si, sj) = (i + a - 3, j + b - 3);
                    if (0..n as i64).contains(&si) && (0..n as i64).contains(&sj) {
                        m += raw[si as usize][sj as usize] * k2[a as usize][b as usize] / total;
                    }
                }
            }
            m
        };
        cands
            .iter()
            .filter(|c| {
                let (u, v) = rgb_to_uv(&c.gt.left).unwrap();
                matches!((idx(u, u0, wu), idx(v, v0, wv)), (Some(i), Some(j)) if mass(i, j) > 0.0)
            })
            .map(|c| c.image_id.clone())
            .collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn filter_matches_oracle(
            train in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 1..30),
            cands in prop::collection::vec((-1.5f64..1.5, -1.5f64..1.5), 20),
        ) {
            let train: Vec<_> = train.iter().enumerate().map(|(i, &(u, v))| sample(&format!("t{i}"), u, v)).collect();
            let cands: Vec<_> = cands.iter().enumerate().map(|(i, &(u, v))| sample(&format!("c{i}"), u, v)).collect();
            let h = GtUvHistogram::build(&train, 64, 7, 1.5).unwrap();
            let got: Vec<String> = expansion_filter(&cands, &h, 0.0).unwrap().into_iter().map(|s| s.image_id).collect();
            prop_assert_eq!(got, oracle_accepts(&train, &cands));
            prop_assert_eq!(expansion_filter(&train, &h, 0.0).unwrap().len(), train.len());
            prop_assert!((h.grid.sum() - h.raw.sum()).abs() < 1e-6);
        }

        #[test]
        fn blur_is_linear(a in prop::collection::vec(0.0f64..5.0, 100), b in prop::collection::vec(0.0f64..5.0, 100)) {
            let k = gaussian_kernel(7, 1.5);
            let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
            let lhs = blur(&sum, 10, &k);
            let ra = blur(&a, 10, &k);
            let rb = blur(&b, 10, &k);
            for i in 0..100 {
                prop_assert!((lhs[i] - ra[i] - rb[i]).abs() < 1e-6);
            }
        }
    }
}
