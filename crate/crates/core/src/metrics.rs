//! Chromaticity transforms, angular errors and error statistics.
//!
//! All quantities here are `f64`; reported errors are in degrees.

use serde::{Deserialize, Serialize};

use crate::error::{AwbError, Result};
use crate::tensor::{Real, Tensor};

/// Linear RGB response of a light source. Only the direction matters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IlluminantVector {
    pub r: f64,
    pub g: f64,
    pub b: f64,
}

impl IlluminantVector {
    pub fn new(r: f64, g: f64, b: f64) -> Result<Self> {
        let c = IlluminantVector { r, g, b };
        c.validate()?;
        Ok(c)
    }

    pub fn from_array(a: [f64; 3]) -> Result<Self> {
        Self::new(a[0], a[1], a[2])
    }

    pub fn achromatic() -> Self {
        let s = 1.0 / 3f64.sqrt();
        IlluminantVector { r: s, g: s, b: s }
    }

    pub fn validate(&self) -> Result<()> {
        let a = self.to_array();
        if a.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(AwbError::domain(
                "illuminant",
                format!("components must be finite and non-negative, got {a:?}"),
            ));
        }
        if a.iter().all(|&v| v == 0.0) {
            return Err(AwbError::domain("illuminant", "zero vector"));
        }
        Ok(())
    }

    pub fn to_array(&self) -> [f64; 3] {
        [self.r, self.g, self.b]
    }

    pub fn norm(&self) -> f64 {
        (self.r * self.r + self.g * self.g + self.b * self.b).sqrt()
    }

    pub fn normalized(&self) -> Self {
        let n = self.norm();
        IlluminantVector {
            r: self.r / n,
            g: self.g / n,
            b: self.b / n,
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        IlluminantVector {
            r: self.r * s,
            g: self.g * s,
            b: self.b * s,
        }
    }

    /// Componentwise product.
    pub fn hadamard(&self, o: &IlluminantVector) -> Self {
        IlluminantVector {
            r: self.r * o.r,
            g: self.g * o.g,
            b: self.b * o.b,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoIlluminantLabel {
    pub left: IlluminantVector,
    pub right: IlluminantVector,
}

impl TwoIlluminantLabel {
    /// Single-illuminant label: the same vector on both sides.
    pub fn single(c: IlluminantVector) -> Self {
        TwoIlluminantLabel { left: c, right: c }
    }

    pub fn swapped(&self) -> Self {
        TwoIlluminantLabel {
            left: self.right,
            right: self.left,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub trimean: f64,
    pub worst25_mean: f64,
    pub mean_squared: Option<f64>,
}

/// `(u, v) = (ln(g/r), ln(g/b))`.
pub fn rgb_to_uv(c: &IlluminantVector) -> Result<(f64, f64)> {
    for (name, v) in [("r", c.r), ("g", c.g), ("b", c.b)] {
        if v.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(AwbError::domain(
                "rgb_to_uv",
                format!("channel {name} = {v} is not positive"),
            ));
        }
    }
    Ok(((c.g / c.r).ln(), (c.g / c.b).ln()))
}

/// Inverse of [`rgb_to_uv`] with `g = 1`, normalized to unit length.
pub fn uv_to_rgb(u: f64, v: f64) -> IlluminantVector {
    IlluminantVector {
        r: (-u).exp(),
        g: 1.0,
        b: (-v).exp(),
    }
    .normalized()
}

/// Angle in degrees between two arbitrary non-zero 3-vectors.
pub fn angle_between(a: [f64; 3], b: [f64; 3]) -> Result<f64> {
    let na = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    let nb = (b[0] * b[0] + b[1] * b[1] + b[2] * b[2]).sqrt();
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return Err(AwbError::domain(
            "angular_error",
            "zero or non-finite vector",
        ));
    }
    let (a, b) = (a.map(|v| v / na), b.map(|v| v / nb));
    let dot = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let cross = [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ];
    let sin = (cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2]).sqrt();
    Ok(sin.atan2(dot).to_degrees())
}

/// Recovery angular error in degrees.
pub fn angular_error(a: &IlluminantVector, b: &IlluminantVector) -> Result<f64> {
    angle_between(a.to_array(), b.to_array())
}

/// Half the left error plus half the right error, fixed assignment.
pub fn two_illum_error(pred: &TwoIlluminantLabel, gt: &TwoIlluminantLabel) -> Result<f64> {
    Ok(0.5 * angular_error(&pred.left, &gt.left)? + 0.5 * angular_error(&pred.right, &gt.right)?)
}

/// Per-vector error used inside [`min_squared_sum_error_with`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ErrorKind {
    Recovery,
    Reproduction,
}

impl ErrorKind {
    pub fn eval(self, pred: &IlluminantVector, gt: &IlluminantVector) -> Result<f64> {
        match self {
            ErrorKind::Recovery => angular_error(pred, gt),
            ErrorKind::Reproduction => reproduction_error(pred, gt),
        }
    }
}

/// Smallest `e1^2 + e2^2` over the straight and swapped left/right
/// assignments, using recovery errors. Degrees squared.
pub fn min_squared_sum_error(pred: &TwoIlluminantLabel, gt: &TwoIlluminantLabel) -> Result<f64> {
    min_squared_sum_error_with(pred, gt, ErrorKind::Recovery)
}

pub fn min_squared_sum_error_with(
    pred: &TwoIlluminantLabel,
    gt: &TwoIlluminantLabel,
    kind: ErrorKind,
) -> Result<f64> {
    let sq = |p: &IlluminantVector, g: &IlluminantVector| kind.eval(p, g).map(|e| e * e);
    let straight = sq(&pred.left, &gt.left)? + sq(&pred.right, &gt.right)?;
    let swapped = sq(&pred.left, &gt.right)? + sq(&pred.right, &gt.left)?;
    Ok(straight.min(swapped))
}

/// Angle between the componentwise quotient `gt / pred` and the achromatic
/// axis: the cast left on a white surface after correcting with `pred`.
pub fn reproduction_error(pred: &IlluminantVector, gt: &IlluminantVector) -> Result<f64> {
    if [pred.r, pred.g, pred.b].iter().any(|&v| v <= 0.0) {
        return Err(AwbError::domain(
            "reproduction_error",
            format!(
                "prediction {:?} has a non-positive component",
                pred.to_array()
            ),
        ));
    }
    angle_between(
        [gt.r / pred.r, gt.g / pred.g, gt.b / pred.b],
        [1.0, 1.0, 1.0],
    )
}

/// Linear-interpolation quantile of sorted data, `h = (n - 1) p`.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Mean, median, trimean `(Q1 + 2 Q2 + Q3) / 4` and the mean of the
/// `ceil(n / 4)` largest values. Quartiles use linear interpolation.
pub fn summarize(errors: &[f64], with_squared: bool) -> Result<ErrorStats> {
    if errors.is_empty() {
        return Err(AwbError::InvalidArgument(
            "summarize: empty error list".into(),
        ));
    }
    if errors.iter().any(|e| !e.is_finite()) {
        return Err(AwbError::NonFinite("summarize input".into()));
    }
    let mut s = errors.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let mean = s.iter().sum::<f64>() / n as f64;
    let q1 = quantile_sorted(&s, 0.25);
    let median = quantile_sorted(&s, 0.5);
    let q3 = quantile_sorted(&s, 0.75);
    let k = n.div_ceil(4);
    let worst25_mean = s[n - k..].iter().sum::<f64>() / k as f64;
    let mean_squared = with_squared.then(|| s.iter().map(|e| e * e).sum::<f64>() / n as f64);
    Ok(ErrorStats {
        count: n,
        mean,
        median,
        trimean: (q1 + 2.0 * median + q3) / 4.0,
        worst25_mean,
        mean_squared,
    })
}

/// Divides each channel by the normalized illuminant and rescales by its
/// green component, so a pixel equal to the illuminant maps to gray at its
/// original green level.
pub fn color_correct<T: Real>(image: &Tensor<T>, illum: &IlluminantVector) -> Result<Tensor<T>> {
    let (c, _, _) = image.chw()?;
    if c != 3 {
        return Err(AwbError::shape(
            "color_correct",
            "image must be [3, H, W]",
            &[image.shape()],
        ));
    }
    illum.validate()?;
    let n = illum.normalized();
    for (name, v) in [("r", n.r), ("g", n.g), ("b", n.b)] {
        if v <= 0.0 {
            return Err(AwbError::domain(
                "color_correct",
                format!("illuminant channel {name} is zero"),
            ));
        }
    }
    let gains = [n.g / n.r, 1.0, n.g / n.b];
    let plane = image.len() / 3;
    let mut out = image.clone();
    for (k, &gain) in gains.iter().enumerate() {
        let gain = T::lit(gain);
        out.data_mut()[k * plane..(k + 1) * plane]
            .iter_mut()
            .for_each(|v| *v *= gain);
    }
    Ok(out)
}

/// Per-channel mean of the image, normalized.
pub fn gray_world<T: Real>(image: &Tensor<T>) -> Result<IlluminantVector> {
    let (c, h, w) = image.chw()?;
    if c != 3 {
        return Err(AwbError::shape(
            "gray_world",
            "image must be [3, H, W]",
            &[image.shape()],
        ));
    }
    let plane = h * w;
    let mut means = [0.0f64; 3];
    for (k, m) in means.iter_mut().enumerate() {
        *m = image.data()[k * plane..(k + 1) * plane]
            .iter()
            .map(|v| v.as_f64())
            .sum::<f64>()
            / plane as f64;
    }
    IlluminantVector::from_array(means)
        .map(|c| c.normalized())
        .map_err(|_| {
            AwbError::domain(
                "gray_world",
                format!("image mean {means:?} is zero or negative"),
            )
        })
}
