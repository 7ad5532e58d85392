//! Binary PPM (P6) images, 8 or 16 bits per sample.

use std::fs;
use std::path::Path;

use crate::error::{AwbError, Result};
use crate::tensor::{Real, Tensor};

fn image_err(path: &Path, msg: impl Into<String>) -> AwbError {
    AwbError::Image {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Reads the next whitespace-delimited header token, skipping `#` comments.
fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
        *pos += 1;
    }
    (*pos > start).then(|| &bytes[start..*pos])
}

/// Decodes a P6 image into `[3, H, W]` with values `sample / maxval`.
pub fn decode_ppm<T: Real>(bytes: &[u8], path: &Path) -> Result<Tensor<T>> {
    let mut pos = 0;
    if next_token(bytes, &mut pos) != Some(b"P6") {
        return Err(image_err(path, "not a binary PPM (magic P6 expected)"));
    }
    let mut num = |what: &str| -> Result<usize> {
        next_token(bytes, &mut pos)
            .and_then(|t| std::str::from_utf8(t).ok()?.parse().ok())
            .ok_or_else(|| image_err(path, format!("invalid or missing {what} in header")))
    };
    let (w, h, maxval) = (num("width")?, num("height")?, num("maxval")?);
    if w == 0 || h == 0 {
        return Err(image_err(path, format!("empty image {w}x{h}")));
    }
    if maxval != 255 && maxval != 65535 {
        return Err(image_err(
            path,
            format!("unsupported maxval {maxval} (255 or 65535)"),
        ));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let bps = if maxval == 255 { 1 } else { 2 };
    let n = w * h;
    let raster = bytes.get(pos..pos + 3 * n * bps).ok_or_else(|| {
        image_err(
            path,
            format!("truncated raster: need {} bytes", 3 * n * bps),
        )
    })?;
    let scale = 1.0 / maxval as f64;
    let mut data = vec![T::zero(); 3 * n];
    for p in 0..n {
        for c in 0..3 {
            let i = (3 * p + c) * bps;
            let s = if bps == 1 {
                raster[i] as u32
            } else {
                u16::from_be_bytes([raster[i], raster[i + 1]]) as u32
            };
            data[c * n + p] = T::lit(s as f64 * scale);
        }
    }
    Tensor::new(&[3, h, w], data)
}

pub fn load_image<T: Real>(path: &Path) -> Result<Tensor<T>> {
    let bytes = fs::read(path).map_err(|e| image_err(path, e.to_string()))?;
    decode_ppm(&bytes, path)
}

/// Encodes `[3, H, W]` values in `[0, 1]` (clamped) at the given maxval.
pub fn encode_ppm<T: Real>(image: &Tensor<T>, maxval: u16) -> Result<Vec<u8>> {
    let (c, h, w) = image.chw()?;
    if c != 3 {
        return Err(AwbError::shape(
            "encode_ppm",
            "image must have 3 channels",
            &[image.shape()],
        ));
    }
    if maxval != 255 && maxval != 65535 {
        return Err(AwbError::InvalidArgument(format!(
            "unsupported maxval {maxval}"
        )));
    }
    let mut out = format!("P6\n{w} {h}\n{maxval}\n").into_bytes();
    let n = h * w;
    let m = maxval as f64;
    for p in 0..n {
        for ch in 0..3 {
            let v = image.data()[ch * n + p].as_f64();
            let s = (v.clamp(0.0, 1.0) * m).round() as u16;
            if maxval == 255 {
                out.push(s as u8);
            } else {
                out.extend_from_slice(&s.to_be_bytes());
            }
        }
    }
    Ok(out)
}

pub fn save_image<T: Real>(path: &Path, image: &Tensor<T>, maxval: u16) -> Result<()> {
    fs::write(path, encode_ppm(image, maxval)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn p() -> &'static Path {
        Path::new("mem.ppm")
    }

    #[test]
    fn decodes_8_and_16_bit() {
        let mut b = b"P6\n1 1\n255\n".to_vec();
        b.extend([255, 0, 0]);
        let t = decode_ppm::<f64>(&b, p()).unwrap();
        assert_eq!(t.shape(), &[3, 1, 1]);
        assert_eq!(t.data(), &[1.0, 0.0, 0.0]);
        let mut b = b"P6 # comment\n1 # more\n 1\n65535\n".to_vec();
        b.extend([0xff; 6]);
        assert_eq!(decode_ppm::<f64>(&b, p()).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(decode_ppm::<f32>(b"P3\n1 1\n255\n0 0 0", p()).is_err());
        assert!(decode_ppm::<f32>(b"P6\n1 1\n1023\n\0\0\0\0\0\0", p()).is_err());
        let err = decode_ppm::<f32>(b"P6\n2 1\n255\n\0\0\0", p())
            .unwrap_err()
            .to_string();
        assert!(err.contains("truncated"), "{err}");
    }

    #[test]
    fn round_trip_is_lossless_at_bit_depth() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for maxval in [255u16, 65535] {
            let t = Tensor::<f64>::rand_uniform(&[3, 5, 7], 0.0, 1.0, &mut rng);
            let q = t.map(|v| (v * maxval as f64).round() / maxval as f64);
            let bytes = encode_ppm(&q, maxval).unwrap();
            let back = decode_ppm::<f64>(&bytes, p()).unwrap();
            assert_eq!(back.shape(), &[3, 5, 7]);
            for (a, b) in back.data().iter().zip(q.data()) {
                assert!((a - b).abs() < 1e-12);
            }
            assert_eq!(encode_ppm(&back, maxval).unwrap(), bytes);
        }
    }
}
