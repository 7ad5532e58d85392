//! Binary tensor container.
//!
//! Layout: the 8 magic bytes `SDEAWB01`, a little-endian `u32` header length,
//! a UTF-8 JSON header, then the raw little-endian payloads in header order.
//! The header carries free-form metadata plus `(name, shape, dtype, offset)`
//! per tensor, with offsets relative to the start of the payload section.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{AwbError, Result};
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 8] = b"SDEAWB01";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

impl Header {
    /// The single dtype shared by all tensors, if any.
    pub fn dtype(&self) -> Option<&str> {
        let first = self.tensors.first()?.dtype.as_str();
        self.tensors
            .iter()
            .all(|t| t.dtype == first)
            .then_some(first)
    }
}

pub fn encode<T: Real>(meta: serde_json::Value, tensors: &[(&str, &Tensor<T>)]) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut payload = Vec::new();
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: T::DTYPE.to_string(),
            offset: payload.len(),
        });
        for &v in t.data() {
            v.write_le(&mut payload);
        }
    }
    let header = serde_json::to_vec(&Header {
        meta,
        tensors: entries,
    })
    .map_err(|e| AwbError::Checkpoint(format!("header encoding failed: {e}")))?;
    let len =
        u32::try_from(header.len()).map_err(|_| AwbError::Checkpoint("header too large".into()))?;
    let mut out = Vec::with_capacity(12 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Splits a checkpoint into its header and payload section.
pub fn decode_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(AwbError::Checkpoint(
            "bad magic, not an SDEAWB01 file".into(),
        ));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = bytes
        .get(12..12 + len)
        .ok_or_else(|| AwbError::Checkpoint(format!("truncated header ({len} bytes declared)")))?;
    let header: Header = serde_json::from_slice(body)
        .map_err(|e| AwbError::Checkpoint(format!("invalid header: {e}")))?;
    Ok((header, &bytes[12 + len..]))
}

/// All tensors, in header order, as `T`. Fails if any stored dtype differs.
pub fn decode<T: Real>(bytes: &[u8]) -> Result<(Header, Vec<(String, Tensor<T>)>)> {
    let (header, payload) = decode_header(bytes)?;
    let mut out = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        if e.dtype != T::DTYPE {
            return Err(AwbError::Checkpoint(format!(
                "tensor `{}` has dtype {}, expected {}",
                e.name,
                e.dtype,
                T::DTYPE
            )));
        }
        let n: usize = e.shape.iter().product();
        let raw = payload
            .get(e.offset..e.offset + n * T::BYTES)
            .ok_or_else(|| AwbError::Checkpoint(format!("payload of `{}` is truncated", e.name)))?;
        let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
        out.push((e.name.clone(), Tensor::new(&e.shape, data)?));
    }
    Ok((header, out))
}

pub fn save<T: Real>(
    path: &Path,
    meta: serde_json::Value,
    tensors: &[(&str, &Tensor<T>)],
) -> Result<()> {
    fs::write(path, encode(meta, tensors)?)?;
    Ok(())
}

pub fn read_header(path: &Path) -> Result<Header> {
    let bytes = fs::read(path)?;
    Ok(decode_header(&bytes)?.0)
}

pub fn load<T: Real>(path: &Path) -> Result<(Header, Vec<(String, Tensor<T>)>)> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = Tensor::<f32>::randn(&[4, 3, 2], 1.0, &mut rng);
        let mut b = Tensor::<f32>::randn(&[5], 1.0, &mut rng);
        b.data_mut()[0] = -0.0;
        b.data_mut()[1] = f32::MIN_POSITIVE / 2.0;
        let meta = serde_json::json!({"step": 7});
        let bytes = encode(meta.clone(), &[("a", &a), ("b", &b)]).unwrap();
        assert_eq!(&bytes[..8], b"SDEAWB01");
        let (h, ts) = decode::<f32>(&bytes).unwrap();
        assert_eq!(h.meta, meta);
        assert_eq!(h.dtype(), Some("f32"));
        assert_eq!(ts[0].0, "a");
        for ((_, t), orig) in ts.iter().zip([&a, &b]) {
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(t), bits(orig));
            assert_eq!(t.shape(), orig.shape());
        }
        assert_eq!(
            encode(meta, &[("a", &ts[0].1), ("b", &ts[1].1)]).unwrap(),
            bytes
        );
    }

    #[test]
    fn rejects_corruption() {
        let t = Tensor::<f64>::from_slice(&[1.0, 2.0]);
        let bytes = encode(serde_json::Value::Null, &[("t", &t)]).unwrap();
        assert!(decode::<f64>(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode::<f32>(&bytes).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode::<f64>(&bad).is_err());
    }
}
