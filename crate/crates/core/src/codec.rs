//! Binary model-exchange format, used on the wire and for snapshots.
//!
//! All integers and floats are little-endian:
//!
//! ```text
//! u16  format version (1)
//! u32  tensor count
//! per tensor:
//!   u16  name length, then that many UTF-8 bytes
//!   u8   rank, then rank x u32 dimensions
//!   f64  values, row-major (product of dimensions)
//! ```
//!
//! No trailing bytes are allowed.

use thiserror::Error;

use crate::nn::CnnArch;
use crate::tensor::{ModelParams, Tensor, TensorError};

pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodecError {
    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u16, expected: u16 },
    #[error("payload truncated at byte {offset}: {needed} more bytes needed")]
    Truncated { offset: usize, needed: usize },
    #[error("{0} unexpected trailing bytes")]
    TrailingBytes(usize),
    #[error("tensor name is not valid UTF-8")]
    InvalidName,
    #[error("payload layout disagrees with the architecture: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Exact size of [`encode_params`]' output.
pub fn encoded_len(params: &ModelParams) -> usize {
    2 + 4
        + params
            .iter()
            .map(|(name, t)| 2 + name.len() + 1 + 4 * t.shape().len() + 8 * t.len())
            .sum::<usize>()
}

/// Serializes `params`.
///
/// # Panics
///
/// If a name exceeds 65,535 bytes or a tensor has more than 255 dimensions.
pub fn encode_params(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(encoded_len(params));
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        let name_len = u16::try_from(name.len()).expect("tensor name too long");
        let rank = u8::try_from(t.shape().len()).expect("tensor rank too large");
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(rank);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        let rest = self.bytes.len() - self.pos;
        if rest < n {
            return Err(CodecError::Truncated {
                offset: self.pos,
                needed: n - rest,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CodecError> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, CodecError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Decodes any well-formed payload without checking it against an architecture.
pub fn decode_params_any(bytes: &[u8]) -> Result<ModelParams, CodecError> {
    let mut r = Reader { bytes, pos: 0 };
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(CodecError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| CodecError::InvalidName)?
            .to_string();
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or(CodecError::Truncated {
                offset: r.pos,
                needed: usize::MAX,
            })?;
        let raw = r.take(n)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        entries.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(CodecError::TrailingBytes(bytes.len() - r.pos));
    }
    Ok(ModelParams::new(entries)?)
}

/// Decodes a payload and checks its `(name, shape)` sequence against `arch`.
pub fn decode_params(bytes: &[u8], arch: &CnnArch) -> Result<ModelParams, CodecError> {
    let params = decode_params_any(bytes)?;
    let expected = arch.layout();
    let got = params.layout();
    if expected != got {
        return Err(CodecError::ShapeMismatch(format!(
            "expected {expected:?}, got {got:?}"
        )));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_identical() {
        let arch = CnnArch::simple_cnn();
        let p = arch.init_params(42);
        let bytes = encode_params(&p);
        let q = decode_params(&bytes, &arch).unwrap();
        assert!(p.bit_eq(&q));
        assert_eq!(bytes, encode_params(&q));
    }

    #[test]
    fn payload_size_is_fixed_by_layout() {
        // header 6; per tensor 2 + name + 1 + 4*rank; values 8 each
        let names = [
            "conv1.weight",
            "conv1.bias",
            "conv2.weight",
            "conv2.bias",
            "fc1.weight",
            "fc1.bias",
            "fc2.weight",
            "fc2.bias",
        ];
        let ranks = [4, 1, 4, 1, 2, 1, 2, 1];
        let overhead: usize = 6 + names
            .iter()
            .zip(ranks)
            .map(|(n, r)| 3 + n.len() + 4 * r)
            .sum::<usize>();
        let arch = CnnArch::simple_cnn();
        for seed in 0..3 {
            let bytes = encode_params(&arch.init_params(seed));
            assert_eq!(bytes.len(), 8 * 21_840 + overhead);
            assert_eq!(bytes.len(), encoded_len(&arch.init_params(seed)));
        }
    }

    #[test]
    fn error_variants() {
        let arch = CnnArch::shrunken();
        let bytes = encode_params(&arch.init_params(1));
        assert!(matches!(
            decode_params(&bytes[..bytes.len() - 3], &arch),
            Err(CodecError::Truncated { .. })
        ));
        assert!(matches!(
            decode_params(&bytes[..1], &arch),
            Err(CodecError::Truncated { .. })
        ));
        let mut bad = bytes.clone();
        bad[0] = 9;
        assert!(matches!(
            decode_params(&bad, &arch),
            Err(CodecError::VersionMismatch {
                found: 9,
                expected: 1
            })
        ));
        let mut long = bytes.clone();
        long.push(0);
        assert_eq!(
            decode_params(&long, &arch),
            Err(CodecError::TrailingBytes(1))
        );
        assert!(matches!(
            decode_params(&bytes, &CnnArch::simple_cnn()),
            Err(CodecError::ShapeMismatch(_))
        ));
    }
}
