//! `EFAW` checkpoint format, version 1. All integers little-endian:
//!
//! ```text
//! magic "EFAW" | version u32 = 1 | tensor count u32
//! per tensor: name_len u16 | name (UTF-8) | dtype u8 (0 = fp32, 1 = fp16)
//!             | ndim u8 | dims u32 * ndim | payload
//! ```
//!
//! Records follow each other with no padding.

use std::collections::HashSet;
use std::path::Path;

use half::f16;
use thiserror::Error;

use crate::error::{Error, Result};
use crate::nn::Module;

pub const MAGIC: [u8; 4] = *b"EFAW";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Precision {
    Fp32,
    Fp16,
}

impl Precision {
    pub fn code(self) -> u8 {
        match self {
            Precision::Fp32 => 0,
            Precision::Fp16 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Precision::Fp32),
            1 => Some(Precision::Fp16),
            _ => None,
        }
    }

    pub fn bytes_per_value(self) -> usize {
        match self {
            Precision::Fp32 => 4,
            Precision::Fp16 => 2,
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "fp32" => Ok(Precision::Fp32),
            "fp16" => Ok(Precision::Fp16),
            other => Err(format!("unknown precision {other:?} (expected fp32 or fp16)")),
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Precision::Fp32 => "fp32",
            Precision::Fp16 => "fp16",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub dtype: Precision,
    /// Values widened to f32.
    pub data: Vec<f32>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WeightFileError {
    #[error("bad magic {found:02x?} at byte {offset}")]
    BadMagic { offset: usize, found: Vec<u8> },
    #[error("unsupported format version {found} at byte {offset}")]
    VersionMismatch { offset: usize, found: u32 },
    #[error("file truncated at byte {offset}: needed {needed} more bytes")]
    Truncated { offset: usize, needed: usize },
    #[error("duplicate tensor name {name:?} at byte {offset}")]
    DuplicateName { offset: usize, name: String },
    #[error("unknown dtype code {code} at byte {offset}")]
    BadDtype { offset: usize, code: u8 },
    #[error("tensor name is not UTF-8 at byte {offset}")]
    BadName { offset: usize },
    #[error("tensor size overflows at byte {offset}")]
    SizeOverflow { offset: usize },
    #[error("{count} unexpected trailing bytes at byte {offset}")]
    TrailingBytes { offset: usize, count: usize },
    #[error("cannot encode tensor {name:?}: {reason}")]
    Unencodable { name: String, reason: String },
}

/// Encoded size of one record.
pub fn record_len(name: &str, dims: &[usize], precision: Precision) -> usize {
    let numel: usize = dims.iter().product();
    2 + name.len() + 1 + 1 + 4 * dims.len() + numel * precision.bytes_per_value()
}

/// Exact file size [`write_weights`] would produce for `module`.
pub fn encoded_len<M: Module<f32> + ?Sized>(module: &M, precision: Precision) -> usize {
    let mut total = HEADER_LEN;
    module.visit_params("", &mut |name, dims, _| total += record_len(name, dims, precision));
    total
}

pub fn collect_tensors<M: Module<f32> + ?Sized>(module: &M) -> Vec<NamedTensor> {
    let mut out = Vec::new();
    module.visit_params("", &mut |name, dims, data| {
        out.push(NamedTensor {
            name: name.to_string(),
            dims: dims.to_vec(),
            dtype: Precision::Fp32,
            data: data.to_vec(),
        })
    });
    out
}

pub fn encode(tensors: &[NamedTensor], precision: Precision) -> std::result::Result<Vec<u8>, WeightFileError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(tensors.len()).map_err(|_| WeightFileError::Unencodable {
        name: String::new(),
        reason: "more than u32::MAX tensors".into(),
    })?;
    buf.extend_from_slice(&count.to_le_bytes());
    let mut seen = HashSet::new();
    for t in tensors {
        let bad = |reason: &str| WeightFileError::Unencodable {
            name: t.name.clone(),
            reason: reason.into(),
        };
        if !seen.insert(t.name.as_str()) {
            return Err(WeightFileError::DuplicateName {
                offset: buf.len(),
                name: t.name.clone(),
            });
        }
        let name_len = u16::try_from(t.name.len()).map_err(|_| bad("name longer than 65535 bytes"))?;
        let ndim = u8::try_from(t.dims.len()).map_err(|_| bad("more than 255 dims"))?;
        if t.dims.iter().product::<usize>() != t.data.len() {
            return Err(bad("dims do not match payload length"));
        }
        buf.extend_from_slice(&name_len.to_le_bytes());
        buf.extend_from_slice(t.name.as_bytes());
        buf.push(precision.code());
        buf.push(ndim);
        for &d in &t.dims {
            let d = u32::try_from(d).map_err(|_| bad("dimension exceeds u32"))?;
            buf.extend_from_slice(&d.to_le_bytes());
        }
        match precision {
            Precision::Fp32 => t.data.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes())),
            Precision::Fp16 => t
                .data
                .iter()
                .for_each(|v| buf.extend_from_slice(&f16::from_f32(*v).to_le_bytes())),
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], WeightFileError> {
        let remaining = self.bytes.len() - self.pos;
        if n > remaining {
            return Err(WeightFileError::Truncated {
                offset: self.pos,
                needed: n - remaining,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> std::result::Result<u8, WeightFileError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> std::result::Result<u16, WeightFileError> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> std::result::Result<u32, WeightFileError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Vec<NamedTensor>, WeightFileError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4).map_err(|_| WeightFileError::BadMagic {
        offset: 0,
        found: bytes[..bytes.len().min(4)].to_vec(),
    })?;
    if magic != MAGIC {
        return Err(WeightFileError::BadMagic {
            offset: 0,
            found: magic.to_vec(),
        });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(WeightFileError::VersionMismatch {
            offset: 4,
            found: version,
        });
    }
    let count = r.u32()? as usize;
    let mut seen = HashSet::new();
    // Cap the preallocation: the count field is untrusted.
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let start = r.pos;
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| WeightFileError::BadName { offset: start + 2 })?
            .to_string();
        if seen.contains(&name) {
            return Err(WeightFileError::DuplicateName { offset: start, name });
        }
        let dtype_at = r.pos;
        let code = r.u8()?;
        let dtype = Precision::from_code(code).ok_or(WeightFileError::BadDtype { offset: dtype_at, code })?;
        let ndim = r.u8()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u32()? as usize);
        }
        let payload_at = r.pos;
        let payload_len = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(dtype.bytes_per_value()))
            .ok_or(WeightFileError::SizeOverflow { offset: payload_at })?;
        let payload = r.take(payload_len)?;
        let data = match dtype {
            Precision::Fp32 => payload
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect(),
            Precision::Fp16 => payload
                .chunks_exact(2)
                .map(|b| f16::from_le_bytes([b[0], b[1]]).to_f32())
                .collect(),
        };
        seen.insert(name.clone());
        out.push(NamedTensor {
            name,
            dims,
            dtype,
            data,
        });
    }
    if r.pos != bytes.len() {
        return Err(WeightFileError::TrailingBytes {
            offset: r.pos,
            count: bytes.len() - r.pos,
        });
    }
    Ok(out)
}

pub fn write_weights<M: Module<f32> + ?Sized>(module: &M, path: &Path, precision: Precision) -> Result<()> {
    let bytes = encode(&collect_tensors(module), precision)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_weights(path: &Path) -> Result<Vec<NamedTensor>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode(&bytes)?)
}

/// Copy `tensors` into `module`, requiring an exact name and shape match.
pub fn load_into<M: Module<f32> + ?Sized>(module: &mut M, tensors: &[NamedTensor]) -> Result<()> {
    let mut by_name: std::collections::HashMap<&str, &NamedTensor> =
        tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    let mut problem: Option<String> = None;
    module.visit_params_mut("", &mut |name, dims, data| {
        if problem.is_some() {
            return;
        }
        match by_name.remove(name) {
            None => problem = Some(format!("checkpoint lacks tensor {name:?}")),
            Some(t) if t.dims != dims => {
                problem = Some(format!("tensor {name:?} has dims {:?}, model expects {dims:?}", t.dims))
            }
            Some(t) => data.copy_from_slice(&t.data),
        }
    });
    if let Some(p) = problem {
        return Err(Error::Input(p));
    }
    if let Some(extra) = by_name.keys().min() {
        return Err(Error::Input(format!("checkpoint has unexpected tensor {extra:?}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(name: &str, dims: Vec<usize>, data: Vec<f32>) -> NamedTensor {
        NamedTensor {
            name: name.into(),
            dims,
            dtype: Precision::Fp32,
            data,
        }
    }

    #[test]
    fn empty_file_is_twelve_bytes() {
        let b = encode(&[], Precision::Fp32).unwrap();
        assert_eq!(b.len(), 12);
        assert_eq!(&b[..4], b"EFAW");
        assert_eq!(decode(&b).unwrap(), vec![]);
    }

    #[test]
    fn single_scalar_is_twenty_five_bytes() {
        let b = encode(&[one("w", vec![1], vec![1.0])], Precision::Fp32).unwrap();
        assert_eq!(b.len(), 12 + 2 + 1 + 1 + 1 + 4 + 4);
        assert_eq!(b.len(), 25);
        assert_eq!(b.len(), HEADER_LEN + record_len("w", &[1], Precision::Fp32));
    }

    #[test]
    fn fp16_payload_is_half() {
        let t = vec![one("a", vec![10, 100], vec![0.5; 1000])];
        let b32 = encode(&t, Precision::Fp32).unwrap().len();
        let b16 = encode(&t, Precision::Fp16).unwrap().len();
        assert_eq!(b32 - b16, 2000);
    }

    #[test]
    fn fp16_rounds_to_nearest_even() {
        // 1 + 2^-11 is halfway between 1 and the next binary16 value; ties go to even (1.0).
        let v = 1.0f32 + 2f32.powi(-11);
        let b = encode(&[one("x", vec![1], vec![v])], Precision::Fp16).unwrap();
        assert_eq!(decode(&b).unwrap()[0].data, vec![1.0]);
    }

    #[test]
    fn distinct_errors_with_offsets() {
        let good = encode(&[one("w", vec![2], vec![1.0, 2.0])], Precision::Fp32).unwrap();

        let mut bad = good.clone();
        bad[1] = b'X';
        assert!(matches!(decode(&bad), Err(WeightFileError::BadMagic { offset: 0, .. })));

        let mut bad = good.clone();
        bad[4] = 2;
        assert_eq!(
            decode(&bad),
            Err(WeightFileError::VersionMismatch { offset: 4, found: 2 })
        );

        assert!(matches!(
            decode(&good[..good.len() - 1]),
            Err(WeightFileError::Truncated { offset: 21, needed: 1 })
        ));

        let dup = [one("w", vec![1], vec![1.0]), one("w", vec![1], vec![2.0])];
        assert!(matches!(
            encode(&dup, Precision::Fp32),
            Err(WeightFileError::DuplicateName { .. })
        ));
        let mut twice = encode(&dup[..1], Precision::Fp32).unwrap();
        twice[8] = 2;
        twice.extend_from_slice(&encode(&dup[1..], Precision::Fp32).unwrap()[12..]);
        assert!(matches!(
            decode(&twice),
            Err(WeightFileError::DuplicateName { offset: 25, .. })
        ));
    }
}
