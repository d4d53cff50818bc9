//! MSCL tensor container.
//!
//! ```text
//! "MSCL" | version: u32 LE | { name_len: u32 LE | name: UTF-8
//!                            | ndim: u32 LE | dims: u32 LE * ndim
//!                            | payload: f32 LE * prod(dims) }*
//! ```
//!
//! Records run until end of file. Payloads are always 32-bit floats.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{Float, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MSCL";
pub const VERSION: u32 = 1;

/// Serializes named tensors (cast to f32) into an MSCL byte buffer.
pub fn encode<T: Float>(entries: &[(String, Tensor<T>)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (name, t) in entries {
        let name_len = u32::try_from(name.len())
            .map_err(|_| Error::contract(format!("tensor name too long: {name}")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::contract("dimension exceeds u32"))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                reason: format!("truncated {what}: need {n} bytes, {} left", self.buf.len() - self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Parses an MSCL buffer into named f32 tensors, in file order.
pub fn decode(buf: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut cur = Cursor { buf, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            reason: format!("bad magic {magic:?}"),
        });
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: VERSION,
        });
    }
    let mut entries = Vec::new();
    while cur.pos < buf.len() {
        let start = cur.pos as u64;
        let name_len = cur.u32("name length")? as usize;
        let name = std::str::from_utf8(cur.take(name_len, "name")?)
            .map_err(|e| Error::Format {
                offset: start + 4,
                reason: format!("name is not UTF-8: {e}"),
            })?
            .to_string();
        let ndim = cur.u32("ndim")? as usize;
        let mut shape = Vec::with_capacity(ndim.min(16));
        for _ in 0..ndim {
            shape.push(cur.u32("dims")? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n.checked_mul(4).is_some())
            .ok_or_else(|| Error::Format {
                offset: start,
                reason: format!("tensor `{name}` shape {shape:?} overflows"),
            })?;
        let payload_at = cur.pos as u64;
        let raw = cur.take(numel * 4, "payload")?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Format {
            offset: payload_at,
            reason: format!("tensor `{name}`: {e}"),
        })?;
        entries.push((name, t));
    }
    Ok(entries)
}

pub fn write_file<T: Float>(path: impl AsRef<Path>, entries: &[(String, Tensor<T>)]) -> Result<()> {
    let bytes = encode(entries)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

pub fn read_file(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor<f32>)>> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<(String, Tensor<f32>)> {
        vec![
            ("a/w".into(), Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.25, 0.0, 1e-30, -7.0]).unwrap()),
            ("b".into(), Tensor::scalar(0.5)),
        ]
    }

    #[test]
    fn byte_layout() {
        let bytes = encode(&[("x".to_string(), Tensor::<f32>::vector(vec![1.0]).unwrap())]).unwrap();
        let mut expected = b"MSCL".to_vec();
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.push(b'x');
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn round_trip() {
        let entries = sample();
        let back = decode(&encode(&entries).unwrap()).unwrap();
        assert_eq!(back, entries);
    }

    #[test]
    fn truncation_is_a_format_error() {
        let bytes = encode(&sample()).unwrap();
        for cut in [2, 6, 9, bytes.len() - 1] {
            match decode(&bytes[..cut]) {
                Err(Error::Format { .. }) => {}
                other => panic!("cut {cut}: expected format error, got {other:?}"),
            }
        }
    }

    #[test]
    fn version_bump_rejected() {
        let mut bytes = encode(&sample()).unwrap();
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            decode(&bytes),
            Err(Error::UnsupportedVersion { found: 2, expected: 1 })
        ));
    }

    #[test]
    fn bad_magic() {
        let mut bytes = encode(&sample()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(Error::Format { offset: 0, .. })));
    }
}
