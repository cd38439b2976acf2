//! Binary weight-vector checkpoints.
//!
//! Layout: the magic bytes `FHWV`, a little-endian `u32` format version, a
//! little-endian `u64` parameter count, then that many little-endian IEEE-754
//! doubles.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::WeightVector;

pub const MAGIC: &[u8; 4] = b"FHWV";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8;

pub fn encode(w: &WeightVector) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * w.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(w.len() as u64).to_le_bytes());
    for v in w.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<WeightVector> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Checkpoint(format!(
            "truncated header ({} bytes)",
            bytes.len()
        )));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let body = &bytes[HEADER_LEN..];
    if (body.len() as u64) != count.saturating_mul(8) {
        return Err(Error::Checkpoint(format!(
            "header declares {count} parameters but body holds {} bytes",
            body.len()
        )));
    }
    Ok(WeightVector::new(
        body.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
    ))
}

pub fn save(w: &WeightVector, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(w)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<WeightVector> {
    let path = path.as_ref();
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let bytes = encode(&WeightVector::new(vec![1.5, -0.0]));
        assert_eq!(&bytes[..4], b"FHWV");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        assert_eq!(&bytes[8..16], &[2, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(&bytes[16..24], &1.5f64.to_le_bytes());
        assert_eq!(bytes.len(), 32);
    }

    #[test]
    fn roundtrip_preserves_bits() {
        let w = WeightVector::new(vec![f64::MIN_POSITIVE, -0.0, 3.25e300, f64::NAN]);
        let back = decode(&encode(&w)).unwrap();
        let bits = |v: &WeightVector| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&w), bits(&back));
    }

    #[test]
    fn rejects_corruption() {
        let mut bytes = encode(&WeightVector::new(vec![1.0, 2.0]));
        assert!(decode(&bytes[..20]).is_err());
        bytes[0] = b'X';
        assert!(decode(&bytes).is_err());
        let mut bytes = encode(&WeightVector::new(vec![1.0]));
        bytes[4] = 9;
        assert!(decode(&bytes).is_err());
    }
}
