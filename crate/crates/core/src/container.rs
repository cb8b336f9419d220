//! RQTF: a minimal little-endian container for named tensors.
//!
//! ```text
//! magic        4 bytes  "RQTF"
//! version      u32      1
//! tensor_count u32
//! entries      tensor_count ×
//!     name_len    u32
//!     name        UTF-8 bytes
//!     dtype       u8     (0 = F32, 1 = F16, 2 = FP8E4M3)
//!     ndim        u8     (1..=4)
//!     dims        u32 × ndim
//!     payload_len u64    (must equal product(dims) × dtype width)
//!     payload
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor, MAX_DIMS};

pub const MAGIC: [u8; 4] = *b"RQTF";
pub const VERSION: u32 = 1;

const HEADER_TENSOR: &str = "<header>";

pub fn read_tensor_file(path: impl AsRef<Path>) -> Result<Vec<Tensor>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| Error::IoFailure {
        path: path.to_path_buf(),
        source,
    })?;
    decode_tensors(&bytes)
}

pub fn write_tensor_file(path: impl AsRef<Path>, tensors: &[Tensor]) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_tensors(tensors)?;
    fs::write(path, bytes).map_err(|source| Error::IoFailure {
        path: path.to_path_buf(),
        source,
    })
}

/// Serializes tensors into RQTF bytes.
pub fn encode_tensors(tensors: &[Tensor]) -> Result<Vec<u8>> {
    check_unique(tensors.iter().map(Tensor::name))?;
    let payload: usize = tensors
        .iter()
        .map(|t| 4 + t.name().len() + 2 + 4 * t.shape().len() + 8 + t.bytes().len())
        .sum();
    let mut out = Vec::with_capacity(12 + payload);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32_field(tensors.len(), HEADER_TENSOR, "tensor_count")?.to_le_bytes());
    for t in tensors {
        let name = t.name().as_bytes();
        out.extend_from_slice(&u32_field(name.len(), t.name(), "name_len")?.to_le_bytes());
        out.extend_from_slice(name);
        out.push(t.dtype().tag());
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&u32_field(d, t.name(), "dim")?.to_le_bytes());
        }
        out.extend_from_slice(&(t.bytes().len() as u64).to_le_bytes());
        out.extend_from_slice(t.bytes());
    }
    Ok(out)
}

fn u32_field(v: usize, tensor: &str, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::MalformedEntry {
        tensor: tensor.to_string(),
        offset: 0,
        detail: format!("{what} {v} does not fit in u32"),
    })
}

fn check_unique<'a>(names: impl Iterator<Item = &'a str>) -> Result<()> {
    let mut seen = HashSet::new();
    for n in names {
        if !seen.insert(n) {
            return Err(Error::DuplicateName { name: n.to_string() });
        }
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, tensor: &str, what: &str) -> Result<&'a [u8]> {
        let remaining = self.bytes.len() - self.pos;
        if n > remaining {
            return Err(Error::TruncatedPayload {
                tensor: tensor.to_string(),
                offset: self.pos as u64,
                detail: format!("need {n} bytes for {what}, {remaining} available"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, tensor: &str, what: &str) -> Result<u8> {
        Ok(self.take(1, tensor, what)?[0])
    }

    fn u32(&mut self, tensor: &str, what: &str) -> Result<u32> {
        let b = self.take(4, tensor, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, tensor: &str, what: &str) -> Result<u64> {
        let b = self.take(8, tensor, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

/// Parses RQTF bytes, validating every tensor invariant.
pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<Tensor>> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4, HEADER_TENSOR, "magic").map_err(|_| {
        let mut found = [0u8; 4];
        found[..bytes.len().min(4)].copy_from_slice(&bytes[..bytes.len().min(4)]);
        Error::BadMagic { found }
    })?;
    if magic != MAGIC {
        return Err(Error::BadMagic {
            found: magic.try_into().expect("4 bytes"),
        });
    }
    let version = cur.u32(HEADER_TENSOR, "version")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion { found: version });
    }
    let count = cur.u32(HEADER_TENSOR, "tensor_count")? as usize;

    // Every entry needs at least 14 bytes; don't trust `count` for allocation.
    let mut tensors = Vec::with_capacity(count.min(bytes.len() / 14));
    let mut seen = HashSet::new();
    for i in 0..count {
        let placeholder = format!("<entry {i}>");
        let entry_offset = cur.pos as u64;
        let name_len = cur.u32(&placeholder, "name_len")? as usize;
        let name_bytes = cur.take(name_len, &placeholder, "name")?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| Error::MalformedEntry {
                tensor: placeholder.clone(),
                offset: entry_offset,
                detail: "name is not valid UTF-8".into(),
            })?
            .to_string();
        let tag_offset = cur.pos as u64;
        let tag = cur.u8(&name, "dtype")?;
        let dtype = DType::from_tag(tag).ok_or_else(|| Error::MalformedEntry {
            tensor: name.clone(),
            offset: tag_offset,
            detail: format!("unknown dtype tag {tag}"),
        })?;
        let ndim = cur.u8(&name, "ndim")? as usize;
        if ndim == 0 || ndim > MAX_DIMS {
            return Err(Error::MalformedEntry {
                tensor: name,
                offset: tag_offset + 1,
                detail: format!("ndim {ndim} outside 1..={MAX_DIMS}"),
            });
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(cur.u32(&name, "dims")? as usize);
        }
        let len_offset = cur.pos as u64;
        let payload_len = cur.u64(&name, "payload_len")?;
        let expected = shape
            .iter()
            .try_fold(dtype.width() as u64, |acc, &d| acc.checked_mul(d as u64));
        if expected != Some(payload_len) {
            return Err(Error::TruncatedPayload {
                tensor: name,
                offset: len_offset,
                detail: format!(
                    "payload_len {payload_len} disagrees with dims {shape:?} × {} bytes",
                    dtype.width()
                ),
            });
        }
        let payload_len = usize::try_from(payload_len).map_err(|_| Error::TruncatedPayload {
            tensor: name.clone(),
            offset: len_offset,
            detail: "payload_len exceeds address space".into(),
        })?;
        let payload = cur.take(payload_len, &name, "payload")?;
        if !seen.insert(name.clone()) {
            return Err(Error::DuplicateName { name });
        }
        tensors.push(Tensor::new(name, dtype, shape, payload.to_vec())?);
    }
    if cur.pos != bytes.len() {
        return Err(Error::MalformedEntry {
            tensor: HEADER_TENSOR.into(),
            offset: cur.pos as u64,
            detail: format!("{} trailing bytes after last entry", bytes.len() - cur.pos),
        });
    }
    Ok(tensors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Vec<Tensor> {
        vec![
            Tensor::from_f32("w", vec![2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap(),
            Tensor::from_f32_as_f16("h", vec![3], &[0.5, -1.0, 7.25]).unwrap(),
            Tensor::from_fp8_codes("q", vec![1, 2, 2], vec![0x00, 0x7E, 0xFF, 0x38]).unwrap(),
        ]
    }

    #[test]
    fn single_tensor_layout() {
        let t = Tensor::from_f32("w", vec![2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let bytes = encode_tensors(std::slice::from_ref(&t)).unwrap();
        assert_eq!(&bytes[..4], b"RQTF");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &1u32.to_le_bytes());
        assert_eq!(bytes[16], b'w');
        assert_eq!(bytes[17], 0);
        assert_eq!(bytes[18], 2);
        assert_eq!(&bytes[27..35], &16u64.to_le_bytes());
        assert_eq!(bytes.len(), 35 + 16);
        assert_eq!(decode_tensors(&bytes).unwrap(), vec![t]);
    }

    #[test]
    fn empty_file() {
        let bytes = encode_tensors(&[]).unwrap();
        assert_eq!(bytes.len(), 12);
        assert!(decode_tensors(&bytes).unwrap().is_empty());
    }

    #[test]
    fn mixed_round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.rqtf");
        let ts = sample();
        write_tensor_file(&path, &ts).unwrap();
        assert_eq!(read_tensor_file(&path).unwrap(), ts);
    }

    #[test]
    fn truncation_by_one_byte() {
        let mut bytes = encode_tensors(&sample()).unwrap();
        bytes.pop();
        let err = decode_tensors(&bytes).unwrap_err();
        assert!(matches!(err, Error::TruncatedPayload { ref tensor, .. } if tensor == "q"), "{err}");
    }

    #[test]
    fn payload_len_disagreeing_with_dims() {
        let mut bytes = encode_tensors(&sample()[..1]).unwrap();
        bytes[27] = 15;
        assert!(matches!(decode_tensors(&bytes).unwrap_err(), Error::TruncatedPayload { .. }));
    }

    #[test]
    fn header_errors() {
        let mut bytes = encode_tensors(&sample()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode_tensors(&bytes).unwrap_err(), Error::BadMagic { .. }));
        assert!(matches!(decode_tensors(b"RQ").unwrap_err(), Error::BadMagic { .. }));
        let mut bytes = encode_tensors(&sample()).unwrap();
        bytes[4] = 2;
        assert!(matches!(
            decode_tensors(&bytes).unwrap_err(),
            Error::UnsupportedVersion { found: 2 }
        ));
    }

    #[test]
    fn duplicate_names() {
        let t = Tensor::from_f32("a", vec![1], &[1.0]).unwrap();
        let ts = vec![t.clone(), t];
        assert!(matches!(encode_tensors(&ts).unwrap_err(), Error::DuplicateName { .. }));
        // Forge a file with a duplicate by patching the second name.
        let ts = vec![
            Tensor::from_f32("a", vec![1], &[1.0]).unwrap(),
            Tensor::from_f32("b", vec![1], &[1.0]).unwrap(),
        ];
        let mut bytes = encode_tensors(&ts).unwrap();
        let second_name = 12 + (4 + 1 + 2 + 4 + 8 + 4) + 4;
        assert_eq!(bytes[second_name], b'b');
        bytes[second_name] = b'a';
        assert!(matches!(decode_tensors(&bytes).unwrap_err(), Error::DuplicateName { .. }));
    }

    #[test]
    fn non_finite_payload() {
        let t = Tensor::from_f32("w", vec![2], &[1.0, 2.0]).unwrap();
        let mut bytes = encode_tensors(&[t]).unwrap();
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&f32::INFINITY.to_le_bytes());
        assert!(matches!(
            decode_tensors(&bytes).unwrap_err(),
            Error::NonFiniteData { index: 1, .. }
        ));
    }

    #[test]
    fn trailing_bytes() {
        let mut bytes = encode_tensors(&sample()).unwrap();
        bytes.push(0);
        assert!(matches!(decode_tensors(&bytes).unwrap_err(), Error::MalformedEntry { .. }));
    }

    #[test]
    fn f16_patterns_survive() {
        let t = Tensor::from_f32_as_f16("h", vec![2], &[0.1, 0.2]).unwrap();
        let back = decode_tensors(&encode_tensors(std::slice::from_ref(&t)).unwrap()).unwrap();
        let expected: Vec<u16> = [0.1f32, 0.2]
            .iter()
            .map(|&v| half::f16::from_f32(v).to_bits())
            .collect();
        assert_eq!(back[0].f16_bits().unwrap(), expected);
    }

    proptest! {
        #[test]
        fn every_truncation_is_a_structured_error(cut in 0usize..200) {
            let bytes = encode_tensors(&sample()).unwrap();
            let cut = cut % bytes.len();
            prop_assert!(decode_tensors(&bytes[..cut]).is_err());
        }

        #[test]
        fn random_bytes_never_panic(mut bytes in proptest::collection::vec(any::<u8>(), 0..128)) {
            if bytes.len() >= 8 {
                bytes[..4].copy_from_slice(b"RQTF");
                bytes[4..8].copy_from_slice(&1u32.to_le_bytes());
            }
            let _ = decode_tensors(&bytes);
        }

        #[test]
        fn round_trip(values in proptest::collection::vec(-1e6f32..1e6, 1..64), codes in proptest::collection::vec(any::<u8>(), 1..32)) {
            let ts = vec![
                Tensor::from_f32("a", vec![values.len()], &values).unwrap(),
                Tensor::from_f32_as_f16("b", vec![values.len()], &values).unwrap(),
                Tensor::from_fp8_codes("c", vec![codes.len()], codes.clone()).unwrap(),
            ];
            let bytes = encode_tensors(&ts).unwrap();
            prop_assert_eq!(decode_tensors(&bytes).unwrap(), ts);
        }
    }
}
