//! Tensor data model shared by every module.
//!
//! Tensors are named, row-major byte buffers tagged with an element type.
//! FP16 is carried as IEEE binary16 bit patterns; all arithmetic happens in
//! F32 and values are rounded explicitly at storage boundaries with
//! [`f16_round`].

use std::fmt;

use crate::error::{Error, Result};
use crate::fp8;

/// Maximum supported tensor rank.
pub const MAX_DIMS: usize = 4;

/// Largest finite binary16 value.
pub const F16_MAX: f32 = 65504.0;

/// Smallest positive normal binary16 value, 2^-14.
pub const F16_MIN_NORMAL: f32 = 6.103_515_625e-5;

const F16_MAX_BITS: u16 = 0x7BFF;
const F16_NAN_BITS: u16 = 0x7E00;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F16,
    Fp8E4M3,
}

impl DType {
    /// Element width in bytes.
    pub const fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F16 => 2,
            DType::Fp8E4M3 => 1,
        }
    }

    /// Tag byte used by the RQTF container.
    pub const fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F16 => 1,
            DType::Fp8E4M3 => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(DType::F32),
            1 => Some(DType::F16),
            2 => Some(DType::Fp8E4M3),
            _ => None,
        }
    }

    pub const fn name(self) -> &'static str {
        match self {
            DType::F32 => "F32",
            DType::F16 => "F16",
            DType::Fp8E4M3 => "FP8E4M3",
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Rounds an `f32` to the nearest binary16 value (ties to even) and returns
/// its bit pattern.
///
/// Magnitudes at or above 65504 (including infinities) saturate to ±65504.
/// NaN maps to a quiet NaN with the input's sign.
pub fn f16_round(x: f32) -> u16 {
    let bits = x.to_bits();
    let sign = ((bits >> 16) & 0x8000) as u16;
    if x.is_nan() {
        return sign | F16_NAN_BITS;
    }
    let abs = x.abs();
    if abs >= F16_MAX {
        return sign | F16_MAX_BITS;
    }
    if abs < F16_MIN_NORMAL {
        // Subnormal range: the step is 2^-24, so scale and round to integer.
        // A result of 1024 is the smallest normal, which the encoding absorbs.
        let m = (abs * 16_777_216.0).round_ties_even() as u16;
        return sign | m;
    }
    let exp = ((bits >> 23) & 0xff) as i32 - 127 + 15;
    let mant = bits & 0x007f_ffff;
    let mut h = ((exp as u32) << 10) | (mant >> 13);
    let rem = mant & 0x1fff;
    if rem > 0x1000 || (rem == 0x1000 && h & 1 == 1) {
        h += 1;
    }
    sign | h as u16
}

/// Exact value of a binary16 bit pattern.
pub fn f16_to_f32(h: u16) -> f32 {
    let sign = ((h & 0x8000) as u32) << 16;
    let exp = ((h >> 10) & 0x1f) as u32;
    let mant = (h & 0x03ff) as u32;
    match exp {
        0 => {
            let v = mant as f32 * (1.0 / 16_777_216.0);
            if sign != 0 {
                -v
            } else {
                v
            }
        }
        0x1f => f32::from_bits(sign | 0x7f80_0000 | (mant << 13)),
        _ => f32::from_bits(sign | ((exp + 127 - 15) << 23) | (mant << 13)),
    }
}

/// Rounds through binary16 and back.
#[inline]
pub fn f16_quantize(x: f32) -> f32 {
    f16_to_f32(f16_round(x))
}

/// A named, shaped, row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    data: Vec<u8>,
}

fn check_shape(name: &str, shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.len() > MAX_DIMS {
        return Err(Error::InvalidShape {
            tensor: name.to_string(),
            shape: shape.to_vec(),
            detail: format!("rank must be between 1 and {MAX_DIMS}"),
        });
    }
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::InvalidShape {
            tensor: name.to_string(),
            shape: shape.to_vec(),
            detail: "element count overflows".into(),
        })
}

impl Tensor {
    /// Builds a tensor from raw bytes, validating length and finiteness.
    pub fn new(
        name: impl Into<String>,
        dtype: DType,
        shape: Vec<usize>,
        data: Vec<u8>,
    ) -> Result<Self> {
        let t = Self::from_raw_parts(name, dtype, shape, data)?;
        if let Some(index) = t.first_non_finite() {
            return Err(Error::NonFiniteData {
                tensor: t.name,
                index,
            });
        }
        Ok(t)
    }

    /// Builds a tensor without the finiteness check. Length and rank are
    /// still validated.
    pub fn from_raw_parts(
        name: impl Into<String>,
        dtype: DType,
        shape: Vec<usize>,
        data: Vec<u8>,
    ) -> Result<Self> {
        let name = name.into();
        let numel = check_shape(&name, &shape)?;
        let expected = numel.checked_mul(dtype.width());
        if expected != Some(data.len()) {
            return Err(Error::InvalidShape {
                tensor: name,
                shape,
                detail: format!(
                    "byte length {} does not match {} elements of {}",
                    data.len(),
                    numel,
                    dtype
                ),
            });
        }
        Ok(Self {
            name,
            dtype,
            shape,
            data,
        })
    }

    pub fn from_f32(name: impl Into<String>, shape: Vec<usize>, values: &[f32]) -> Result<Self> {
        let data = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Self::new(name, DType::F32, shape, data)
    }

    pub fn from_f16_bits(name: impl Into<String>, shape: Vec<usize>, bits: &[u16]) -> Result<Self> {
        let data = bits.iter().flat_map(|v| v.to_le_bytes()).collect();
        Self::new(name, DType::F16, shape, data)
    }

    /// Rounds each value with [`f16_round`] and stores the result as F16.
    pub fn from_f32_as_f16(
        name: impl Into<String>,
        shape: Vec<usize>,
        values: &[f32],
    ) -> Result<Self> {
        let bits: Vec<u16> = values.iter().map(|&v| f16_round(v)).collect();
        Self::from_f16_bits(name, shape, &bits)
    }

    pub fn from_fp8_codes(name: impl Into<String>, shape: Vec<usize>, codes: Vec<u8>) -> Result<Self> {
        Self::new(name, DType::Fp8E4M3, shape, codes)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn bytes(&self) -> &[u8] {
        &self.data
    }

    /// Decodes every element to `f32`, whatever the storage type.
    pub fn to_f32_vec(&self) -> Vec<f32> {
        match self.dtype {
            DType::F32 => self
                .data
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
            DType::F16 => self
                .data
                .chunks_exact(2)
                .map(|c| f16_to_f32(u16::from_le_bytes([c[0], c[1]])))
                .collect(),
            DType::Fp8E4M3 => self.data.iter().map(|&c| fp8::decode_fp8(c)).collect(),
        }
    }

    /// Binary16 bit patterns of an F16 tensor.
    pub fn f16_bits(&self) -> Result<Vec<u16>> {
        self.expect_dtype(DType::F16)?;
        Ok(self
            .data
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]))
            .collect())
    }

    /// FP8 codes of an FP8E4M3 tensor.
    pub fn fp8_codes(&self) -> Result<&[u8]> {
        self.expect_dtype(DType::Fp8E4M3)?;
        Ok(&self.data)
    }

    pub fn expect_dtype(&self, dtype: DType) -> Result<()> {
        if self.dtype != dtype {
            return Err(Error::WrongDType {
                tensor: self.name.clone(),
                found: self.dtype.name(),
                expected: dtype.name(),
            });
        }
        Ok(())
    }

    /// Returns `(rows, cols)` for a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::ShapeMismatch(format!(
                "tensor {:?} has shape {:?}, expected rank 2",
                self.name, self.shape
            ))),
        }
    }

    fn first_non_finite(&self) -> Option<usize> {
        match self.dtype {
            DType::F32 | DType::F16 => self.to_f32_vec().iter().position(|v| !v.is_finite()),
            DType::Fp8E4M3 => None,
        }
    }
}
