//! Software FP8 E4M3 codec (OCP variant: no infinities, max finite 448).
//!
//! Layout is `S EEEE MMM` with exponent bias 7. Exponent field 0 encodes
//! subnormals `m/8 * 2^-6`. The all-ones pattern `S 1111 111` is NaN; every
//! other pattern, including `S 1111 110` (= ±448), is finite.

/// Format constants for an FP8 variant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fp8Spec {
    pub exponent_bits: u32,
    pub mantissa_bits: u32,
    pub bias: i32,
    pub max_finite: f32,
    pub min_normal: f32,
    pub min_subnormal: f32,
    /// NaN pattern without the sign bit.
    pub nan_pattern: u8,
    pub has_infinity: bool,
}

pub const E4M3: Fp8Spec = Fp8Spec {
    exponent_bits: 4,
    mantissa_bits: 3,
    bias: 7,
    max_finite: 448.0,
    min_normal: 0.015625,
    min_subnormal: 0.001953125,
    nan_pattern: 0x7F,
    has_infinity: false,
};

pub const MAX_FINITE: f32 = E4M3.max_finite;
pub const MIN_NORMAL: f32 = E4M3.min_normal;
pub const MIN_SUBNORMAL: f32 = E4M3.min_subnormal;

/// Code of +448.
pub const MAX_CODE: u8 = 0x7E;
pub const NAN_CODE: u8 = 0x7F;

const SIGN_BIT: u8 = 0x80;

const fn decode_entry(code: u8) -> f32 {
    let sign = (code as u32 & 0x80) << 24;
    let exp = ((code >> 3) & 0x0f) as u32;
    let mant = (code & 0x07) as u32;
    if exp == 0x0f && mant == 0x07 {
        return f32::from_bits(sign | 0x7fc0_0000);
    }
    if exp == 0 {
        let v = mant as f32 / 512.0;
        return if sign != 0 { -v } else { v };
    }
    f32::from_bits(sign | ((exp + 127 - 7) << 23) | (mant << 20))
}

const fn build_table() -> [f32; 256] {
    let mut table = [0.0f32; 256];
    let mut i = 0;
    while i < 256 {
        table[i] = decode_entry(i as u8);
        i += 1;
    }
    table
}

static DECODE_TABLE: [f32; 256] = build_table();

/// Exact `f32` value of an E4M3 code. NaN codes decode to NaN.
#[inline]
pub fn decode_fp8(code: u8) -> f32 {
    DECODE_TABLE[code as usize]
}

#[inline]
pub fn is_nan_code(code: u8) -> bool {
    code & !SIGN_BIT == NAN_CODE
}

/// Rounds `x` to the nearest E4M3 value, ties to even.
///
/// Magnitudes above 448 (and infinities) saturate to ±448. NaN maps to the
/// NaN pattern carrying the input's sign. Signed zeros are preserved.
pub fn encode_fp8(x: f32) -> u8 {
    let bits = x.to_bits();
    let sign = ((bits >> 24) as u8) & SIGN_BIT;
    if x.is_nan() {
        return sign | NAN_CODE;
    }
    let abs = x.abs();
    if abs >= MAX_FINITE {
        return sign | MAX_CODE;
    }
    if abs < MIN_NORMAL {
        // Subnormal step is 2^-9; a rounded result of 8 is the smallest
        // normal (0x08), which the bit layout absorbs.
        let m = (abs * 512.0).round_ties_even() as u8;
        return sign | m;
    }
    let exp = ((bits >> 23) & 0xff) as i32 - 127 + E4M3.bias;
    let mant = bits & 0x007f_ffff;
    let mut code = ((exp as u32) << 3) | (mant >> 20);
    let rem = mant & 0x000f_ffff;
    if rem > 0x0008_0000 || (rem == 0x0008_0000 && code & 1 == 1) {
        code += 1;
    }
    sign | code as u8
}

/// Round-trips `x` through E4M3.
#[inline]
pub fn fp8_quantize(x: f32) -> f32 {
    decode_fp8(encode_fp8(x))
}
