//! Shared constructions for integration and acceptance tests.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const BLOCK: usize = 128;

/// E4M3 value of `code`, written from the format definition (not the
/// library's decode table). NaN codes are not accepted.
pub fn e4m3_value(code: u8) -> f32 {
    assert!(code & 0x7F != 0x7F, "NaN code");
    let sign = if code & 0x80 != 0 { -1.0 } else { 1.0 };
    let e = ((code >> 3) & 0xF) as i32;
    let m = (code & 7) as f32;
    let mag = if e == 0 {
        m * 2f32.powi(-9)
    } else {
        (1.0 + m / 8.0) * 2f32.powi(e - 7)
    };
    sign * mag
}

/// Uniformly random finite E4M3 value.
pub fn random_grid_value(rng: &mut ChaCha8Rng) -> f32 {
    loop {
        let c: u8 = rng.random();
        if c & 0x7F != 0x7F {
            return e4m3_value(c);
        }
    }
}

/// `[rows, cols]` values where every `block_rows × block_cols` tile is
/// `2^j · (E4M3 values)` with one entry of magnitude exactly `448 · 2^j`,
/// so its absmax scale is exactly `2^j`. `j` is drawn per tile from `j_range`.
pub fn grid_tiles(
    rng: &mut ChaCha8Rng,
    rows: usize,
    cols: usize,
    block_rows: usize,
    block_cols: usize,
    j_range: std::ops::RangeInclusive<i32>,
) -> Vec<f32> {
    let mut v = vec![0.0f32; rows * cols];
    for br in (0..rows).step_by(block_rows) {
        for bc in (0..cols).step_by(block_cols) {
            let s = 2f32.powi(rng.random_range(j_range.clone()));
            let (r_end, c_end) = ((br + block_rows).min(rows), (bc + block_cols).min(cols));
            for r in br..r_end {
                for c in bc..c_end {
                    v[r * cols + c] = random_grid_value(rng) * s;
                }
            }
            let r = rng.random_range(br..r_end);
            let c = rng.random_range(bc..c_end);
            v[r * cols + c] = if rng.random() { 448.0 } else { -448.0 } * s;
        }
    }
    v
}

/// Activation rows for pipeline grid tests: in every 128-column chunk,
/// column 0 holds the anchor `448 · 2^j`, column 1 is zero and the rest are
/// positive E4M3 values in [32, 448] times `2^j`. Positive entries are large
/// enough that SiLU is the identity on them in F32.
pub fn grid_activation_row(rng: &mut ChaCha8Rng, d: usize, j: i32) -> Vec<f32> {
    let s = 2f32.powi(j);
    (0..d)
        .map(|c| match c % BLOCK {
            0 => 448.0 * s,
            1 => 0.0,
            _ => {
                // codes 0x60..=0x7E cover 32..=448
                let code: u8 = rng.random_range(0x60..=0x7E);
                e4m3_value(code) * s
            }
        })
        .collect()
}

/// `[out, in]` weight that copies one input column to each output. Each row
/// also holds 1.75 (= 448 · 2⁻⁸) in every zero column (in-chunk offset 1),
/// so every row and every 128×128 tile has absmax scale exactly 2⁻⁸ and
/// each output receives exactly one nonzero product. Output columns at
/// chunk offset 0 copy an anchor column, offset 1 copies nothing.
pub fn selection_weight(rng: &mut ChaCha8Rng, out: usize, inp: usize) -> Vec<f32> {
    let chunks = inp / BLOCK;
    let mut w = vec![0.0f32; out * inp];
    for n in 0..out {
        let row = &mut w[n * inp..(n + 1) * inp];
        for kb in 0..chunks {
            row[kb * BLOCK + 1] = 1.75;
        }
        match n % BLOCK {
            0 => row[rng.random_range(0..chunks) * BLOCK] = 1.0,
            1 => {}
            _ => loop {
                let c = rng.random_range(0..inp);
                if c % BLOCK != 1 {
                    row[c] = 1.0;
                    break;
                }
            },
        }
    }
    w
}

/// F32 matmul `a [m,k] · wᵀ [n,k]`, reduced per 128-column block in
/// ascending order and then across blocks in ascending order.
pub fn blocked_matmul(a: &[f32], w: &[f32], m: usize, n: usize, k: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0f32;
            for kb in (0..k).step_by(BLOCK) {
                let mut partial = 0.0f32;
                for t in kb..(kb + BLOCK).min(k) {
                    partial += a[i * k + t] * w[j * k + t];
                }
                acc += partial;
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// F64 matmul `a [m,k] · wᵀ [n,k] + bias`.
pub fn matmul_f64(a: &[f32], w: &[f32], bias: Option<&[f32]>, m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0f64;
            for t in 0..k {
                acc += a[i * k + t] as f64 * w[j * k + t] as f64;
            }
            out[i * n + j] = acc + bias.map_or(0.0, |b| b[j] as f64);
        }
    }
    out
}

/// Rounds to binary16 through the `half` crate and back.
pub fn half_round(x: f32) -> f32 {
    half::f16::from_f32(x).to_f32()
}

pub fn rel_frobenius(reference: &[f64], candidate: &[f32]) -> f64 {
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for (&r, &c) in reference.iter().zip(candidate) {
        num += (r - c as f64).powi(2);
        den += r * r;
    }
    (num / den).sqrt()
}

/// Distance in binary16 units in the last place between two finite values.
pub fn f16_ulp_distance(a: f32, b: f32) -> u32 {
    let ord = |x: f32| {
        let bits = half::f16::from_f32(x).to_bits() as i32;
        if bits & 0x8000 != 0 {
            -(bits & 0x7FFF)
        } else {
            bits
        }
    };
    (ord(a) - ord(b)).unsigned_abs()
}

/// Spacing of binary16 values at magnitude `x`.
pub fn f16_ulp_size(x: f32) -> f64 {
    let x = x.abs() as f64;
    if x < 2f64.powi(-14) {
        2f64.powi(-24)
    } else {
        2f64.powi(x.log2().floor() as i32 - 10)
    }
}
