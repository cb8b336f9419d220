//! Radix top-k selection over `f32` values.
//!
//! Values are mapped to order-preserving `u32` keys, then an MSB-first
//! histogram pass per digit narrows down the key of the k-th largest
//! element. Everything strictly above that threshold key is selected, and
//! ties at the threshold are taken in ascending index order, so the result
//! matches a stable sort by `(value desc, index asc)`.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TopKResult {
    pub values: Vec<f32>,
    pub indices: Vec<usize>,
}

/// Order-preserving key: negative floats are bit-inverted, non-negative
/// ones get the sign bit set. `-0.0` is canonicalised to `+0.0` first so the
/// two zeros share a key.
#[inline]
pub fn monotone_key(x: f32) -> u32 {
    let x = if x == 0.0 { 0.0 } else { x };
    let bits = x.to_bits();
    if bits & 0x8000_0000 != 0 {
        !bits
    } else {
        bits | 0x8000_0000
    }
}

fn validate(x: &[f32], k: usize) -> Result<()> {
    if k == 0 || k > x.len() {
        return Err(Error::KOutOfRange { k, n: x.len() });
    }
    if let Some(index) = x.iter().position(|v| v.is_nan()) {
        return Err(Error::NaNInput { index });
    }
    Ok(())
}

/// Radix top-k with 8-bit digits (four passes at most).
pub fn radix_topk(x: &[f32], k: usize) -> Result<TopKResult> {
    radix_topk_with_digit_bits(x, k, 8)
}

/// Radix top-k with a configurable digit width. `digit_bits` must divide 32
/// and be at most 16; the result does not depend on it.
pub fn radix_topk_with_digit_bits(x: &[f32], k: usize, digit_bits: u32) -> Result<TopKResult> {
    assert!(
        digit_bits > 0 && digit_bits <= 16 && 32 % digit_bits == 0,
        "unsupported digit width {digit_bits}"
    );
    validate(x, k)?;
    let keys: Vec<u32> = x.iter().map(|&v| monotone_key(v)).collect();
    let threshold = threshold_key(&keys, k, digit_bits);

    let above = keys.iter().filter(|&&key| key > threshold).count();
    let mut ties_left = k - above;
    let mut picked: Vec<(u32, usize)> = Vec::with_capacity(k);
    for (i, &key) in keys.iter().enumerate() {
        if key > threshold {
            picked.push((key, i));
        } else if key == threshold && ties_left > 0 {
            picked.push((key, i));
            ties_left -= 1;
        }
    }
    debug_assert_eq!(picked.len(), k);
    // Keys are distinct per value, and indices break ties.
    picked.sort_unstable_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(TopKResult {
        values: picked.iter().map(|&(_, i)| x[i]).collect(),
        indices: picked.into_iter().map(|(_, i)| i).collect(),
    })
}

/// Key of the k-th largest element, found digit by digit from the top.
fn threshold_key(keys: &[u32], k: usize, digit_bits: u32) -> u32 {
    let buckets = 1usize << digit_bits;
    let digit_mask = (buckets - 1) as u32;
    let mut prefix = 0u32;
    let mut prefix_mask = 0u32;
    // Rank of the target among keys sharing the current prefix, counted
    // from the largest (1-based).
    let mut remaining = k;
    let mut hist = vec![0usize; buckets];
    let mut shift = 32;
    while shift > 0 {
        shift -= digit_bits;
        hist.iter_mut().for_each(|h| *h = 0);
        for &key in keys {
            if key & prefix_mask == prefix {
                hist[((key >> shift) & digit_mask) as usize] += 1;
            }
        }
        let mut digit = buckets - 1;
        loop {
            if hist[digit] >= remaining {
                break;
            }
            remaining -= hist[digit];
            digit -= 1;
        }
        prefix |= (digit as u32) << shift;
        prefix_mask |= digit_mask << shift;
    }
    prefix
}

/// Sort-based reference: stable sort by value descending, index ascending.
pub fn topk_oracle(x: &[f32], k: usize) -> Result<TopKResult> {
    validate(x, k)?;
    let mut idx: Vec<usize> = (0..x.len()).collect();
    // partial_cmp treats -0.0 == +0.0; the stable sort keeps index order.
    idx.sort_by(|&a, &b| x[b].partial_cmp(&x[a]).expect("no NaN"));
    idx.truncate(k);
    Ok(TopKResult {
        values: idx.iter().map(|&i| x[i]).collect(),
        indices: idx,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn same(a: &TopKResult, b: &TopKResult) -> bool {
        a.indices == b.indices
            && a.values.iter().zip(&b.values).all(|(x, y)| x.to_bits() == y.to_bits())
    }

    #[test]
    fn full_selection() {
        let r = radix_topk(&[1.0, 2.0, 3.0], 3).unwrap();
        assert_eq!(r.values, vec![3.0, 2.0, 1.0]);
        assert_eq!(r.indices, vec![2, 1, 0]);
    }

    #[test]
    fn all_ties() {
        let r = radix_topk(&[5.0; 4], 2).unwrap();
        assert_eq!(r.values, vec![5.0, 5.0]);
        assert_eq!(r.indices, vec![0, 1]);
    }

    #[test]
    fn signed_zero_tie() {
        for f in [radix_topk, topk_oracle] {
            let r = f(&[-0.0, 0.0], 1).unwrap();
            assert_eq!(r.indices, vec![0]);
            assert_eq!(r.values[0].to_bits(), (-0.0f32).to_bits());
        }
        let r = radix_topk(&[3.0], 1).unwrap();
        assert_eq!((r.values, r.indices), (vec![3.0], vec![0]));
    }

    #[test]
    fn errors() {
        assert!(matches!(radix_topk(&[1.0], 0).unwrap_err(), Error::KOutOfRange { .. }));
        assert!(matches!(radix_topk(&[1.0], 2).unwrap_err(), Error::KOutOfRange { .. }));
        assert!(matches!(
            radix_topk(&[1.0, f32::NAN], 1).unwrap_err(),
            Error::NaNInput { index: 1 }
        ));
    }

    #[test]
    fn key_is_monotone_on_special_values() {
        let vals = [
            f32::NEG_INFINITY,
            f32::MIN,
            -1.0,
            -f32::MIN_POSITIVE,
            -1e-45,
            0.0,
            1e-45,
            f32::MIN_POSITIVE,
            1.0,
            f32::MAX,
            f32::INFINITY,
        ];
        for w in vals.windows(2) {
            assert!(monotone_key(w[0]) < monotone_key(w[1]), "{} vs {}", w[0], w[1]);
        }
        assert_eq!(monotone_key(-0.0), monotone_key(0.0));
    }

    #[test]
    fn digit_boundaries() {
        // Values whose keys differ only in one byte, for every byte position.
        let mut x = Vec::new();
        for byte in 0..4 {
            for d in [0u32, 1, 0x7f, 0x80, 0xfe, 0xff] {
                let key = 0xC000_0000u32 ^ (d << (8 * byte));
                let bits = if key & 0x8000_0000 != 0 { key & 0x7fff_ffff } else { !key };
                let v = f32::from_bits(bits);
                if !v.is_nan() {
                    x.push(v);
                    x.push(-v);
                }
            }
        }
        for k in 1..=x.len() {
            for bits in [1, 2, 4, 8, 16] {
                let r = radix_topk_with_digit_bits(&x, k, bits).unwrap();
                assert!(same(&r, &topk_oracle(&x, k).unwrap()), "k={k} bits={bits}");
            }
        }
    }

    fn values() -> impl Strategy<Value = f32> {
        prop_oneof![
            (-3i32..3).prop_map(|v| v as f32),
            Just(0.0f32),
            Just(-0.0f32),
            proptest::num::f32::SUBNORMAL,
            proptest::num::f32::NORMAL,
            -1.0f32..1.0,
        ]
    }

    proptest! {
        #[test]
        fn matches_oracle(x in proptest::collection::vec(values(), 1..300), kf in 0.0f64..1.0) {
            let k = 1 + ((x.len() - 1) as f64 * kf) as usize;
            let oracle = topk_oracle(&x, k).unwrap();
            for bits in [4, 8] {
                let r = radix_topk_with_digit_bits(&x, k, bits).unwrap();
                prop_assert!(same(&r, &oracle));
            }
        }
    }
}
