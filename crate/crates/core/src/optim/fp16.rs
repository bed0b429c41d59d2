//! IEEE binary16 conversion for gradient compression.
//!
//! Hand-rolled rather than pulled in as a dependency because the saturation
//! contract differs from the standard conversion: values beyond the half
//! range (infinities included) clamp to the largest finite half instead of
//! becoming infinity, so a burst of large gradients degrades instead of
//! poisoning the allreduce with inf. Everything else is stock
//! round-to-nearest-even, subnormals preserved.

/// One 16-bit float: 1 sign, 5 exponent, 10 mantissa bits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Half16(u16);

/// Bit pattern of the largest finite half, 65504.0.
const MAX_FINITE_BITS: u16 = 0x7bff;

/// Shifts `x` right by `k` bits, rounding to nearest, ties to even.
/// Requires 1 <= k <= 24 so the guard computation cannot overflow.
fn rtne_shift(x: u32, k: u32) -> u32 {
    let q = x >> k;
    let rem = x & ((1u32 << k) - 1);
    let half = 1u32 << (k - 1);
    if rem > half || (rem == half && (q & 1) == 1) {
        q + 1
    } else {
        q
    }
}

impl Half16 {
    pub const MAX: f32 = 65504.0;

    pub fn from_bits(bits: u16) -> Half16 {
        Half16(bits)
    }

    pub fn to_bits(self) -> u16 {
        self.0
    }

    pub fn is_nan(self) -> bool {
        (self.0 & 0x7c00) == 0x7c00 && (self.0 & 0x03ff) != 0
    }

    /// Round-to-nearest-even conversion. Values beyond the half range
    /// saturate to the largest finite half of matching sign; NaN stays NaN.
    pub fn from_f32(x: f32) -> Half16 {
        let bits = x.to_bits();
        let sign = ((bits >> 16) & 0x8000) as u16;
        let exp = ((bits >> 23) & 0xff) as i32;
        let man = bits & 0x007f_ffff;
        if exp == 0xff {
            return if man != 0 {
                Half16(sign | 0x7e00)
            } else {
                Half16(sign | MAX_FINITE_BITS)
            };
        }
        if exp == 0 {
            // f32 subnormals are below 2^-126, far under half the smallest
            // half subnormal; they round to zero.
            return Half16(sign);
        }
        // Half-precision biased exponent this value would land on.
        let he = exp - 127 + 15;
        if he >= 31 {
            return Half16(sign | MAX_FINITE_BITS);
        }
        let sig = man | 0x0080_0000;
        let body = if he >= 1 {
            // Normal target: 24-bit significand down to 11 bits. A mantissa
            // carry overflows into the exponent field, which is exactly the
            // increment the carry calls for.
            (((he - 1) as u32) << 10) + rtne_shift(sig, 13)
        } else {
            // Subnormal target: one extra shift per exponent step below the
            // normal range. Anything shifted further than the significand
            // is wide rounds to zero.
            let k = 13 + (1 - he) as u32;
            if k > 24 {
                return Half16(sign);
            }
            rtne_shift(sig, k)
        };
        if body >= 0x7c00 {
            return Half16(sign | MAX_FINITE_BITS);
        }
        Half16(sign | body as u16)
    }

    /// Exact widening; every half value is representable as f32.
    pub fn to_f32(self) -> f32 {
        let h = self.0;
        let sign = ((h as u32) & 0x8000) << 16;
        let exp = ((h >> 10) & 0x1f) as u32;
        let man = (h & 0x03ff) as u32;
        if exp == 0 {
            if man == 0 {
                return f32::from_bits(sign);
            }
            // man * 2^-24, exact: 10 significant bits, well inside normal
            // f32 range.
            let mag = man as f32 * f32::from_bits(0x3380_0000);
            return f32::from_bits(mag.to_bits() | sign);
        }
        if exp == 31 {
            return if man == 0 {
                f32::from_bits(sign | 0x7f80_0000)
            } else {
                f32::from_bits(sign | 0x7f80_0000 | (man << 13))
            };
        }
        f32::from_bits(sign | ((exp + 112) << 23) | (man << 13))
    }
}

pub fn quantize_fp16(src: &[f32]) -> Vec<Half16> {
    src.iter().map(|&v| Half16::from_f32(v)).collect()
}

pub fn dequantize_fp16(src: &[Half16]) -> Vec<f32> {
    src.iter().map(|&h| h.to_f32()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// All finite half values with their bit patterns, ascending by value
    /// for non-negative patterns.
    fn finite_table() -> Vec<(f64, u16)> {
        (0u16..0x7c00)
            .map(|b| (Half16::from_bits(b).to_f32() as f64, b))
            .collect()
    }

    /// Independent nearest-half search: scan the candidate table instead of
    /// doing any bit arithmetic.
    fn oracle(x: f32, table: &[(f64, u16)]) -> u16 {
        assert!(!x.is_nan());
        let sign = if x.is_sign_negative() { 0x8000u16 } else { 0 };
        let m = x.abs() as f64;
        if m >= Half16::MAX as f64 {
            // Nearest-or-saturate both land on max finite above this point.
            return sign | MAX_FINITE_BITS;
        }
        // Last entry at or below m; table values are strictly increasing.
        let mut lo = 0usize;
        let mut hi = table.len() - 1;
        while lo < hi {
            let mid = (lo + hi + 1) / 2;
            if table[mid].0 <= m {
                lo = mid;
            } else {
                hi = mid - 1;
            }
        }
        let below = table[lo];
        if lo + 1 == table.len() {
            return sign | below.1;
        }
        let above = table[lo + 1];
        // Both differences are exact in f64, so the tie test is too.
        let d_below = m - below.0;
        let d_above = above.0 - m;
        let pick = if d_below < d_above {
            below.1
        } else if d_above < d_below {
            above.1
        } else if below.1 & 1 == 0 {
            below.1
        } else {
            above.1
        };
        sign | pick
    }

    #[test]
    fn round_trip_identity_on_all_finite_patterns() {
        let mut count = 0;
        for bits in 0..=u16::MAX {
            if (bits & 0x7c00) == 0x7c00 {
                continue; // inf and NaN patterns
            }
            let h = Half16::from_bits(bits);
            let back = Half16::from_f32(h.to_f32());
            assert_eq!(back.to_bits(), bits, "pattern {bits:#06x}");
            count += 1;
        }
        assert_eq!(count, 63_488);
    }

    #[test]
    fn exact_values() {
        assert_eq!(Half16::from_f32(1.0).to_bits(), 0x3c00);
        assert_eq!(Half16::from_f32(1.0).to_f32(), 1.0);
        assert_eq!(Half16::from_f32(0.0).to_bits(), 0x0000);
        assert_eq!(Half16::from_f32(-0.0).to_bits(), 0x8000);
        assert_eq!(Half16::from_f32(-2.5).to_f32(), -2.5);
        assert_eq!(Half16::from_f32(65504.0).to_bits(), MAX_FINITE_BITS);
    }

    #[test]
    fn smallest_subnormals_round_to_nearest_even() {
        let quantum = (2.0f64).powi(-24) as f32;
        // Exactly between 0 and the smallest subnormal: tie to even picks 0.
        assert_eq!(Half16::from_f32(quantum * 0.5).to_bits(), 0x0000);
        // 1.5 quanta sits between patterns 1 and 2: tie to even picks 2.
        assert_eq!(Half16::from_f32(quantum * 1.5).to_bits(), 0x0002);
        // Nudged off the midpoints the nearest neighbor wins.
        assert_eq!(Half16::from_f32(quantum * 0.6).to_bits(), 0x0001);
        assert_eq!(Half16::from_f32(quantum * 1.4).to_bits(), 0x0001);
        // f32 subnormals collapse to zero with the sign kept.
        assert_eq!(Half16::from_f32(f32::from_bits(1)).to_bits(), 0x0000);
        assert_eq!(Half16::from_f32(-f32::from_bits(0x007f_ffff)).to_bits(), 0x8000);
    }

    #[test]
    fn overflow_saturates_to_max_finite() {
        for v in [65505.0f32, 65519.9, 65520.0, 65536.0, 1e30, f32::INFINITY] {
            assert_eq!(Half16::from_f32(v).to_bits(), MAX_FINITE_BITS, "{v}");
            assert_eq!(
                Half16::from_f32(-v).to_bits(),
                0x8000 | MAX_FINITE_BITS,
                "-{v}"
            );
        }
        assert_eq!(Half16::from_f32(65519.0).to_f32(), 65504.0);
    }

    #[test]
    fn nan_stays_nan() {
        assert!(Half16::from_f32(f32::NAN).is_nan());
        assert!(Half16::from_f32(f32::NAN).to_f32().is_nan());
        let h = Half16::from_bits(0x7e01);
        assert!(h.is_nan());
        assert!(h.to_f32().is_nan());
    }

    #[test]
    fn slice_helpers_round_trip() {
        let src = [0.5f32, -1.25, 3.0e-5, 100.0];
        let q = quantize_fp16(&src);
        let back = dequantize_fp16(&q);
        assert_eq!(back.len(), src.len());
        for (a, b) in src.iter().zip(&back) {
            assert!((a - b).abs() <= a.abs() * 1e-3 + 1e-7);
        }
    }

    #[test]
    fn matches_nearest_oracle_on_edge_cases() {
        let table = finite_table();
        let quantum = (2.0f64).powi(-24) as f32;
        let mut cases: Vec<f32> = vec![
            0.0,
            -0.0,
            1.0,
            1.0 + 1e-4,
            0.1,
            -0.3333,
            6.1e-5, // just under the smallest normal half
            6.2e-5,
            quantum,
            quantum * 2.0,
            65503.9,
            65504.0,
            -65504.0,
            1e-8,
            f32::MIN_POSITIVE,
        ];
        // Every representable half plus one-ulp f32 nudges around it.
        for &(v, _) in &table {
            let v = v as f32;
            cases.push(v);
            cases.push(f32::from_bits(v.to_bits().wrapping_add(1)));
            if v > 0.0 {
                cases.push(f32::from_bits(v.to_bits() - 1));
            }
        }
        for x in cases {
            if x.is_nan() {
                continue;
            }
            assert_eq!(
                Half16::from_f32(x).to_bits(),
                oracle(x, &table),
                "value {x} ({:#010x})",
                x.to_bits()
            );
        }
    }

    proptest! {
        #[test]
        fn matches_nearest_oracle_on_arbitrary_bits(bits in any::<u32>()) {
            let x = f32::from_bits(bits);
            prop_assume!(!x.is_nan());
            let table = finite_table();
            prop_assert_eq!(Half16::from_f32(x).to_bits(), oracle(x, &table));
        }

        #[test]
        fn quantization_error_is_at_most_half_ulp_in_normal_range(
            mag in 6.104e-5f32..65504.0,
            neg in any::<bool>(),
        ) {
            let x = if neg { -mag } else { mag };
            let back = Half16::from_f32(x).to_f32();
            // ulp at |x|: spacing of halves in x's binade.
            let exp = x.abs().log2().floor() as i32;
            let ulp = (2.0f64).powi(exp - 10);
            prop_assert!(((back - x) as f64).abs() <= ulp / 2.0 + 1e-12);
        }
    }
}
