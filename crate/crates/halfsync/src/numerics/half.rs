//! Software IEEE 754 binary16 ("half") codec.
//!
//! The wider floating formats come from hardware; binary16 does not, so it is
//! implemented here in software and used as the storage/wire format for
//! reduced-precision runs. Layout is the standard 1 sign / 5 exponent /
//! 10 mantissa split with exponent bias 15:
//!
//! * largest finite value `65504` (`0x7BFF`)
//! * smallest positive normal `2^-14` (`0x0400`)
//! * smallest positive subnormal `2^-24` (`0x0001`)
//!
//! Encoding rounds to nearest, ties to even. Everything the encoder does in
//! `f64` is exact — powers of two scale without rounding and the final
//! significand fits in well under 53 bits — so the result is the correctly
//! rounded binary16 for any `f64` input, not an approximation.

/// A binary16 value stored as its raw bit pattern.
///
/// Equality is bitwise: `NaN == NaN` holds and `0x0000 != 0x8000` (positive
/// and negative zero are distinct patterns). Use [`Half::to_f64`] for numeric
/// comparisons.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Half(u16);

const SIGN_MASK: u16 = 0x8000;
const EXP_MASK: u16 = 0x7C00;
const MAN_MASK: u16 = 0x03FF;

impl Half {
    pub const ZERO: Half = Half(0x0000);
    pub const NEG_ZERO: Half = Half(0x8000);
    pub const ONE: Half = Half(0x3C00);
    pub const INFINITY: Half = Half(0x7C00);
    pub const NEG_INFINITY: Half = Half(0xFC00);
    /// Largest finite value, 65504.
    pub const MAX: Half = Half(0x7BFF);
    /// Smallest positive normal value, 2^-14.
    pub const MIN_POSITIVE: Half = Half(0x0400);
    /// Smallest positive subnormal value, 2^-24.
    pub const MIN_SUBNORMAL: Half = Half(0x0001);
    /// Quiet NaN with an all-ones-leading payload.
    pub const NAN: Half = Half(0x7E00);

    #[inline]
    pub const fn from_bits(bits: u16) -> Half {
        Half(bits)
    }

    #[inline]
    pub const fn to_bits(self) -> u16 {
        self.0
    }

    /// Encode an `f64`, rounding to nearest-even. Values beyond ±65504 that
    /// do not round back into range become ±infinity; magnitudes below half
    /// the smallest subnormal become (signed) zero.
    #[inline]
    pub fn from_f64(x: f64) -> Half {
        encode(x)
    }

    /// Exact widening conversion; every binary16 value is representable in
    /// `f64`.
    #[inline]
    pub fn to_f64(self) -> f64 {
        decode(self)
    }

    #[inline]
    pub const fn is_nan(self) -> bool {
        self.0 & EXP_MASK == EXP_MASK && self.0 & MAN_MASK != 0
    }

    #[inline]
    pub const fn is_infinite(self) -> bool {
        self.0 & EXP_MASK == EXP_MASK && self.0 & MAN_MASK == 0
    }

    #[inline]
    pub const fn is_finite(self) -> bool {
        self.0 & EXP_MASK != EXP_MASK
    }

    #[inline]
    pub const fn is_sign_negative(self) -> bool {
        self.0 & SIGN_MASK != 0
    }
}

/// Round an `f64` to the nearest binary16, ties to even.
pub fn encode(x: f64) -> Half {
    let sign = if x.is_sign_negative() { SIGN_MASK } else { 0 };
    if x.is_nan() {
        return Half(sign | Half::NAN.0);
    }
    let a = x.abs();
    if a == 0.0 {
        return Half(sign);
    }
    if a == f64::INFINITY {
        return Half(sign | EXP_MASK);
    }

    // Unbiased exponent of `a`. An f64 subnormal (biased field 0) is below
    // 2^-1022, far under binary16's underflow threshold, so it rounds to zero
    // regardless of its exact exponent; -1075 keeps it on that path.
    let bits = a.to_bits();
    let efield = ((bits >> 52) & 0x7FF) as i32;
    let e = if efield == 0 { -1075 } else { efield - 1023 };

    if e >= 16 {
        // a >= 65536: past the largest finite even before rounding.
        return Half(sign | EXP_MASK);
    }
    if e >= -14 {
        // Normal range. q = a / 2^e lies in [1, 2); both the division by a
        // power of two and the subtraction (Sterbenz) are exact, and
        // (q - 1) * 1024 has at most 52 significant bits, so `m` is the exact
        // mantissa-with-fraction and round_ties_even applies IEEE rounding.
        let q = a / pow2(e);
        let m = (q - 1.0) * 1024.0;
        let mi = m.round_ties_even() as u32;
        let (mi, e) = if mi == 1024 { (0, e + 1) } else { (mi, e) };
        if e > 15 {
            // Rounded up out of range (e.g. 65520 -> infinity).
            return Half(sign | EXP_MASK);
        }
        Half(sign | (((e + 15) as u16) << 10) | mi as u16)
    } else {
        // Subnormal range: the encoded value is round(a * 2^24) units of
        // 2^-24. Scaling up by a power of two is exact even from an f64
        // subnormal.
        let m = a * pow2(24);
        let mi = m.round_ties_even() as u32;
        if mi == 1024 {
            // Rounded up across the normal boundary to 2^-14.
            return Half(sign | Half::MIN_POSITIVE.0);
        }
        Half(sign | mi as u16)
    }
}

/// Expand a binary16 to the `f64` with the same value (exact).
pub fn decode(h: Half) -> f64 {
    let sign = if h.0 & SIGN_MASK != 0 { -1.0 } else { 1.0 };
    let e = ((h.0 & EXP_MASK) >> 10) as i32;
    let m = (h.0 & MAN_MASK) as f64;
    match e {
        0 => sign * m * pow2(-24),
        31 => {
            if m == 0.0 {
                sign * f64::INFINITY
            } else {
                f64::NAN
            }
        }
        _ => sign * (1.0 + m / 1024.0) * pow2(e - 15),
    }
}

/// 2^e as f64, exact for the exponent range used here.
#[inline]
fn pow2(e: i32) -> f64 {
    f64::from_bits(((e + 1023) as u64) << 52)
}
