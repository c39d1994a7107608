//! Round-to-nearest-even conversion to IEEE 754 binary16 and back.

/// Largest finite binary16 magnitude.
pub const FP16_MAX: f64 = 65504.0;
/// Smallest positive normal binary16 value, 2^-14.
pub const FP16_MIN_NORMAL: f64 = 6.103_515_625e-5;
/// Smallest positive subnormal binary16 value, 2^-24.
pub const FP16_MIN_SUBNORMAL: f64 = 5.960_464_477_539_063e-8;

/// What happens to magnitudes that round beyond [`FP16_MAX`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum OverflowPolicy {
    /// Clamp to ±65504.
    #[default]
    Saturate,
    /// Produce ±infinity, as an unclamped hardware conversion would.
    Infinity,
}

impl OverflowPolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Saturate => "saturate",
            Self::Infinity => "infinity",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "saturate" => Some(Self::Saturate),
            "infinity" => Some(Self::Infinity),
            _ => None,
        }
    }
}

fn overflow(negative: bool, policy: OverflowPolicy) -> f64 {
    let mag = match policy {
        OverflowPolicy::Saturate => FP16_MAX,
        OverflowPolicy::Infinity => f64::INFINITY,
    };
    if negative {
        -mag
    } else {
        mag
    }
}

/// Rounds `x` to the nearest binary16 value (ties to even) and widens it back.
///
/// NaN stays NaN. Subnormal halves are produced exactly; signed zero is kept.
pub fn project_scalar(x: f64, policy: OverflowPolicy) -> f64 {
    if x.is_nan() {
        return x;
    }
    let a = x.abs();
    if a.is_infinite() {
        return overflow(x.is_sign_negative(), policy);
    }
    // Spacing of binary16 values around `a`: fixed 2^-24 in the subnormal
    // range, 2^(e-10) in binade [2^e, 2^(e+1)).
    let quantum = if a < FP16_MIN_NORMAL {
        FP16_MIN_SUBNORMAL
    } else {
        let e = ((a.to_bits() >> 52) & 0x7ff) as i32 - 1023;
        2f64.powi(e - 10)
    };
    // Division and multiplication by a power of two are exact here.
    let r = (a / quantum).round_ties_even() * quantum;
    if r > FP16_MAX {
        return overflow(x.is_sign_negative(), policy);
    }
    r.copysign(x)
}

/// Encodes `x` as binary16 bits after rounding. Overflow encodes infinity.
pub fn to_bits(x: f64) -> u16 {
    let sign: u16 = if x.is_sign_negative() { 0x8000 } else { 0 };
    if x.is_nan() {
        return 0x7e00 | sign;
    }
    let r = project_scalar(x, OverflowPolicy::Infinity).abs();
    if r.is_infinite() {
        return sign | 0x7c00;
    }
    if r < FP16_MIN_NORMAL {
        return sign | (r / FP16_MIN_SUBNORMAL) as u16;
    }
    let e = ((r.to_bits() >> 52) & 0x7ff) as i32 - 1023;
    let mant = (r / 2f64.powi(e - 10)) as u16 - 0x400;
    sign | (((e + 15) as u16) << 10) | mant
}

/// Widens binary16 bits to f64 exactly.
pub fn from_bits(h: u16) -> f64 {
    let sign = if h & 0x8000 != 0 { -1.0 } else { 1.0 };
    let exp = ((h >> 10) & 0x1f) as i32;
    let mant = (h & 0x3ff) as f64;
    match exp {
        0 => sign * mant * FP16_MIN_SUBNORMAL,
        0x1f if mant == 0.0 => sign * f64::INFINITY,
        0x1f => f64::NAN,
        _ => sign * (1.0 + mant / 1024.0) * 2f64.powi(exp - 15),
    }
}
