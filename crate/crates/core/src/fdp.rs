//! Fused dot products, the FMA-chain baseline and exact references.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use ethnum::U256;
use num_bigint::{BigInt, Sign};
use num_traits::{Signed, ToPrimitive, Zero};
use rayon::prelude::*;
use thiserror::Error;

use crate::accumulator::{AccumulatorError, AccumulatorSpec, AccumulatorState, Flags};
use crate::formats::{
    decode, encode, round_finite, round_limbs, DecodedNumber, FormatError, FormatKind, FormatSpec,
    NumClass,
};
use crate::wide::{bit_len, mul_u128, narrow_to_u128, shr_sticky};

#[derive(Debug, Error)]
pub enum FdpError {
    #[error("vector lengths differ ({left} vs {right})")]
    LengthMismatch { left: usize, right: usize },
    #[error("exceptional operand at index {index}")]
    Exceptional { index: usize },
    #[error("malformed dot-product descriptor `{0}` (expected <format>/<acc>/<format>)")]
    Malformed(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Accumulator(#[from] AccumulatorError),
}

/// Operand format, scratchpad geometry and output format of one FDP unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DotProductConfig {
    pub operand_format: FormatSpec,
    pub accumulator: AccumulatorSpec,
    pub output_format: FormatSpec,
}

impl DotProductConfig {
    pub fn new(operand_format: FormatSpec, accumulator: AccumulatorSpec, output_format: FormatSpec) -> Self {
        DotProductConfig {
            operand_format,
            accumulator,
            output_format,
        }
    }

    /// Same format in and out.
    pub fn uniform(format: FormatSpec, accumulator: AccumulatorSpec) -> Self {
        Self::new(format, accumulator, format)
    }
}

impl fmt::Display for DotProductConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.operand_format, self.accumulator, self.output_format)
    }
}

impl FromStr for DotProductConfig {
    type Err = FdpError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.trim().split('/').collect();
        if parts.len() != 3 {
            return Err(FdpError::Malformed(s.to_string()));
        }
        Ok(DotProductConfig {
            operand_format: parts[0].parse()?,
            accumulator: parts[1].parse()?,
            output_format: parts[2].parse()?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FdpResult {
    pub word: u128,
    pub flags: Flags,
}

fn check_lengths(x: &[u128], y: &[u128]) -> Result<(), FdpError> {
    if x.len() != y.len() {
        return Err(FdpError::LengthMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    Ok(())
}

/// Accumulates every pair into a fresh scratchpad.
pub fn accumulate(x: &[u128], y: &[u128], cfg: &DotProductConfig) -> Result<AccumulatorState, FdpError> {
    check_lengths(x, y)?;
    let fmt = &cfg.operand_format;
    let mut acc = AccumulatorState::new(cfg.accumulator);
    for (&a, &b) in x.iter().zip(y) {
        acc.accumulate_product(&decode(a, fmt), &decode(b, fmt));
    }
    Ok(acc)
}

/// Fused dot product: exact accumulation, one rounding on exit.
pub fn fdp(x: &[u128], y: &[u128], cfg: &DotProductConfig) -> Result<FdpResult, FdpError> {
    let acc = accumulate(x, y, cfg)?;
    Ok(FdpResult {
        word: acc.render(&cfg.output_format),
        flags: acc.flags(),
    })
}

/// Same as [`fdp`], with chunks accumulated in parallel and merged.
pub fn fdp_chunked(
    x: &[u128],
    y: &[u128],
    cfg: &DotProductConfig,
    chunk_len: usize,
) -> Result<FdpResult, FdpError> {
    check_lengths(x, y)?;
    let chunk_len = chunk_len.max(1);
    let partials: Vec<AccumulatorState> = x
        .par_chunks(chunk_len)
        .zip(y.par_chunks(chunk_len))
        .map(|(xs, ys)| accumulate(xs, ys, cfg).expect("chunk lengths match"))
        .collect();
    let mut acc = AccumulatorState::new(cfg.accumulator);
    for p in &partials {
        acc.merge(p);
    }
    Ok(FdpResult {
        word: acc.render(&cfg.output_format),
        flags: acc.flags(),
    })
}

fn signed_zero(negative: bool, fmt: &FormatSpec) -> u128 {
    encode(&DecodedNumber::finite(negative, 0, 0), fmt)
}

/// `round(a * b + c)` with a single rounding, in any format.
pub fn fused_multiply_add(
    a: &DecodedNumber,
    b: &DecodedNumber,
    c: &DecodedNumber,
    fmt: &FormatSpec,
) -> u128 {
    if a.is_nan() || b.is_nan() || c.is_nan() {
        return fmt.nan();
    }
    let p_neg = a.negative ^ b.negative;
    if a.class == NumClass::Inf || b.class == NumClass::Inf {
        if a.class == NumClass::Zero || b.class == NumClass::Zero {
            return fmt.nan();
        }
        if c.class == NumClass::Inf && c.negative != p_neg {
            return fmt.nan();
        }
        return fmt.infinity(p_neg);
    }
    if c.class == NumClass::Inf {
        return fmt.infinity(c.negative);
    }
    let p_zero = !a.is_finite_nonzero() || !b.is_finite_nonzero();
    let c_zero = !c.is_finite_nonzero();
    if p_zero {
        return if c_zero {
            signed_zero(p_neg && c.negative, fmt)
        } else {
            encode(c, fmt)
        };
    }
    let p = mul_u128(a.significand, b.significand);
    let p_exp = a.exponent as i64 + b.exponent as i64;
    if c_zero {
        let (sig, shift) = narrow_to_u128(p);
        return round_finite(p_neg, sig, p_exp + shift as i64, fmt);
    }
    round_sum(p_neg, p, p_exp, c.negative, U256::from(c.significand), c.exponent as i64, fmt)
}

/// Rounds `±x * 2^ex ± y * 2^ey` (both nonzero, each below 2^243) once.
fn round_sum(x_neg: bool, x: U256, ex: i64, y_neg: bool, y: U256, ey: i64, fmt: &FormatSpec) -> u128 {
    let top = (ex + bit_len(x) as i64).max(ey + bit_len(y) as i64);
    // 253-bit window below the leading bit; the term with the higher leading
    // bit always fits, the other one may spill into a sticky bit.
    let bottom = top - 253;
    let align = |v: U256, e: i64| -> (U256, bool) {
        if e >= bottom {
            (v << (e - bottom) as u32, false)
        } else {
            shr_sticky(v, (bottom - e).min(256) as u32)
        }
    };
    let (xa, xs) = align(x, ex);
    let (ya, ys) = align(y, ey);
    let (neg, mag) = if x_neg == y_neg {
        (x_neg, xa + ya)
    } else if xa >= ya {
        (x_neg, xa - ya)
    } else {
        (y_neg, ya - xa)
    };
    let sticky = xs || ys;
    if mag == U256::ZERO && !sticky {
        return signed_zero(false, fmt);
    }
    let mag = mag | U256::from(sticky as u8);
    let (sig, shift) = narrow_to_u128(mag);
    round_finite(neg, sig, bottom + shift as i64, fmt)
}

fn native_fast_path(fmt: &FormatSpec) -> Option<NativeWidth> {
    if fmt.kind() != FormatKind::Ieee754 {
        return None;
    }
    match (fmt.exponent_bits(), fmt.significand_bits()) {
        (8, 23) => Some(NativeWidth::F32),
        (11, 52) => Some(NativeWidth::F64),
        _ => None,
    }
}

enum NativeWidth {
    F32,
    F64,
}

/// Left-to-right FMA chain `s <- round(s + x_i * y_i)` starting from +0.
pub fn fma_reference(x: &[u128], y: &[u128], fmt: &FormatSpec) -> Result<u128, FdpError> {
    check_lengths(x, y)?;
    let word = match native_fast_path(fmt) {
        Some(NativeWidth::F64) => {
            let s = x.iter().zip(y).fold(0.0f64, |s, (&a, &b)| {
                f64::from_bits(a as u64).mul_add(f64::from_bits(b as u64), s)
            });
            s.to_bits() as u128
        }
        Some(NativeWidth::F32) => {
            let s = x.iter().zip(y).fold(0.0f32, |s, (&a, &b)| {
                f32::from_bits(a as u32).mul_add(f32::from_bits(b as u32), s)
            });
            s.to_bits() as u128
        }
        None => fma_reference_soft(x, y, fmt),
    };
    if decode(word, fmt).is_nan() {
        return Ok(fmt.nan());
    }
    Ok(word)
}

/// Emulated FMA chain; bit-identical to the native path where both exist.
pub fn fma_reference_soft(x: &[u128], y: &[u128], fmt: &FormatSpec) -> u128 {
    let mut s = DecodedNumber::ZERO;
    let mut word = 0;
    for (&a, &b) in x.iter().zip(y) {
        word = fused_multiply_add(&decode(a, fmt), &decode(b, fmt), &s, fmt);
        s = decode(word, fmt);
    }
    word
}

/// Exact dyadic rational `mantissa * 2^exponent`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dyadic {
    pub mantissa: BigInt,
    pub exponent: i64,
}

impl Dyadic {
    pub fn zero() -> Self {
        Dyadic {
            mantissa: BigInt::zero(),
            exponent: 0,
        }
    }

    pub fn new(mantissa: BigInt, exponent: i64) -> Self {
        Dyadic { mantissa, exponent }
    }

    /// `None` for non-finite inputs.
    pub fn from_decoded(x: &DecodedNumber) -> Option<Self> {
        match x.class {
            NumClass::Zero => Some(Dyadic::zero()),
            NumClass::Normal | NumClass::Subnormal => {
                let m = BigInt::from(x.significand);
                Some(Dyadic::new(if x.negative { -m } else { m }, x.exponent as i64))
            }
            _ => None,
        }
    }

    pub fn from_f64(x: f64) -> Option<Self> {
        Self::from_decoded(&DecodedNumber::from_f64(x))
    }

    pub fn is_zero(&self) -> bool {
        self.mantissa.is_zero()
    }

    fn aligned(&self, other: &Dyadic) -> (BigInt, BigInt, i64) {
        let e = self.exponent.min(other.exponent);
        (
            &self.mantissa << (self.exponent - e) as usize,
            &other.mantissa << (other.exponent - e) as usize,
            e,
        )
    }

    pub fn add(&self, other: &Dyadic) -> Dyadic {
        let (a, b, e) = self.aligned(other);
        Dyadic::new(a + b, e)
    }

    pub fn sub(&self, other: &Dyadic) -> Dyadic {
        let (a, b, e) = self.aligned(other);
        Dyadic::new(a - b, e)
    }

    pub fn mul(&self, other: &Dyadic) -> Dyadic {
        Dyadic::new(&self.mantissa * &other.mantissa, self.exponent + other.exponent)
    }

    pub fn abs(&self) -> Dyadic {
        Dyadic::new(self.mantissa.abs(), self.exponent)
    }

    /// Rounds once into `fmt` (round to nearest, ties to even).
    pub fn round_to(&self, fmt: &FormatSpec) -> u128 {
        if self.mantissa.is_zero() {
            return 0;
        }
        let negative = self.mantissa.sign() == Sign::Minus;
        let limbs = self.mantissa.magnitude().to_u64_digits();
        round_limbs(negative, &limbs, self.exponent, fmt)
    }

    pub fn to_f64(&self) -> f64 {
        f64::from_bits(self.round_to(&FormatSpec::binary64()) as u64)
    }

    /// `log2 |self|`; `-inf` for zero.
    pub fn log2_abs(&self) -> f64 {
        if self.mantissa.is_zero() {
            return f64::NEG_INFINITY;
        }
        let mag = self.mantissa.magnitude();
        let bits = mag.bits();
        let shift = bits.saturating_sub(64);
        let top = (mag >> shift).to_f64().expect("64-bit value converts");
        top.log2() + shift as f64 + self.exponent as f64
    }

    pub fn cmp_value(&self, other: &Dyadic) -> Ordering {
        let (a, b, _) = self.aligned(other);
        a.cmp(&b)
    }
}

/// Exact `sum x_i * y_i` with unbounded integers.
pub fn exact_oracle(x: &[u128], y: &[u128], fmt: &FormatSpec) -> Result<Dyadic, FdpError> {
    check_lengths(x, y)?;
    let mut terms = Vec::with_capacity(x.len());
    for (index, (&a, &b)) in x.iter().zip(y).enumerate() {
        let da = Dyadic::from_decoded(&decode(a, fmt)).ok_or(FdpError::Exceptional { index })?;
        let db = Dyadic::from_decoded(&decode(b, fmt)).ok_or(FdpError::Exceptional { index })?;
        let p = da.mul(&db);
        if !p.is_zero() {
            terms.push(p);
        }
    }
    let Some(min_exp) = terms.iter().map(|t| t.exponent).min() else {
        return Ok(Dyadic::zero());
    };
    let sum = terms
        .iter()
        .fold(BigInt::zero(), |s, t| s + (&t.mantissa << (t.exponent - min_exp) as usize));
    Ok(Dyadic::new(sum, min_exp))
}

/// Double-precision fraction width; the cap of [`correct_bits`].
pub const MAX_CORRECT_BITS: f64 = 52.0;

/// `-log2(|computed - exact| / |exact|)`, clamped to `[0, 52]`.
pub fn correct_bits(computed: f64, exact: &Dyadic) -> f64 {
    if exact.is_zero() {
        return if computed == 0.0 { MAX_CORRECT_BITS } else { 0.0 };
    }
    let Some(c) = Dyadic::from_f64(computed) else {
        return 0.0;
    };
    if exact.round_to(&FormatSpec::binary64()) as u64 == computed.to_bits() {
        return MAX_CORRECT_BITS;
    }
    let err = c.sub(exact);
    if err.is_zero() {
        return MAX_CORRECT_BITS;
    }
    let bits = exact.log2_abs() - err.log2_abs();
    bits.clamp(0.0, MAX_CORRECT_BITS)
}
