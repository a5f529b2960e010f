//! Bit-pattern codecs for IEEE754-style binary formats, Bfloat16 and posits.
//!
//! Words are carried as `u128` holding the low `total_bits` bits of the
//! pattern. Decoding is always exact; encoding rounds to nearest, ties to
//! even.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

/// Largest supported word width.
pub const MAX_TOTAL_BITS: u32 = 128;
/// Largest IEEE fraction width. Keeps every precision at or below 121 bits so
/// that a 126-bit working significand always has guard and sticky room.
pub const MAX_SIGNIFICAND_BITS: u32 = 120;
pub const MAX_EXPONENT_BITS: u32 = 20;
pub const MAX_POSIT_BITS: u32 = 64;
pub const MAX_POSIT_ES: u32 = 8;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FormatError {
    #[error("malformed format descriptor `{0}` (expected ieee:<E>:<M>, bfloat16 or posit:<n>:<es>)")]
    Malformed(String),
    #[error("IEEE exponent width must be in 2..={MAX_EXPONENT_BITS}, got {0}")]
    ExponentBits(u32),
    #[error("IEEE fraction width must be in 1..={MAX_SIGNIFICAND_BITS}, got {0}")]
    SignificandBits(u32),
    #[error("format is {0} bits wide, the maximum is {MAX_TOTAL_BITS}")]
    TooWide(u32),
    #[error("posit width must be in 3..={MAX_POSIT_BITS}, got {0}")]
    PositBits(u32),
    #[error("posit es must be at most {MAX_POSIT_ES}, got {0}")]
    PositEs(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FormatKind {
    Ieee754,
    Bfloat16,
    Posit,
}

/// Descriptor of a computer number format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FormatSpec {
    kind: FormatKind,
    exponent_bits: u32,
    significand_bits: u32,
    total_bits: u32,
    es: u32,
}

impl FormatSpec {
    pub fn ieee(exponent_bits: u32, significand_bits: u32) -> Result<Self, FormatError> {
        if !(2..=MAX_EXPONENT_BITS).contains(&exponent_bits) {
            return Err(FormatError::ExponentBits(exponent_bits));
        }
        if !(1..=MAX_SIGNIFICAND_BITS).contains(&significand_bits) {
            return Err(FormatError::SignificandBits(significand_bits));
        }
        let total_bits = 1 + exponent_bits + significand_bits;
        if total_bits > MAX_TOTAL_BITS {
            return Err(FormatError::TooWide(total_bits));
        }
        Ok(FormatSpec {
            kind: FormatKind::Ieee754,
            exponent_bits,
            significand_bits,
            total_bits,
            es: 0,
        })
    }

    pub const fn bfloat16() -> Self {
        FormatSpec {
            kind: FormatKind::Bfloat16,
            exponent_bits: 8,
            significand_bits: 7,
            total_bits: 16,
            es: 0,
        }
    }

    pub fn posit(total_bits: u32, es: u32) -> Result<Self, FormatError> {
        if !(3..=MAX_POSIT_BITS).contains(&total_bits) {
            return Err(FormatError::PositBits(total_bits));
        }
        if es > MAX_POSIT_ES {
            return Err(FormatError::PositEs(es));
        }
        Ok(FormatSpec {
            kind: FormatKind::Posit,
            exponent_bits: 0,
            significand_bits: 0,
            total_bits,
            es,
        })
    }

    pub const fn binary16() -> Self {
        Self::ieee_const(5, 10)
    }

    pub const fn binary32() -> Self {
        Self::ieee_const(8, 23)
    }

    pub const fn binary64() -> Self {
        Self::ieee_const(11, 52)
    }

    /// IEEE754 quadruple precision, emulated.
    pub const fn binary128() -> Self {
        Self::ieee_const(15, 112)
    }

    const fn ieee_const(exponent_bits: u32, significand_bits: u32) -> Self {
        FormatSpec {
            kind: FormatKind::Ieee754,
            exponent_bits,
            significand_bits,
            total_bits: 1 + exponent_bits + significand_bits,
            es: 0,
        }
    }

    pub fn kind(&self) -> FormatKind {
        self.kind
    }

    pub fn exponent_bits(&self) -> u32 {
        self.exponent_bits
    }

    pub fn significand_bits(&self) -> u32 {
        self.significand_bits
    }

    pub fn total_bits(&self) -> u32 {
        self.total_bits
    }

    pub fn es(&self) -> u32 {
        self.es
    }

    pub fn is_posit(&self) -> bool {
        self.kind == FormatKind::Posit
    }

    /// Mask selecting the `total_bits` low bits of a word.
    pub fn word_mask(&self) -> u128 {
        if self.total_bits == 128 {
            u128::MAX
        } else {
            (1u128 << self.total_bits) - 1
        }
    }

    /// Number of bits of precision (including the hidden bit for IEEE, the
    /// widest fraction plus one for posits).
    pub fn precision(&self) -> u32 {
        match self.kind {
            FormatKind::Ieee754 | FormatKind::Bfloat16 => self.significand_bits + 1,
            FormatKind::Posit => self.total_bits.saturating_sub(3 + self.es) + 1,
        }
    }

    /// Exponent of the smallest nonzero magnitude, i.e. the lowest weight any
    /// decoded significand bit can carry.
    pub fn min_exponent(&self) -> i32 {
        match self.kind {
            FormatKind::Ieee754 | FormatKind::Bfloat16 => {
                let bias = (1i32 << (self.exponent_bits - 1)) - 1;
                1 - bias - self.significand_bits as i32
            }
            FormatKind::Posit => -((self.total_bits as i32 - 2) << self.es),
        }
    }

    /// Exponent `e` such that every finite magnitude is below `2^e`.
    pub fn max_exponent(&self) -> i32 {
        match self.kind {
            FormatKind::Ieee754 | FormatKind::Bfloat16 => {
                let bias = (1i32 << (self.exponent_bits - 1)) - 1;
                bias + 1
            }
            FormatKind::Posit => ((self.total_bits as i32 - 2) << self.es) + 1,
        }
    }

    /// The canonical quiet NaN for IEEE-style formats, NaR for posits.
    pub fn nan(&self) -> u128 {
        match self.kind {
            FormatKind::Posit => 1u128 << (self.total_bits - 1),
            _ => {
                let exp_all = ((1u128 << self.exponent_bits) - 1) << self.significand_bits;
                exp_all | (1u128 << (self.significand_bits - 1))
            }
        }
    }

    /// Positive infinity (NaR for posits).
    pub fn infinity(&self, negative: bool) -> u128 {
        match self.kind {
            FormatKind::Posit => self.nan(),
            _ => {
                let exp_all = ((1u128 << self.exponent_bits) - 1) << self.significand_bits;
                if negative {
                    exp_all | (1u128 << (self.total_bits - 1))
                } else {
                    exp_all
                }
            }
        }
    }

    pub fn zero(&self) -> u128 {
        0
    }

    pub fn one(&self) -> u128 {
        encode(&DecodedNumber::one(), self)
    }
}

impl fmt::Display for FormatSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            FormatKind::Ieee754 => write!(f, "ieee:{}:{}", self.exponent_bits, self.significand_bits),
            FormatKind::Bfloat16 => f.write_str("bfloat16"),
            FormatKind::Posit => write!(f, "posit:{}:{}", self.total_bits, self.es),
        }
    }
}

impl FromStr for FormatSpec {
    type Err = FormatError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let malformed = || FormatError::Malformed(s.to_string());
        let s_trim = s.trim();
        if s_trim == "bfloat16" {
            return Ok(FormatSpec::bfloat16());
        }
        let mut parts = s_trim.split(':');
        let head = parts.next().ok_or_else(malformed)?;
        let a: u32 = parts.next().ok_or_else(malformed)?.parse().map_err(|_| malformed())?;
        let b: u32 = parts.next().ok_or_else(malformed)?.parse().map_err(|_| malformed())?;
        if parts.next().is_some() {
            return Err(malformed());
        }
        match head {
            "ieee" => FormatSpec::ieee(a, b),
            "posit" => FormatSpec::posit(a, b),
            _ => Err(malformed()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NumClass {
    Zero,
    Normal,
    Subnormal,
    Inf,
    NaN,
    NaR,
}

/// Exact value `(-1)^negative * significand * 2^exponent` plus its class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DecodedNumber {
    pub class: NumClass,
    pub negative: bool,
    pub significand: u128,
    pub exponent: i32,
}

impl DecodedNumber {
    pub const ZERO: DecodedNumber = DecodedNumber {
        class: NumClass::Zero,
        negative: false,
        significand: 0,
        exponent: 0,
    };

    pub const NAN: DecodedNumber = DecodedNumber {
        class: NumClass::NaN,
        negative: false,
        significand: 0,
        exponent: 0,
    };

    pub const fn one() -> Self {
        DecodedNumber {
            class: NumClass::Normal,
            negative: false,
            significand: 1,
            exponent: 0,
        }
    }

    /// A finite value; a zero significand yields a (signed) zero.
    pub fn finite(negative: bool, significand: u128, exponent: i32) -> Self {
        if significand == 0 {
            DecodedNumber {
                class: NumClass::Zero,
                negative,
                significand: 0,
                exponent: 0,
            }
        } else {
            DecodedNumber {
                class: NumClass::Normal,
                negative,
                significand,
                exponent,
            }
        }
    }

    pub fn infinity(negative: bool) -> Self {
        DecodedNumber {
            class: NumClass::Inf,
            negative,
            significand: 0,
            exponent: 0,
        }
    }

    pub fn sign(&self) -> i8 {
        if self.negative {
            -1
        } else {
            1
        }
    }

    pub fn is_finite_nonzero(&self) -> bool {
        matches!(self.class, NumClass::Normal | NumClass::Subnormal)
    }

    pub fn is_nan(&self) -> bool {
        matches!(self.class, NumClass::NaN | NumClass::NaR)
    }

    pub fn from_f64(x: f64) -> Self {
        decode(x.to_bits() as u128, &FormatSpec::binary64())
    }

    pub fn from_f32(x: f32) -> Self {
        decode(x.to_bits() as u128, &FormatSpec::binary32())
    }

    /// Nearest `f64` (NaN for NaN/NaR).
    pub fn to_f64(&self) -> f64 {
        f64::from_bits(encode(self, &FormatSpec::binary64()) as u64)
    }
}

pub fn decode(word: u128, fmt: &FormatSpec) -> DecodedNumber {
    let word = word & fmt.word_mask();
    match fmt.kind {
        FormatKind::Ieee754 | FormatKind::Bfloat16 => decode_ieee(word, fmt),
        FormatKind::Posit => decode_posit(word, fmt),
    }
}

fn decode_ieee(word: u128, fmt: &FormatSpec) -> DecodedNumber {
    let m = fmt.significand_bits;
    let e_bits = fmt.exponent_bits;
    let negative = (word >> (fmt.total_bits - 1)) & 1 == 1;
    let frac = word & ((1u128 << m) - 1);
    let biased = ((word >> m) & ((1u128 << e_bits) - 1)) as i32;
    let exp_all = (1i32 << e_bits) - 1;
    let bias = (1i32 << (e_bits - 1)) - 1;
    if biased == exp_all {
        return DecodedNumber {
            class: if frac == 0 { NumClass::Inf } else { NumClass::NaN },
            negative,
            significand: 0,
            exponent: 0,
        };
    }
    if biased == 0 {
        if frac == 0 {
            return DecodedNumber {
                class: NumClass::Zero,
                negative,
                significand: 0,
                exponent: 0,
            };
        }
        return DecodedNumber {
            class: NumClass::Subnormal,
            negative,
            significand: frac,
            exponent: 1 - bias - m as i32,
        };
    }
    DecodedNumber {
        class: NumClass::Normal,
        negative,
        significand: frac | (1u128 << m),
        exponent: biased - bias - m as i32,
    }
}

fn decode_posit(word: u128, fmt: &FormatSpec) -> DecodedNumber {
    let n = fmt.total_bits;
    let sign_bit = 1u128 << (n - 1);
    if word == 0 {
        return DecodedNumber::ZERO;
    }
    if word == sign_bit {
        return DecodedNumber {
            class: NumClass::NaR,
            negative: false,
            significand: 0,
            exponent: 0,
        };
    }
    let negative = word & sign_bit != 0;
    let magnitude = if negative {
        word.wrapping_neg() & fmt.word_mask()
    } else {
        word
    };
    // Bits after the sign, left-aligned in a u128 so the regime run can be
    // measured with leading_zeros/leading_ones.
    let body_len = n - 1;
    let body = magnitude << (128 - body_len);
    let first = body >> 127;
    let run = if first == 1 {
        body.leading_ones()
    } else {
        body.leading_zeros()
    }
    .min(body_len);
    let k: i32 = if first == 1 { run as i32 - 1 } else { -(run as i32) };
    // Regime run plus its terminating bit (absent when the run fills the word).
    let consumed = (run + 1).min(body_len);
    let remaining = body_len - consumed;
    let rest = if remaining == 0 {
        0
    } else {
        magnitude & ((1u128 << remaining) - 1)
    };
    let es = fmt.es;
    let (exp_field, frac_bits, frac) = if remaining >= es {
        let fl = remaining - es;
        let e = if es == 0 { 0 } else { (rest >> fl) as i32 };
        (e, fl, rest & ((1u128 << fl) - 1))
    } else {
        // Truncated exponent field: missing low bits are zero.
        ((rest << (es - remaining)) as i32, 0, 0)
    };
    let scale = (k << es) + exp_field;
    DecodedNumber {
        class: NumClass::Normal,
        negative,
        significand: frac | (1u128 << frac_bits),
        exponent: scale - frac_bits as i32,
    }
}

/// Round-to-nearest-even encoding.
pub fn encode(x: &DecodedNumber, fmt: &FormatSpec) -> u128 {
    match x.class {
        NumClass::NaN | NumClass::NaR => fmt.nan(),
        NumClass::Inf => fmt.infinity(x.negative),
        NumClass::Zero => signed_zero(x.negative, fmt),
        NumClass::Normal | NumClass::Subnormal => {
            if x.significand == 0 {
                signed_zero(x.negative, fmt)
            } else {
                round_finite(x.negative, x.significand, x.exponent as i64, fmt)
            }
        }
    }
}

pub fn cast(word: u128, from: &FormatSpec, to: &FormatSpec) -> u128 {
    encode(&decode(word, from), to)
}

fn signed_zero(negative: bool, fmt: &FormatSpec) -> u128 {
    match fmt.kind {
        FormatKind::Posit => 0,
        _ if negative => 1u128 << (fmt.total_bits - 1),
        _ => 0,
    }
}

/// Width of the working significand handed to the format rounders. Every
/// supported precision is at most 121 bits, leaving guard and sticky room.
const WORK_BITS: u32 = 126;

/// Rounds `(-1)^negative * sig * 2^exp` (with `sig > 0`) into `fmt`.
///
/// `sig` may carry a jammed sticky bit in its least significant position as
/// long as at least two bits separate it from the rounding position.
pub(crate) fn round_finite(negative: bool, sig: u128, exp: i64, fmt: &FormatSpec) -> u128 {
    debug_assert!(sig != 0);
    let (sig, exp) = narrow(sig, exp);
    match fmt.kind {
        FormatKind::Ieee754 | FormatKind::Bfloat16 => round_ieee(negative, sig, exp, fmt),
        FormatKind::Posit => round_posit(negative, sig, exp, fmt),
    }
}

/// Shrinks a significand wider than the working width, jamming the dropped
/// bits into the new least significant bit.
fn narrow(sig: u128, exp: i64) -> (u128, i64) {
    let len = 128 - sig.leading_zeros();
    if len <= WORK_BITS {
        return (sig, exp);
    }
    let drop = len - WORK_BITS;
    let sticky = sig & ((1u128 << drop) - 1) != 0;
    ((sig >> drop) | sticky as u128, exp + drop as i64)
}

/// Rounds a magnitude held in little-endian 64-bit limbs times `2^exp`.
pub(crate) fn round_limbs(negative: bool, limbs: &[u64], exp: i64, fmt: &FormatSpec) -> u128 {
    let Some(top_limb) = limbs.iter().rposition(|&l| l != 0) else {
        return signed_zero(negative, fmt);
    };
    let bit_len = top_limb as u64 * 64 + (64 - limbs[top_limb].leading_zeros()) as u64;
    if bit_len <= 128 {
        let lo = limbs[0] as u128;
        let hi = limbs.get(1).copied().unwrap_or(0) as u128;
        return round_finite(negative, lo | (hi << 64), exp, fmt);
    }
    let shift = bit_len - WORK_BITS as u64;
    let sig = extract_bits(limbs, shift, WORK_BITS);
    let sticky = any_bits_below(limbs, shift);
    round_finite(negative, sig | sticky as u128, exp + shift as i64, fmt)
}

/// Bits `[shift, shift + count)` of a limb array (`count <= 128`).
pub(crate) fn extract_bits(limbs: &[u64], shift: u64, count: u32) -> u128 {
    let word = (shift / 64) as usize;
    let bit = (shift % 64) as u32;
    let mut acc: u128 = 0;
    // Up to three limbs cover 128 bits starting at an arbitrary offset.
    for i in 0..3 {
        let limb = limbs.get(word + i).copied().unwrap_or(0) as u128;
        let pos = 64 * i as i32 - bit as i32;
        if pos < 0 {
            acc |= limb >> (-pos) as u32;
        } else if pos < 128 {
            acc |= limb << pos as u32;
        }
    }
    if count >= 128 {
        acc
    } else {
        acc & ((1u128 << count) - 1)
    }
}

pub(crate) fn any_bits_below(limbs: &[u64], shift: u64) -> bool {
    let word = (shift / 64) as usize;
    let bit = (shift % 64) as u32;
    if limbs[..word.min(limbs.len())].iter().any(|&l| l != 0) {
        return true;
    }
    bit != 0 && word < limbs.len() && limbs[word] & ((1u64 << bit) - 1) != 0
}

/// `sig / 2^shift` rounded to nearest, ties to even.
fn shift_right_rne(sig: u128, shift: i64) -> u128 {
    if shift <= 0 {
        return sig << (-shift) as u32;
    }
    if shift > 128 {
        return 0;
    }
    if shift == 128 {
        return (sig > 1u128 << 127) as u128;
    }
    let shift = shift as u32;
    let q = sig >> shift;
    let rem = sig & ((1u128 << shift) - 1);
    let half = 1u128 << (shift - 1);
    if rem > half || (rem == half && q & 1 == 1) {
        q + 1
    } else {
        q
    }
}

fn round_ieee(negative: bool, sig: u128, exp: i64, fmt: &FormatSpec) -> u128 {
    let m = fmt.significand_bits as i64;
    let bias = (1i64 << (fmt.exponent_bits - 1)) - 1;
    let emin = 1 - bias;
    let exp_all = (1i64 << fmt.exponent_bits) - 1;
    let sign = if negative { 1u128 << (fmt.total_bits - 1) } else { 0 };
    let top = 127 - sig.leading_zeros() as i64;
    let e = exp + top;
    if e > bias + 1 {
        return fmt.infinity(negative);
    }
    let mut quantum = e.max(emin) - m;
    let mut q = shift_right_rne(sig, quantum - exp);
    if q >> (m + 1) != 0 {
        q >>= 1;
        quantum += 1;
    }
    if q == 0 {
        return sign;
    }
    if q >> m == 0 {
        // Subnormal: quantum is pinned at emin - m.
        return sign | q;
    }
    let biased = quantum + m + bias;
    if biased >= exp_all {
        return fmt.infinity(negative);
    }
    sign | ((biased as u128) << m) | (q & ((1u128 << m) - 1))
}

fn round_posit(negative: bool, sig: u128, exp: i64, fmt: &FormatSpec) -> u128 {
    let n = fmt.total_bits as i64;
    let es = fmt.es as i64;
    let maxpos = (1u128 << (n - 1)) - 1;
    let top = 127 - sig.leading_zeros() as i64;
    let scale = exp + top;
    let max_scale = (n - 2) << es;
    let magnitude = if scale >= max_scale {
        maxpos
    } else if scale < -max_scale {
        1
    } else {
        let k = scale >> es;
        let e = (scale - (k << es)) as u128;
        let (regime, regime_len) = if k >= 0 {
            // k+1 ones then a terminating zero.
            (((1u128 << (k + 1)) - 1) << 1, k + 2)
        } else {
            (1u128, -k + 1)
        };
        let head = (regime << es) | e;
        let head_len = regime_len + es;
        let frac_len = top;
        let frac = sig & ((1u128 << frac_len) - 1);
        // Bits after the sign, plus one guard bit; everything below is sticky.
        let avail = n - 1;
        let want = avail + 1;
        let (bits, len, sticky) = if head_len >= want {
            let excess = head_len - want;
            let lost = (excess > 0 && head & ((1u128 << excess) - 1) != 0) || frac != 0;
            (head >> excess, want, lost)
        } else {
            let keep = (want - head_len).min(frac_len);
            let dropped = frac_len - keep;
            let sticky = dropped > 0 && frac & ((1u128 << dropped) - 1) != 0;
            ((head << keep) | (frac >> dropped), head_len + keep, sticky)
        };
        if len <= avail {
            bits << (avail - len)
        } else {
            let q = bits >> 1;
            let guard = bits & 1 == 1;
            let r = if guard && (sticky || q & 1 == 1) { q + 1 } else { q };
            r.clamp(1, maxpos)
        }
    };
    if negative {
        magnitude.wrapping_neg() & fmt.word_mask()
    } else {
        magnitude
    }
}
