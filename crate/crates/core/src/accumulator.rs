//! The `<ovf, msb, lsb>` fixed-point scratchpad.
//!
//! The scratchpad is a two's-complement register covering bit weights
//! `2^lsb ..= 2^(msb+ovf)`, the top bit being the sign bit. Products enter
//! exactly, bits below `2^lsb` are dropped (floor), and additions wrap modulo
//! `2^width`. Because modular addition is commutative and associative, the
//! register contents depend only on the multiset of accumulated products.
//!
//! Overflow is tracked as a net wrap count: the true sum of the retained
//! values equals `signed(bits) + wraps * 2^width`. The count is itself order
//! independent, so `overflow_wrapped` (a nonzero count) is a property of the
//! final sum, and an excursion that comes back into range leaves no trace.

use std::fmt;
use std::str::FromStr;

use ethnum::U256;
use num_bigint::{BigInt, BigUint, Sign};
use thiserror::Error;

use crate::formats::{round_limbs, DecodedNumber, FormatSpec, NumClass};
use crate::wide::{mul_u128, shr_sticky, to_limbs};

/// Upper bound on scratchpad width, in bits.
pub const MAX_WIDTH: u32 = 1 << 20;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AccumulatorError {
    #[error("malformed accumulator descriptor `{0}` (expected acc:<ovf>:<msb>:<lsb>)")]
    Malformed(String),
    #[error("lsb ({lsb}) must not exceed msb ({msb})")]
    LsbAboveMsb { msb: i32, lsb: i32 },
    #[error("scratchpad of {0} bits exceeds the supported maximum")]
    TooWide(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AccumulatorSpec {
    ovf: u32,
    msb: i32,
    lsb: i32,
}

impl AccumulatorSpec {
    pub fn new(ovf: u32, msb: i32, lsb: i32) -> Result<Self, AccumulatorError> {
        if lsb > msb {
            return Err(AccumulatorError::LsbAboveMsb { msb, lsb });
        }
        let width = ovf as u64 + (msb as i64 - lsb as i64) as u64 + 1;
        if width > MAX_WIDTH as u64 {
            return Err(AccumulatorError::TooWide(width));
        }
        Ok(AccumulatorSpec { ovf, msb, lsb })
    }

    /// A scratchpad that holds every product of two `fmt` values exactly and
    /// absorbs `n_products` of them without overflow.
    pub fn covering(fmt: &FormatSpec, n_products: u64) -> Self {
        AccumulatorSpec::new(
            required_ovf(n_products.max(1)),
            2 * fmt.max_exponent(),
            2 * fmt.min_exponent(),
        )
        .expect("format exponent range yields a valid scratchpad")
    }

    pub fn ovf(&self) -> u32 {
        self.ovf
    }

    pub fn msb(&self) -> i32 {
        self.msb
    }

    pub fn lsb(&self) -> i32 {
        self.lsb
    }

    pub fn width(&self) -> u32 {
        self.ovf + (self.msb - self.lsb) as u32 + 1
    }

    /// Weight of the sign bit (its value is `-2^top_weight`).
    pub fn top_weight(&self) -> i64 {
        self.msb as i64 + self.ovf as i64
    }
}

impl fmt::Display for AccumulatorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "acc:{}:{}:{}", self.ovf, self.msb, self.lsb)
    }
}

impl FromStr for AccumulatorSpec {
    type Err = AccumulatorError;

    /// Accepts `acc:<ovf>:<msb>:<lsb>` or the bare `<ovf>:<msb>:<lsb>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let malformed = || AccumulatorError::Malformed(s.to_string());
        let body = s.trim();
        let body = body.strip_prefix("acc:").unwrap_or(body);
        let fields: Vec<&str> = body.split(':').collect();
        if fields.len() != 3 {
            return Err(malformed());
        }
        let ovf = fields[0].trim().parse().map_err(|_| malformed())?;
        let msb = fields[1].trim().parse().map_err(|_| malformed())?;
        let lsb = fields[2].trim().parse().map_err(|_| malformed())?;
        AccumulatorSpec::new(ovf, msb, lsb)
    }
}

/// Guard bits needed to absorb `n` in-range products: `ceil(log2 n)`.
pub fn required_ovf(n_products: u64) -> u32 {
    if n_products <= 1 {
        0
    } else {
        (n_products - 1).ilog2() + 1
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct Flags {
    pub overflow_wrapped: bool,
    pub saw_nan: bool,
    pub saw_pos_inf: bool,
    pub saw_neg_inf: bool,
}

impl Flags {
    pub fn union(self, other: Flags) -> Flags {
        Flags {
            overflow_wrapped: self.overflow_wrapped || other.overflow_wrapped,
            saw_nan: self.saw_nan || other.saw_nan,
            saw_pos_inf: self.saw_pos_inf || other.saw_pos_inf,
            saw_neg_inf: self.saw_neg_inf || other.saw_neg_inf,
        }
    }

    pub fn any(&self) -> bool {
        self.overflow_wrapped || self.saw_nan || self.saw_pos_inf || self.saw_neg_inf
    }
}

// Saturation point for the count of wraps contributed by a single product.
const WRAP_SATURATION: u128 = 1 << 60;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct AccumulatorState {
    spec: AccumulatorSpec,
    limbs: Vec<u64>,
    wraps: i128,
    saw_nan: bool,
    saw_pos_inf: bool,
    saw_neg_inf: bool,
}

impl AccumulatorState {
    pub fn new(spec: AccumulatorSpec) -> Self {
        let n = spec.width().div_ceil(64) as usize;
        AccumulatorState {
            spec,
            limbs: vec![0; n],
            wraps: 0,
            saw_nan: false,
            saw_pos_inf: false,
            saw_neg_inf: false,
        }
    }

    pub fn spec(&self) -> &AccumulatorSpec {
        &self.spec
    }

    pub fn clear(&mut self) {
        self.limbs.iter_mut().for_each(|l| *l = 0);
        self.wraps = 0;
        self.saw_nan = false;
        self.saw_pos_inf = false;
        self.saw_neg_inf = false;
    }

    pub fn flags(&self) -> Flags {
        Flags {
            overflow_wrapped: self.wraps != 0,
            saw_nan: self.saw_nan,
            saw_pos_inf: self.saw_pos_inf,
            saw_neg_inf: self.saw_neg_inf,
        }
    }

    /// Raw two's-complement contents, little-endian limbs, `width` bits.
    pub fn bits(&self) -> &[u64] {
        &self.limbs
    }

    /// Net number of times the register wrapped past its range.
    pub fn wraps(&self) -> i128 {
        self.wraps
    }

    pub fn is_zero(&self) -> bool {
        self.limbs.iter().all(|&l| l == 0)
    }

    /// Signed register value in units of `2^lsb`.
    pub fn value(&self) -> BigInt {
        let unsigned = BigUint::from_slice(
            &self
                .limbs
                .iter()
                .flat_map(|&l| [l as u32, (l >> 32) as u32])
                .collect::<Vec<_>>(),
        );
        let v = BigInt::from_biguint(Sign::Plus, unsigned);
        if self.sign_bit() {
            v - (BigInt::from(1) << self.spec.width())
        } else {
            v
        }
    }

    /// Adds the exact product `a * b`, truncated to multiples of `2^lsb`.
    pub fn accumulate_product(&mut self, a: &DecodedNumber, b: &DecodedNumber) {
        if a.is_nan() || b.is_nan() {
            self.saw_nan = true;
            return;
        }
        let a_inf = a.class == NumClass::Inf;
        let b_inf = b.class == NumClass::Inf;
        if a_inf || b_inf {
            if a.class == NumClass::Zero || b.class == NumClass::Zero {
                self.saw_nan = true;
            } else if a.negative ^ b.negative {
                self.saw_neg_inf = true;
            } else {
                self.saw_pos_inf = true;
            }
            return;
        }
        if !a.is_finite_nonzero() || !b.is_finite_nonzero() {
            return;
        }
        let magnitude = mul_u128(a.significand, b.significand);
        let offset = a.exponent as i64 + b.exponent as i64 - self.spec.lsb as i64;
        self.add_aligned(magnitude, offset, a.negative ^ b.negative);
    }

    /// Adds `x` (a product with an exact 1.0).
    pub fn accumulate_value(&mut self, x: &DecodedNumber) {
        self.accumulate_product(x, &DecodedNumber::one());
    }

    /// Folds another state with the same spec into this one.
    pub fn merge(&mut self, other: &AccumulatorState) {
        assert_eq!(self.spec, other.spec, "merging scratchpads of different geometry");
        let s_self = self.sign_bit() as i128;
        let s_other = other.sign_bit() as i128;
        let mut carry = false;
        for (l, &o) in self.limbs.iter_mut().zip(&other.limbs) {
            let (v, c1) = l.overflowing_add(o);
            let (v, c2) = v.overflowing_add(carry as u64);
            *l = v;
            carry = c1 || c2;
        }
        let delta = self.normalize_top(carry as u128, false);
        let s_new = self.sign_bit() as i128;
        self.wraps = self
            .wraps
            .saturating_add(other.wraps)
            .saturating_add(delta)
            .saturating_add(s_new - s_self - s_other);
        self.saw_nan |= other.saw_nan;
        self.saw_pos_inf |= other.saw_pos_inf;
        self.saw_neg_inf |= other.saw_neg_inf;
    }

    /// Rounds the register contents once into `out`.
    pub fn render(&self, out: &FormatSpec) -> u128 {
        if self.saw_nan || (self.saw_pos_inf && self.saw_neg_inf) {
            return out.nan();
        }
        if self.saw_pos_inf {
            return out.infinity(false);
        }
        if self.saw_neg_inf {
            return out.infinity(true);
        }
        let lsb = self.spec.lsb as i64;
        if self.sign_bit() {
            let mut mag = self.limbs.clone();
            negate_in_place(&mut mag);
            mask_top(&mut mag, self.spec.width());
            round_limbs(true, &mag, lsb, out)
        } else {
            round_limbs(false, &self.limbs, lsb, out)
        }
    }

    fn sign_bit(&self) -> bool {
        let w = self.spec.width() - 1;
        (self.limbs[(w / 64) as usize] >> (w % 64)) & 1 == 1
    }

    /// Adds `±magnitude * 2^(offset + lsb)`, flooring bits below `2^lsb`.
    fn add_aligned(&mut self, magnitude: U256, offset: i64, negative: bool) {
        let (magnitude, offset) = if offset < 0 {
            let shift = offset.unsigned_abs().min(256) as u32;
            let (mut q, dropped) = shr_sticky(magnitude, shift);
            if negative && dropped {
                // floor(-m) = -ceil(m)
                q += U256::ONE;
            }
            (q, 0u64)
        } else {
            (magnitude, offset as u64)
        };
        if magnitude == U256::ZERO {
            return;
        }
        let s_old = self.sign_bit() as i128;
        let m = to_limbs(magnitude);
        let n = self.limbs.len() as u64;
        let word = offset / 64;
        let bit = (offset % 64) as u32;
        let mut shifted = [0u64; 5];
        if bit == 0 {
            shifted[..4].copy_from_slice(&m);
        } else {
            shifted[0] = m[0] << bit;
            for i in 1..4 {
                shifted[i] = (m[i] << bit) | (m[i - 1] >> (64 - bit));
            }
            shifted[4] = m[3] >> (64 - bit);
        }
        let mut carry = false;
        let mut beyond: u128 = 0;
        for (i, &s) in shifted.iter().enumerate() {
            let idx = word.saturating_add(i as u64);
            if idx < n {
                let l = &mut self.limbs[idx as usize];
                if negative {
                    let (v, b1) = l.overflowing_sub(s);
                    let (v, b2) = v.overflowing_sub(carry as u64);
                    *l = v;
                    carry = b1 || b2;
                } else {
                    let (v, c1) = l.overflowing_add(s);
                    let (v, c2) = v.overflowing_add(carry as u64);
                    *l = v;
                    carry = c1 || c2;
                }
            } else if s != 0 {
                let pos = idx - n;
                let part = if pos < 2 {
                    (s as u128) << (64 * pos)
                } else {
                    WRAP_SATURATION
                };
                beyond = beyond.saturating_add(part);
            }
        }
        let mut idx = word.saturating_add(5);
        while carry && idx < n {
            let l = &mut self.limbs[idx as usize];
            if negative {
                let (v, b) = l.overflowing_sub(1);
                *l = v;
                carry = b;
            } else {
                let (v, c) = l.overflowing_add(1);
                *l = v;
                carry = c;
            }
            idx += 1;
        }
        if carry {
            beyond = beyond.saturating_add(1);
        }
        let delta = self.normalize_top(beyond, negative);
        let s_new = self.sign_bit() as i128;
        self.wraps = self.wraps.saturating_add(delta).saturating_add(s_new - s_old);
    }

    /// Clears bits above `width` in the top limb and returns how many
    /// multiples of `2^width` were carried out (negative for borrows).
    /// `beyond` counts carries/borrows out of the limb array, in units of
    /// `2^(64 * limbs)`.
    fn normalize_top(&mut self, beyond: u128, borrow: bool) -> i128 {
        let width = self.spec.width();
        let r = width % 64;
        let n = self.limbs.len();
        let (top, scale) = if r == 0 {
            (0u64, 0u32)
        } else {
            let t = self.limbs[n - 1] >> r;
            self.limbs[n - 1] &= (1u64 << r) - 1;
            (t, 64 - r)
        };
        let beyond = (beyond.min(WRAP_SATURATION) << scale) as i128;
        if borrow {
            top as i128 - beyond
        } else {
            top as i128 + beyond
        }
    }
}

fn negate_in_place(limbs: &mut [u64]) {
    let mut carry = true;
    for l in limbs.iter_mut() {
        let (v, c) = (!*l).overflowing_add(carry as u64);
        *l = v;
        carry = c;
    }
}

fn mask_top(limbs: &mut [u64], width: u32) {
    let r = width % 64;
    if r != 0 {
        let n = limbs.len();
        limbs[n - 1] &= (1u64 << r) - 1;
    }
}
