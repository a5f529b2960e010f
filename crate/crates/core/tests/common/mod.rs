//! Independent reference implementations shared by the integration tests.
//! Nothing here calls into the accumulator or the format rounders.
#![allow(dead_code)]

pub mod blas_harness;

use num_bigint::BigInt;
use num_integer::Integer;
use num_traits::{One, Zero};
use rand::Rng;
use tamm::{decode, AccumulatorSpec, DecodedNumber, DotProductConfig, Dyadic, FormatSpec, MatrixBuffer, NumClass};

/// Posit value straight from the textbook definition, reading the pattern
/// as a string of characters. Exact in f64 for widths up to 16 bits.
pub fn posit_value_by_definition(word: u64, n: u32, es: u32) -> Option<f64> {
    let bits: Vec<u8> = (0..n).rev().map(|i| ((word >> i) & 1) as u8).collect();
    if bits.iter().all(|&b| b == 0) {
        return Some(0.0);
    }
    if bits[0] == 1 && bits[1..].iter().all(|&b| b == 0) {
        return None;
    }
    let negative = bits[0] == 1;
    let body: Vec<u8> = if negative {
        // two's complement of the whole word, then drop the sign
        let mut v: u64 = 0;
        for &b in &bits {
            v = (v << 1) | b as u64;
        }
        let neg = (!v).wrapping_add(1) & ((1u64 << n) - 1);
        (0..n - 1).rev().map(|i| ((neg >> i) & 1) as u8).collect()
    } else {
        bits[1..].to_vec()
    };
    let lead = body[0];
    let run = body.iter().take_while(|&&b| b == lead).count();
    let k: i64 = if lead == 1 { run as i64 - 1 } else { -(run as i64) };
    let mut rest: &[u8] = if run < body.len() { &body[run + 1..] } else { &[] };
    let mut e: i64 = 0;
    for i in 0..es {
        e <<= 1;
        if let Some((&b, tail)) = rest.split_first() {
            e |= b as i64;
            rest = tail;
        }
        let _ = i;
    }
    let mut frac = 1.0f64;
    let mut w = 0.5f64;
    for &b in rest {
        if b == 1 {
            frac += w;
        }
        w /= 2.0;
    }
    let useed_pow = k * (1i64 << es);
    let v = frac * 2f64.powi((useed_pow + e) as i32);
    Some(if negative { -v } else { v })
}

/// Exact value of a decoded number as `(mantissa, exponent)`; `None` for
/// exceptional classes.
pub fn exact_of(d: &DecodedNumber) -> Option<(BigInt, i64)> {
    match d.class {
        NumClass::Zero => Some((BigInt::zero(), 0)),
        NumClass::Normal | NumClass::Subnormal => {
            let m = BigInt::from(d.significand);
            Some((if d.negative { -m } else { m }, d.exponent as i64))
        }
        _ => None,
    }
}

/// `floor(m * 2^e / 2^lsb)` computed with unbounded integers.
pub fn floor_to_lsb(m: &BigInt, e: i64, lsb: i64) -> BigInt {
    if e >= lsb {
        m << (e - lsb) as usize
    } else {
        let d = BigInt::one() << (lsb - e) as usize;
        m.div_floor(&d)
    }
}

/// Sum of products, each floored to a multiple of `2^lsb` first; result in
/// units of `2^lsb`. `None` if any operand is exceptional.
pub fn floored_product_sum(x: &[u128], y: &[u128], fmt: &FormatSpec, lsb: i64) -> Option<BigInt> {
    let mut sum = BigInt::zero();
    for (&a, &b) in x.iter().zip(y) {
        let (ma, ea) = exact_of(&decode(a, fmt))?;
        let (mb, eb) = exact_of(&decode(b, fmt))?;
        sum += floor_to_lsb(&(ma * mb), ea + eb, lsb);
    }
    Some(sum)
}

/// Reduce `value` (in units of 2^lsb) to the signed range of a `width`-bit
/// two's-complement register.
pub fn wrap_to_width(value: &BigInt, width: u32) -> BigInt {
    let modulus = BigInt::one() << width as usize;
    let half = BigInt::one() << (width - 1) as usize;
    let r = value.mod_floor(&modulus);
    if r >= half {
        r - modulus
    } else {
        r
    }
}

/// A random finite word whose binary exponent lies in `[lo, hi]`, for
/// IEEE-style formats.
pub fn random_ieee_word<R: Rng>(rng: &mut R, fmt: &FormatSpec, lo: i32, hi: i32) -> u128 {
    let m = fmt.significand_bits();
    let bias = (1i32 << (fmt.exponent_bits() - 1)) - 1;
    let e = rng.gen_range(lo..=hi).clamp(1 - bias, bias);
    let biased = (e + bias) as u128;
    let frac = rng.gen::<u128>() & ((1u128 << m) - 1);
    let sign = (rng.gen::<bool>() as u128) << (fmt.total_bits() - 1);
    sign | (biased << m) | frac
}

/// A random non-NaR posit word.
pub fn random_posit_word<R: Rng>(rng: &mut R, fmt: &FormatSpec) -> u128 {
    loop {
        let w = rng.gen::<u128>() & fmt.word_mask();
        if w != 1u128 << (fmt.total_bits() - 1) {
            return w;
        }
    }
}

/// Random finite operand for any supported family, with the exponent kept
/// within `[lo, hi]` for IEEE-style formats.
pub fn random_word<R: Rng>(rng: &mut R, fmt: &FormatSpec, lo: i32, hi: i32) -> u128 {
    if fmt.is_posit() {
        random_posit_word(rng, fmt)
    } else {
        random_ieee_word(rng, fmt, lo, hi)
    }
}

pub fn words_f64(v: &[f64]) -> Vec<u128> {
    v.iter().map(|x| x.to_bits() as u128).collect()
}

pub fn words_f32(v: &[f32]) -> Vec<u128> {
    v.iter().map(|x| x.to_bits() as u128).collect()
}

pub fn families() -> Vec<FormatSpec> {
    vec![
        FormatSpec::binary32(),
        FormatSpec::binary64(),
        FormatSpec::bfloat16(),
        FormatSpec::posit(16, 2).unwrap(),
    ]
}

/// Random matrix of finite words (IEEE exponents within `[lo, hi]`).
pub fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, fmt: &FormatSpec, lo: i32, hi: i32) -> MatrixBuffer {
    let data = (0..rows * cols).map(|_| random_word(rng, fmt, lo, hi)).collect();
    MatrixBuffer::from_words(rows, cols, *fmt, data).unwrap()
}

/// Either an exponent-covering scratchpad or a random narrow one.
pub fn random_accumulator<R: Rng>(rng: &mut R, fmt: &FormatSpec, k: usize) -> AccumulatorSpec {
    if rng.gen_bool(0.5) {
        AccumulatorSpec::covering(fmt, k.max(1) as u64)
    } else {
        let msb = rng.gen_range(-4..24);
        AccumulatorSpec::new(rng.gen_range(0..6), msb, msb - rng.gen_range(0..50)).unwrap()
    }
}

/// Kernel output for one element straight from the definition: floor each
/// exact product to the scratchpad grid, sum exactly, wrap to the register
/// width, round once. Finite operands only.
pub fn reference_element(x: &[u128], y: &[u128], cfg: &DotProductConfig) -> u128 {
    let spec = cfg.accumulator;
    let sum = floored_product_sum(x, y, &cfg.operand_format, spec.lsb() as i64).expect("finite operands");
    let wrapped = wrap_to_width(&sum, spec.width());
    Dyadic::new(wrapped, spec.lsb() as i64).round_to(&cfg.output_format)
}

/// `A * B` element by element with [`reference_element`]; A and B already
/// in the operand format.
pub fn reference_product(a: &MatrixBuffer, b: &MatrixBuffer, cfg: &DotProductConfig) -> MatrixBuffer {
    let bt = b.transpose();
    let mut data = Vec::with_capacity(a.rows() * b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            data.push(reference_element(a.row(i), bt.row(j), cfg));
        }
    }
    MatrixBuffer::from_words(a.rows(), b.cols(), cfg.output_format, data).unwrap()
}
