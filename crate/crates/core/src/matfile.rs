//! Binary matrix files: a 16-byte header (`TAMM`, rows, cols, format code;
//! little-endian `u32`s) followed by row-major little-endian words of
//! `ceil(total_bits / 8)` bytes each.
//!
//! The format code is `kind << 24 | a << 16 | b << 8` with kind 1 for
//! IEEE-style `<E, M>` (`a = E`, `b = M`), 2 for bfloat16 and 3 for
//! posit `<n, es>` (`a = n`, `b = es`).

use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::formats::{FormatKind, FormatSpec};
use crate::gemm::MatrixBuffer;

pub const MAGIC: &[u8; 4] = b"TAMM";

#[derive(Debug, Error)]
pub enum MatFileError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("not a matrix file (bad magic)")]
    BadMagic,
    #[error("unknown format code {0:#010x}")]
    BadFormat(u32),
    #[error("file ends early: expected {expected} payload bytes, found {found}")]
    Truncated { expected: usize, found: usize },
}

pub fn format_code(fmt: &FormatSpec) -> u32 {
    match fmt.kind() {
        FormatKind::Ieee754 => 1 << 24 | fmt.exponent_bits() << 16 | fmt.significand_bits() << 8,
        FormatKind::Bfloat16 => 2 << 24,
        FormatKind::Posit => 3 << 24 | fmt.total_bits() << 16 | fmt.es() << 8,
    }
}

pub fn format_from_code(code: u32) -> Result<FormatSpec, MatFileError> {
    let (a, b) = ((code >> 16) & 0xff, (code >> 8) & 0xff);
    let fmt = match code >> 24 {
        1 => FormatSpec::ieee(a, b).ok(),
        2 => Some(FormatSpec::bfloat16()),
        3 => FormatSpec::posit(a, b).ok(),
        _ => None,
    };
    fmt.filter(|_| code & 0xff == 0).ok_or(MatFileError::BadFormat(code))
}

fn word_bytes(fmt: &FormatSpec) -> usize {
    fmt.total_bits().div_ceil(8) as usize
}

pub fn write_matrix<W: Write>(mut out: W, m: &MatrixBuffer) -> Result<(), MatFileError> {
    let fmt = m.format();
    let mut buf = Vec::with_capacity(16 + m.rows() * m.cols() * word_bytes(&fmt));
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    buf.extend_from_slice(&format_code(&fmt).to_le_bytes());
    let nb = word_bytes(&fmt);
    for r in 0..m.rows() {
        for &w in m.row(r) {
            buf.extend_from_slice(&w.to_le_bytes()[..nb]);
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_matrix<R: Read>(mut input: R) -> Result<MatrixBuffer, MatFileError> {
    let mut header = [0u8; 16];
    input.read_exact(&mut header)?;
    if &header[..4] != MAGIC {
        return Err(MatFileError::BadMagic);
    }
    let field = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().expect("4 bytes"));
    let (rows, cols) = (field(4) as usize, field(8) as usize);
    let fmt = format_from_code(field(12))?;
    let nb = word_bytes(&fmt);
    let mut payload = Vec::new();
    input.read_to_end(&mut payload)?;
    let expected = rows * cols * nb;
    if payload.len() < expected {
        return Err(MatFileError::Truncated {
            expected,
            found: payload.len(),
        });
    }
    let data = payload[..expected]
        .chunks_exact(nb)
        .map(|c| {
            let mut bytes = [0u8; 16];
            bytes[..nb].copy_from_slice(c);
            u128::from_le_bytes(bytes) & fmt.word_mask()
        })
        .collect();
    Ok(MatrixBuffer::from_words(rows, cols, fmt, data).expect("sizes checked"))
}

pub fn save(path: &Path, m: &MatrixBuffer) -> Result<(), MatFileError> {
    write_matrix(std::fs::File::create(path)?, m)
}

pub fn load(path: &Path) -> Result<MatrixBuffer, MatFileError> {
    read_matrix(io::BufReader::new(std::fs::File::open(path)?))
}
