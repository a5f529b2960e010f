//! GEMM front door: kernel configuration discovery, casting, padding and
//! dispatch to the functional or systolic kernel.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use thiserror::Error;

use crate::accumulator::{AccumulatorSpec, AccumulatorState};
use crate::fdp::{fused_multiply_add, DotProductConfig};
use crate::formats::{cast, decode, DecodedNumber, FormatSpec, NumClass};
use crate::systolic::{run_gemm_systolic, ArrayConfig};

/// Environment variable naming the kernel configuration file.
pub const CONFIG_ENV: &str = "TAMM_CONFIG";
/// Configuration file consulted when the environment variable is unset.
pub const DEFAULT_CONFIG_FILE: &str = "tamm.conf";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GemmError {
    #[error("inner dimensions differ: A is {a_rows}x{a_cols}, B is {b_rows}x{b_cols}")]
    InnerMismatch {
        a_rows: usize,
        a_cols: usize,
        b_rows: usize,
        b_cols: usize,
    },
    #[error("C is {c_rows}x{c_cols}, expected {rows}x{cols}")]
    OutputMismatch {
        rows: usize,
        cols: usize,
        c_rows: usize,
        c_cols: usize,
    },
    #[error("operands use different formats ({0} vs {1})")]
    FormatMismatch(FormatSpec, FormatSpec),
    #[error("buffer of {len} words cannot hold {rows}x{cols} with leading dimension {ld}")]
    BadBuffer { rows: usize, cols: usize, ld: usize, len: usize },
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("kernel configuration: invalid `{key}`: {message}")]
pub struct ConfigError {
    pub key: String,
    pub message: String,
}

impl ConfigError {
    fn new(key: &str, message: impl Into<String>) -> Self {
        ConfigError {
            key: key.to_string(),
            message: message.into(),
        }
    }
}

/// Dense row-major matrix of format words.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatrixBuffer {
    rows: usize,
    cols: usize,
    ld: usize,
    format: FormatSpec,
    data: Vec<u128>,
}

impl MatrixBuffer {
    /// All-zero matrix.
    pub fn zeros(rows: usize, cols: usize, format: FormatSpec) -> Self {
        MatrixBuffer {
            rows,
            cols,
            ld: cols,
            format,
            data: vec![format.zero(); rows * cols],
        }
    }

    /// Wraps row-major storage with `ld == cols`.
    pub fn from_words(rows: usize, cols: usize, format: FormatSpec, data: Vec<u128>) -> Result<Self, GemmError> {
        Self::with_ld(rows, cols, cols, format, data)
    }

    pub fn with_ld(rows: usize, cols: usize, ld: usize, format: FormatSpec, data: Vec<u128>) -> Result<Self, GemmError> {
        if ld < cols || data.len() != rows * ld {
            return Err(GemmError::BadBuffer {
                rows,
                cols,
                ld,
                len: data.len(),
            });
        }
        Ok(MatrixBuffer {
            rows,
            cols,
            ld,
            format,
            data,
        })
    }

    pub fn from_f32(rows: usize, cols: usize, values: &[f32]) -> Result<Self, GemmError> {
        let data = values.iter().map(|v| v.to_bits() as u128).collect();
        Self::from_words(rows, cols, FormatSpec::binary32(), data)
    }

    pub fn from_f64(rows: usize, cols: usize, values: &[f64]) -> Result<Self, GemmError> {
        let data = values.iter().map(|v| v.to_bits() as u128).collect();
        Self::from_words(rows, cols, FormatSpec::binary64(), data)
    }

    pub fn identity(n: usize, format: FormatSpec) -> Self {
        let mut m = Self::zeros(n, n, format);
        for i in 0..n {
            m.set(i, i, format.one());
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn leading_dimension(&self) -> usize {
        self.ld
    }

    pub fn format(&self) -> FormatSpec {
        self.format
    }

    /// Raw storage including any slack beyond `cols` in each row.
    pub fn storage(&self) -> &[u128] {
        &self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> u128 {
        self.data[r * self.ld + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, word: u128) {
        self.data[r * self.ld + c] = word;
    }

    pub fn row(&self, r: usize) -> &[u128] {
        &self.data[r * self.ld..r * self.ld + self.cols]
    }

    /// Compact copy with `ld == cols`.
    pub fn compact(&self) -> MatrixBuffer {
        let data = (0..self.rows).flat_map(|r| self.row(r).iter().copied()).collect();
        MatrixBuffer {
            rows: self.rows,
            cols: self.cols,
            ld: self.cols,
            format: self.format,
            data,
        }
    }

    pub fn transpose(&self) -> MatrixBuffer {
        let mut t = Self::zeros(self.cols, self.rows, self.format);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.set(c, r, self.get(r, c));
            }
        }
        t
    }

    /// Element-wise cast; a plain compact copy when the format is unchanged.
    pub fn cast_to(&self, to: &FormatSpec) -> MatrixBuffer {
        let from = self.format;
        let data = (0..self.rows)
            .flat_map(|r| self.row(r).iter().map(|&w| if from == *to { w } else { cast(w, &from, to) }))
            .collect();
        MatrixBuffer {
            rows: self.rows,
            cols: self.cols,
            ld: self.cols,
            format: *to,
            data,
        }
    }

    /// Values as doubles (rounded when the format is wider).
    pub fn to_f64(&self) -> Vec<f64> {
        (0..self.rows)
            .flat_map(|r| self.row(r).iter().map(|&w| decode(w, &self.format).to_f64()))
            .collect()
    }

    /// Compact row-major words.
    pub fn words(&self) -> Vec<u128> {
        self.compact().data
    }
}

/// A matrix zero-padded up to tile multiples, with what was added.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Padded {
    pub matrix: MatrixBuffer,
    pub pad_rows: usize,
    pub pad_cols: usize,
}

impl Padded {
    /// Removes the padding again.
    pub fn strip(&self) -> MatrixBuffer {
        let rows = self.matrix.rows - self.pad_rows;
        let cols = self.matrix.cols - self.pad_cols;
        let mut out = MatrixBuffer::zeros(rows, cols, self.matrix.format);
        for r in 0..rows {
            out.data[r * cols..(r + 1) * cols].copy_from_slice(&self.matrix.row(r)[..cols]);
        }
        out
    }
}

fn round_up(x: usize, to: usize) -> usize {
    x.div_ceil(to) * to
}

/// Zero-pads rows and columns to multiples of the tile shape.
pub fn pad_and_tile(m: &MatrixBuffer, tile_rows: usize, tile_cols: usize) -> Padded {
    let tile_rows = tile_rows.max(1);
    let tile_cols = tile_cols.max(1);
    let rows = round_up(m.rows, tile_rows);
    let cols = round_up(m.cols, tile_cols);
    let mut out = MatrixBuffer::zeros(rows, cols, m.format);
    for r in 0..m.rows {
        out.data[r * cols..r * cols + m.cols].copy_from_slice(m.row(r));
    }
    Padded {
        matrix: out,
        pad_rows: rows - m.rows,
        pad_cols: cols - m.cols,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Backend {
    Functional,
    Systolic,
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Backend::Functional => "functional",
            Backend::Systolic => "systolic",
        })
    }
}

impl FromStr for Backend {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "functional" => Ok(Backend::Functional),
            "systolic" => Ok(Backend::Systolic),
            other => Err(format!("unknown backend `{other}` (expected functional|systolic)")),
        }
    }
}

/// What the kernel computes and how.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct KernelConfig {
    pub dot_cfg: DotProductConfig,
    pub array_rows: usize,
    pub array_cols: usize,
    pub backend: Backend,
    /// Worker threads for the functional kernel; 0 means the rayon default.
    pub threads: usize,
    pub fifo_depth: usize,
}

impl Default for KernelConfig {
    fn default() -> Self {
        let fmt = FormatSpec::binary32();
        let acc = AccumulatorSpec::new(9, 6, -48).expect("valid default accumulator");
        KernelConfig {
            dot_cfg: DotProductConfig::uniform(fmt, acc),
            array_rows: 8,
            array_cols: 8,
            backend: Backend::Functional,
            threads: 0,
            fifo_depth: 8,
        }
    }
}

impl KernelConfig {
    pub fn new(dot_cfg: DotProductConfig, array_rows: usize, array_cols: usize, backend: Backend) -> Self {
        KernelConfig {
            dot_cfg,
            array_rows,
            array_cols,
            backend,
            ..KernelConfig::default()
        }
    }

    pub fn with_threads(mut self, threads: usize) -> Self {
        self.threads = threads;
        self
    }

    pub fn array_config(&self) -> ArrayConfig {
        ArrayConfig {
            rows: self.array_rows,
            cols: self.array_cols,
            dot_cfg: self.dot_cfg,
            fifo_depth: self.fifo_depth,
        }
    }
}

impl fmt::Display for KernelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} / {} / {}x{} / {}",
            self.dot_cfg.operand_format, self.dot_cfg.accumulator, self.array_rows, self.array_cols, self.backend
        )?;
        if self.dot_cfg.output_format != self.dot_cfg.operand_format {
            write!(f, " / out {}", self.dot_cfg.output_format)?;
        }
        Ok(())
    }
}

/// Parses `key=value` lines (`#` comments allowed) on top of the defaults.
pub fn parse_config(text: &str) -> Result<KernelConfig, ConfigError> {
    let mut cfg = KernelConfig::default();
    let mut out_format = None;
    for raw in text.lines() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| ConfigError::new(line, "expected key=value"))?;
        let (key, value) = (key.trim(), value.trim());
        match key {
            "format" => {
                cfg.dot_cfg.operand_format = value.parse().map_err(|e| ConfigError::new(key, format!("{e}")))?;
            }
            "acc" => {
                cfg.dot_cfg.accumulator = value.parse().map_err(|e| ConfigError::new(key, format!("{e}")))?;
            }
            "out" => {
                out_format = Some(value.parse().map_err(|e| ConfigError::new(key, format!("{e}")))?);
            }
            "array" => {
                let (r, c) = value
                    .split_once('x')
                    .and_then(|(r, c)| Some((r.trim().parse::<usize>().ok()?, c.trim().parse::<usize>().ok()?)))
                    .filter(|&(r, c)| r >= 1 && c >= 1)
                    .ok_or_else(|| ConfigError::new(key, format!("`{value}` is not <rows>x<cols> with both >= 1")))?;
                cfg.array_rows = r;
                cfg.array_cols = c;
            }
            "backend" => cfg.backend = value.parse().map_err(|e: String| ConfigError::new(key, e))?,
            "threads" => {
                cfg.threads = value
                    .parse()
                    .map_err(|_| ConfigError::new(key, format!("`{value}` is not a thread count")))?
            }
            "fifo_depth" => {
                cfg.fifo_depth = value
                    .parse()
                    .ok()
                    .filter(|&d| d >= 1)
                    .ok_or_else(|| ConfigError::new(key, format!("`{value}` is not a depth >= 1")))?
            }
            other => return Err(ConfigError::new(other, "unknown key")),
        }
    }
    cfg.dot_cfg.output_format = out_format.unwrap_or(cfg.dot_cfg.operand_format);
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<KernelConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::new(CONFIG_ENV, format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text)
}

/// The kernel configuration: the file named by `TAMM_CONFIG`, else
/// `./tamm.conf` if present, else the defaults.
pub fn query_config() -> Result<KernelConfig, ConfigError> {
    match std::env::var_os(CONFIG_ENV) {
        Some(path) if !path.is_empty() => load_config(Path::new(&path)),
        _ => {
            let local = Path::new(DEFAULT_CONFIG_FILE);
            if local.is_file() {
                load_config(local)
            } else {
                Ok(KernelConfig::default())
            }
        }
    }
}

fn with_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    if threads == 0 {
        return f();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

/// `A * B` on the kernel: operands already in the kernel's operand format,
/// result in its output format. Rows are computed in parallel; every
/// element is one independent fused dot product.
pub fn kernel_product(a: &MatrixBuffer, b: &MatrixBuffer, cfg: &KernelConfig) -> Result<MatrixBuffer, GemmError> {
    if a.cols != b.rows {
        return Err(GemmError::InnerMismatch {
            a_rows: a.rows,
            a_cols: a.cols,
            b_rows: b.rows,
            b_cols: b.cols,
        });
    }
    let fmt = cfg.dot_cfg.operand_format;
    let a_p = pad_and_tile(a, cfg.array_rows, 1);
    let b_p = pad_and_tile(b, 1, cfg.array_cols);
    let product = match cfg.backend {
        Backend::Systolic => run_gemm_systolic(&a_p.matrix, &b_p.matrix, &cfg.array_config())?.0,
        Backend::Functional => {
            let (m, k, n) = (a_p.matrix.rows, a.cols, b_p.matrix.cols);
            let da: Vec<DecodedNumber> = a_p.matrix.data.iter().map(|&w| decode(w, &fmt)).collect();
            let bt = b_p.matrix.transpose();
            let db: Vec<DecodedNumber> = bt.data.iter().map(|&w| decode(w, &fmt)).collect();
            let out_fmt = cfg.dot_cfg.output_format;
            let spec = cfg.dot_cfg.accumulator;
            let data: Vec<u128> = with_pool(cfg.threads, || {
                (0..m)
                    .into_par_iter()
                    .flat_map_iter(|i| {
                        let arow = &da[i * k..(i + 1) * k];
                        let db = &db;
                        (0..n).map(move |j| {
                            let mut acc = AccumulatorState::new(spec);
                            for (x, y) in arow.iter().zip(&db[j * k..(j + 1) * k]) {
                                acc.accumulate_product(x, y);
                            }
                            acc.render(&out_fmt)
                        })
                    })
                    .collect()
            });
            MatrixBuffer::from_words(m, n, out_fmt, data)?
        }
    };
    Ok(Padded {
        matrix: product,
        pad_rows: a_p.pad_rows,
        pad_cols: b_p.pad_cols,
    }
    .strip())
}

fn is_zero(d: &DecodedNumber) -> bool {
    d.class == NumClass::Zero
}

/// `C' = alpha * (A * B) + beta * C` with the product on the tailored
/// kernel and the scaling in the host format (the format of A, B and C),
/// rounding once per host operation.
///
/// Following BLAS conventions, `beta == 0` means C is not read and
/// `alpha == 0` means the product is not computed.
pub fn gemm(
    a: &MatrixBuffer,
    b: &MatrixBuffer,
    c: &MatrixBuffer,
    alpha: u128,
    beta: u128,
    cfg: &KernelConfig,
) -> Result<MatrixBuffer, GemmError> {
    let host = a.format;
    for other in [b.format, c.format] {
        if other != host {
            return Err(GemmError::FormatMismatch(host, other));
        }
    }
    if a.cols != b.rows {
        return Err(GemmError::InnerMismatch {
            a_rows: a.rows,
            a_cols: a.cols,
            b_rows: b.rows,
            b_cols: b.cols,
        });
    }
    if c.rows != a.rows || c.cols != b.cols {
        return Err(GemmError::OutputMismatch {
            rows: a.rows,
            cols: b.cols,
            c_rows: c.rows,
            c_cols: c.cols,
        });
    }
    let alpha_d = decode(alpha, &host);
    let beta_d = decode(beta, &host);
    let product = if is_zero(&alpha_d) {
        None
    } else {
        let kernel_fmt = cfg.dot_cfg.operand_format;
        let p = kernel_product(&a.cast_to(&kernel_fmt), &b.cast_to(&kernel_fmt), cfg)?;
        Some(p.cast_to(&host))
    };
    let one = DecodedNumber::one();
    let neg_zero = DecodedNumber::finite(true, 0, 0);
    let mut out = MatrixBuffer::zeros(a.rows, b.cols, host);
    for i in 0..a.rows {
        for j in 0..b.cols {
            let scaled_c = if is_zero(&beta_d) {
                None
            } else {
                Some(fused_multiply_add(&beta_d, &decode(c.get(i, j), &host), &neg_zero, &host))
            };
            let scaled_p = product
                .as_ref()
                .map(|p| fused_multiply_add(&alpha_d, &decode(p.get(i, j), &host), &neg_zero, &host));
            let word = match (scaled_p, scaled_c) {
                (Some(t), Some(u)) => fused_multiply_add(&decode(t, &host), &one, &decode(u, &host), &host),
                (Some(t), None) => t,
                (None, Some(u)) => u,
                (None, None) => host.zero(),
            };
            out.set(i, j, word);
        }
    }
    Ok(out)
}
