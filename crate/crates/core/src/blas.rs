//! BLAS-compatible entry points.
//!
//! The shared library exports the Fortran-style `sgemm_`/`dgemm_`
//! (column-major, every argument by pointer) and the CBLAS-style
//! `cblas_sgemm`/`cblas_dgemm` (explicit layout, scalars by value). A host
//! program linked against a BLAS picks these up through the loader without
//! being rebuilt. Every call reads the kernel configuration (see
//! [`query_config`](crate::gemm::query_config)) unless an override is set.
//!
//! Invalid arguments are reported the way reference BLAS does: a message
//! naming the routine and the 1-based position of the offending parameter
//! on stderr, with C left untouched. The last error is also kept for
//! [`tamm_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, c_int};

use thiserror::Error;

use crate::formats::FormatSpec;
use crate::gemm::{gemm, query_config, KernelConfig, MatrixBuffer};

pub const CBLAS_ROW_MAJOR: c_int = 101;
pub const CBLAS_COL_MAJOR: c_int = 102;
pub const CBLAS_NO_TRANS: c_int = 111;
pub const CBLAS_TRANS: c_int = 112;
pub const CBLAS_CONJ_TRANS: c_int = 113;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    RowMajor,
    ColMajor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transpose {
    No,
    Yes,
}

/// Which calling convention a parameter index refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Convention {
    /// `xGEMM(TRANSA, TRANSB, M, N, K, ALPHA, A, LDA, B, LDB, BETA, C, LDC)`
    Fortran,
    /// `cblas_xgemm(Layout, TransA, TransB, M, N, K, alpha, A, lda, B, ldb, beta, C, ldc)`
    Cblas,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum BlasError {
    #[error("On entry to {routine} parameter number {param} had an illegal value")]
    IllegalParameter { routine: &'static str, param: i32 },
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Kernel(String),
}

impl BlasError {
    /// 1-based parameter position, or -1 for configuration/kernel failures.
    pub fn code(&self) -> i32 {
        match self {
            BlasError::IllegalParameter { param, .. } => *param,
            BlasError::Config(_) | BlasError::Kernel(_) => -1,
        }
    }
}

/// Host element types with a native IEEE layout.
pub trait HostFloat: Copy + Send + Sync {
    const ROUTINE: &'static str;
    fn format() -> FormatSpec;
    fn to_word(self) -> u128;
    fn from_word(w: u128) -> Self;
}

impl HostFloat for f32 {
    const ROUTINE: &'static str = "SGEMM";
    fn format() -> FormatSpec {
        FormatSpec::binary32()
    }
    fn to_word(self) -> u128 {
        self.to_bits() as u128
    }
    fn from_word(w: u128) -> Self {
        f32::from_bits(w as u32)
    }
}

impl HostFloat for f64 {
    const ROUTINE: &'static str = "DGEMM";
    fn format() -> FormatSpec {
        FormatSpec::binary64()
    }
    fn to_word(self) -> u128 {
        self.to_bits() as u128
    }
    fn from_word(w: u128) -> Self {
        f64::from_bits(w as u64)
    }
}

thread_local! {
    static CONFIG_OVERRIDE: RefCell<Option<KernelConfig>> = const { RefCell::new(None) };
    static LAST_ERROR: RefCell<Option<BlasError>> = const { RefCell::new(None) };
}

/// Replaces configuration discovery for subsequent calls made from the
/// current thread (`None` restores it).
pub fn set_config_override(cfg: Option<KernelConfig>) {
    CONFIG_OVERRIDE.with(|o| *o.borrow_mut() = cfg);
}

/// The configuration the next call on this thread will use.
pub fn active_config() -> Result<KernelConfig, BlasError> {
    if let Some(cfg) = CONFIG_OVERRIDE.with(|o| *o.borrow()) {
        return Ok(cfg);
    }
    query_config().map_err(|e| BlasError::Config(e.to_string()))
}

/// Error of the last call made from the current thread, like `errno`.
pub fn last_error() -> Option<BlasError> {
    LAST_ERROR.with(|e| e.borrow().clone())
}

fn set_last_error(e: Option<BlasError>) {
    LAST_ERROR.with(|slot| *slot.borrow_mut() = e);
}

/// Dimensions and strides of one GEMM call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GemmShape {
    pub layout: Layout,
    pub trans_a: Transpose,
    pub trans_b: Transpose,
    pub m: i64,
    pub n: i64,
    pub k: i64,
    pub lda: i64,
    pub ldb: i64,
    pub ldc: i64,
}

impl GemmShape {
    /// Stored (rows, cols) of A, B and C.
    fn stored(&self) -> [(usize, usize); 3] {
        let (m, n, k) = (self.m as usize, self.n as usize, self.k as usize);
        let a = if self.trans_a == Transpose::No { (m, k) } else { (k, m) };
        let b = if self.trans_b == Transpose::No { (k, n) } else { (n, k) };
        [a, b, (m, n)]
    }

    /// Minimum leading dimension for a stored matrix.
    fn min_ld(&self, (rows, cols): (usize, usize)) -> i64 {
        let outer = match self.layout {
            Layout::ColMajor => rows,
            Layout::RowMajor => cols,
        };
        outer.max(1) as i64
    }

    /// Number of elements a stored matrix spans in memory.
    fn span(&self, (rows, cols): (usize, usize), ld: i64) -> usize {
        if rows == 0 || cols == 0 {
            return 0;
        }
        let ld = ld as usize;
        match self.layout {
            Layout::ColMajor => (cols - 1) * ld + rows,
            Layout::RowMajor => (rows - 1) * ld + cols,
        }
    }

    /// Reference-BLAS argument checks; `Err` carries the 1-based position
    /// of the first bad parameter.
    pub fn validate(&self, convention: Convention) -> Result<(), i32> {
        let shift = match convention {
            Convention::Fortran => 0,
            Convention::Cblas => 1,
        };
        let [a, b, c] = self.stored();
        let checks = [
            (self.m < 0, 3),
            (self.n < 0, 4),
            (self.k < 0, 5),
        ];
        for (bad, pos) in checks {
            if bad {
                return Err(pos + shift);
            }
        }
        let checks = [
            (self.lda < self.min_ld(a), 8),
            (self.ldb < self.min_ld(b), 10),
            (self.ldc < self.min_ld(c), 13),
        ];
        for (bad, pos) in checks {
            if bad {
                return Err(pos + shift);
            }
        }
        Ok(())
    }

    /// Element spans of A, B and C that the call may touch.
    pub fn spans(&self) -> [usize; 3] {
        let [a, b, c] = self.stored();
        [self.span(a, self.lda), self.span(b, self.ldb), self.span(c, self.ldc)]
    }
}

/// Reads `op(X)` into a row-major buffer (transposes are materialized).
fn gather<T: HostFloat>(
    data: &[T],
    layout: Layout,
    trans: Transpose,
    ld: usize,
    rows: usize,
    cols: usize,
) -> MatrixBuffer {
    let fmt = T::format();
    let mut words = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            // (i, j) of op(X) is (r, c) of the stored matrix.
            let (r, c) = if trans == Transpose::No { (i, j) } else { (j, i) };
            let idx = match layout {
                Layout::ColMajor => r + c * ld,
                Layout::RowMajor => r * ld + c,
            };
            words.push(data[idx].to_word());
        }
    }
    MatrixBuffer::from_words(rows, cols, fmt, words).expect("sizes match")
}

/// `C <- alpha * op(A) * op(B) + beta * C` on strided host arrays, with
/// the tailored kernel described by `cfg`.
#[allow(clippy::too_many_arguments)]
pub fn gemm_strided<T: HostFloat>(
    shape: &GemmShape,
    convention: Convention,
    alpha: T,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
    cfg: &KernelConfig,
) -> Result<(), BlasError> {
    shape.validate(convention).map_err(|param| BlasError::IllegalParameter {
        routine: T::ROUTINE,
        param,
    })?;
    let [span_a, span_b, span_c] = shape.spans();
    assert!(a.len() >= span_a && b.len() >= span_b && c.len() >= span_c, "buffers shorter than their dimensions");
    let (m, n, k) = (shape.m as usize, shape.n as usize, shape.k as usize);
    let fmt = T::format();
    let alpha_w = alpha.to_word();
    let beta_w = beta.to_word();
    let is_zero = |w: u128| w & !(1u128 << (fmt.total_bits() - 1)) == 0;
    // Reference BLAS quick return.
    if m == 0 || n == 0 || ((is_zero(alpha_w) || k == 0) && beta_w == fmt.one()) {
        return Ok(());
    }
    let op_a = gather(a, shape.layout, shape.trans_a, shape.lda as usize, m, k);
    let op_b = gather(b, shape.layout, shape.trans_b, shape.ldb as usize, k, n);
    let cur_c = gather(c, shape.layout, Transpose::No, shape.ldc as usize, m, n);
    let out = gemm(&op_a, &op_b, &cur_c, alpha_w, beta_w, cfg).map_err(|e| BlasError::Kernel(e.to_string()))?;
    let ldc = shape.ldc as usize;
    for i in 0..m {
        for j in 0..n {
            let idx = match shape.layout {
                Layout::ColMajor => i + j * ldc,
                Layout::RowMajor => i * ldc + j,
            };
            c[idx] = T::from_word(out.get(i, j));
        }
    }
    Ok(())
}

fn report(e: BlasError) {
    match &e {
        BlasError::IllegalParameter { routine, param } => {
            eprintln!(" ** On entry to {routine:<6} parameter number {param:>2} had an illegal value");
        }
        other => eprintln!("tamm: {other}"),
    }
    set_last_error(Some(e));
}

fn fortran_trans(c: c_char) -> Option<Transpose> {
    match (c as u8).to_ascii_uppercase() {
        b'N' => Some(Transpose::No),
        b'T' | b'C' => Some(Transpose::Yes),
        _ => None,
    }
}

fn cblas_trans(t: c_int) -> Option<Transpose> {
    match t {
        CBLAS_NO_TRANS => Some(Transpose::No),
        CBLAS_TRANS | CBLAS_CONJ_TRANS => Some(Transpose::Yes),
        _ => None,
    }
}

/// Shared body of the exported entry points: checks the enum-like
/// arguments, wraps the raw pointers and runs the call.
///
/// # Safety
/// Pointers must satisfy the usual BLAS contract for the given dimensions.
#[allow(clippy::too_many_arguments)]
unsafe fn dispatch<T: HostFloat>(
    convention: Convention,
    layout: Option<Layout>,
    trans_a: Option<Transpose>,
    trans_b: Option<Transpose>,
    m: c_int,
    n: c_int,
    k: c_int,
    alpha: T,
    a: *const T,
    lda: c_int,
    b: *const T,
    ldb: c_int,
    beta: T,
    c: *mut T,
    ldc: c_int,
) {
    set_last_error(None);
    let shift = (convention == Convention::Cblas) as i32;
    let illegal = |param| BlasError::IllegalParameter {
        routine: T::ROUTINE,
        param,
    };
    let Some(layout) = layout else {
        return report(illegal(1));
    };
    let Some(trans_a) = trans_a else {
        return report(illegal(1 + shift));
    };
    let Some(trans_b) = trans_b else {
        return report(illegal(2 + shift));
    };
    let shape = GemmShape {
        layout,
        trans_a,
        trans_b,
        m: m as i64,
        n: n as i64,
        k: k as i64,
        lda: lda as i64,
        ldb: ldb as i64,
        ldc: ldc as i64,
    };
    if let Err(param) = shape.validate(convention) {
        return report(illegal(param));
    }
    let cfg = match active_config() {
        Ok(cfg) => cfg,
        Err(e) => return report(e),
    };
    let [span_a, span_b, span_c] = shape.spans();
    let slice = |p: *const T, len: usize| {
        if len == 0 || p.is_null() {
            &[][..]
        } else {
            std::slice::from_raw_parts(p, len)
        }
    };
    let a = slice(a, span_a);
    let b = slice(b, span_b);
    let c = if span_c == 0 || c.is_null() {
        &mut [][..]
    } else {
        std::slice::from_raw_parts_mut(c, span_c)
    };
    if let Err(e) = gemm_strided(&shape, convention, alpha, a, b, beta, c, &cfg) {
        report(e);
    }
}

macro_rules! fortran_gemm {
    ($name:ident, $t:ty) => {
        /// Fortran-convention GEMM (column-major, arguments by reference).
        ///
        /// # Safety
        /// All pointers must be valid per the BLAS calling contract.
        #[no_mangle]
        pub unsafe extern "C" fn $name(
            transa: *const c_char,
            transb: *const c_char,
            m: *const c_int,
            n: *const c_int,
            k: *const c_int,
            alpha: *const $t,
            a: *const $t,
            lda: *const c_int,
            b: *const $t,
            ldb: *const c_int,
            beta: *const $t,
            c: *mut $t,
            ldc: *const c_int,
        ) {
            dispatch::<$t>(
                Convention::Fortran,
                Some(Layout::ColMajor),
                fortran_trans(*transa),
                fortran_trans(*transb),
                *m,
                *n,
                *k,
                *alpha,
                a,
                *lda,
                b,
                *ldb,
                *beta,
                c,
                *ldc,
            )
        }
    };
}

macro_rules! cblas_gemm {
    ($name:ident, $t:ty) => {
        /// CBLAS-convention GEMM.
        ///
        /// # Safety
        /// All pointers must be valid per the BLAS calling contract.
        #[no_mangle]
        pub unsafe extern "C" fn $name(
            layout: c_int,
            transa: c_int,
            transb: c_int,
            m: c_int,
            n: c_int,
            k: c_int,
            alpha: $t,
            a: *const $t,
            lda: c_int,
            b: *const $t,
            ldb: c_int,
            beta: $t,
            c: *mut $t,
            ldc: c_int,
        ) {
            let layout = match layout {
                CBLAS_ROW_MAJOR => Some(Layout::RowMajor),
                CBLAS_COL_MAJOR => Some(Layout::ColMajor),
                _ => None,
            };
            dispatch::<$t>(
                Convention::Cblas,
                layout,
                cblas_trans(transa),
                cblas_trans(transb),
                m,
                n,
                k,
                alpha,
                a,
                lda,
                b,
                ldb,
                beta,
                c,
                ldc,
            )
        }
    };
}

fortran_gemm!(sgemm_, f32);
fortran_gemm!(dgemm_, f64);
cblas_gemm!(cblas_sgemm, f32);
cblas_gemm!(cblas_dgemm, f64);

/// Parameter position reported by the last call on the calling thread (0
/// if it succeeded, -1 for configuration or kernel errors).
#[no_mangle]
pub extern "C" fn tamm_last_error() -> c_int {
    last_error().map_or(0, |e| e.code())
}

/// Writes the active kernel configuration as a NUL-terminated string into
/// `buf` (at most `len` bytes). Returns the full string length, or -1 if
/// the configuration cannot be read.
///
/// # Safety
/// `buf` must be valid for `len` bytes of writes, or null with `len == 0`.
#[no_mangle]
pub unsafe extern "C" fn tamm_active_config(buf: *mut c_char, len: usize) -> c_int {
    let text = match active_config() {
        Ok(cfg) => cfg.to_string(),
        Err(e) => {
            report(e);
            return -1;
        }
    };
    if !buf.is_null() && len > 0 {
        let n = text.len().min(len - 1);
        std::ptr::copy_nonoverlapping(text.as_ptr(), buf as *mut u8, n);
        *buf.add(n) = 0;
    }
    text.len() as c_int
}
