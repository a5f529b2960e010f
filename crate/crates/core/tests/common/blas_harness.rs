//! Reference harness for the exported GEMM entry points: random calls over
//! layouts, transposes and padded leading dimensions, checked against index
//! arithmetic, format casts and the definition oracle.

use std::ffi::{c_char, c_int};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tamm::blas::{self, tamm_last_error, CBLAS_COL_MAJOR, CBLAS_NO_TRANS, CBLAS_ROW_MAJOR, CBLAS_TRANS};
use tamm::{cast, AccumulatorSpec, Backend, DotProductConfig, FormatSpec, KernelConfig};

use super::reference_element;

pub trait Host: Copy + PartialEq + std::fmt::Debug + From<i8> {
    fn host_format() -> FormatSpec;
    fn word(self) -> u128;
    fn from_word(w: u128) -> Self;
    fn mul(self, o: Self) -> Self;
    fn add(self, o: Self) -> Self;
    fn random(rng: &mut ChaCha8Rng) -> Self;
    fn bits(self) -> u64;
}

impl Host for f32 {
    fn host_format() -> FormatSpec {
        FormatSpec::binary32()
    }
    fn word(self) -> u128 {
        self.to_bits() as u128
    }
    fn from_word(w: u128) -> Self {
        f32::from_bits(w as u32)
    }
    fn mul(self, o: Self) -> Self {
        self * o
    }
    fn add(self, o: Self) -> Self {
        self + o
    }
    fn random(rng: &mut ChaCha8Rng) -> Self {
        rng.gen_range(-4.0f32..4.0) * 2f32.powi(rng.gen_range(-6..6))
    }
    fn bits(self) -> u64 {
        self.to_bits() as u64
    }
}

impl Host for f64 {
    fn host_format() -> FormatSpec {
        FormatSpec::binary64()
    }
    fn word(self) -> u128 {
        self.to_bits() as u128
    }
    fn from_word(w: u128) -> Self {
        f64::from_bits(w as u64)
    }
    fn mul(self, o: Self) -> Self {
        self * o
    }
    fn add(self, o: Self) -> Self {
        self + o
    }
    fn random(rng: &mut ChaCha8Rng) -> Self {
        rng.gen_range(-4.0f64..4.0) * 2f64.powi(rng.gen_range(-20..20))
    }
    fn bits(self) -> u64 {
        self.to_bits()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Call {
    pub row_major: bool,
    pub ta: bool,
    pub tb: bool,
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub lda: usize,
    pub ldb: usize,
    pub ldc: usize,
}

impl Call {
    pub fn stored(&self, rows: usize, cols: usize, ld: usize, r: usize, c: usize) -> usize {
        let _ = (rows, cols);
        if self.row_major {
            r * ld + c
        } else {
            r + c * ld
        }
    }

    pub fn len(&self, rows: usize, cols: usize, ld: usize) -> usize {
        if self.row_major {
            rows.max(1) * ld
        } else {
            cols.max(1) * ld
        }
    }

    pub fn dims_a(&self) -> (usize, usize) {
        if self.ta { (self.k, self.m) } else { (self.m, self.k) }
    }

    pub fn dims_b(&self) -> (usize, usize) {
        if self.tb { (self.n, self.k) } else { (self.k, self.n) }
    }
}

pub fn random_call(rng: &mut ChaCha8Rng, row_major: bool) -> Call {
    let (m, n, k) = (rng.gen_range(1..14), rng.gen_range(1..14), rng.gen_range(0..20));
    let (ta, tb) = (rng.gen_bool(0.5), rng.gen_bool(0.5));
    let mut call = Call { row_major, ta, tb, m, n, k, lda: 0, ldb: 0, ldc: 0 };
    let lead = |(r, c): (usize, usize)| if row_major { c } else { r };
    call.lda = lead(call.dims_a()).max(1) + rng.gen_range(0..3);
    call.ldb = lead(call.dims_b()).max(1) + rng.gen_range(0..3);
    call.ldc = lead((m, n)).max(1) + rng.gen_range(0..3);
    call
}

/// Expected C after the call, from first principles.
pub fn reference<T: Host>(call: &Call, alpha: T, a: &[T], b: &[T], beta: T, c: &[T], dot: &DotProductConfig) -> Vec<T> {
    let host = T::host_format();
    let kf = dot.operand_format;
    let (ar, ac) = call.dims_a();
    let (br, bc) = call.dims_b();
    let mut out = c.to_vec();
    let quick = (alpha == T::from(0) || call.k == 0) && beta == T::from(1);
    if quick {
        return out;
    }
    for i in 0..call.m {
        for j in 0..call.n {
            let x: Vec<u128> = (0..call.k)
                .map(|p| {
                    let (r, cc) = if call.ta { (p, i) } else { (i, p) };
                    cast(a[call.stored(ar, ac, call.lda, r, cc)].word(), &host, &kf)
                })
                .collect();
            let y: Vec<u128> = (0..call.k)
                .map(|p| {
                    let (r, cc) = if call.tb { (j, p) } else { (p, j) };
                    cast(b[call.stored(br, bc, call.ldb, r, cc)].word(), &host, &kf)
                })
                .collect();
            let idx = call.stored(call.m, call.n, call.ldc, i, j);
            let ab = T::from_word(cast(reference_element(&x, &y, dot), &dot.output_format, &host));
            let scaled_c = beta.mul(c[idx]);
            out[idx] = match (alpha == T::from(0), beta == T::from(0)) {
                (true, true) => T::from(0),
                (true, false) => scaled_c,
                (false, true) => alpha.mul(ab),
                (false, false) => alpha.mul(ab).add(scaled_c),
            };
        }
    }
    out
}

pub fn kernels(host: FormatSpec) -> Vec<KernelConfig> {
    let posit = FormatSpec::posit(16, 2).unwrap();
    let bf = FormatSpec::bfloat16();
    vec![
        KernelConfig::new(DotProductConfig::uniform(host, AccumulatorSpec::covering(&host, 64)), 4, 4, Backend::Functional),
        KernelConfig::new(DotProductConfig::uniform(posit, AccumulatorSpec::covering(&posit, 64)), 3, 5, Backend::Systolic),
        KernelConfig::new(DotProductConfig::uniform(bf, AccumulatorSpec::new(5, 5, -20).unwrap()), 8, 8, Backend::Functional),
    ]
}

pub type Cblas<T> = unsafe extern "C" fn(
    c_int, c_int, c_int, c_int, c_int, c_int, T, *const T, c_int, *const T, c_int, T, *mut T, c_int,
);
pub type Fortran<T> = unsafe extern "C" fn(
    *const c_char, *const c_char, *const c_int, *const c_int, *const c_int, *const T, *const T, *const c_int,
    *const T, *const c_int, *const T, *mut T, *const c_int,
);

#[allow(clippy::too_many_arguments)]
pub fn invoke<T: Host>(cblas: Cblas<T>, fortran: Fortran<T>, call: &Call, use_cblas: bool, alpha: T, a: &[T], b: &[T], beta: T, c: &mut [T]) {
    let (m, n, k) = (call.m as c_int, call.n as c_int, call.k as c_int);
    let (lda, ldb, ldc) = (call.lda as c_int, call.ldb as c_int, call.ldc as c_int);
    unsafe {
        if use_cblas {
            let layout = if call.row_major { CBLAS_ROW_MAJOR } else { CBLAS_COL_MAJOR };
            let t = |x: bool| if x { CBLAS_TRANS } else { CBLAS_NO_TRANS };
            cblas(layout, t(call.ta), t(call.tb), m, n, k, alpha, a.as_ptr(), lda, b.as_ptr(), ldb, beta, c.as_mut_ptr(), ldc);
        } else {
            assert!(!call.row_major);
            let t = |x: bool| (if x { b't' } else { b'N' }) as c_char;
            let (ta, tb) = (t(call.ta), t(call.tb));
            fortran(&ta, &tb, &m, &n, &k, &alpha, a.as_ptr(), &lda, b.as_ptr(), &ldb, &beta, c.as_mut_ptr(), &ldc);
        }
    }
    assert_eq!(tamm_last_error(), 0);
}

pub fn conformance<T: Host>(cblas: Cblas<T>, fortran: Fortran<T>, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = 0;
    for cfg in kernels(T::host_format()) {
        blas::set_config_override(Some(cfg));
        for (row_major, use_cblas) in [(true, true), (false, true), (false, false)] {
            for alpha in [0i8, 1, 2, -1] {
                for beta in [0i8, 1, 2, -1] {
                    let call = random_call(&mut rng, row_major);
                    let (ar, ac) = call.dims_a();
                    let (br, bc) = call.dims_b();
                    let a: Vec<T> = (0..call.len(ar, ac, call.lda)).map(|_| T::random(&mut rng)).collect();
                    let b: Vec<T> = (0..call.len(br, bc, call.ldb)).map(|_| T::random(&mut rng)).collect();
                    let c0: Vec<T> = (0..call.len(call.m, call.n, call.ldc)).map(|_| T::random(&mut rng)).collect();
                    let (alpha, beta) = (T::from(alpha), T::from(beta));
                    let want = reference(&call, alpha, &a, &b, beta, &c0, &cfg.dot_cfg);
                    let mut c = c0.clone();
                    invoke(cblas, fortran, &call, use_cblas, alpha, &a, &b, beta, &mut c);
                    let bits = |v: &[T]| v.iter().map(|x| x.bits()).collect::<Vec<_>>();
                    assert_eq!(bits(&c), bits(&want), "{call:?} alpha={alpha:?} beta={beta:?} {cfg}");
                    cases += 1;
                }
            }
        }
    }
    blas::set_config_override(None);
    cases
}
