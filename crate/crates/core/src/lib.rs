//! Numerically-tailored matrix multiplication.
//!
//! Operands in any supported computer format are decoded exactly, multiplied
//! exactly and summed in a parameterized two's-complement scratchpad
//! `<ovf, msb, lsb>`; rounding happens once, when a result leaves the
//! accumulator. On top of that sit a cycle-stepped systolic array model, a
//! BLAS-style GEMM front door (including exported `sgemm_`/`dgemm_`
//! symbols) and the desk-scale experiment drivers behind the `tamm` CLI.

pub mod accumulator;
pub mod blas;
pub mod experiments;
pub mod fdp;
pub mod formats;
pub mod gemm;
pub mod matfile;
pub mod systolic;
mod wide;

pub use accumulator::{required_ovf, AccumulatorSpec, AccumulatorState, Flags};
pub use fdp::{correct_bits, exact_oracle, fdp, fma_reference, DotProductConfig, Dyadic, FdpResult};
pub use formats::{cast, decode, encode, DecodedNumber, FormatKind, FormatSpec, NumClass};
pub use gemm::{gemm, query_config, Backend, KernelConfig, MatrixBuffer};
