//! Acceptance run: one PASS/FAIL line per requirement, at full size.
//!
//! Runs as a plain binary (no libtest harness) so the report is always
//! printed. Exits non-zero if any requirement fails other than one listed
//! in `KNOWN_UNATTAINABLE`, whose line still reads FAIL.

mod common;

use std::path::Path;
use std::time::Instant;

use common::blas_harness::conformance;
use common::{families, floored_product_sum, random_accumulator, random_matrix, random_word, wrap_to_width};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use tamm::blas::{cblas_dgemm, cblas_sgemm, dgemm_, sgemm_};
use tamm::experiments::ai::{evaluate, sweep_enumerate, Dataset, Engine, Model, SweepAxis};
use tamm::experiments::ssh::{exact_sum, gen_ssh_data, run_ssh, sum_with, SshUnit};
use tamm::gemm::kernel_product;
use tamm::systolic::{run_gemm_systolic, run_gemm_systolic_with, StallDecision};
use tamm::{
    correct_bits, exact_oracle, fdp, gemm, required_ovf, AccumulatorSpec, AccumulatorState, Backend, DecodedNumber,
    DotProductConfig, Dyadic, FormatSpec, KernelConfig, MatrixBuffer,
};

/// Requirements that cannot be met as stated; see the README.
const KNOWN_UNATTAINABLE: &[&str] = &["reproducibility"];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn reproducibility() -> Outcome {
    let fdp_unit = SshUnit::Fdp(AccumulatorSpec::new(30, 30, -30).unwrap());
    let units = [SshUnit::Fma64, SshUnit::Fma128, fdp_unit];
    let sizes = [512, 8192, 153_600];
    let start = Instant::now();
    let rows = run_ssh(&sizes, 1000, &units, 2024).unwrap();
    let elapsed = start.elapsed().as_secs_f64();

    let mut fdp_exact = true;
    let mut fma64_spread = true;
    let mut weak_order = true;
    let mut strict_order = true;
    let mut table = Vec::new();
    for chunk in rows.chunks(3) {
        let (f64r, f128r, fdpr) = (&chunk[0], &chunk[1], &chunk[2]);
        let (b64, b128, bfdp) = (f64r.modal_correct_bits(), f128r.modal_correct_bits(), fdpr.modal_correct_bits());
        fdp_exact &= fdpr.rsd() == 0.0 && fdpr.correct_bits.iter().all(|&b| b == 52.0);
        if f64r.size >= 8192 {
            fma64_spread &= f64r.rsd() > 0.0;
        }
        weak_order &= bfdp >= b128 && b128 > b64;
        strict_order &= bfdp > b128 && b128 > b64;
        table.push(format!(
            "n={}: modal-result bits fma64 {:.3} (mean {:.3}) fma128 {:.3} fdp {:.0}, rsd fma64 {:.2e} fma128 {:.2e} fdp {:.0}",
            f64r.size,
            b64,
            f64r.mean_correct_bits(),
            b128,
            bfdp,
            f64r.rsd(),
            f128r.rsd(),
            fdpr.rsd()
        ));
    }

    // Same construction plus four pairs (X, -X) with |X| near 2^96: beyond
    // the generator's 2^50 bound, quad partial sums lose grid bits while
    // the scratchpad still wraps them away exactly.
    let mut wide = gen_ssh_data(8192, 77).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(78);
    for _ in 0..4 {
        let x = rng.gen_range(1u64..1 << 52) as f64 * 2f64.powi(rng.gen_range(42..46));
        wide.extend([x, -x]);
    }
    let exact = exact_sum(&wide);
    let wide_bits: Vec<f64> = units
        .iter()
        .map(|&u| {
            let mut rng = ChaCha8Rng::seed_from_u64(79);
            let mut v = wide.clone();
            (0..100)
                .map(|_| {
                    v.shuffle(&mut rng);
                    correct_bits(sum_with(u, &v), &exact)
                })
                .sum::<f64>()
                / 100.0
        })
        .collect();
    let wide_strict = wide_bits[2] > wide_bits[1] && wide_bits[1] > wide_bits[0];

    let attainable = fdp_exact && fma64_spread && weak_order && elapsed < 300.0;
    let mut detail = format!(
        "fdp rsd=0 & 52 bits: {fdp_exact}; fma64 rsd>0 at n>=8192: {fma64_spread}; \
         fdp>=fma128>fma64: {weak_order}; runtime {elapsed:.1}s (<300s); \
         strict fdp>fma128>fma64: {strict_order}"
    );
    if !strict_order {
        detail.push_str(
            " -- every partial sum of values bounded by 2^50 on a 2^-19 grid fits in 113 bits, so \
             the quad chain is exact too (fdp == fma128 == 52 bits)",
        );
    }
    detail.push_str(&format!(
        "; with |X|~2^96 pairs added: fma64 {:.2} < fma128 {:.2} < fdp {:.0} bits: {wide_strict}",
        wide_bits[0], wide_bits[1], wide_bits[2]
    ));
    for t in table {
        detail.push_str("\n      ");
        detail.push_str(&t);
    }
    // The strict ordering is the only clause allowed to fail.
    outcome(attainable && strict_order, if attainable { detail } else { format!("ATTAINABLE CLAUSE FAILED: {detail}") })
}

fn oracle_equivalence() -> Outcome {
    let per_family = 10_000;
    let results: Vec<(String, usize)> = families()
        .into_par_iter()
        .enumerate()
        .map(|(f, fmt)| {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + f as u64);
            let mut ok = 0;
            for _ in 0..per_family {
                let n = rng.gen_range(1..=64);
                let x: Vec<u128> = (0..n).map(|_| random_word(&mut rng, &fmt, -60, 60)).collect();
                let y: Vec<u128> = (0..n).map(|_| random_word(&mut rng, &fmt, -60, 60)).collect();
                let spec = AccumulatorSpec::covering(&fmt, n as u64);
                assert!(spec.ovf() >= required_ovf(n as u64));
                let got = fdp(&x, &y, &DotProductConfig::uniform(fmt, spec)).unwrap();
                let want = exact_oracle(&x, &y, &fmt).unwrap().round_to(&fmt);
                ok += (got.word == want && !got.flags.any()) as usize;
            }
            (fmt.to_string(), ok)
        })
        .collect();
    let pass = results.iter().all(|(_, ok)| *ok == per_family);
    let detail = results
        .iter()
        .map(|(f, ok)| format!("{f} {ok}/{per_family}"))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(pass, format!("bit-exact vs rounded exact sum: {detail}"))
}

fn truncation_model() -> Outcome {
    let cases = 10_000;
    let fmts = families();
    let ok: usize = (0..cases)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(2000 + i as u64);
            let fmt = fmts[i % fmts.len()];
            let n = rng.gen_range(1..=48);
            let x: Vec<u128> = (0..n).map(|_| random_word(&mut rng, &fmt, -24, 24)).collect();
            let y: Vec<u128> = (0..n).map(|_| random_word(&mut rng, &fmt, -24, 24)).collect();
            let lsb = rng.gen_range(-60..20);
            let spec = AccumulatorSpec::new(required_ovf(n as u64), 50, lsb).unwrap();
            let out = FormatSpec::binary64();
            let got = fdp(&x, &y, &DotProductConfig::new(fmt, spec, out)).unwrap();
            let floored = floored_product_sum(&x, &y, &fmt, lsb as i64).unwrap();
            let want = Dyadic::new(wrap_to_width(&floored, spec.width()), lsb as i64).round_to(&out);
            (got.word == want) as usize
        })
        .sum();
    outcome(ok == cases, format!("fdp == floor-each-product oracle: {ok}/{cases}"))
}

fn overflow_rule() -> Outcome {
    let (msb, lsb) = (10, -20);
    let top = 2f64.powi(msb) - 2f64.powi(lsb); // largest in-range magnitude
    let bottom = -2f64.powi(msb);
    let sizes: Vec<u64> = (2..=64).chain([100, 1000, 1023, 1024, 1025, 4096, 10_000]).collect();
    let one = DecodedNumber::from_f64(1.0);
    let run = |ovf: u32, n: u64, v: f64| {
        let mut acc = AccumulatorState::new(AccumulatorSpec::new(ovf, msb, lsb).unwrap());
        let d = DecodedNumber::from_f64(v);
        for _ in 0..n {
            acc.accumulate_product(&d, &one);
        }
        acc.flags().overflow_wrapped
    };
    let mut safe = true;
    let mut tight = true;
    for &n in &sizes {
        let ovf = required_ovf(n);
        safe &= !run(ovf, n, top) && !run(ovf, n, bottom);
        tight &= run(ovf - 1, n, top) && run(ovf - 1, n, bottom);
    }
    // Random in-range data with the worst-case bound never wraps either.
    let mut rng = ChaCha8Rng::seed_from_u64(3000);
    for _ in 0..200 {
        let n = rng.gen_range(2..2000u64);
        let mut acc = AccumulatorState::new(AccumulatorSpec::new(required_ovf(n), msb, lsb).unwrap());
        for _ in 0..n {
            let v = rng.gen_range(-(1i64 << 30)..(1i64 << 30)) as f64 * 2f64.powi(lsb);
            acc.accumulate_product(&DecodedNumber::from_f64(v), &one);
        }
        safe &= !acc.flags().overflow_wrapped;
    }
    outcome(
        safe && tight,
        format!(
            "n in 2..=10000 ({} sizes): ovf=ceil(log2 n) never wraps: {safe}; ovf-1 always wraps: {tight}",
            sizes.len()
        ),
    )
}

fn systolic_draw(rng: &mut ChaCha8Rng, max_dim: usize, max_array: usize) -> (MatrixBuffer, MatrixBuffer, KernelConfig) {
    let fmts = families();
    let fmt = fmts[rng.gen_range(0..fmts.len())];
    let (m, n, k) = (rng.gen_range(1..=max_dim), rng.gen_range(1..=max_dim), rng.gen_range(1..=max_dim));
    let a = random_matrix(rng, m, k, &fmt, -12, 12);
    let b = random_matrix(rng, k, n, &fmt, -12, 12);
    let acc = random_accumulator(rng, &fmt, k);
    let mut cfg = KernelConfig::new(
        DotProductConfig::uniform(fmt, acc),
        rng.gen_range(1..=max_array),
        rng.gen_range(1..=max_array),
        Backend::Systolic,
    );
    cfg.fifo_depth = rng.gen_range(1..=8);
    (a, b, cfg)
}

fn systolic_equivalence() -> Outcome {
    let draws = 200;
    let equal: usize = (0..draws)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(4000 + i as u64);
            let (a, b, cfg) = systolic_draw(&mut rng, 64, 16);
            let systolic = kernel_product(&a, &b, &cfg).unwrap();
            let functional = kernel_product(&a, &b, &KernelConfig { backend: Backend::Functional, ..cfg }).unwrap();
            (systolic == functional) as usize
        })
        .sum();
    let schedules = 100;
    let stalled_equal: usize = (0..schedules)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(5000 + i as u64);
            let (a, b, cfg) = systolic_draw(&mut rng, 32, 16);
            let array = cfg.array_config();
            let functional = kernel_product(&a, &b, &KernelConfig { backend: Backend::Functional, ..cfg }).unwrap();
            let (free, free_cycles) = run_gemm_systolic(&a, &b, &array).unwrap();
            let (p_in, p_out) = (rng.gen_range(0.2..0.95), rng.gen_range(0.05..0.95));
            let (stalled, cycles) = run_gemm_systolic_with(&a, &b, &array, |_| StallDecision {
                inputs_valid: rng.gen_bool(p_in),
                downstream_ready: rng.gen_bool(p_out),
            })
            .unwrap();
            (stalled == functional && free == functional && cycles >= free_cycles) as usize
        })
        .sum();
    outcome(
        equal == draws && stalled_equal == schedules,
        format!(
            "systolic == functional: {equal}/{draws} draws (arrays <= 16x16, M,N,K <= 64); \
             {stalled_equal}/{schedules} random stall schedules"
        ),
    )
}

fn gemm_shim() -> Outcome {
    let per_seed = 3 * 3 * 16;
    let seeds = 0..4u64;
    let s: usize = seeds.clone().map(|s| conformance::<f32>(cblas_sgemm, sgemm_, 6000 + s)).sum();
    let d: usize = seeds.clone().map(|s| conformance::<f64>(cblas_dgemm, dgemm_, 6100 + s)).sum();
    let want = per_seed * seeds.count();
    outcome(
        s == want && d == want,
        format!(
            "bit-exact vs cast/fdp reference: sgemm {s}/{want}, dgemm {d}/{want} \
             (row/col-major, CBLAS+Fortran, transposes, padded ld, alpha/beta in {{0,1,2,-1}}, 3 kernels)"
        ),
    )
}

fn determinism() -> Outcome {
    let problems = 50;
    let mut rng = ChaCha8Rng::seed_from_u64(7000);
    let mut same = 0;
    for _ in 0..problems {
        let fmt = families()[rng.gen_range(0..4)];
        let (m, n, k) = (rng.gen_range(1..64), rng.gen_range(1..64), rng.gen_range(1..96));
        let a = random_matrix(&mut rng, m, k, &fmt, -20, 20);
        let b = random_matrix(&mut rng, k, n, &fmt, -20, 20);
        let c = random_matrix(&mut rng, m, n, &fmt, -20, 20);
        let dot = DotProductConfig::uniform(fmt, random_accumulator(&mut rng, &fmt, k));
        let base = KernelConfig::new(dot, rng.gen_range(1..17), rng.gen_range(1..17), Backend::Functional);
        let results: Vec<MatrixBuffer> = [1, 2, 4, 8]
            .iter()
            .map(|&t| gemm(&a, &b, &c, fmt.one(), fmt.one(), &base.with_threads(t)).unwrap())
            .collect();
        same += results.windows(2).all(|w| w[0] == w[1]) as usize;
    }
    outcome(same == problems, format!("identical across 1/2/4/8 threads: {same}/{problems} problems"))
}

fn ai_proxy() -> Outcome {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let model = Model::load(&dir.join("digits-cnn.json")).unwrap();
    let data = Dataset::load(&dir.join("digits-test.idx"), &dir.join("digits-test.labels.idx")).unwrap();
    let fmt = FormatSpec::binary32();
    let reference = evaluate(&model, &data, &Engine::FmaReference(fmt)).unwrap();
    let sweep = sweep_enumerate(
        SweepAxis::Lsb,
        AccumulatorSpec::new(9, 6, -48).unwrap(),
        &[-48, -38, -28, -24, -20, -10],
    )
    .unwrap();
    let engine = |spec| Engine::Tailored(KernelConfig::new(DotProductConfig::uniform(fmt, spec), 8, 8, Backend::Functional));
    let evals: Vec<_> = sweep.iter().map(|&s| evaluate(&model, &data, &engine(s)).unwrap()).collect();
    let zero = evaluate(&model, &data, &engine(AccumulatorSpec::new(0, 0, 0).unwrap())).unwrap();
    let chance = 100.0 / 10.0;

    let widest_matches = evals[0].predictions == reference.predictions;
    let monotone = evals.windows(2).all(|w| w[1].top1 <= w[0].top1);
    let near_chance = zero.top1 <= 3.0 * chance;
    let top1s = evals.iter().map(|e| format!("{:.2}", e.top1)).collect::<Vec<_>>().join(" ");
    outcome(
        data.len() >= 500 && widest_matches && monotone && near_chance,
        format!(
            "{} samples; widest <9,6,-48> predictions == fma reference ({:.2}% top1): {widest_matches}; \
             top1 over lsb -48..-10 [{top1s}] non-increasing: {monotone}; <0,0,0> top1 {:.2}% <= {:.0}%: {near_chance}",
            data.len(),
            reference.top1,
            zero.top1,
            3.0 * chance
        ),
    )
}

fn main() {
    // `cargo test` passes libtest flags such as `--quiet`; listing must
    // report no tests so tooling that enumerates tests keeps working.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    type Check = (&'static str, fn() -> Outcome);
    let checks: [Check; 8] = [
        ("reproducibility", reproducibility),
        ("oracle-equivalence", oracle_equivalence),
        ("truncation-model", truncation_model),
        ("overflow-rule", overflow_rule),
        ("systolic-equivalence", systolic_equivalence),
        ("gemm-shim", gemm_shim),
        ("determinism", determinism),
        ("ai-proxy", ai_proxy),
    ];
    let mut unexpected = 0;
    for (name, check) in checks {
        let start = Instant::now();
        let o = check();
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!("{tag} {name} [{:.1}s]: {}", start.elapsed().as_secs_f64(), o.detail);
        let waived = KNOWN_UNATTAINABLE.contains(&name) && !o.detail.starts_with("ATTAINABLE CLAUSE FAILED");
        if !o.pass && !waived {
            unexpected += 1;
        }
    }
    if unexpected > 0 {
        eprintln!("{unexpected} requirement(s) failed");
        std::process::exit(1);
    }
}
