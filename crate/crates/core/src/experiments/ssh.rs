//! Shuffled summation: the same large-magnitude, small-sum vector is summed
//! in many random orders by an FMA chain in double or quad precision and by
//! a fused dot product, and the spread and accuracy of the outcomes are
//! compared.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::report::SshRow;
use super::ExperimentError;
use crate::accumulator::{AccumulatorSpec, AccumulatorState};
use crate::fdp::{correct_bits, fma_reference_soft, Dyadic};
use crate::formats::{cast, decode, DecodedNumber, FormatSpec};

/// Grid of the generated values: every element and the exact sum are
/// integer multiples of this weight.
pub const GRID_EXP: i32 = -19;

/// A summation unit under test.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SshUnit {
    /// Double-precision FMA chain (native).
    Fma64,
    /// Quad-precision `<15,112>` FMA chain (emulated).
    Fma128,
    /// Fused dot product with the given scratchpad, rendered to double.
    Fdp(AccumulatorSpec),
}

impl fmt::Display for SshUnit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SshUnit::Fma64 => f.write_str("fma64"),
            SshUnit::Fma128 => f.write_str("fma128"),
            SshUnit::Fdp(spec) => write!(f, "fdp:{}:{}:{}", spec.ovf(), spec.msb(), spec.lsb()),
        }
    }
}

impl FromStr for SshUnit {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "fma64" => Ok(SshUnit::Fma64),
            "fma128" => Ok(SshUnit::Fma128),
            other => match other.strip_prefix("fdp:") {
                Some(spec) => Ok(SshUnit::Fdp(spec.parse()?)),
                None => Err(ExperimentError::Invalid(format!(
                    "unknown unit `{other}` (expected fma64, fma128 or fdp:<ovf>:<msb>:<lsb>)"
                ))),
            },
        }
    }
}

fn ulp(x: f64) -> f64 {
    let bits = x.abs().to_bits();
    f64::from_bits(bits + 1) - f64::from_bits(bits)
}

/// Synthetic stand-in for ocean-model grid values: `n / 2` pairs
/// `(x, -x + d)` with alternating sign, `|x|` log-uniform in
/// `[1e10, 1e15]` and `d` a few ulps of `x`. The last pair is chosen so the
/// exact total is a fixed value in `[0.5, 5]`. Every value is a multiple of
/// `2^GRID_EXP` below `2^50` in magnitude, so a `<30,30,-30>` scratchpad
/// holds every term and every partial sum exactly.
pub fn gen_ssh_data(n: usize, seed: u64) -> Result<Vec<f64>, ExperimentError> {
    if n < 2 || !n.is_multiple_of(2) {
        return Err(ExperimentError::Invalid(format!("SSH vector size must be even and >= 2, got {n}")));
    }
    let grid = 2f64.powi(GRID_EXP);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    // Running sum of the d's in units of the grid.
    let mut total_units: i64 = 0;
    for pair in 0..n / 2 - 1 {
        let sign = if pair % 2 == 0 { 1.0 } else { -1.0 };
        loop {
            let x = sign * 10f64.powf(rng.gen_range(10.0..15.0));
            let d = rng.gen_range(-4i64..=4) as f64 * ulp(x);
            let y = -x + d;
            // Keep the pair only if -x + d was formed exactly.
            if y + x == d {
                out.push(x);
                out.push(y);
                total_units += (d / grid) as i64;
                break;
            }
        }
    }
    let target_units = rng.gen_range(1i64 << 18..=5i64 << 19);
    let d_last = (target_units - total_units) as f64 * grid;
    let sign = if (n / 2 - 1).is_multiple_of(2) { 1.0 } else { -1.0 };
    // Binade [2^33, 2^34): ulp is exactly the grid, and |d_last| is far
    // too small to leave it.
    let x_last = sign * rng.gen_range(1.0e10..1.7e10);
    let y_last = -x_last + d_last;
    if y_last + x_last != d_last {
        return Err(ExperimentError::Invalid("closing pair not exactly representable".into()));
    }
    out.push(x_last);
    out.push(y_last);
    Ok(out)
}

/// Exact sum of doubles.
pub fn exact_sum(values: &[f64]) -> Dyadic {
    values
        .iter()
        .fold(Dyadic::zero(), |acc, &v| acc.add(&Dyadic::from_f64(v).expect("finite values")))
}

/// Sums `values` in the given order with one unit; the result as a double.
pub fn sum_with(unit: SshUnit, values: &[f64]) -> f64 {
    match unit {
        SshUnit::Fma64 => values.iter().fold(0.0f64, |s, &v| v.mul_add(1.0, s)),
        SshUnit::Fma128 => {
            let quad = FormatSpec::binary128();
            let double = FormatSpec::binary64();
            let words: Vec<u128> = values.iter().map(|v| cast(v.to_bits() as u128, &double, &quad)).collect();
            let ones = vec![quad.one(); words.len()];
            let s = fma_reference_soft(&words, &ones, &quad);
            decode(s, &quad).to_f64()
        }
        SshUnit::Fdp(spec) => {
            let mut acc = AccumulatorState::new(spec);
            for &v in values {
                acc.accumulate_value(&DecodedNumber::from_f64(v));
            }
            f64::from_bits(acc.render(&FormatSpec::binary64()) as u64)
        }
    }
}

/// Outcomes of every shuffle for one unit.
#[derive(Debug, Clone, PartialEq)]
pub struct ShuffleOutcomes {
    pub unit: SshUnit,
    pub size: usize,
    pub results: Vec<f64>,
    pub correct_bits: Vec<f64>,
}

impl ShuffleOutcomes {
    pub fn mean(&self) -> f64 {
        self.results.iter().sum::<f64>() / self.results.len() as f64
    }

    /// Sample standard deviation over |mean|; 0 when every outcome agrees.
    pub fn rsd(&self) -> f64 {
        let first = self.results[0];
        if self.results.iter().all(|r| r.to_bits() == first.to_bits()) {
            return 0.0;
        }
        let mean = self.mean();
        let var = self.results.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (self.results.len() - 1) as f64;
        var.sqrt() / mean.abs()
    }

    pub fn mean_correct_bits(&self) -> f64 {
        self.correct_bits.iter().sum::<f64>() / self.correct_bits.len() as f64
    }

    /// Correct bits of the most frequent outcome; ties go to the outcome
    /// seen first.
    pub fn modal_correct_bits(&self) -> f64 {
        let mut counts: HashMap<u64, (usize, usize)> = HashMap::new();
        for (i, r) in self.results.iter().enumerate() {
            counts.entry(r.to_bits()).or_insert((0, i)).0 += 1;
        }
        let (_, first) = counts
            .into_values()
            .max_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)))
            .expect("at least one shuffle");
        self.correct_bits[first]
    }

    pub fn row(&self) -> SshRow {
        SshRow {
            unit: self.unit.to_string(),
            size: self.size,
            mean: self.mean(),
            rsd: self.rsd(),
            correct_bits: self.modal_correct_bits(),
            shuffles: self.results.len(),
        }
    }
}

/// The `i`-th shuffle of a size; identical for every unit.
fn permutation(base: &[f64], seed: u64, i: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5348_5546_464c_4521);
    rng.set_stream(i as u64);
    let mut v = base.to_vec();
    v.shuffle(&mut rng);
    v
}

/// Runs `shuffles` orderings of the generated vector of each size through
/// every unit. Returns outcomes ordered by size, then by unit as given.
pub fn run_ssh(
    sizes: &[usize],
    shuffles: usize,
    units: &[SshUnit],
    seed: u64,
) -> Result<Vec<ShuffleOutcomes>, ExperimentError> {
    if shuffles == 0 {
        return Err(ExperimentError::Invalid("need at least one shuffle".into()));
    }
    let mut out = Vec::new();
    for &size in sizes {
        let data = gen_ssh_data(size, seed.wrapping_add(size as u64))?;
        let exact = exact_sum(&data);
        let perm_seed = seed.wrapping_mul(31).wrapping_add(size as u64);
        // Each shuffle is generated once and fed to every unit.
        let per_shuffle: Vec<Vec<f64>> = (0..shuffles)
            .into_par_iter()
            .map(|i| {
                let order = permutation(&data, perm_seed, i);
                units.iter().map(|&u| sum_with(u, &order)).collect()
            })
            .collect();
        for (k, &unit) in units.iter().enumerate() {
            let results: Vec<f64> = per_shuffle.iter().map(|r| r[k]).collect();
            let bits = results.iter().map(|&r| correct_bits(r, &exact)).collect();
            out.push(ShuffleOutcomes {
                unit,
                size,
                results,
                correct_bits: bits,
            });
        }
    }
    Ok(out)
}

/// [`run_ssh`] reduced to report rows.
pub fn ssh_experiment(sizes: &[usize], shuffles: usize, units: &[SshUnit], seed: u64) -> Result<Vec<SshRow>, ExperimentError> {
    Ok(run_ssh(sizes, shuffles, units, seed)?.iter().map(ShuffleOutcomes::row).collect())
}
