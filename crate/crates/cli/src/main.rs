//! `tamm`: reproducibility and accumulator-sweep experiments, plus a
//! matrix-file GEMM driver.

use std::io::{self, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use tamm::experiments::ai::{ai_proxy_experiment, default_labels_path, expand_pattern, parse_sweep, Dataset, Model};
use tamm::experiments::report::{report_emit, write_rows, ReportFormat, ReportRow};
use tamm::experiments::ssh::{ssh_experiment, SshUnit};
use tamm::gemm::{load_config, parse_config, Backend};
use tamm::{gemm, matfile, query_config, FormatSpec, KernelConfig, MatrixBuffer};

#[derive(Parser)]
#[command(name = "tamm", version, about = "Numerically-tailored matrix multiplication experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Shuffled-summation reproducibility: sum permutations of a
    /// cancellation-heavy vector with FMA chains and fused dot products.
    Ssh {
        /// Vector sizes, comma separated.
        #[arg(long, value_delimiter = ',', default_values_t = [512usize, 8192, 153600])]
        sizes: Vec<usize>,
        /// Permutations per size.
        #[arg(long, default_value_t = 1000)]
        shuffles: usize,
        /// Summation units: fma64, fma128, fdp:<ovf>:<msb>:<lsb>.
        #[arg(long, value_delimiter = ',', default_values_t = ["fma64".to_string(), "fma128".into(), "fdp:30:30:-30".into()])]
        units: Vec<String>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Report path (.json for JSON, CSV otherwise); stdout if omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Accumulator sweep over a small classifier.
    Ai {
        /// Model JSON file.
        #[arg(long)]
        model: PathBuf,
        /// IDX image file.
        #[arg(long)]
        data: PathBuf,
        /// IDX label file (default: <data stem>.labels.idx).
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Operand format of the kernel.
        #[arg(long, default_value = "ieee:8:23")]
        format: String,
        /// Swept axis and values, e.g. lsb=-48,-38,-28.
        #[arg(long, default_value = "lsb=-48,-38,-28,-24,-20,-10")]
        sweep: String,
        /// Accumulator pattern with `*` at the swept axis.
        #[arg(long, default_value = "9:6:*")]
        acc: String,
        /// PE array geometry RxC.
        #[arg(long, default_value = "8x8")]
        array: String,
        #[arg(long, default_value_t = Backend::Functional)]
        backend: Backend,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// C = alpha*A*B + beta*C on matrix files, with the active kernel config.
    Gemm {
        a: PathBuf,
        b: PathBuf,
        /// Output matrix file.
        #[arg(short, long)]
        out: PathBuf,
        /// Optional C input (needed when beta != 0).
        #[arg(long)]
        c: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        #[arg(long, default_value_t = 0.0)]
        beta: f64,
        /// Kernel config file (default: TAMM_CONFIG, then ./tamm.conf).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Print the kernel configuration the GEMM front door would use.
    Config {
        /// Parse this file instead of the discovered one.
        #[arg(long)]
        file: Option<PathBuf>,
    },
}

fn emit<R: ReportRow>(rows: &[R], out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => report_emit(rows, path, ReportFormat::for_path(path)).with_context(|| format!("writing {}", path.display())),
        None => {
            let stdout = io::stdout();
            let mut lock = stdout.lock();
            write_rows(rows, &mut lock, ReportFormat::Csv)?;
            lock.flush()?;
            Ok(())
        }
    }
}

fn file_id(path: &Path) -> String {
    path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ssh {
            sizes,
            shuffles,
            units,
            seed,
            out,
        } => {
            let units = units
                .iter()
                .map(|u| u.parse::<SshUnit>())
                .collect::<Result<Vec<_>, _>>()?;
            let rows = ssh_experiment(&sizes, shuffles, &units, seed)?;
            emit(&rows, out.as_deref())
        }
        Command::Ai {
            model,
            data,
            labels,
            format,
            sweep,
            acc,
            array,
            backend,
            out,
        } => {
            let fmt: FormatSpec = format.parse()?;
            let (axis, values) = parse_sweep(&sweep)?;
            let points = expand_pattern(&acc, axis, &values)?;
            let labels = labels.unwrap_or_else(|| default_labels_path(&data));
            let net = Model::load(&model).with_context(|| format!("loading {}", model.display()))?;
            let set = Dataset::load(&data, &labels).with_context(|| format!("loading {}", data.display()))?;
            let template = parse_config(&format!("array={array}\nbackend={backend}\n"))?;
            let rows = ai_proxy_experiment(&net, &file_id(&model), &set, &file_id(&data), fmt, &points, &template)?;
            emit(&rows, out.as_deref())
        }
        Command::Gemm {
            a,
            b,
            out,
            c,
            alpha,
            beta,
            config,
        } => {
            let cfg = match config {
                Some(path) => load_config(&path)?,
                None => query_config()?,
            };
            let a = matfile::load(&a).with_context(|| format!("reading {}", a.display()))?;
            let b = matfile::load(&b).with_context(|| format!("reading {}", b.display()))?;
            let host = a.format();
            if b.format() != host {
                bail!("A is {host} but B is {}", b.format());
            }
            let c = match c {
                Some(path) => matfile::load(&path).with_context(|| format!("reading {}", path.display()))?,
                None => MatrixBuffer::zeros(a.rows(), b.cols(), host),
            };
            let scalar = |v: f64| tamm::cast(f64::to_bits(v) as u128, &FormatSpec::binary64(), &host);
            let result = gemm(&a, &b, &c, scalar(alpha), scalar(beta), &cfg)?;
            matfile::save(&out, &result).with_context(|| format!("writing {}", out.display()))?;
            Ok(())
        }
        Command::Config { file } => {
            let cfg: KernelConfig = match file {
                Some(path) => load_config(&path)?,
                None => query_config()?,
            };
            println!("{cfg}");
            Ok(())
        }
    }
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("tamm: {e:#}");
        std::process::exit(1);
    }
}
