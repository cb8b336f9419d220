//! The `recquant` command line.
//!
//! Exit codes: 0 on success, 1 on operational errors, 2 when `compare`
//! misses its cosine threshold.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::Serialize;
use serde_json::json;

use crate::bench::{self, BenchOptions, BenchReport};
use crate::container::{read_tensor_file, write_tensor_file};
use crate::error::{Error, Result};
use crate::pipeline::{self, BlockConfig, ComparisonReport, PrecisionMode};
use crate::quantizer::{self, ScaleGranularity};
use crate::stats::{self, ReportFormat};
use crate::tensor::Tensor;

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_THRESHOLD: i32 = 2;

const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Parser)]
#[command(name = "recquant", version, about = "FP8 post-training quantization toolkit")]
pub struct Cli {
    /// Emit machine-readable JSON.
    #[arg(long, global = true)]
    pub json: bool,

    /// RNG seed (default 42).
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads for parallel kernels.
    #[arg(long, global = true, env = "RECQUANT_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded F32 tensor file.
    Gen {
        /// gaussian:SIGMA, uniform:LO,HI or constant:VALUE
        #[arg(long)]
        dist: String,
        /// Comma-separated dims, e.g. 64,256
        #[arg(long)]
        shape: String,
        #[arg(long, default_value = "t")]
        name: String,
        /// Number of tensors; names get a numeric suffix when > 1.
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Variance / AbsMax / AbsP99 report for every tensor in a file.
    Stats { input: PathBuf },
    /// Quantize every tensor in a file to FP8 with absmax scales.
    Quantize {
        input: PathBuf,
        /// per-tensor, per-channel=AXIS, per-token, block=1x128 or block=128x128
        #[arg(long)]
        granularity: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare FP8 against FP16 block outputs over seeds.
    Compare {
        /// BlockConfig JSON file; defaults apply to missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated seeds or a range A..B (exclusive end).
        #[arg(long)]
        seeds: Option<String>,
        /// Minimum worst-case cosine similarity.
        #[arg(long, default_value_t = 0.99)]
        threshold: f64,
    },
    /// Time the block per stage.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = ModeArg::Fp8)]
        mode: ModeArg,
        #[arg(long, default_value_t = 10)]
        iterations: u64,
        #[arg(long, default_value_t = 2)]
        warmup: u64,
        /// Earlier bench JSON to compute the gain breakdown against.
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Also write the report JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Fp16,
    Fp8,
}

impl From<ModeArg> for PrecisionMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Fp16 => PrecisionMode::FP16Baseline,
            ModeArg::Fp8 => PrecisionMode::FP8Quantized,
        }
    }
}

/// Tensor distribution for `gen`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DistSpec {
    Gaussian { sigma: f32 },
    Uniform { lo: f32, hi: f32 },
    Constant { value: f32 },
}

impl std::str::FromStr for DistSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |d: &str| Error::BadSpec(format!("{s:?}: {d}"));
        let num = |v: &str| -> Result<f32> {
            v.trim()
                .parse::<f32>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| bad("expected a finite number"))
        };
        let (kind, args) = s
            .split_once(':')
            .ok_or_else(|| bad("expected gaussian:SIGMA, uniform:LO,HI or constant:VALUE"))?;
        match kind {
            "gaussian" => {
                let sigma = num(args)?;
                if sigma < 0.0 {
                    return Err(bad("sigma must be non-negative"));
                }
                Ok(Self::Gaussian { sigma })
            }
            "uniform" => {
                let (lo, hi) = args.split_once(',').ok_or_else(|| bad("expected LO,HI"))?;
                let (lo, hi) = (num(lo)?, num(hi)?);
                if lo >= hi {
                    return Err(bad("LO must be below HI"));
                }
                Ok(Self::Uniform { lo, hi })
            }
            "constant" => Ok(Self::Constant { value: num(args)? }),
            _ => Err(bad("unknown distribution")),
        }
    }
}

impl DistSpec {
    pub fn sample(self, n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
        match self {
            Self::Gaussian { sigma } => {
                let d = Normal::new(0.0f32, sigma).expect("validated sigma");
                (0..n).map(|_| d.sample(rng)).collect()
            }
            Self::Uniform { lo, hi } => {
                let d = Uniform::new(lo, hi).expect("validated range");
                (0..n).map(|_| d.sample(rng)).collect()
            }
            Self::Constant { value } => vec![value; n],
        }
    }
}

pub fn parse_shape(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|d| {
            d.trim()
                .parse::<usize>()
                .map_err(|_| Error::BadSpec(format!("bad shape {s:?}")))
        })
        .collect()
}

pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let bad = || Error::BadSpec(format!("bad seed list {s:?}"));
    if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| bad())?;
        let b: u64 = b.trim().parse().map_err(|_| bad())?;
        if a >= b {
            return Err(bad());
        }
        return Ok((a..b).collect());
    }
    let seeds = s
        .split(',')
        .map(|v| v.trim().parse().map_err(|_| bad()))
        .collect::<Result<Vec<u64>>>()?;
    if seeds.is_empty() {
        return Err(bad());
    }
    Ok(seeds)
}

pub fn generate(dist: DistSpec, shape: &[usize], name: &str, count: usize, seed: u64) -> Result<Vec<Tensor>> {
    if count == 0 {
        return Err(Error::BadSpec("count must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    (0..count)
        .map(|i| {
            let name = if count == 1 { name.to_string() } else { format!("{name}{i}") };
            Tensor::from_f32(name, shape.to_vec(), &dist.sample(n, &mut rng))
        })
        .collect()
}

fn load_config(path: Option<&Path>) -> Result<BlockConfig> {
    let cfg = match path {
        None => BlockConfig::default(),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|source| Error::IoFailure {
                path: p.to_path_buf(),
                source,
            })?;
            serde_json::from_str(&text)
                .map_err(|e| Error::BadConfig(format!("{}: {e}", p.display())))?
        }
    };
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Serialize)]
struct SeedResult {
    seed: u64,
    #[serde(flatten)]
    report: ComparisonReport,
}

#[derive(Debug, Serialize)]
struct CompareSummary {
    config: BlockConfig,
    threshold: f64,
    per_seed: Vec<SeedResult>,
    worst: ComparisonReport,
    pass: bool,
}

fn run_compare(cfg: &BlockConfig, seeds: &[u64], threshold: f64) -> Result<CompareSummary> {
    let mut per_seed = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let c = BlockConfig { seed, ..cfg.clone() };
        let w = pipeline::init_block(&c)?;
        let x = pipeline::random_input(&c, seed)?;
        per_seed.push(SeedResult {
            seed,
            report: pipeline::compare_modes(&x, &w)?,
        });
    }
    let worst = ComparisonReport {
        max_abs_err: per_seed.iter().map(|r| r.report.max_abs_err).fold(0.0, f64::max),
        rel_frobenius_err: per_seed
            .iter()
            .map(|r| r.report.rel_frobenius_err)
            .fold(0.0, f64::max),
        cosine_similarity: per_seed
            .iter()
            .map(|r| r.report.cosine_similarity)
            .fold(1.0, f64::min),
        routing_identical: per_seed.iter().all(|r| r.report.routing_identical),
    };
    Ok(CompareSummary {
        config: cfg.clone(),
        threshold,
        pass: worst.cosine_similarity >= threshold,
        per_seed,
        worst,
    })
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

fn io_err(path: &str) -> impl Fn(std::io::Error) -> Error + '_ {
    move |source| Error::IoFailure {
        path: PathBuf::from(path),
        source,
    }
}

fn execute(cli: &Cli, out: &mut Vec<u8>, threads: usize) -> Result<i32> {
    let seed = cli.seed.unwrap_or(DEFAULT_SEED);
    let stdout = io_err("<stdout>");
    match &cli.command {
        Command::Gen {
            dist,
            shape,
            name,
            count,
            out: path,
        } => {
            let dist: DistSpec = dist.parse()?;
            let shape = parse_shape(shape)?;
            let tensors = generate(dist, &shape, name, *count, seed)?;
            write_tensor_file(path, &tensors)?;
            if cli.json {
                let names: Vec<&str> = tensors.iter().map(|t| t.name()).collect();
                let v = json!({ "out": path.display().to_string(), "tensors": names, "shape": shape, "seed": seed });
                write!(out, "{}", to_json(&v)).map_err(stdout)?;
            } else {
                writeln!(out, "wrote {} tensor(s) of shape {shape:?} to {}", tensors.len(), path.display())
                    .map_err(stdout)?;
            }
        }
        Command::Stats { input } => {
            let tensors = read_tensor_file(input)?;
            let report = stats::analyze(&tensors)?;
            let fmt = if cli.json { ReportFormat::Json } else { ReportFormat::Text };
            write!(out, "{}", stats::render_report(&report, fmt)).map_err(stdout)?;
        }
        Command::Quantize {
            input,
            granularity,
            out: path,
        } => {
            let g: ScaleGranularity = granularity.parse()?;
            let tensors = read_tensor_file(input)?;
            let mut entries = Vec::with_capacity(tensors.len() * 3);
            let mut names = Vec::with_capacity(tensors.len());
            for t in &tensors {
                let q = quantizer::quantize(t, g)?;
                entries.extend(q.to_entries()?);
                names.push(t.name().to_string());
            }
            write_tensor_file(path, &entries)?;
            if cli.json {
                let v = json!({ "out": path.display().to_string(), "granularity": g.to_string(), "tensors": names });
                write!(out, "{}", to_json(&v)).map_err(stdout)?;
            } else {
                writeln!(out, "quantized {} tensor(s) with {g} to {}", names.len(), path.display())
                    .map_err(stdout)?;
            }
        }
        Command::Compare {
            config,
            seeds,
            threshold,
        } => {
            let cfg = load_config(config.as_deref())?;
            let seeds = match seeds {
                Some(s) => parse_seeds(s)?,
                None => vec![cli.seed.unwrap_or(cfg.seed)],
            };
            let summary = run_compare(&cfg, &seeds, *threshold)?;
            if cli.json {
                write!(out, "{}", to_json(&summary)).map_err(stdout)?;
            } else {
                writeln!(out, "{:>8} {:>14} {:>14} {:>12} {:>8}", "seed", "max_abs_err", "rel_frob_err", "cosine", "routing")
                    .map_err(&stdout)?;
                for r in &summary.per_seed {
                    let c = &r.report;
                    writeln!(
                        out,
                        "{:>8} {:>14.6e} {:>14.6e} {:>12.8} {:>8}",
                        r.seed,
                        c.max_abs_err,
                        c.rel_frobenius_err,
                        c.cosine_similarity,
                        if c.routing_identical { "same" } else { "differs" }
                    )
                    .map_err(&stdout)?;
                }
                let w = &summary.worst;
                writeln!(
                    out,
                    "worst: max_abs_err {:.6e}, rel_frob_err {:.6e}, cosine {:.8} (threshold {}) {}",
                    w.max_abs_err,
                    w.rel_frobenius_err,
                    w.cosine_similarity,
                    summary.threshold,
                    if summary.pass { "PASS" } else { "FAIL" }
                )
                .map_err(&stdout)?;
            }
            if !summary.pass {
                return Ok(EXIT_THRESHOLD);
            }
        }
        Command::Bench {
            config,
            mode,
            iterations,
            warmup,
            baseline,
            out: path,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            let opts = BenchOptions {
                mode: (*mode).into(),
                iterations: *iterations,
                warmup: *warmup,
                threads,
            };
            let mut report = bench::run_bench(&cfg, &opts)?;
            if let Some(b) = baseline {
                let p = b.display().to_string();
                let text = std::fs::read_to_string(b).map_err(io_err(&p))?;
                let base: BenchReport = serde_json::from_str(&text)
                    .map_err(|e| Error::BadConfig(format!("baseline {p}: {e}")))?;
                report.compare_to(&base);
            }
            let text = to_json(&report);
            if let Some(p) = path {
                std::fs::write(p, &text).map_err(io_err(&p.display().to_string()))?;
            }
            if cli.json {
                write!(out, "{text}").map_err(stdout)?;
            } else {
                write!(out, "{}", render_bench(&report)).map_err(stdout)?;
            }
        }
    }
    Ok(EXIT_OK)
}

fn render_bench(r: &BenchReport) -> String {
    let mut s = format!(
        "mode {:?}{} | {} threads | {} iterations ({} warmup) | {:.1} {}\n",
        r.mode,
        if r.emulated { " (emulated FP8)" } else { "" },
        r.threads,
        r.iterations,
        r.warmup,
        r.tokens_per_second,
        r.throughput_unit
    );
    s.push_str(&format!("{:<20} {:>12} {:>12}\n", "stage", "ms/iter", "invocations"));
    for st in &r.stages {
        s.push_str(&format!("{:<20} {:>12.3} {:>12}\n", st.name, st.wall_time_ms, st.invocations));
    }
    if !r.breakdown.is_empty() {
        s.push_str(&format!("\n{:<20} {:<14} {:>10}\n", "breakdown", "category", "gain %"));
        for b in &r.breakdown {
            s.push_str(&format!("{:<20} {:<14} {:>10.2}\n", b.label, b.category, b.relative_gain_pct));
        }
    }
    s
}

fn report_error(e: &Error, json: bool, err: &mut dyn Write) {
    let _ = if json {
        writeln!(
            err,
            "{}",
            json!({ "error": { "kind": e.kind(), "message": e.to_string() } })
        )
    } else {
        writeln!(err, "error[{}]: {e}", e.kind())
    };
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_ERROR,
            };
            let _ = if code == EXIT_OK {
                write!(out, "{e}")
            } else {
                write!(err, "{e}")
            };
            return code;
        }
    };
    let threads = match cli.threads {
        Some(0) => {
            report_error(&Error::BadConfig("--threads must be at least 1".into()), cli.json, err);
            return EXIT_ERROR;
        }
        Some(n) => n,
        None => rayon::current_num_threads(),
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(p) => p,
        Err(e) => {
            report_error(&Error::BadConfig(format!("thread pool: {e}")), cli.json, err);
            return EXIT_ERROR;
        }
    };
    let mut buf = Vec::new();
    let result = pool.install(|| execute(&cli, &mut buf, threads));
    let _ = out.write_all(&buf);
    match result {
        Ok(code) => code,
        Err(e) => {
            report_error(&e, cli.json, err);
            EXIT_ERROR
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dist_parsing() {
        assert_eq!("gaussian:1".parse::<DistSpec>().unwrap(), DistSpec::Gaussian { sigma: 1.0 });
        assert_eq!(
            "uniform:-1,2.5".parse::<DistSpec>().unwrap(),
            DistSpec::Uniform { lo: -1.0, hi: 2.5 }
        );
        assert_eq!("constant:5".parse::<DistSpec>().unwrap(), DistSpec::Constant { value: 5.0 });
        for bad in ["gaussian:-1", "uniform:2,1", "constant:nan", "poisson:3", "gaussian"] {
            assert!(matches!(bad.parse::<DistSpec>().unwrap_err(), Error::BadSpec(_)), "{bad}");
        }
    }

    #[test]
    fn seeds_and_shapes() {
        assert_eq!(parse_seeds("0..3").unwrap(), vec![0, 1, 2]);
        assert_eq!(parse_seeds("7, 9").unwrap(), vec![7, 9]);
        assert!(parse_seeds("3..3").is_err());
        assert!(parse_seeds("x").is_err());
        assert_eq!(parse_shape("4,128").unwrap(), vec![4, 128]);
        assert!(parse_shape("4,").is_err());
    }

    #[test]
    fn generate_is_seeded() {
        let d = DistSpec::Gaussian { sigma: 1.0 };
        assert_eq!(generate(d, &[1000], "t", 1, 7).unwrap(), generate(d, &[1000], "t", 1, 7).unwrap());
        assert_ne!(generate(d, &[1000], "t", 1, 7).unwrap(), generate(d, &[1000], "t", 1, 8).unwrap());
        let c = generate(DistSpec::Constant { value: 5.0 }, &[4], "c", 1, 0).unwrap();
        assert_eq!(stats::tensor_stats(&c[0]).unwrap().variance, 0.0);
        let many = generate(d, &[2], "w", 3, 1).unwrap();
        let names: Vec<&str> = many.iter().map(|t| t.name()).collect();
        assert_eq!(names, ["w0", "w1", "w2"]);
    }

    #[test]
    fn gaussian_variance_matches_sigma() {
        let t = generate(DistSpec::Gaussian { sigma: 0.1f32.sqrt() }, &[1_000_000], "g", 1, 3).unwrap();
        let r = stats::analyze(&t).unwrap();
        assert!((r.mean_variance / 0.1 - 1.0).abs() < 0.02, "{}", r.mean_variance);
    }

    #[test]
    fn usage_errors_exit_1() {
        let (mut o, mut e) = (Vec::new(), Vec::new());
        assert_eq!(run(["recquant", "frobnicate"], &mut o, &mut e), EXIT_ERROR);
        assert_eq!(run(["recquant", "--help"], &mut o, &mut e), EXIT_OK);
        let mut e = Vec::new();
        assert_eq!(run(["recquant", "--threads", "0", "stats", "x"], &mut o, &mut e), EXIT_ERROR);
        assert!(String::from_utf8(e).unwrap().starts_with("error[BadConfig]"));
    }

    #[test]
    fn missing_file_is_structured() {
        let (mut o, mut e) = (Vec::new(), Vec::new());
        let code = run(["recquant", "--json", "stats", "/nonexistent/x.rqtf"], &mut o, &mut e);
        assert_eq!(code, EXIT_ERROR);
        let v: serde_json::Value = serde_json::from_slice(&e).unwrap();
        assert_eq!(v["error"]["kind"], "IoFailure");
    }
}
