//! Stage timing and benchmark reports.
//!
//! Times are exclusive: when a stage runs inside another (activation
//! quantization inside a projection, say), the inner time is charged to the
//! inner stage only, so stage totals add up to the timed forward pass.
//! FP8 here is software-emulated; reports say so and make no claim about
//! hardware speedups.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{self, BlockConfig, PrecisionMode};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    Attention,
    DenseFfn,
    MoeRouterTopk,
    MoeGroupedGemm,
    QuantizeOps,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Attention,
        Stage::DenseFfn,
        Stage::MoeRouterTopk,
        Stage::MoeGroupedGemm,
        Stage::QuantizeOps,
    ];

    pub const fn name(self) -> &'static str {
        match self {
            Stage::Attention => "attention",
            Stage::DenseFfn => "dense-ffn",
            Stage::MoeRouterTopk => "moe-router+topk",
            Stage::MoeGroupedGemm => "moe-grouped-gemm",
            Stage::QuantizeOps => "quantize-ops",
        }
    }

    /// Optimization category used to label breakdown rows.
    pub const fn category(self) -> &'static str {
        match self {
            Stage::QuantizeOps | Stage::MoeGroupedGemm | Stage::DenseFfn => "quantization",
            Stage::Attention | Stage::MoeRouterTopk => "operator",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// Accumulates exclusive wall time per stage.
#[derive(Debug)]
pub struct Profiler {
    enabled: bool,
    totals: [Duration; 5],
    invocations: [u64; 5],
    stack: Vec<(Stage, Instant)>,
}

impl Profiler {
    pub fn new() -> Self {
        Self {
            enabled: true,
            totals: [Duration::ZERO; 5],
            invocations: [0; 5],
            stack: Vec::new(),
        }
    }

    /// A profiler that records nothing.
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::new()
        }
    }

    pub fn time<T>(&mut self, stage: Stage, f: impl FnOnce(&mut Self) -> T) -> T {
        if !self.enabled {
            return f(self);
        }
        let start = Instant::now();
        if let Some((parent, since)) = self.stack.last_mut() {
            self.totals[parent.index()] += start - *since;
        }
        self.stack.push((stage, start));
        let out = f(self);
        let end = Instant::now();
        let (stage, since) = self.stack.pop().expect("balanced stage stack");
        self.totals[stage.index()] += end - since;
        self.invocations[stage.index()] += 1;
        if let Some((_, since)) = self.stack.last_mut() {
            *since = end;
        }
        out
    }

    pub fn total(&self, stage: Stage) -> Duration {
        self.totals[stage.index()]
    }

    pub fn invocations(&self, stage: Stage) -> u64 {
        self.invocations[stage.index()]
    }
}

impl Default for Profiler {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub name: String,
    /// Mean exclusive time per iteration.
    pub wall_time_ms: f64,
    pub invocations: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreakdownEntry {
    pub label: String,
    pub category: String,
    /// Throughput gain over the baseline attributed to this row, as a
    /// percentage of the baseline throughput. Stage rows sum to the
    /// end-to-end row.
    pub relative_gain_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub mode: PrecisionMode,
    pub emulated: bool,
    pub threads: usize,
    pub iterations: u64,
    pub warmup: u64,
    pub tokens_per_iteration: u64,
    pub total_seconds: f64,
    pub throughput_unit: String,
    pub tokens_per_second: f64,
    pub stages: Vec<StageTiming>,
    pub breakdown: Vec<BreakdownEntry>,
    pub config: BlockConfig,
}

impl BenchReport {
    fn stage_ms(&self, name: &str) -> f64 {
        self.stages
            .iter()
            .find(|s| s.name == name)
            .map_or(0.0, |s| s.wall_time_ms)
    }

    fn total_stage_ms(&self) -> f64 {
        self.stages.iter().map(|s| s.wall_time_ms).sum()
    }

    /// Fills `breakdown` relative to `baseline`.
    ///
    /// With per-iteration times `b_s` (baseline) and `c_s` (this run), the
    /// throughput gain is `B/C - 1` where `B`, `C` are the stage sums. Stage
    /// `s` is credited `(b_s - c_s) / C`, so the stage rows add up to the
    /// end-to-end gain.
    pub fn compare_to(&mut self, baseline: &BenchReport) {
        let current_total = self.total_stage_ms();
        let baseline_total = baseline.total_stage_ms();
        let mut rows: Vec<BreakdownEntry> = Stage::ALL
            .iter()
            .map(|s| BreakdownEntry {
                label: s.name().to_string(),
                category: s.category().to_string(),
                relative_gain_pct: if current_total > 0.0 {
                    (baseline.stage_ms(s.name()) - self.stage_ms(s.name())) / current_total * 100.0
                } else {
                    0.0
                },
            })
            .collect();
        rows.push(BreakdownEntry {
            label: "end-to-end".into(),
            category: "end-to-end".into(),
            relative_gain_pct: if current_total > 0.0 {
                (baseline_total / current_total - 1.0) * 100.0
            } else {
                0.0
            },
        });
        self.breakdown = rows;
    }
}

/// Benchmark options.
#[derive(Debug, Clone)]
pub struct BenchOptions {
    pub mode: PrecisionMode,
    pub iterations: u64,
    pub warmup: u64,
    pub threads: usize,
}

/// Runs `warmup + iterations` forward passes on a seeded input and reports
/// per-stage exclusive time over the measured iterations.
pub fn run_bench(cfg: &BlockConfig, opts: &BenchOptions) -> Result<BenchReport> {
    if opts.iterations == 0 {
        return Err(Error::BadConfig("iterations must be at least 1".into()));
    }
    let weights = pipeline::init_block(cfg)?;
    let x = pipeline::random_input(cfg, cfg.seed)?;
    let run = |prof: &mut Profiler| -> Result<Tensor> {
        pipeline::forward_block_profiled(&x, &weights, opts.mode, prof)
    };
    for _ in 0..opts.warmup {
        run(&mut Profiler::disabled())?;
    }
    let mut prof = Profiler::new();
    let mut wall = Duration::ZERO;
    for _ in 0..opts.iterations {
        let start = Instant::now();
        run(&mut prof)?;
        wall += start.elapsed();
    }
    Ok(report_from(cfg, opts, &prof, wall))
}

fn report_from(
    cfg: &BlockConfig,
    opts: &BenchOptions,
    prof: &Profiler,
    wall: Duration,
) -> BenchReport {
    let iters = opts.iterations as f64;
    let tokens = cfg.tokens() as u64;
    let total_seconds = wall.as_secs_f64();
    BenchReport {
        mode: opts.mode,
        emulated: opts.mode == PrecisionMode::FP8Quantized,
        threads: opts.threads,
        iterations: opts.iterations,
        warmup: opts.warmup,
        tokens_per_iteration: tokens,
        total_seconds,
        throughput_unit: "tokens/s".into(),
        tokens_per_second: if total_seconds > 0.0 {
            (tokens * opts.iterations) as f64 / total_seconds
        } else {
            0.0
        },
        stages: Stage::ALL
            .iter()
            .map(|&s| StageTiming {
                name: s.name().to_string(),
                wall_time_ms: prof.total(s).as_secs_f64() * 1e3 / iters,
                invocations: prof.invocations(s),
            })
            .collect(),
        breakdown: Vec::new(),
        config: cfg.clone(),
    }
}
