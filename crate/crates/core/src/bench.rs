//! Micro-benchmarks for the efficiency argument: the factored fast path
//! (pre-multiply, static conv, post-multiply) against the naive
//! per-position dynamic-kernel oracle, with a static convolution baseline
//! and analytic FLOP models.
//!
//! Timing is only reported for cases whose three paths agree numerically
//! first (the correctness gate). The benchmark inputs use all-ones factor
//! maps so the static path computes the same function; multiplying by one
//! costs the same as multiplying by anything, so timings are
//! representative.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dr1conv::{
    dr1conv_forward, flops_dr1conv, oracle_general_kernel, oracle_rank1_pointwise, Dr1ConvLayer,
    DynamicFactors, KernelVariant,
};
use crate::error::{Error, Result};
use crate::tensor::{conv2d, rand_uniform, relative_diff, ConvKernel, Pad, Shape, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct BenchCase {
    pub channels: usize,
    pub kernel: usize,
    pub h: usize,
    pub w: usize,
    pub repetitions: usize,
    pub warmup: usize,
}

impl BenchCase {
    pub fn validate(&self) -> Result<()> {
        if self.repetitions < 3 {
            return Err(Error::InvalidArgument {
                op: "BenchCase",
                msg: format!("repetitions must be >= 3, got {}", self.repetitions),
            });
        }
        if self.kernel % 2 == 0 || self.kernel == 0 {
            return Err(Error::InvalidArgument {
                op: "BenchCase",
                msg: format!("kernel extents must be odd, got {}", self.kernel),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct BenchRow {
    pub channels: usize,
    pub kernel: usize,
    pub h: usize,
    pub w: usize,
    pub static_ms: f64,
    pub fast_ms: f64,
    pub naive_ms: f64,
    pub fast_flops: u64,
    pub naive_flops: u64,
    /// Repetitions were inner-scaled because a single run was below the
    /// timer floor.
    pub scaled: bool,
}

impl BenchRow {
    pub fn naive_over_fast(&self) -> f64 {
        self.naive_ms / self.fast_ms
    }
}

/// Median wall time in milliseconds. A first probe run decides how many
/// inner iterations are needed to stay above the timer floor.
fn time_median(mut f: impl FnMut(), repetitions: usize, warmup: usize) -> (f64, bool) {
    const FLOOR_MS: f64 = 2.0;
    for _ in 0..warmup {
        f();
    }
    let t0 = Instant::now();
    f();
    let probe_ms = t0.elapsed().as_secs_f64() * 1e3;
    let inner = if probe_ms < FLOOR_MS {
        (FLOOR_MS / probe_ms.max(1e-6)).ceil() as usize
    } else {
        1
    };
    let mut samples = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let t0 = Instant::now();
        for _ in 0..inner {
            f();
        }
        samples.push(t0.elapsed().as_secs_f64() * 1e3 / inner as f64);
    }
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    (samples[samples.len() / 2], inner > 1)
}

/// Run one case: correctness gate, then median timings for the static
/// conv, the fast factored path, and the naive per-position oracle.
pub fn run_case(case: &BenchCase) -> Result<BenchRow> {
    case.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(
        (case.channels as u64) << 32 | (case.kernel as u64) << 16 | case.h as u64,
    );
    let s = Shape::new(1, case.channels, case.h, case.w);
    let x: Tensor<f32> = rand_uniform(s, -1.0, 1.0, &mut rng);
    let w: Tensor<f32> = rand_uniform(
        Shape::new(case.channels, case.channels, case.kernel, case.kernel),
        -1.0,
        1.0,
        &mut rng,
    );
    let layer = Dr1ConvLayer::new(ConvKernel::new(w.clone(), None)?)?;
    let factors = DynamicFactors::ones(s);

    let run_static = || conv2d(&x, layer.kernel(), 1, Pad::Same).unwrap();
    let run_fast = || dr1conv_forward(&x, &factors, &layer).unwrap();
    let pointwise_w = (case.kernel == 1)
        .then(|| Tensor::matrix(case.channels, case.channels, w.data().to_vec()).unwrap());
    let run_naive = || match &pointwise_w {
        Some(m) => oracle_rank1_pointwise(&x, &factors, m).unwrap(),
        None => oracle_general_kernel(&x, &factors, &layer, KernelVariant::PostSum).unwrap(),
    };

    // correctness gate before any timing
    let y_static = run_static();
    let y_fast = run_fast();
    let y_naive = run_naive();
    for (name, pair) in [
        ("fast vs static", relative_diff(&y_fast, &y_static)),
        ("naive vs fast", relative_diff(&y_naive, &y_fast)),
    ] {
        if pair > 1e-4 {
            return Err(Error::Invariant(format!(
                "correctness gate failed for C={} k={} {}x{}: {} differs by {}",
                case.channels, case.kernel, case.h, case.w, name, pair
            )));
        }
    }

    let (static_ms, s1) = time_median(|| std::mem::drop(run_static()), case.repetitions, case.warmup);
    let (fast_ms, s2) = time_median(|| std::mem::drop(run_fast()), case.repetitions, case.warmup);
    let (naive_ms, s3) = time_median(|| std::mem::drop(run_naive()), case.repetitions, case.warmup);
    let (fast_flops, naive_flops) =
        flops_dr1conv(case.channels, case.h, case.w, case.kernel, case.kernel);
    Ok(BenchRow {
        channels: case.channels,
        kernel: case.kernel,
        h: case.h,
        w: case.w,
        static_ms,
        fast_ms,
        naive_ms,
        fast_flops,
        naive_flops,
        scaled: s1 || s2 || s3,
    })
}

pub fn run_bench(grid: &[BenchCase]) -> Result<Vec<BenchRow>> {
    grid.iter().map(run_case).collect()
}

pub const CSV_HEADER: &str =
    "channels,kernel,h,w,static_ms,fast_ms,naive_ms,fast_flops,naive_flops,naive_over_fast";

pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.channels,
            r.kernel,
            r.h,
            r.w,
            r.static_ms,
            r.fast_ms,
            r.naive_ms,
            r.fast_flops,
            r.naive_flops,
            r.naive_over_fast()
        ));
    }
    out
}

/// Markdown table with the same columns and values as the CSV.
pub fn report_markdown(rows: &[BenchRow]) -> String {
    let cols = CSV_HEADER.split(',').collect::<Vec<_>>();
    let mut out = format!("| {} |\n", cols.join(" | "));
    out.push_str(&format!("|{}\n", "---|".repeat(cols.len())));
    for r in rows {
        out.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} | {} | {} | {} | {} |\n",
            r.channels,
            r.kernel,
            r.h,
            r.w,
            r.static_ms,
            r.fast_ms,
            r.naive_ms,
            r.fast_flops,
            r.naive_flops,
            r.naive_over_fast()
        ));
    }
    out
}

/// The default grid used by the CLI; includes the headline point
/// (C=32, 3x3, 64x64).
pub fn default_grid(repetitions: usize, warmup: usize) -> Vec<BenchCase> {
    let mut grid = Vec::new();
    for &channels in &[1usize, 8, 32] {
        for &kernel in &[1usize, 3] {
            for &(h, w) in &[(16usize, 16usize), (64, 64)] {
                grid.push(BenchCase {
                    channels,
                    kernel,
                    h,
                    w,
                    repetitions,
                    warmup,
                });
            }
        }
    }
    grid
}
