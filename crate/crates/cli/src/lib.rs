//! Command-line front end: verification suites, data generation, training,
//! inference, micro-benchmarks and parameter accounting.

pub mod check;
pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::config::Config;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFICATION: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Parser)]
#[command(
    name = "dr1mask",
    about = "Dynamic rank-1 convolution segmentation stack: verification, training, inference and benchmarks",
    version
)]
pub struct Cli {
    /// key=value configuration file (defaults apply when omitted)
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Override the config seed
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads; more than 1 parallelizes per-instance head work and
    /// forfeits the bitwise-replay guarantee
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,

    /// Output path (meaning depends on the command)
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Run oracle-equivalence, gradient, shape and parameter-count suites
    Check {
        /// Only run suites whose name contains this substring
        #[arg(long)]
        only: Option<String>,
        /// Deliberately corrupt one comparison (negative test hook)
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Generate a synthetic dataset directory
    GenData {
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 1)]
        min_instances: usize,
        #[arg(long, default_value_t = 3)]
        max_instances: usize,
    },
    /// Train on a dataset directory; writes a checkpoint and a metrics CSV
    Train {
        /// Dataset directory from gen-data
        #[arg(long)]
        data: PathBuf,
        /// Resume from an earlier checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Run inference on one scene record with teacher-forced boxes
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scene: PathBuf,
    },
    /// Micro-benchmark the fast factored path against the naive oracle
    Bench {
        /// Comma-separated channel counts
        #[arg(long, default_value = "1,8,32")]
        channels: String,
        /// Comma-separated odd kernel extents
        #[arg(long, default_value = "1,3")]
        kernels: String,
        /// Comma-separated square spatial extents
        #[arg(long, default_value = "16,64")]
        sizes: String,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long, default_value_t = 2)]
        warmup: usize,
    },
    /// Print per-instance and shared parameter counts per head kind
    Params,
}

fn parse_list(s: &str, what: &str) -> anyhow::Result<Vec<usize>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| anyhow::anyhow!("bad {what} entry '{t}'"))
        })
        .collect()
}

/// Dispatch a parsed command line; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    match dispatch(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            classify_error(&err)
        }
    }
}

fn load_config(cli: &Cli) -> anyhow::Result<Config> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p).map_err(UsageError::wrap)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

/// Marker wrapper so config/usage problems exit with code 2.
#[derive(Debug)]
struct UsageError(anyhow::Error);

impl UsageError {
    fn wrap(e: anyhow::Error) -> anyhow::Error {
        anyhow::Error::new(UsageError(e))
    }
}

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.0)
    }
}

impl std::error::Error for UsageError {}

fn classify_error(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return EXIT_USAGE;
        }
        if let Some(core) = cause.downcast_ref::<dr1mask_core::Error>() {
            return match core {
                dr1mask_core::Error::Io { .. } | dr1mask_core::Error::Parse { .. } => EXIT_IO,
                dr1mask_core::Error::Config(_) => EXIT_USAGE,
                _ => EXIT_VERIFICATION,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_IO;
        }
    }
    EXIT_VERIFICATION
}

fn dispatch(cli: Cli) -> anyhow::Result<i32> {
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::Check { only, inject_fault } => {
            let results = check::run_check(only.as_deref(), *inject_fault);
            if results.is_empty() {
                eprintln!("no suite matches the --only filter");
                return Ok(EXIT_USAGE);
            }
            let mut all_pass = true;
            println!("{:<26} {:<6} detail", "suite", "status");
            for r in &results {
                all_pass &= r.passed;
                println!(
                    "{:<26} {:<6} {}",
                    r.name,
                    if r.passed { "PASS" } else { "FAIL" },
                    r.detail
                );
            }
            Ok(if all_pass { EXIT_OK } else { EXIT_VERIFICATION })
        }
        Command::GenData {
            count,
            height,
            width,
            min_instances,
            max_instances,
        } => {
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("dataset"));
            commands::cmd_gen(
                &cfg,
                &commands::GenArgs {
                    count: *count,
                    height: *height,
                    width: *width,
                    min_instances: *min_instances,
                    max_instances: *max_instances,
                },
                &out,
            )?;
            Ok(EXIT_OK)
        }
        Command::Train { data, resume } => {
            let out = cli
                .out
                .clone()
                .unwrap_or_else(|| PathBuf::from("checkpoint.dr1k"));
            commands::cmd_train(&cfg, data, resume.as_deref(), cli.threads, &out)?;
            Ok(EXIT_OK)
        }
        Command::Infer { checkpoint, scene } => {
            let out = cli
                .out
                .clone()
                .unwrap_or_else(|| PathBuf::from("infer_out"));
            commands::cmd_infer(&cfg, checkpoint, scene, &out)?;
            Ok(EXIT_OK)
        }
        Command::Bench {
            channels,
            kernels,
            sizes,
            reps,
            warmup,
        } => {
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("bench.csv"));
            let args = commands::BenchArgs {
                channels: parse_list(channels, "channels").map_err(UsageError::wrap)?,
                kernels: parse_list(kernels, "kernels").map_err(UsageError::wrap)?,
                sizes: parse_list(sizes, "sizes").map_err(UsageError::wrap)?,
                reps: *reps,
                warmup: *warmup,
            };
            commands::cmd_bench(&args, &out)?;
            Ok(EXIT_OK)
        }
        Command::Params => {
            commands::cmd_params(&cfg)?;
            Ok(EXIT_OK)
        }
    }
}
