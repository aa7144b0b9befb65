use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use satad_cli::commands::{best_f1, cmd_bench, cmd_detect, cmd_eval, cmd_synth, cmd_train};
use satad_cli::{Method, RunConfig};
use satad_core::detect::Threshold;
use satad_core::Exec;

#[derive(Parser)]
#[command(
    name = "satad",
    version,
    about = "Self-attention GAN anomaly detection for sensor streams"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Blend weight between reconstruction and discrimination error.
    #[arg(long, global = true)]
    lambda: Option<f64>,
    /// A number, or `auto` for the best-F1 threshold on the labelled test data.
    #[arg(long, global = true)]
    threshold: Option<Threshold>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic train.csv (normal) and test.csv (labelled, with anomalies).
    Synth,
    /// Train one model per device type.
    Train,
    /// Score the test series and label every step.
    Detect {
        #[arg(long)]
        method: Option<Method>,
    },
    /// Evaluate a score CSV against its true labels.
    Eval {
        #[arg(long)]
        scores: Option<PathBuf>,
        #[arg(long)]
        method: Option<Method>,
    },
    /// Measure sustained single-threaded scoring throughput.
    Bench,
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var("SATAD_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .with_context(|| format!("SATAD_THREADS must be a positive integer, got {value:?}"))?;
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("cannot size the worker pool")?;
    #[cfg(not(feature = "parallel"))]
    let _ = n;
    Ok(())
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(lambda) = cli.lambda {
        cfg.score.lambda = lambda;
    }
    if let Some(threshold) = cli.threshold {
        cfg.score.threshold = threshold;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    let mut cfg = load_config(&cli)?;
    let exec = Exec::default();
    match cli.command {
        Command::Synth => {
            let (train, test) = cmd_synth(&cfg)?;
            println!("wrote {} and {}", train.display(), test.display());
        }
        Command::Train => {
            let outcome = cmd_train(&cfg, exec)?;
            for ((id, path), (_, log)) in outcome.models.iter().zip(&outcome.logs) {
                let last = log.steps.last();
                println!(
                    "device {id}: {} steps, final D(x) {:.3}, D(G(z)) {:.3} -> {}",
                    log.len(),
                    last.map_or(f64::NAN, |s| s.d_real_mean),
                    last.map_or(f64::NAN, |s| s.d_fake_mean),
                    path.display()
                );
            }
        }
        Command::Detect { method } => {
            if let Some(method) = method {
                cfg.method = method;
            }
            let outcome = cmd_detect(&cfg, exec)?;
            println!(
                "threshold {:.6}; scores -> {}",
                outcome.series.threshold,
                outcome.scores_path.display()
            );
            if let Some(report) = &outcome.report {
                println!("{report}");
                println!("best F1 over sweep: {:.4}", best_f1(&outcome.series)?);
            }
        }
        Command::Eval { scores, method } => {
            if let Some(method) = method {
                cfg.method = method;
            }
            let report = cmd_eval(&cfg, scores.as_deref())?;
            println!("{report}");
            let best = report.curve.iter().map(|p| p.f1).fold(0.0, f64::max);
            println!("best F1 over sweep: {best:.4}");
        }
        Command::Bench => {
            let report = cmd_bench(&cfg)?;
            let mode = |name: &str, m: &satad_cli::commands::ModeThroughput| {
                println!(
                    "{name}: {:.1} steps/s over {:.1} s ({} windows), p50 {:.3} ms, p99 {:.3} ms",
                    m.steps_per_second, m.seconds, m.windows, m.p50_ms, m.p99_ms
                );
            };
            println!("target: {} steps/s", report.target_steps_per_second);
            mode("score-only", &report.score_only);
            mode("full inversion", &report.full_inversion);
            println!("{}", if report.passed() { "PASS" } else { "FAIL" });
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let reason = format!("{err:#}").replace(['\n', '\r'], " ");
            eprintln!("error: {reason}");
            ExitCode::FAILURE
        }
    }
}
