use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use liqvol::pipeline::{Overrides, RunConfig, Runner};
use liqvol::synth::{self, SynthConfig};
use liqvol::{condsvd, persist};

#[derive(Parser)]
#[command(name = "liqvol", version, about = "Liquidity-adjusted multivariate volatility pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Daily liquidity snapshots, determinant statistics and histograms.
    Liquidity(RunArgs),
    /// VECM -> DCC/ADCC -> posterior covariance forecasts for both pipelines.
    Forecast(RunArgs),
    /// Mean-variance backtests for the selected variants.
    Backtest(RunArgs),
    /// Run every stage and write a Markdown report.
    Report(RunArgs),
    /// Solve A = H B H^T for two matrices stored as headerless CSV.
    CondsvdDebug {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// Eigenvalue floor for B (default scales with its trace).
        #[arg(long)]
        floor: Option<f64>,
    },
    /// Write a seeded synthetic minute dataset and a config for it.
    Synth {
        #[arg(long, default_value = "synthetic")]
        dir: PathBuf,
        #[arg(long, default_value_t = 8)]
        assets: usize,
        #[arg(long, default_value_t = 600)]
        days: usize,
        #[arg(long, default_value_t = 48)]
        minutes: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 365)]
        window: usize,
        #[arg(long, default_value_t = 1)]
        stride: usize,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, short)]
    config: PathBuf,
    /// Comma-separated variant ids (1-6).
    #[arg(long, value_delimiter = ',')]
    variants: Option<Vec<u8>>,
    /// Rolling window in days.
    #[arg(long)]
    window: Option<usize>,
    /// Refit every this many days.
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn runner(&self) -> Result<Runner> {
        let mut cfg = RunConfig::load(&self.config)?;
        cfg.apply(&Overrides {
            variants: self.variants.clone(),
            window_days: self.window,
            refit_stride: self.stride,
            tau: self.tau,
            seed: self.seed,
            threads: self.threads,
            out: self.out.clone(),
        });
        Ok(Runner::new(cfg)?)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Liquidity(args) => {
            let runner = args.runner()?;
            let liq = runner.liquidity()?;
            println!(
                "{} days, {} skipped -> {}",
                liq.snapshots.len(),
                liq.skipped.len(),
                runner.out_dir().join("liquidity").display()
            );
        }
        Command::Forecast(args) => {
            let runner = args.runner()?;
            let f = runner.forecast()?;
            println!(
                "{} forecast days, {} window fits -> {}",
                f.records.len(),
                f.fits.len(),
                runner.out_dir().join("forecast").display()
            );
        }
        Command::Backtest(args) => {
            let runner = args.runner()?;
            for r in runner.backtest()? {
                println!("variant {} ({}): SR_a = {:.4}", r.variant.id, r.variant.family(), r.sharpe.value);
            }
        }
        Command::Report(args) => {
            let runner = args.runner()?;
            println!("{}", runner.report()?.display());
        }
        Command::CondsvdDebug { a, b, floor } => {
            let ma = persist::read_dense_matrix(&a)?;
            let mb = persist::read_dense_matrix(&b)?;
            let res = condsvd::conditional_svd(&ma, &mb, floor)?;
            println!("H ={}", res.h);
            println!("residual = {:e}", res.residual);
            println!("regularized = {} (floor {:e}, {} directions)", res.regularized, res.floor_used, res.floored_directions);
        }
        Command::Synth {
            dir,
            assets,
            days,
            minutes,
            seed,
            window,
            stride,
        } => {
            let defaults = SynthConfig::default();
            let cfg = SynthConfig {
                assets,
                days,
                minutes_per_day: minutes,
                seed: seed.unwrap_or(defaults.seed),
                ..defaults
            };
            let path = synth::write_bundle(&dir, &cfg, window, stride)
                .with_context(|| format!("writing synthetic data to {}", dir.display()))?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
