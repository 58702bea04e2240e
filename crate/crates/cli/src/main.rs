//! Benchmark front end: single runs, noise-ratio sweeps, sample audits,
//! and summary reports.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use svae_reweight::bench;
use svae_reweight::config::{ExperimentConfig, Method};
use svae_reweight::datagen::TaskKind;

#[derive(Parser)]
#[command(
    name = "svae-bench",
    about = "Label-noise-robust training benchmark: SVAE loss-gap sample reweighting vs plain and focal baselines"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write its artifacts.
    Run {
        /// TOML config file; defaults apply for missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dotted-path overrides, e.g. train.epochs=20 or task=segmentation.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Run seed (shorthand for --override seed=N).
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for run artifacts.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Grid sweep over noise ratios, seeds, and methods.
    Sweep {
        /// Base TOML config shared by every run.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Comma-separated noise ratios in [0, 0.6].
        #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3,0.4,0.5,0.6")]
        ratios: Vec<f64>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
        /// Comma-separated methods: cel, focal, svae.
        #[arg(long, value_delimiter = ',', default_value = "cel,svae")]
        methods: Vec<String>,
        /// Comma-separated tasks: multilabel, segmentation. Defaults to
        /// the base config's task.
        #[arg(long, value_delimiter = ',')]
        tasks: Option<Vec<String>>,
        /// Sweep output directory.
        #[arg(long, default_value = "sweep-out")]
        out: PathBuf,
    },
    /// Rank training samples of a finished run by mean importance weight.
    Audit {
        /// Run directory containing config.toml and audit.csv.
        #[arg(long)]
        run_dir: PathBuf,
        /// Number of final epochs to average weights over.
        #[arg(long, default_value_t = 10)]
        k: usize,
    },
    /// Aggregate result rows into a summary table and plot series.
    Report {
        /// results.csv produced by sweep or run.
        #[arg(long = "in")]
        input: PathBuf,
        /// Output directory for summary.txt and series files.
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(
    path: &Option<PathBuf>,
    overrides: &[String],
    seed: Option<u64>,
) -> Result<ExperimentConfig> {
    let mut all = overrides.to_vec();
    if let Some(s) = seed {
        all.push(format!("seed={s}"));
    }
    let text = match path {
        Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        None => ExperimentConfig::default().to_toml(),
    };
    Ok(ExperimentConfig::from_toml_with_overrides(&text, &all)?)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            config,
            overrides,
            seed,
            out,
        } => {
            let cfg = load_config(&config, &overrides, seed)?;
            let dir = out.unwrap_or_else(|| bench::default_run_dir(&cfg));
            let row = bench::run(&cfg, &dir)?;
            println!(
                "task={} method={} noise_ratio={} seed={} metric={:.6} ({:.1}s)",
                row.task, row.method, row.noise_ratio, row.seed, row.metric, row.runtime_secs
            );
            println!("artifacts in {}", dir.display());
        }
        Command::Sweep {
            config,
            overrides,
            ratios,
            seeds,
            methods,
            tasks,
            out,
        } => {
            let cfg = load_config(&config, &overrides, None)?;
            let methods: Vec<Method> = methods
                .iter()
                .map(|m| m.parse())
                .collect::<std::result::Result<_, _>>()?;
            let tasks: Vec<TaskKind> = match tasks {
                None => vec![cfg.task],
                Some(names) => names
                    .iter()
                    .map(|t| t.parse())
                    .collect::<std::result::Result<_, _>>()?,
            };
            if ratios.iter().any(|r| !(0.0..=0.6).contains(r)) {
                bail!("ratios must lie in [0, 0.6]");
            }
            let rows = bench::sweep(&cfg, &tasks, &methods, &ratios, &seeds, &out)?;
            let failures = rows.iter().filter(|r| r.failure.is_some()).count();
            println!(
                "{} runs complete ({failures} failed); rows in {}",
                rows.len(),
                out.join("results.csv").display()
            );
            let (_, table) = bench::report(&rows, &out)?;
            println!("{table}");
            if failures > 0 {
                bail!("{failures} runs failed");
            }
        }
        Command::Audit { run_dir, k } => {
            let report = bench::audit(&run_dir, k)?;
            println!(
                "ranked {} samples by mean weight over the final {} epochs",
                report.ranked.len(),
                report.epochs_used
            );
            match report.precision_at_noise_count {
                Some(p) => println!("precision@(noise count): {p:.4}"),
                None => println!("precision@(noise count): undefined (no injected noise)"),
            }
            println!("lowest-weight samples:");
            for (id, w, flag) in report.ranked.iter().take(10) {
                let tag = match flag {
                    Some(true) => " noisy",
                    Some(false) => " clean",
                    None => "",
                };
                println!("  sample {id:>6}  weight {w:.6}{tag}");
            }
            println!("full ranking in {}", run_dir.join("audit_report.csv").display());
        }
        Command::Report { input, out } => {
            let rows = bench::read_rows(&input)?;
            let (_, table) = bench::report(&rows, &out)?;
            print!("{table}");
            println!("summary and series files in {}", out.display());
        }
    }
    Ok(())
}
