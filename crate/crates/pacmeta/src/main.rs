//! Command-line front end: one declarative TOML config in, tidy CSV out.
//!
//! Every subcommand reads the config named by `--config`, applies
//! `--paper-scale` if asked, and writes its outputs plus a JSON manifest
//! into `--out`. Exit status is zero exactly when the requested artifacts
//! were written; config problems name the offending field on stderr.

use clap::{Parser, Subcommand};
use pacmeta::harness::{
    bound_curve, bound_sweep, crossval_select, read_bound_reports, read_results_csv, run_grid,
    train_single, write_bound_curve_csv, write_metrics_csv, write_results_csv,
    write_selection_csv, ExperimentConfig, Manifest, SweepOptions,
};
use pacmeta::bounds::write_bound_reports;
use pacmeta::meta::write_trace_csv;
use pacmeta::Result;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "pacmeta",
    version,
    about = "Desk-scale laboratory for PAC-Bayesian few-shot meta-learning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the grid's first job only and write its optimization trace.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (created if missing).
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        /// Restore the full 8 sets x 5 seeds x 8000 iterations protocol.
        #[arg(long)]
        paper_scale: bool,
    },
    /// Run the whole hyperparameter grid and write the result tables.
    Grid {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        #[arg(long)]
        paper_scale: bool,
    },
    /// Cross-validate an existing result table and write the selection.
    Crossval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        #[arg(long)]
        paper_scale: bool,
    },
    /// Train both bound paths over the m_i sweep and write the reports.
    BoundSweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        #[arg(long)]
        paper_scale: bool,
        /// Fixed per-example temperature beta / m_i.
        #[arg(long)]
        beta_over_mi: Option<f64>,
        /// Fixed ratio alpha / beta for the W2 path.
        #[arg(long)]
        alpha_over_beta: Option<f64>,
        /// Replicates per (path, m_i).
        #[arg(long)]
        seeds: Option<usize>,
        /// Monte-Carlo draws for the W1 shift estimate (0 disables).
        #[arg(long)]
        delta_mc: Option<usize>,
    },
    /// Aggregate bounds.csv in the output directory into a plot-ready curve.
    Report {
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn load(config: &Path, paper_scale: bool) -> Result<(ExperimentConfig, String)> {
    let (config, sha) = ExperimentConfig::load(config)?;
    let config = if paper_scale { config.paper_scale() } else { config };
    config.validate()?;
    Ok((config, sha))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, out, paper_scale } => {
            let (config, sha) = load(&config, paper_scale)?;
            std::fs::create_dir_all(&out)?;
            let result = train_single(&config)?;
            let trace_path = out.join("trace.csv");
            write_trace_csv(&trace_path, &result.trace)?;
            Manifest::new(&config, sha, vec!["trace.csv".into()])?
                .write(out.join("manifest.json"))?;
            if let Some(it) = result.diverged_at {
                eprintln!("warning: training diverged at iteration {it}; trace kept");
            }
            if let Some(last) = result.trace.last() {
                println!(
                    "trained {} iterations, objective {:.6}, wrote {}",
                    config.iterations,
                    last.objective,
                    trace_path.display()
                );
            }
            Ok(())
        }
        Command::Grid { config, out, paper_scale } => {
            let (config, sha) = load(&config, paper_scale)?;
            std::fs::create_dir_all(&out)?;
            let rows = run_grid(&config)?;
            write_results_csv(out.join("results.csv"), &rows)?;
            write_metrics_csv(out.join("metrics.csv"), &rows)?;
            Manifest::new(&config, sha, vec![
                "results.csv".into(),
                "metrics.csv".into(),
            ])?
            .write(out.join("manifest.json"))?;
            let failed = rows.iter().filter(|r| r.error.is_some()).count();
            println!(
                "grid done: {} rows ({} failed), wrote {}",
                rows.len(),
                failed,
                out.join("results.csv").display()
            );
            Ok(())
        }
        Command::Crossval { config, out, paper_scale } => {
            let (config, _) = load(&config, paper_scale)?;
            let rows = read_results_csv(out.join("results.csv"))?;
            let selections = crossval_select(&rows, &config)?;
            write_selection_csv(out.join("selection.csv"), &selections)?;
            for s in &selections {
                println!(
                    "m_i {:>4}: beta {:.1} alpha {} -> validation {:.4}, test {:.4} +- {:.4}",
                    s.m_i,
                    s.beta,
                    s.alpha.map_or("-".into(), |a| format!("{a:.1}")),
                    s.validation,
                    s.test,
                    s.test_se
                );
            }
            println!("wrote {}", out.join("selection.csv").display());
            Ok(())
        }
        Command::BoundSweep {
            config,
            out,
            paper_scale,
            beta_over_mi,
            alpha_over_beta,
            seeds,
            delta_mc,
        } => {
            let (config, sha) = load(&config, paper_scale)?;
            std::fs::create_dir_all(&out)?;
            let mut sweep = SweepOptions::default();
            if let Some(b) = beta_over_mi {
                sweep.beta_over_mi = b;
            }
            if let Some(a) = alpha_over_beta {
                sweep.alpha_over_beta = a;
            }
            if let Some(s) = seeds {
                sweep.seeds = s;
            }
            if let Some(d) = delta_mc {
                sweep.delta_mc = d;
            }
            let reports = bound_sweep(&config, &sweep)?;
            write_bound_reports(out.join("bounds.csv"), &reports)?;
            Manifest::new(&config, sha, vec!["bounds.csv".into()])?
                .write(out.join("manifest.json"))?;
            println!(
                "bound sweep done: {} rows, wrote {}",
                reports.len(),
                out.join("bounds.csv").display()
            );
            Ok(())
        }
        Command::Report { out } => {
            let bounds_path = out.join("bounds.csv");
            if !bounds_path.exists() {
                return Err(pacmeta::Error::Config(format!(
                    "nothing to report: {} not found (run bound-sweep first)",
                    bounds_path.display()
                )));
            }
            let reports = read_bound_reports(&bounds_path)?;
            let curve = bound_curve(&reports);
            write_bound_curve_csv(out.join("bound_curve.csv"), &curve)?;
            for p in &curve {
                println!(
                    "{:>8} m_i {:>4}: total {:.4} +- {:.4} (n = {})",
                    p.path.as_str(),
                    p.m_i,
                    p.total,
                    p.se,
                    p.n
                );
            }
            println!("wrote {}", out.join("bound_curve.csv").display());
            Ok(())
        }
    }
}
