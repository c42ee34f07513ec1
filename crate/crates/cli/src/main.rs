//! `dope`: runs simulation campaigns and reads their tables.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use dope_core::config::ScenarioFile;
use dope_core::harness::{
    dominance_report, emit_tables, prevalence_sweep, read_metrics, run_scenario, select_interval, MetricsRow,
    ScenarioConfig, METRICS_FILE,
};
use dope_core::{DopeError, Result};

#[derive(Parser)]
#[command(name = "dope", version, about = "Pooled-testing simulations with D-optimal pool design")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file and write metrics, tradeoff and prevalence tables.
    Simulate(RunArgs),
    /// Run the scenario once per point of its `[sweep]` block.
    Sweep(RunArgs),
    /// Pick the cheapest DOPE interval whose FNR is below a target.
    SelectInterval {
        /// Output directory of a run, or a metrics.csv file.
        #[arg(long)]
        tables: PathBuf,
        /// FNR the interval must stay strictly below.
        #[arg(long)]
        target: f64,
    },
    /// List every dominance relation between rows of a run.
    Report {
        #[arg(long)]
        tables: PathBuf,
        /// Print findings as JSON lines.
        #[arg(long)]
        json: bool,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Scenario file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Directory for the CSV tables.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    /// Posterior samples per DOPE round.
    #[arg(long)]
    samples: Option<usize>,
}

impl RunArgs {
    fn load(&self) -> Result<(ScenarioFile, ScenarioConfig)> {
        let file = ScenarioFile::read(&self.config)?;
        let mut cfg = ScenarioConfig::from_file(&file)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(w) = self.workers {
            cfg.workers = Some(w);
        }
        if let Some(l) = self.samples {
            cfg.mc_samples = l;
        }
        cfg.validate()?;
        Ok((file, cfg))
    }
}

fn metrics_path(tables: &Path) -> PathBuf {
    if tables.is_dir() {
        tables.join(METRICS_FILE)
    } else {
        tables.to_path_buf()
    }
}

fn print_rows(rows: &[MetricsRow]) {
    println!("{:<28} {:>10} {:>8} {:>8} {:>10}", "strategy", "tests", "fnr", "fpr", "prevalence");
    for r in rows {
        println!(
            "{:<28} {:>10.3} {:>8.4} {:>8.4} {:>10.4}",
            r.label(),
            r.mean_tests,
            r.fnr,
            r.fpr,
            r.prevalence
        );
    }
}

fn finish(rows: &[MetricsRow], out: &Path, started: Instant) -> Result<()> {
    let paths = emit_tables(rows, out)?;
    print_rows(rows);
    eprintln!("{} rows in {:.1?}", rows.len(), started.elapsed());
    for p in paths {
        eprintln!("wrote {}", p.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(args) => {
            let (_, cfg) = args.load()?;
            let started = Instant::now();
            let rows = run_scenario(&cfg)?;
            finish(&rows, &args.out, started)
        }
        Command::Sweep(args) => {
            let (file, cfg) = args.load()?;
            let sweep = file
                .sweep
                .ok_or_else(|| DopeError::validation("sweep", "scenario file has no [sweep] block"))?;
            let started = Instant::now();
            let rows = prevalence_sweep(&cfg, &sweep.points())?;
            finish(&rows, &args.out, started)
        }
        Command::SelectInterval { tables, target } => {
            let rows = read_metrics(&metrics_path(&tables))?;
            println!("{}", select_interval(&rows, target)?);
            Ok(())
        }
        Command::Report { tables, json } => {
            let rows = read_metrics(&metrics_path(&tables))?;
            for f in dominance_report(&rows) {
                if json {
                    println!("{}", serde_json::to_string(&f).expect("finding serializes"));
                } else {
                    println!("{:?}: {} dominates {}", f.metric, f.dominant, f.dominated);
                }
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dope: {e}");
            ExitCode::FAILURE
        }
    }
}
