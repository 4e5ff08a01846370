//! `mshift` command-line driver: dataset generation, training, evaluation,
//! gradient verification and run comparison.
//!
//! Exit codes: 0 success, 1 verification failure, 2 configuration error,
//! 3 runtime abort.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use mshift_core::trainer::Ablation;
use thiserror::Error;

pub mod commands;
pub mod config;
pub mod report;

pub use config::{DatasetSource, Overrides, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] mshift_core::Error),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Runtime(String),
    #[error("verification failed: {0}")]
    Verify(String),
}

impl CliError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        use mshift_core::Error as E;
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Core(E::Config(_) | E::Parse { .. } | E::Schema { .. } | E::Validation(_)) => EXIT_CONFIG,
            CliError::Verify(_) => EXIT_VERIFY,
            _ => EXIT_RUNTIME,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "mshift", version, about = "Multi-source domain adaptation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the training, model-init and synthetic-data seeds.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    ablation: Option<Ablation>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the configured synthetic dataset to a vector file.
    GenData {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train, evaluate and write checkpoint, train log and report.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Output directory (overrides `output_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-evaluate the checkpoint of a finished run.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Report path (default: `<output_dir>/evalreport.json`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every training loss.
    Gradcheck {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Comparison table over run directories.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Also write the CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

impl RunArgs {
    fn overrides(&self, output_dir: Option<PathBuf>) -> Overrides {
        Overrides {
            seed: self.seed,
            ablation: self.ablation,
            output_dir,
        }
    }
}

fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("MSHIFT_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("MSHIFT_THREADS must be a positive integer, got '{v}'")))?;
    // a second initialisation in the same process keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn execute(cli: Cli) -> Result<i32, CliError> {
    init_threads()?;
    match cli.command {
        Command::GenData { run, out } => {
            let s = commands::gen_data(&run.config, &out, &run.overrides(None))?;
            println!(
                "wrote {}: M={} K={} d={} sources={:?} target_train={} target_test={}",
                out.display(),
                s.num_sources,
                s.num_classes,
                s.dim,
                s.source_counts,
                s.target_train,
                s.target_test
            );
        }
        Command::Train { run, out } => {
            let start = Instant::now();
            let o = commands::train(&run.config, &run.overrides(out))?;
            let r = &o.report;
            println!(
                "{}: target accuracy {:.4}, macro-F1 {:.4}, confusion gap {:.4} ({} epochs, {:.1}s) -> {}",
                r.label.as_deref().unwrap_or("-"),
                r.target_accuracy,
                r.target_macro_f1,
                r.confusion_gap,
                o.log.epochs.len(),
                start.elapsed().as_secs_f64(),
                o.output_dir.display()
            );
        }
        Command::Eval { run, out } => {
            let (path, r) = commands::eval(&run.config, &run.overrides(None), out.as_deref())?;
            println!(
                "target accuracy {:.4}, macro-F1 {:.4}, confusion gap {:.4} -> {}",
                r.target_accuracy,
                r.target_macro_f1,
                r.confusion_gap,
                path.display()
            );
        }
        Command::Gradcheck { seed, corrupt } => {
            let start = Instant::now();
            let checks = commands::gradcheck(seed, corrupt)?;
            println!("{:<14} {:>12} {:>8}  worst", "loss", "max_rel_err", "entries");
            let mut failed = Vec::new();
            for c in &checks {
                let worst = c.report.worst.as_ref().map_or("-".to_string(), |(id, i)| format!("{id}[{i}]"));
                println!(
                    "{:<14} {:>12.3e} {:>8}  {worst}{}",
                    c.loss,
                    c.report.max_rel_error,
                    c.report.entries_checked,
                    if c.report.passed { "" } else { "  FAIL" }
                );
                if !c.report.passed {
                    failed.push(format!("{} at {worst} (rel err {:.3e})", c.loss, c.report.max_rel_error));
                }
            }
            println!("{:.1}s", start.elapsed().as_secs_f64());
            if !failed.is_empty() {
                return Err(CliError::Verify(failed.join("; ")));
            }
        }
        Command::Report { runs, out } => {
            let table = report::collect(&runs)?;
            for (dir, why) in &table.skipped {
                eprintln!("warning: skipping {}: {why}", dir.display());
            }
            let csv = table.to_csv();
            print!("{csv}");
            if let Some(p) = out {
                std::fs::write(&p, &csv).map_err(|e| CliError::io(&p, e))?;
            }
        }
    }
    Ok(EXIT_OK)
}

/// Parses `args` (including the program name), runs the command and returns
/// the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
