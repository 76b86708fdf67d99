//! The `mmfuse` command: execute experiment configs and inspect the run
//! directories they produce.
//!
//! Exit codes: 0 on success, 2 when a config is invalid (schema, shapes,
//! hyperparameters), 3 on runtime failures (I/O, incomplete runs, audit
//! discrepancies). Failures print one machine-readable JSON object to
//! stderr. Relative output paths are re-rooted under `MMFUSE_OUTPUT_ROOT`
//! when that variable is set; the inspection verbs look input directories
//! up under the same root when the literal path does not exist.

use clap::{Parser, Subcommand};
use mmfuse::error::Error;
use mmfuse::experiment::{
    audit_run, compare_runs, plot_run, resolve_output_dir, run_experiment, ExperimentConfig,
};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "mmfuse", version, about = "Multimodal fusion experiment harness")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Validate a config, then execute it seed by seed into its run
    /// directory.
    Run {
        /// Experiment config (JSON).
        config: PathBuf,
    },
    /// Rank finished runs against a designated late-fusion baseline run.
    Compare {
        /// Run directories to include.
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// The baseline run the robustness scores are measured against.
        #[arg(long)]
        baseline: PathBuf,
        /// Where the leaderboard CSV and tradeoff chart go.
        #[arg(long, default_value = "comparison")]
        out: PathBuf,
    },
    /// Render one performance-imperfection SVG per grid partition.
    Plot {
        /// A finished run directory.
        dir: PathBuf,
    },
    /// Re-derive every persisted metric from the stored predictions and
    /// report discrepancies.
    Audit {
        /// A finished run directory.
        dir: PathBuf,
    },
    /// Check a config without running it.
    Validate {
        /// Experiment config (JSON).
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let payload = serde_json::json!({
                "error": err.to_string(),
                "exit_code": err.exit_code(),
            });
            eprintln!("{payload}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<(), Error> {
    match cmd {
        Cmd::Run { config } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            let outcome = run_experiment(&cfg)?;
            println!("run complete: {}", outcome.run_dir.display());
            println!(
                "seeds: {} requested, {} completed",
                outcome.manifest.seeds.len(),
                outcome.manifest.completed_seeds.len()
            );
            for failure in &outcome.failures {
                println!("seed {} failed: {}", failure.seed, failure.error);
            }
            for stat in &outcome.summary.stats {
                println!("{}: {:.6} ± {:.6}", stat.name, stat.mean, stat.std);
            }
            Ok(())
        }
        Cmd::Compare {
            dirs,
            baseline,
            out,
        } => {
            let dirs: Vec<PathBuf> = dirs.iter().map(|d| locate_run_dir(d)).collect();
            let baseline = locate_run_dir(&baseline);
            let out = resolve_output_dir(&out.to_string_lossy());
            let comparison = compare_runs(&dirs, &baseline, &out)?;
            print!("{}", comparison.to_csv());
            println!("wrote {}", out.join("leaderboard.csv").display());
            println!("wrote {}", out.join("tradeoff.svg").display());
            Ok(())
        }
        Cmd::Plot { dir } => {
            for path in plot_run(&locate_run_dir(&dir))? {
                println!("wrote {}", path.display());
            }
            Ok(())
        }
        Cmd::Audit { dir } => {
            let dir = locate_run_dir(&dir);
            let outcome = audit_run(&dir)?;
            let report = serde_json::json!({
                "dir": dir.display().to_string(),
                "seeds_checked": outcome.seeds_checked,
                "problems": outcome.problems,
            });
            println!(
                "{}",
                serde_json::to_string_pretty(&report).expect("plain JSON value")
            );
            if outcome.is_clean() {
                Ok(())
            } else {
                Err(Error::audit(
                    dir.display().to_string(),
                    format!("{} discrepancies", outcome.problems.len()),
                ))
            }
        }
        Cmd::Validate { config } => {
            ExperimentConfig::from_file(&config)?.validate()?;
            println!("config ok: {}", config.display());
            Ok(())
        }
    }
}

/// Input run directories are taken as given when they exist; otherwise the
/// same path is tried under the output root, so the relative paths a config
/// names keep working for the inspection verbs.
fn locate_run_dir(dir: &Path) -> PathBuf {
    if dir.exists() {
        return dir.to_path_buf();
    }
    let resolved = resolve_output_dir(&dir.to_string_lossy());
    if resolved.exists() {
        resolved
    } else {
        dir.to_path_buf()
    }
}
