use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use dartlab::expcli::{
    barrier_table, checkpoint_barrier, parse_config, parse_data_config, run_experiment, trajectory_from_dir,
    write_resolved,
};
use dartlab::table::write_csv;
use serde_json::json;

/// Experiments on diversify-aggregate-repeat training.
#[derive(Parser)]
#[command(name = "dartlab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a config file.
    Run {
        config: Option<PathBuf>,
        /// Override a key, e.g. `--set dart.lambda=50`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Check a config and print it fully resolved.
    Validate {
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Loss barrier between two patch-model checkpoints.
    Barrier {
        ckpt_a: PathBuf,
        ckpt_b: PathBuf,
        /// Config whose `data.*` keys and master_seed regenerate the training set.
        #[arg(long)]
        data: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long, default_value_t = 21)]
        grid: usize,
        /// Write the loss profile here as CSV (alpha,loss).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// 2-D PCA of every `.params` checkpoint in a directory.
    Trajectory {
        ckpt_dir: PathBuf,
        /// Defaults to `<ckpt-dir>/trajectory.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    dartlab::exec::init_from_env();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut body = json!({ "kind": "error", "message": format!("{e:#}") });
            if let Some(de) = e.downcast_ref::<dartlab::Error>() {
                body["kind"] = json!(de.kind());
                if let dartlab::Error::Config { key, .. } = de {
                    body["key"] = json!(key);
                }
            }
            eprintln!("{}", json!({ "error": body }));
            ExitCode::FAILURE
        }
    }
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Run { config, set } => {
            let cfg = load(config.as_deref(), &set)?;
            let outcome = run_experiment(&cfg).with_context(|| format!("running {} experiment", cfg.kind))?;
            write_resolved(&cfg, &cfg.out_dir.join("config.resolved"))?;
            let files: Vec<String> = outcome.files.iter().map(|p| p.display().to_string()).collect();
            println!("{}", json!({ "kind": cfg.kind.name(), "pass": outcome.pass, "files": files }));
        }
        Command::Validate { config, set } => {
            let cfg = load(config.as_deref(), &set)?;
            print!("{}", cfg.to_flat());
        }
        Command::Barrier {
            ckpt_a,
            ckpt_b,
            data,
            set,
            grid,
            out,
        } => {
            let cfg = parse_data_config(&data, &set).with_context(|| format!("reading {}", data.display()))?;
            let profile = checkpoint_barrier(&ckpt_a, &ckpt_b, &cfg, grid)?;
            if let Some(out) = out {
                write_csv(&barrier_table(&profile), &["alpha", "loss"], &out)?;
            }
            println!(
                "{}",
                json!({ "max_loss": profile.max_loss, "barrier_excess": profile.barrier_excess })
            );
        }
        Command::Trajectory { ckpt_dir, out } => {
            let proj = trajectory_from_dir(&ckpt_dir)
                .with_context(|| format!("reading checkpoints in {}", ckpt_dir.display()))?;
            let out = out.unwrap_or_else(|| ckpt_dir.join("trajectory.csv"));
            let cols = ["id", "x", "y", "explained_var1", "explained_var2"];
            write_csv(&proj.table(), &cols, &out)?;
            println!("{}", json!({ "ids": proj.ids, "explained": proj.explained, "csv": out.display().to_string() }));
        }
    }
    Ok(())
}

fn load(config: Option<&Path>, set: &[String]) -> Result<dartlab::expcli::ExperimentConfig> {
    let cfg = parse_config(config, set);
    match config {
        Some(p) => cfg.with_context(|| format!("config {}", p.display())),
        None => Ok(cfg?),
    }
}
