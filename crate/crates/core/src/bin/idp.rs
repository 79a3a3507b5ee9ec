use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use idp_core::cli::{self, CliError, RunConfig, EXIT_AUDIT_FAIL, EXIT_VALIDATION};

#[derive(Parser)]
#[command(name = "idp", version, about = "Individualized-privacy DP-SGD: calibrate, train, audit")]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Derive per-group sampling rates, noise multipliers and clip norms.
    Calibrate {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (defaults to `output.dir` in the config, then `.`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train with a calibrated parameter file and write model, ledger and metrics.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a spend ledger against the configured budgets.
    Audit {
        #[arg(long)]
        ledger: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Also write a `step,group,epsilon` CSV of the trajectory.
        #[arg(long)]
        emit_csv: Option<PathBuf>,
    },
}

fn load_config(path: &Path) -> anyhow::Result<RunConfig> {
    let seed = std::env::var("IDP_SEED").ok();
    let cfg = RunConfig::from_path(path)
        .and_then(|c| c.with_seed_override(seed.as_deref()))
        .map_err(CliError::from)
        .with_context(|| format!("loading config {}", path.display()))?;
    Ok(cfg)
}

fn out_dir(cli_out: Option<PathBuf>, cfg: &RunConfig) -> PathBuf {
    cli_out
        .or_else(|| cfg.output.dir.clone())
        .unwrap_or_else(|| PathBuf::from("."))
}

fn run(args: Args) -> anyhow::Result<i32> {
    match args.command {
        Command::Calibrate { config, out } => {
            let cfg = load_config(&config)?;
            let dir = out_dir(out, &cfg);
            let res = cli::cmd_calibrate(&cfg, &dir)?;
            print!("{}", res.summary);
            println!("wrote {}", res.params_path.display());
            Ok(0)
        }
        Command::Train { config, params, out } => {
            let cfg = load_config(&config)?;
            let dir = out_dir(out, &cfg);
            let res = cli::cmd_train(&cfg, &params, &dir)?;
            print!("{}", res.summary());
            if res.exhausted() {
                Ok(0)
            } else {
                eprintln!("error: final spend does not match the budgets within tolerance");
                Ok(EXIT_AUDIT_FAIL)
            }
        }
        Command::Audit { ledger, config, emit_csv } => {
            let cfg = load_config(&config)?;
            let report = cli::cmd_audit(&ledger, &cfg, emit_csv.as_deref())?;
            println!("{report}");
            Ok(if report.passed() { 0 } else { EXIT_AUDIT_FAIL })
        }
    }
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_VALIDATION as u8 } else { 0 });
        }
    };
    match run(args) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<CliError>().map_or(EXIT_VALIDATION, |c| c.code);
            ExitCode::from(code as u8)
        }
    }
}
