use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use hybridpar::harness::{self, ExperimentConfig};

#[derive(Parser)]
#[command(name = "hybridpar", version, about = "Simulated hybrid condition/pipeline parallel guided sampling")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON config; keys replace those of its `preset` (default sdxl-like).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in preset to use when no config file is given.
    #[arg(long, default_value = "sdxl-like")]
    preset: String,
}

impl ConfigArgs {
    fn load(&self) -> hybridpar::Result<ExperimentConfig> {
        match &self.config {
            Some(p) => ExperimentConfig::load(p),
            None => ExperimentConfig::preset(&self.preset),
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the configured plan; writes metrics.json, trace.csv and trace.json.
    Simulate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory; falls back to the config's output_dir, then `out`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Discrepancy curve of an exact run as CSV.
    Curve {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Replay the switch controller over a recorded series.
    Detect {
        #[arg(long)]
        series: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Run the adaptive plan for each window length k.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated window lengths; may be empty.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        k: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Step of the curve minimum, for use as tau_cap.
    Calibrate {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Print a preset as a JSON config.
    Preset { name: String },
}

#[derive(Serialize)]
struct Written<'a> {
    path: &'a Path,
    rows: usize,
}

fn print<T: Serialize>(v: &T) -> hybridpar::Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn execute(cmd: Cmd) -> hybridpar::Result<()> {
    match cmd {
        Cmd::Simulate { cfg, out } => {
            let cfg = cfg.load()?;
            let out = out.or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| PathBuf::from("out"));
            print(&harness::cmd_simulate(&cfg, &out)?)
        }
        Cmd::Curve { cfg, out } => {
            let rows = harness::cmd_curve(&cfg.load()?, &out)?;
            print(&Written { path: &out, rows: rows.len() })
        }
        Cmd::Detect { series, cfg } => print(&harness::cmd_detect(&series, &cfg.load()?)?),
        Cmd::Sweep { cfg, k, out } => {
            let rows = harness::cmd_sweep(&cfg.load()?, &k, &out)?;
            for r in rows.iter().filter(|r| r.metrics.is_none()) {
                eprintln!("warning: k = {} skipped, {}", r.k, r.status);
            }
            print(&Written { path: &out, rows: rows.len() })
        }
        Cmd::Calibrate { cfg } => print(&harness::cmd_calibrate(&cfg.load()?)?),
        Cmd::Preset { name } => print(&ExperimentConfig::preset(&name)?),
    }
}

fn report(kind: &str, message: &str) {
    let v = serde_json::json!({ "error": { "kind": kind, "message": message } });
    eprintln!("{v}");
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            report("usage", e.to_string().trim());
            return ExitCode::from(2);
        }
    };
    match execute(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report(e.kind(), &e.to_string());
            ExitCode::FAILURE
        }
    }
}
