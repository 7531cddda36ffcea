//! Pipeline driver. All the real work lives in the library; this binary
//! only parses arguments, loads the config and dispatches to one of the
//! four stages. Set `TTACOPE_LOG=info` (or `debug`) for progress output.

use std::path::PathBuf;
use std::process::exit;

use clap::{Parser, Subcommand};

use ttacope::adaptation::Method;
use ttacope::experiment::{
    cmd_generate, cmd_pretrain, cmd_report, cmd_tta, CliError, ExperimentConfig,
};
use ttacope::filtering::EnsembleMode;

/// Category-level object pose estimation with online test-time adaptation.
#[derive(Parser)]
#[command(name = "ttacope", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize the labeled source stream and the shifted target stream.
    Generate {
        /// Config file; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Run directory.
        #[arg(long, default_value = "runs/exp")]
        out: PathBuf,
    },
    /// Train the source model on the generated source stream.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "runs/exp")]
        out: PathBuf,
    },
    /// Adapt over the target stream with one method and score the poses.
    Tta {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "runs/exp")]
        out: PathBuf,
        /// lower-bound, tent, pl, pl-filtered or tta-cope.
        #[arg(long)]
        method: Option<String>,
        /// Frames between optimizer steps.
        #[arg(long)]
        interval: Option<u64>,
        /// inlier-max, in-argmax-match, in-softmax-avg, in-softmax-max
        /// or out-softmax-max.
        #[arg(long)]
        ensemble: Option<String>,
        /// Adaptation seed override.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Merge per-method summaries into report.csv and extract error series.
    Report {
        #[arg(long, default_value = "runs/exp")]
        out: PathBuf,
    },
}

fn load_config(path: &Option<PathBuf>) -> Result<ExperimentConfig, CliError> {
    match path {
        Some(p) => ExperimentConfig::from_file(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::Generate { config, out } => cmd_generate(&load_config(&config)?, &out),
        Cmd::Pretrain { config, out } => cmd_pretrain(&load_config(&config)?, &out),
        Cmd::Tta { config, out, method, interval, ensemble, seed } => {
            let mut cfg = load_config(&config)?;
            if let Some(m) = method {
                cfg.tta.method =
                    m.parse::<Method>().map_err(|e| CliError::BadArgument(e.to_string()))?;
                // A method override means exactly one run.
                cfg.run.methods.clear();
                cfg.run.ensembles.clear();
                cfg.run.intervals.clear();
            }
            if let Some(i) = interval {
                if i == 0 {
                    return Err(CliError::BadArgument("--interval must be at least 1".into()));
                }
                cfg.tta.update_interval = i;
            }
            if let Some(e) = ensemble {
                cfg.tta.ensemble =
                    e.parse::<EnsembleMode>().map_err(|e| CliError::BadArgument(e.to_string()))?;
            }
            if let Some(s) = seed {
                cfg.tta.rng_seed = s;
            }
            cmd_tta(&cfg, &out)
        }
        Cmd::Report { out } => cmd_report(&out),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TTACOPE_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 4,
            };
            let _ = e.print();
            exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("{e}");
        exit(e.exit_code());
    }
}
