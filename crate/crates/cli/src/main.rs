//! `skul`: probe, fit, unlearn, evaluate and analyze from one config file.

mod commands;
mod config;
mod error;
mod layout;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::{Ctx, Method};
use crate::config::{AlphaSpec, LoadedConfig, Overrides, DEFAULT_OUT_DIR};
use crate::error::Result;
use crate::layout::Layout;

#[derive(Parser)]
#[command(
    name = "skul",
    version,
    about = "Training-free skill unlearning on FFL activations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Output root; takes precedence over SKULDIR and `out_dir`.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Seed of the Neuron Adjust RNG.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Fraction of FFL neurons adjusted, in (0, 1].
    #[arg(long, value_name = "F")]
    beta: Option<f64>,
    /// Hypercube size coefficient, or `auto` for the gap midpoint.
    #[arg(long, value_name = "F|auto")]
    alpha: Option<AlphaSpec>,
    /// Neuron Adjust evaluation runs with consecutive seeds.
    #[arg(long, value_name = "N")]
    repeats: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Capture activation dumps for the forget and retain sources.
    Probe(Common),
    /// Fit per-layer Gaussians to every dump.
    Fit(Common),
    /// Build Neuron Adjust and/or Key Space Detection profiles.
    Unlearn {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "both")]
        method: Method,
    },
    /// Generate on held-out queries with the profiles applied.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Profiles to evaluate; defaults to whichever exist.
        #[arg(long, value_enum)]
        method: Option<Method>,
    },
    /// Containment curves, geometry, distances and histograms.
    Analyze(Common),
    /// probe, fit, unlearn, eval and analyze in sequence.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "both")]
        method: Method,
    },
    /// Check `.skuldmp` files and report record counts and anomalies.
    Validate {
        #[arg(required = true, value_name = "DUMP")]
        paths: Vec<PathBuf>,
    },
}

/// `--out` beats `SKULDIR`, which beats the config's `out_dir` (relative to
/// the config file).
fn output_root(common: &Common, config: &LoadedConfig) -> PathBuf {
    if let Some(o) = &common.out {
        return o.clone();
    }
    if let Some(env) = std::env::var_os("SKULDIR").filter(|v| !v.is_empty()) {
        return PathBuf::from(env);
    }
    let dir = config
        .cfg
        .out_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR));
    config.resolve(&dir)
}

fn context(common: &Common) -> Result<Ctx> {
    let overrides = Overrides {
        beta: common.beta,
        alpha: common.alpha,
        seed: common.seed,
        repeats: common.repeats,
    };
    let config = LoadedConfig::load(&common.config, &overrides)?;
    let layout = Layout::new(output_root(common, &config));
    Ok(Ctx { config, layout })
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Probe(c) => commands::probe::run(&context(&c)?),
        Command::Fit(c) => commands::fit::run(&context(&c)?),
        Command::Unlearn { common, method } => commands::unlearn::run(&context(&common)?, method),
        Command::Eval { common, method } => commands::eval::run(&context(&common)?, method),
        Command::Analyze(c) => commands::analyze::run(&context(&c)?),
        Command::Run { common, method } => {
            let ctx = context(&common)?;
            commands::probe::run(&ctx)?;
            commands::fit::run(&ctx)?;
            commands::unlearn::run(&ctx, method)?;
            commands::eval::run(&ctx, Some(method))?;
            commands::analyze::run(&ctx)
        }
        Command::Validate { paths } => commands::validate::run(&paths),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                // thiserror `transparent`/`{source}` messages already include it
                if !e.to_string().contains(&s.to_string()) {
                    eprintln!("  caused by: {s}");
                }
                source = s.source();
            }
            ExitCode::from(u8::try_from(e.code()).unwrap_or(1))
        }
    }
}
