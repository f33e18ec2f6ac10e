use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;
use membasin::config::{parse_seed_list, RunConfig};
use membasin::harness;
use membasin::{Error, Result};

/// Train, sample, probe and sweep a small conditional diffusion model.
#[derive(Parser, Debug)]
#[command(name = "membasin", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Checkpoint written by `train`.
    #[arg(long, global = true, value_name = "PATH")]
    checkpoint: Option<PathBuf>,

    /// Output directory; defaults to `<out_dir>/<run id>`.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Seeds such as `0-31` or `1,5,9`; overrides the config.
    #[arg(long, global = true, value_name = "LIST")]
    seeds: Option<String>,

    /// Guidance preset: cfg, zero, dtp, og, static, og-static.
    #[arg(long, global = true, value_name = "NAME")]
    policy: Option<String>,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq)]
enum Command {
    /// Build the scenario dataset and train the denoiser.
    Train,
    /// Generate guided trajectories and score them.
    Sample,
    /// Locate attractors, transition points and basin grids.
    Probe,
    /// Sweep one axis and calibrate the detection threshold.
    Sweep,
    /// Flag conditions by first-step disagreement.
    Detect,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Sample => "sample",
            Command::Probe => "probe",
            Command::Sweep => "sweep",
            Command::Detect => "detect",
        }
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(s) = &cli.seeds {
        cfg.seeds = parse_seed_list(s)?;
    }
    if let Some(p) = &cli.policy {
        cfg.policy.apply_preset(p)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn need_checkpoint(cli: &Cli) -> Result<&Path> {
    cli.checkpoint
        .as_deref()
        .ok_or_else(|| Error::Usage(format!("`{}` needs --checkpoint", cli.command.name())))
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(cli)?;
    env_logger::Builder::new()
        .parse_filters(&cfg.log_level)
        .parse_default_env()
        .try_init()
        .ok();
    let out = cli
        .out
        .clone()
        .unwrap_or_else(|| cfg.out_dir.join(harness::run_id(&cfg, cli.command.name())));
    match cli.command {
        Command::Train => {
            let r = harness::cmd_train(&cfg, &out)?;
            println!("{}", r.checkpoint.display());
        }
        Command::Sample => {
            let r = harness::cmd_sample(&cfg, need_checkpoint(cli)?, &out)?;
            for c in &r.conditions {
                println!(
                    "condition {} memorized {:.3} aligned {:.3}",
                    c.condition, c.memorization_fraction, c.alignment
                );
            }
        }
        Command::Probe => {
            let r = harness::cmd_probe(&cfg, need_checkpoint(cli)?, &out)?;
            for s in &r.summaries {
                println!(
                    "condition {} attractor {} agreement {:.3} sandwich {:.3}",
                    s.condition, s.confirmed, s.agreement, s.sandwich
                );
            }
        }
        Command::Sweep => {
            let r = harness::cmd_sweep(&cfg, cli.checkpoint.as_deref(), &out)?;
            if let Some(c) = r.calibration {
                println!("threshold {:.6e} auc {:.3}", c.threshold, c.auc);
            }
        }
        Command::Detect => {
            let r = harness::cmd_detect(&cfg, need_checkpoint(cli)?, &out)?;
            for row in r.rows.iter().filter(|r| r.flagged) {
                println!("flagged condition {} d_T {:.4e}", row.condition, row.mean_d_first);
            }
        }
    }
    info!("outputs in {}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
