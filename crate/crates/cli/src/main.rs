mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::CliError;

/// Physics-constrained 2x downscaling of gridded climate fields.
#[derive(Debug, Parser)]
#[command(name = "downscale", version)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// key=value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override any configuration key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write synthetic fine-resolution samples and a manifest.
    Synth {
        /// Number of samples (synth.n).
        #[arg(long)]
        n: Option<usize>,
        /// Fine grid rows (synth.ny).
        #[arg(long)]
        ny: Option<usize>,
        /// Fine grid columns (synth.nx).
        #[arg(long)]
        nx: Option<usize>,
        /// Synthetic field profile (synth.profile).
        #[arg(long)]
        profile: Option<String>,
    },
    /// Train a model; writes a checkpoint and a per-epoch loss CSV.
    Train {
        /// Training dataset directory (data.train).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Validation dataset directory (data.val).
        #[arg(long)]
        val: Option<PathBuf>,
        /// vit | resnet
        #[arg(long)]
        model: Option<String>,
        /// Training epochs (train.epochs).
        #[arg(long)]
        epochs: Option<usize>,
        /// off | mean_preserving | raw_sum
        #[arg(long = "mass-loss")]
        mass_loss: Option<String>,
    },
    /// Score bilinear and each checkpoint on a test set.
    Eval {
        /// Test dataset directory (data.test).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint to score; repeat for several (eval.checkpoints).
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
        /// Sample index for the heatmap triptych.
        #[arg(long)]
        sample: Option<usize>,
    },
    /// Apply a checkpoint to grids larger than it was trained on.
    Transfer {
        /// Checkpoint trained on a smaller grid.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Test dataset directory (data.test).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable op.
    Gradcheck {
        #[arg(long = "inject-sign-flip", hide = true)]
        inject_sign_flip: Option<String>,
    },
}

fn build_config(global: &GlobalArgs, command: &Command) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &global.config {
        cfg.merge_file(path)?;
    }
    for pair in &global.set {
        cfg.set_pair(pair)?;
    }
    if let Some(seed) = global.seed {
        cfg.set("seed", seed)?;
    }
    if let Some(out) = &global.out {
        cfg.set("out", out.display())?;
    }
    match command {
        Command::Synth { n, ny, nx, profile } => {
            for (key, v) in [("synth.n", n), ("synth.ny", ny), ("synth.nx", nx)] {
                if let Some(v) = v {
                    cfg.set(key, v)?;
                }
            }
            if let Some(p) = profile {
                cfg.set("synth.profile", p)?;
            }
        }
        Command::Train {
            data,
            val,
            model,
            epochs,
            mass_loss,
        } => {
            if let Some(d) = data {
                cfg.set("data.train", d.display())?;
            }
            if let Some(v) = val {
                cfg.set("data.val", v.display())?;
            }
            if let Some(m) = model {
                cfg.set("model.kind", m)?;
            }
            if let Some(e) = epochs {
                cfg.set("train.epochs", e)?;
            }
            match mass_loss.as_deref() {
                None => {}
                Some("off") => cfg.set("loss.use_mass_loss", false)?,
                Some(conv) => {
                    cfg.set("loss.use_mass_loss", true)?;
                    cfg.set("loss.mass_convention", conv)?;
                }
            }
        }
        Command::Eval {
            data,
            checkpoints,
            sample,
        } => {
            if let Some(d) = data {
                cfg.set("data.test", d.display())?;
            }
            if !checkpoints.is_empty() {
                let joined: Vec<String> =
                    checkpoints.iter().map(|p| p.display().to_string()).collect();
                cfg.set("eval.checkpoints", joined.join(","))?;
            }
            if let Some(s) = sample {
                cfg.set("eval.sample", s)?;
            }
        }
        Command::Transfer { checkpoint, data } => {
            cfg.set("eval.checkpoints", checkpoint.display())?;
            if let Some(d) = data {
                cfg.set("data.test", d.display())?;
            }
        }
        Command::Gradcheck { .. } => {}
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = build_config(&cli.global, &cli.command)?;
    match &cli.command {
        Command::Synth { .. } => commands::synth(&cfg),
        Command::Train { .. } => commands::train(&cfg),
        Command::Eval { .. } => commands::eval(&cfg),
        Command::Transfer { .. } => commands::transfer(&cfg),
        Command::Gradcheck { inject_sign_flip } => {
            commands::gradcheck(&cfg, inject_sign_flip.as_deref())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
