use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use preprune_harness::{cmd_bench, cmd_eval, cmd_gen, cmd_sweep, cmd_train, Axis, ExperimentConfig, Stage};

#[derive(Parser)]
#[command(name = "preprune", about = "Pre-backbone token pruning experiments")]
struct Cli {
    /// JSON experiment config; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Sets the backbone, module and data seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write training and held-out clips.
    Gen,
    /// Train from the clips written by `gen`.
    Train {
        /// 1, 2 or joint.
        #[arg(long)]
        stage: Stage,
    },
    /// Score held-out clips with a checkpoint.
    Eval {
        /// Defaults to the most advanced checkpoint in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and evaluate one config per value of an axis.
    Sweep {
        /// r, gamma, alpha, mode, restoration or schedule.
        #[arg(long)]
        axis: Axis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Time and count FLOPs of the full, pre-cut and mid-cut passes.
    Bench {
        /// Clip lengths; defaults to the config's list.
        #[arg(long, value_delimiter = ',')]
        values: Vec<usize>,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg = cfg.with_seed(s);
    }
    if let Some(o) = cli.out {
        cfg.out = o;
    }
    cfg.validate().context("invalid config")?;
    match cli.cmd {
        Cmd::Gen => {
            let m = cmd_gen(&cfg)?;
            println!("wrote {} clips to {}", m.clips.len(), cfg.out.join("data").display());
        }
        Cmd::Train { stage } => {
            let t = cmd_train(&cfg, stage)?;
            let last = t.history.last().map(|r| r.total).unwrap_or(f64::NAN);
            println!("{} ({} steps, final loss {last:.6})", t.checkpoint.display(), t.history.len());
        }
        Cmd::Eval { checkpoint } => println!("{}", cmd_eval(&cfg, checkpoint.as_deref())?.display()),
        Cmd::Sweep { axis, values } => println!("{}", cmd_sweep(&cfg, axis, &values)?.display()),
        Cmd::Bench { values } => {
            let frames = if values.is_empty() { cfg.bench.frames.clone() } else { values };
            let (path, records) = cmd_bench(&cfg, &frames)?;
            for r in &records {
                println!("N={:<4} {:<18} {:>10.2} ms  global attention {}", r.frames, r.mode, r.median_ms, r.flops.global_attention);
            }
            println!("{}", path.display());
        }
    }
    Ok(())
}
