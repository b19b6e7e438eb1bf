use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::{Parser, Subcommand};

use ccformer::config::{Config, Mode};
use ccformer::{ablate, data, gradcheck, trainer};

#[derive(Parser)]
#[command(name = "ccformer", version, about = "Audio-visual segmentation workbench")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset with train and val splits.
    Gen {
        #[arg(long, value_enum)]
        mode: Mode,
        /// Output directory; receives `train/` and `val/` subdirectories.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of training clips.
        #[arg(long, default_value_t = 16)]
        clips: usize,
        /// Number of held-out clips (defaults to a quarter of --clips).
        #[arg(long)]
        val_clips: Option<usize>,
        /// Square canvas size in pixels; must be a multiple of 32.
        #[arg(long, default_value_t = 64)]
        canvas: usize,
        /// Frames per clip (defaults to 5, or 10 in semantic mode).
        #[arg(long)]
        t: Option<usize>,
        /// Standard deviation of the additive audio noise.
        #[arg(long, default_value_t = 0.1)]
        audio_sigma: f64,
    },
    /// Train a model from a JSON config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint to resume from; must share the config's trajectory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset directory.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Write per-clip probability maps to this directory.
        #[arg(long)]
        export: Option<PathBuf>,
    },
    /// Train every variant in an ablation suite and tabulate val metrics.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// One of: components, qgen, eim, layers, bcl.
        #[arg(long)]
        suite: String,
    },
    /// Finite-difference gradient checks over ops and composed modules.
    Gradcheck {
        /// Check only names containing this substring.
        #[arg(long)]
        op: Option<String>,
        #[arg(long, default_value_t = gradcheck::DEFAULT_SEEDS)]
        seeds: u64,
    },
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Gen {
            mode,
            out,
            seed,
            clips,
            val_clips,
            canvas,
            t,
            audio_sigma,
        } => {
            if clips == 0 {
                bail!("--clips must be at least 1");
            }
            let val = val_clips.unwrap_or((clips / 4).max(1));
            let t = t.unwrap_or(if mode.is_semantic() { 10 } else { 5 });
            data::generate_to_dir(&out, mode, seed, clips, val, canvas, t, audio_sigma)?;
            println!(
                "[gen] {} train {} val {} canvas {} t {} -> {}",
                mode.label(),
                clips,
                val,
                canvas,
                t,
                out.display()
            );
        }
        Cmd::Train { config, resume } => {
            let cfg = Config::from_file(&config)?;
            let outcome = trainer::train(&cfg, resume.as_deref())?;
            println!(
                "[done] steps {} final loss {:.6} checkpoint {}",
                outcome.steps,
                outcome.final_loss,
                outcome.final_checkpoint.display()
            );
        }
        Cmd::Eval { ckpt, data, export } => {
            let report = trainer::eval_checkpoint(&ckpt, &data, export.as_deref())?;
            println!("[eval] M_J {:.4} M_F {:.4}", report.mj, report.mf);
            for (i, (mj, mf)) in report.per_class.iter().enumerate() {
                println!("[eval] class {} M_J {:.4} M_F {:.4}", i + 1, mj, mf);
            }
        }
        Cmd::Ablate { config, suite } => {
            let cfg = Config::from_file(&config)?;
            ablate::run_suite(&cfg, &suite)?;
        }
        Cmd::Gradcheck { op, seeds } => {
            let outcomes = gradcheck::run(op.as_deref(), seeds)?;
            let failed: Vec<&str> = outcomes
                .iter()
                .filter(|o| !o.ok())
                .map(|o| o.name)
                .collect();
            if !failed.is_empty() {
                bail!("{} gradient check(s) failed: {}", failed.len(), failed.join(", "));
            }
            println!("[gradcheck] all {} checks passed", outcomes.len());
        }
    }
    Ok(())
}
