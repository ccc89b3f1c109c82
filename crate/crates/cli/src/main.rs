use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mae3d::orchestrator::{
    resolve, run_evaluate, run_filter, run_finetune_cmd, run_gradcheck, run_pretrain, run_rank, run_synth,
    EvaluateRun, FilterRun, FinetuneRun, GradcheckRun, PretrainRun, RankRun, Resolved, RunConfig, SynthRun,
};

#[derive(Parser)]
#[command(name = "mae3d", version, about = "Masked-autoencoder pretraining and fine-tuning for 3D segmentation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML file layered over the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Named starting configuration.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Dotted override, e.g. `--set pretrain.batch_size=4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; must be new or empty.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Split a manifest into kept and discarded records.
    Filter {
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Write a synthetic segmentation dataset.
    Synth {
        #[arg(long)]
        cases: Option<usize>,
    },
    /// Masked-reconstruction pretraining.
    Pretrain {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from the latest checkpoint in --out.
        #[arg(long)]
        resume: bool,
    },
    /// Segmentation fine-tuning, from a checkpoint or from scratch.
    Finetune {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        val_data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Per-case Dice and NSD of a fine-tuned checkpoint.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        dataset: Option<String>,
    },
    /// Bootstrap rank aggregation over score tables.
    Rank {
        #[arg(long = "scores", num_args = 1..)]
        scores: Vec<PathBuf>,
        #[arg(long)]
        metric: Option<String>,
    },
    /// Finite-difference checks of every differentiable kernel.
    Gradcheck,
}

fn resolved<T: RunConfig>(c: &Common) -> Result<Resolved<T>> {
    Ok(resolve::<T>(c.preset.as_deref(), c.config.as_deref(), &c.sets, c.seed)?)
}

fn out_dir(c: &Common) -> Result<&Path> {
    c.out.as_deref().context("--out is required for this command")
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

fn run(cli: Cli) -> Result<()> {
    let c = &cli.common;
    match cli.command {
        Command::Filter { manifest } => {
            let mut r = resolved::<FilterRun>(c)?;
            set(&mut r.config.manifest, manifest.map(Some));
            let out = out_dir(c)?;
            r.prepare_output(out, false)?;
            let o = run_filter(&r.config, out)?;
            println!("kept={} discarded={}", o.kept.len(), o.discarded.len());
            for (rec, why) in &o.discarded {
                println!("discarded\t{}\t{why}", rec.path.display());
            }
        }
        Command::Synth { cases } => {
            let mut r = resolved::<SynthRun>(c)?;
            set(&mut r.config.cases, cases);
            let out = out_dir(c)?;
            r.prepare_output(out, false)?;
            let recs = run_synth(&r.config, out)?;
            println!("wrote {} cases to {}", recs.len(), out.display());
        }
        Command::Pretrain { data, resume } => {
            let mut r = resolved::<PretrainRun>(c)?;
            set(&mut r.config.data, data.map(Some));
            r.config.resume |= resume;
            let out = out_dir(c)?;
            r.prepare_output(out, r.config.resume)?;
            let o = run_pretrain(&r.config, out)?;
            if let Some(last) = o.records.last() {
                println!("step {} loss {:.6}", last.step, last.loss);
            }
            println!("checkpoint {}", o.checkpoint.display());
        }
        Command::Finetune {
            data,
            val_data,
            checkpoint,
        } => {
            let mut r = resolved::<FinetuneRun>(c)?;
            set(&mut r.config.data, data.map(Some));
            set(&mut r.config.val_data, val_data.map(Some));
            set(&mut r.config.checkpoint, checkpoint.map(Some));
            let out = out_dir(c)?;
            r.prepare_output(out, false)?;
            let o = run_finetune_cmd(&r.config, out)?;
            if let Some(v) = o.val_log.last() {
                println!("step {} mean dice {:.4}", v.step, v.mean_dice);
            }
        }
        Command::Evaluate {
            checkpoint,
            data,
            method,
            dataset,
        } => {
            let mut r = resolved::<EvaluateRun>(c)?;
            set(&mut r.config.checkpoint, checkpoint.map(Some));
            set(&mut r.config.data, data.map(Some));
            set(&mut r.config.method, method);
            set(&mut r.config.dataset, dataset);
            let out = out_dir(c)?;
            r.prepare_output(out, false)?;
            let rows = run_evaluate(&r.config, out)?;
            for metric in ["dsc", "nsd"] {
                let v: Vec<f64> = rows.iter().filter(|s| s.metric == metric).map(|s| s.value).collect();
                println!("{metric} mean {:.4} over {} cases", v.iter().sum::<f64>() / v.len().max(1) as f64, v.len());
            }
        }
        Command::Rank { scores, metric } => {
            let mut r = resolved::<RankRun>(c)?;
            if !scores.is_empty() {
                r.config.scores = scores;
            }
            set(&mut r.config.metric, metric);
            let out = out_dir(c)?;
            r.prepare_output(out, false)?;
            let s = run_rank(&r.config, out)?;
            for (m, name) in s.methods.iter().enumerate() {
                println!("{name}\tmean rank {:.3}\tp(first) {:.3}", s.mean_rank[m], s.p_first(m));
            }
        }
        Command::Gradcheck => {
            let r = resolved::<GradcheckRun>(c)?;
            if let Some(out) = c.out.as_deref() {
                r.prepare_output(out, false)?;
            }
            let reports = run_gradcheck(&r.config)?;
            let mut failed = Vec::new();
            for k in &reports {
                let ok = k.max_rel_error < r.config.tolerance;
                println!("{}\t{:.3e}\t{}", k.kernel, k.max_rel_error, if ok { "ok" } else { "FAIL" });
                if !ok {
                    failed.push(k.kernel);
                }
            }
            if !failed.is_empty() {
                bail!("gradient check failed for: {}", failed.join(", "));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
