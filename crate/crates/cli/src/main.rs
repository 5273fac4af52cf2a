use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;

use scamnet_core::episodic::{self, Split, SynthConfig};
use scamnet_core::harness::{self, TrainConfig};
use scamnet_core::{Error, Result};

#[derive(Parser)]
#[command(name = "scamnet", version, about = "Dual-network few-shot learner on synthetic episodes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the train split; writes metrics and a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Defaults to `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate the slow network; prints a JSON report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 5)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        k: usize,
        #[arg(long, default_value_t = 15)]
        q: usize,
        #[arg(long, default_value_t = 2500)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_parser = parse_split, default_value = "test")]
        split: Split,
        /// Also write the full report, per-episode accuracies included.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Export raw and memory-regulated class CLS tokens as CSV.
    DumpCls {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        episodes: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_parser = parse_split, default_value = "test")]
        split: Split,
    },
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    Split::ALL
        .into_iter()
        .find(|sp| sp.name() == s)
        .ok_or_else(|| format!("unknown split {s:?}, expected train, val or test"))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { config, out } => {
            let cfg: SynthConfig = read_json(&config)?;
            let data = episodic::synth_generate(&cfg)?;
            episodic::save_dataset(&data, &out)?;
            for d in data.iter() {
                info!("{}: {} classes, {} images", d.split.name(), d.classes.len(), d.num_images());
            }
        }
        Command::Train { config, data, out } => {
            let cfg: TrainConfig = read_json(&config)?;
            cfg.validate()?;
            let out = out
                .or_else(|| cfg.output_dir.clone())
                .ok_or_else(|| Error::config("no output directory: pass --out or set output_dir"))?;
            let splits = episodic::load_dataset(&data)?;
            let run = harness::train(&cfg, splits.split(Split::Train)?, Some(&out))?;
            if let Some(last) = run.metrics.last() {
                info!("finished {} steps, last loss {:.4}", run.metrics.len(), last.total);
            }
        }
        Command::Eval {
            checkpoint,
            data,
            n,
            k,
            q,
            episodes,
            seed,
            split,
            report,
        } => {
            let ck = harness::load_checkpoint(&checkpoint)?;
            let splits = episodic::load_dataset(&data)?;
            let r = harness::evaluate(&ck.state, splits.split(split)?, n, k, q, episodes, seed)?;
            println!(
                "{}",
                serde_json::json!({ "episodes": r.episodes, "mean": r.mean, "ci95": r.ci95 })
            );
            if let Some(path) = report {
                let text = serde_json::to_string_pretty(&r).expect("report serializes");
                fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            }
        }
        Command::DumpCls {
            checkpoint,
            data,
            episodes,
            out,
            seed,
            split,
        } => {
            let ck = harness::load_checkpoint(&checkpoint)?;
            let splits = episodic::load_dataset(&data)?;
            let rows = harness::dump_cls(
                &ck.state,
                &ck.memory,
                splits.split(split)?,
                ck.config.n_way,
                ck.config.k_shot,
                episodes,
                seed,
                Some(&out),
            )?;
            info!("wrote {} rows to {}", rows.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
