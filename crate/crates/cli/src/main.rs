use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use edgebid::harness::run::{run_eval, run_train, RunManifest};
use edgebid::harness::sweep::{run_budget_sweep, run_tradeoff_sweep, write_budget, write_tradeoff};
use edgebid::harness::{calibrate_snr, Algo, ExperimentConfig};

#[derive(Parser)]
#[command(
    name = "edgebid",
    version,
    about = "Privacy-aware cooperative edge inference experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one algorithm on one seed.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// maddpg, maddpg-dd, maddpg-dt, maddpg-mc, dqn or sib.
        #[arg(long)]
        algo: String,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a trained run with greedy policies.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// Run directory written by `train` (or its checkpoints/ folder).
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Accuracy/SSIM tradeoff over reward weights.
    SweepTradeoff {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy over budget splits between the two devices.
    SweepBudget {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mean SNR per device for a target feasibility of the uncompressed payload.
    CalibrateSnr {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        target: f64,
    },
}

fn load(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(path).with_context(|| format!("invalid configuration {}", path.display()))
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            algo,
            seed,
            out,
        } => {
            let exp = load(&config)?;
            let algo: Algo = algo.parse()?;
            let (sys, _) = exp.resolve()?;
            let manifest = RunManifest::new(&exp, algo, seed);
            let artifacts = run_train(&exp, &sys, &manifest, &out)?;
            eprintln!(
                "trained {algo} seed {seed}: {} episodes, {} checkpoint files in {}",
                artifacts.summary.episodes,
                artifacts.checkpoints.len(),
                artifacts.dir.display()
            );
            print_json(&artifacts.summary)
        }
        Command::Eval { config, ckpt, episodes } => {
            let exp = load(&config)?;
            let (sys, _) = exp.resolve()?;
            let summary = run_eval(&sys, &ckpt, episodes.unwrap_or(exp.eval_episodes))?;
            if summary.no_data {
                eprintln!("no data: zero evaluation episodes");
            }
            print_json(&summary)
        }
        Command::SweepTradeoff { config, out } => {
            let exp = load(&config)?;
            let (sys, _) = exp.resolve()?;
            let table = run_tradeoff_sweep(&exp, &sys, |line| eprintln!("{line}"))?;
            write_tradeoff(&table, &exp, &out)?;
            eprintln!("wrote {}", out.display());
            Ok(())
        }
        Command::SweepBudget { config, out } => {
            let exp = load(&config)?;
            let (sys, _) = exp.resolve()?;
            let table = run_budget_sweep(&exp, &sys, |line| eprintln!("{line}"))?;
            write_budget(&table, &out)?;
            print_json(&serde_json::json!({ "spearman": table.spearman }))
        }
        Command::CalibrateSnr { config, target } => {
            if !(target > 0.0 && target < 1.0) {
                bail!("--target must lie in (0, 1), got {target}");
            }
            let exp = load(&config)?;
            let symbols = exp.system.slot_duration * exp.system.bandwidth;
            let mut out = Vec::new();
            for (k, d) in exp.devices.iter().enumerate() {
                let payload = d.feature_dims as f64 * d.bits_per_dim as f64;
                let cal = calibrate_snr(payload, symbols, target, exp.calibration_seed)
                    .with_context(|| format!("device {}", k + 1))?;
                out.push(serde_json::json!({
                    "device": k + 1,
                    "mean_snr": cal.mean_snr,
                    "target": cal.target,
                    "achieved": cal.achieved,
                }));
            }
            print_json(&out)
        }
    }
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
