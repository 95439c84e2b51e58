//! The weight-tradeoff and budget-split sweeps.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::SystemConfig;
use crate::{Error, Result};

use super::config::{Algo, ExperimentConfig};
use super::run::{evaluate, train_policy, EvalSummary, RunManifest};
use super::stats::{mean, spearman, stderr};

/// Trains one configuration on one seed and evaluates it greedily.
pub fn train_and_evaluate(manifest: &RunManifest, sys: &SystemConfig, eval_episodes: usize) -> Result<EvalSummary> {
    let (policy, _) = train_policy(manifest, sys, |_| Ok(()))?;
    evaluate(&policy, manifest.algo, sys, eval_episodes, manifest.seed)
}

/// One evaluated (configuration, seed, device) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRow {
    pub algo: Algo,
    pub point: usize,
    pub seed: u64,
    pub device: usize,
    pub accuracy: f64,
    pub ssim: f64,
    pub served_fraction: f64,
}

/// Seed-averaged tradeoff result for one (algorithm, point, device).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffRow {
    pub algo: Algo,
    pub point: usize,
    pub t1: f64,
    pub t2: f64,
    /// Only for the heuristic, which is swept over SSIM targets.
    pub sib_target: Option<f64>,
    pub device: usize,
    pub accuracy_mean: f64,
    pub accuracy_stderr: f64,
    pub ssim_mean: f64,
    pub ssim_stderr: f64,
    pub seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffTable {
    pub rows: Vec<TradeoffRow>,
    pub per_seed: Vec<SeedRow>,
}

/// Best accuracy an algorithm reaches on a device while its seed-mean SSIM
/// lies within `center ± tolerance`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedPoint {
    pub algo: Algo,
    pub device: usize,
    pub point: usize,
    pub accuracy: f64,
    pub ssim: f64,
}

impl TradeoffTable {
    pub fn matched(&self, algo: Algo, device: usize, center: f64, tolerance: f64) -> Option<MatchedPoint> {
        self.rows
            .iter()
            .filter(|r| r.algo == algo && r.device == device)
            .filter(|r| (r.ssim_mean - center).abs() <= tolerance)
            .max_by(|a, b| a.accuracy_mean.total_cmp(&b.accuracy_mean))
            .map(|r| MatchedPoint {
                algo,
                device,
                point: r.point,
                accuracy: r.accuracy_mean,
                ssim: r.ssim_mean,
            })
    }

    pub fn rows_for(&self, algo: Algo, device: usize) -> Vec<&TradeoffRow> {
        self.rows
            .iter()
            .filter(|r| r.algo == algo && r.device == device)
            .collect()
    }
}

fn aggregate(per_seed: &[SeedRow], algo: Algo, point: usize, device: usize) -> (Vec<f64>, Vec<f64>) {
    per_seed
        .iter()
        .filter(|r| r.algo == algo && r.point == point && r.device == device)
        .map(|r| (r.accuracy, r.ssim))
        .unzip()
}

/// Trains and evaluates each listed algorithm at each sweep point over all
/// seeds. `progress` receives one line per finished run.
pub fn run_tradeoff_sweep(
    exp: &ExperimentConfig,
    sys: &SystemConfig,
    mut progress: impl FnMut(&str),
) -> Result<TradeoffTable> {
    let sweep = &exp.tradeoff;
    let mut per_seed = Vec::new();
    let mut rows = Vec::new();
    for &algo in &sweep.algorithms {
        let point_count = if algo == Algo::Sib {
            sweep.sib_targets.len()
        } else {
            sweep.points.len()
        };
        for point in 0..point_count {
            let mut point_sys = sys.clone();
            let weights = &sweep.points[point.min(sweep.points.len() - 1)];
            if algo != Algo::Sib {
                for (md, &t1) in point_sys.devices.iter_mut().zip(&weights.t1) {
                    md.weight_t1 = t1;
                }
                point_sys.weight_t2 = weights.t2;
            }
            for &seed in &exp.seeds {
                let mut manifest =
                    RunManifest::new(exp, algo, seed).with_overrides(sweep.train_episodes, sweep.batch_episodes);
                if algo == Algo::Sib {
                    manifest.sib.target_ssim = sweep.sib_targets[point];
                }
                let summary = train_and_evaluate(&manifest, &point_sys, exp.eval_episodes)?;
                for d in &summary.devices {
                    per_seed.push(SeedRow {
                        algo,
                        point,
                        seed,
                        device: d.device,
                        accuracy: d.accuracy_mean,
                        ssim: d.ssim_mean,
                        served_fraction: d.served_fraction,
                    });
                }
                progress(&format!(
                    "tradeoff {algo} point {point} seed {seed}: {}",
                    describe(&summary)
                ));
            }
            for k in 1..=sys.device_count() {
                let (acc, ssim) = aggregate(&per_seed, algo, point, k);
                rows.push(TradeoffRow {
                    algo,
                    point,
                    t1: if algo == Algo::Sib { f64::NAN } else { weights.t1[k - 1] },
                    t2: if algo == Algo::Sib { f64::NAN } else { weights.t2 },
                    sib_target: (algo == Algo::Sib).then(|| sweep.sib_targets[point]),
                    device: k,
                    accuracy_mean: mean(&acc),
                    accuracy_stderr: stderr(&acc),
                    ssim_mean: mean(&ssim),
                    ssim_stderr: stderr(&ssim),
                    seeds: acc.len(),
                });
            }
        }
    }
    Ok(TradeoffTable { rows, per_seed })
}

fn describe(s: &EvalSummary) -> String {
    s.devices
        .iter()
        .map(|d| format!("md{} acc {:.4} ssim {:.4}", d.device, d.accuracy_mean, d.ssim_mean))
        .collect::<Vec<_>>()
        .join(", ")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetRow {
    pub m: f64,
    pub device: usize,
    pub budget: f64,
    pub accuracy_mean: f64,
    pub accuracy_stderr: f64,
    pub served_fraction: f64,
    pub seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetTable {
    pub rows: Vec<BudgetRow>,
    pub per_seed: Vec<SeedRow>,
    /// Spearman correlation of seed-mean accuracy with `m`, per device.
    pub spearman: Vec<f64>,
}

/// Trains the multi-agent learner at every budget split with the sweep's
/// weights and reports accuracy per device.
pub fn run_budget_sweep(
    exp: &ExperimentConfig,
    sys: &SystemConfig,
    mut progress: impl FnMut(&str),
) -> Result<BudgetTable> {
    if sys.device_count() != 2 {
        return Err(Error::Config(format!(
            "the budget sweep splits between two devices, found {}",
            sys.device_count()
        )));
    }
    let sweep = &exp.budget;
    let mut per_seed = Vec::new();
    let mut rows = Vec::new();
    for (point, &m) in sweep.splits.iter().enumerate() {
        let mut point_sys = sys.clone();
        let budgets = [m, sweep.total - m];
        for (md, &b) in point_sys.devices.iter_mut().zip(&budgets) {
            md.initial_budget = b;
            md.weight_t1 = sweep.t1;
        }
        point_sys.weight_t2 = sweep.t2;
        point_sys.validate()?;
        let mut served = [Vec::new(), Vec::new()];
        for &seed in &exp.seeds {
            let manifest =
                RunManifest::new(exp, Algo::Maddpg, seed).with_overrides(sweep.train_episodes, sweep.batch_episodes);
            let summary = train_and_evaluate(&manifest, &point_sys, exp.eval_episodes)?;
            for d in &summary.devices {
                served[d.device - 1].push(d.served_fraction);
                per_seed.push(SeedRow {
                    algo: Algo::Maddpg,
                    point,
                    seed,
                    device: d.device,
                    accuracy: d.accuracy_mean,
                    ssim: d.ssim_mean,
                    served_fraction: d.served_fraction,
                });
            }
            progress(&format!("budget m={m} seed {seed}: {}", describe(&summary)));
        }
        for k in 1..=2 {
            let (acc, _) = aggregate(&per_seed, Algo::Maddpg, point, k);
            rows.push(BudgetRow {
                m,
                device: k,
                budget: budgets[k - 1],
                accuracy_mean: mean(&acc),
                accuracy_stderr: stderr(&acc),
                served_fraction: mean(&served[k - 1]),
                seeds: acc.len(),
            });
        }
    }
    let spearman = (1..=2)
        .map(|k| {
            let (ms, accs): (Vec<f64>, Vec<f64>) = rows
                .iter()
                .filter(|r| r.device == k)
                .map(|r| (r.m, r.accuracy_mean))
                .unzip();
            spearman(&ms, &accs)
        })
        .collect();
    Ok(BudgetTable {
        rows,
        per_seed,
        spearman,
    })
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_tradeoff(table: &TradeoffTable, exp: &ExperimentConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    write_csv(&out.join("tradeoff.csv"), &table.rows)?;
    write_csv(&out.join("tradeoff_seeds.csv"), &table.per_seed)?;
    let sweep = &exp.tradeoff;
    let devices = table.rows.iter().map(|r| r.device).max().unwrap_or(0);
    let matched: Vec<MatchedPoint> = sweep
        .algorithms
        .iter()
        .flat_map(|&a| {
            (1..=devices).filter_map(move |k| table.matched(a, k, sweep.matched_ssim, sweep.matched_tolerance))
        })
        .collect();
    let text = serde_json::to_string_pretty(&serde_json::json!({
        "matched_ssim": sweep.matched_ssim,
        "matched_tolerance": sweep.matched_tolerance,
        "matched": matched,
    }))?;
    fs::write(out.join("tradeoff_summary.json"), text + "\n")?;
    Ok(())
}

pub fn write_budget(table: &BudgetTable, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    write_csv(&out.join("budget.csv"), &table.rows)?;
    write_csv(&out.join("budget_seeds.csv"), &table.per_seed)?;
    let text = serde_json::to_string_pretty(&serde_json::json!({ "spearman": table.spearman }))?;
    fs::write(out.join("budget_summary.json"), text + "\n")?;
    Ok(())
}
