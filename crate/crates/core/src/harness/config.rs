//! Experiment configuration file.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baselines::{DqnConfig, McReading, SibConfig};
use crate::env::{MdConfig, SystemConfig};
use crate::maddpg::TrainConfig;
use crate::surrogate::{calibrate, CalibrationReport, CalibrationTargets, SurrogateParams};
use crate::{Error, Result};

use super::snr::{calibrate_snr, SnrCalibration};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algo {
    Maddpg,
    MaddpgDd,
    MaddpgDt,
    MaddpgMc,
    Dqn,
    Sib,
}

impl Algo {
    pub const ALL: [Algo; 6] = [
        Algo::Maddpg,
        Algo::MaddpgDd,
        Algo::MaddpgDt,
        Algo::MaddpgMc,
        Algo::Dqn,
        Algo::Sib,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Algo::Maddpg => "maddpg",
            Algo::MaddpgDd => "maddpg-dd",
            Algo::MaddpgDt => "maddpg-dt",
            Algo::MaddpgMc => "maddpg-mc",
            Algo::Dqn => "dqn",
            Algo::Sib => "sib",
        }
    }

    pub fn is_maddpg_family(self) -> bool {
        matches!(self, Algo::Maddpg | Algo::MaddpgDd | Algo::MaddpgDt | Algo::MaddpgMc)
    }
}

impl fmt::Display for Algo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Algo {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algo::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::UnknownVariant(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SystemSection {
    pub server_capacity: usize,
    pub horizon: usize,
    pub slot_duration: f64,
    pub bandwidth: f64,
    pub weight_t2: f64,
}

impl Default for SystemSection {
    fn default() -> Self {
        Self {
            server_capacity: 1,
            horizon: 10,
            slot_duration: 0.1,
            bandwidth: 50_000.0,
            weight_t2: 0.8,
        }
    }
}

/// Accuracy and privacy endpoints a device's surrogate is fitted to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationSection {
    pub local_mean_acc: f64,
    pub edge_mean_acc_at_full: f64,
    pub ssim_anchor: f64,
    /// Defaults to the device's smallest ratio.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceSection {
    pub feature_dims: usize,
    #[serde(default = "default_bits")]
    pub bits_per_dim: u32,
    pub ratios: Vec<f64>,
    #[serde(default = "default_max_bid")]
    pub max_bid: f64,
    #[serde(default = "default_budget")]
    pub initial_budget: f64,
    #[serde(default = "default_classes")]
    pub class_count: usize,
    /// Fixed linear mean SNR; calibrated from `snr_feasibility` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_snr: Option<f64>,
    #[serde(default = "default_t1")]
    pub weight_t1: f64,
    /// When present, the surrogate intercepts and SSIM exponent are refitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration: Option<CalibrationSection>,
    #[serde(default)]
    pub surrogate: SurrogateParams,
}

fn default_bits() -> u32 {
    8
}
fn default_max_bid() -> f64 {
    1.0
}
fn default_budget() -> f64 {
    5.0
}
fn default_classes() -> usize {
    10
}
fn default_t1() -> f64 {
    0.2
}

impl DeviceSection {
    pub fn md1() -> Self {
        Self {
            feature_dims: 8192,
            bits_per_dim: 8,
            ratios: vec![1.0, 0.8, 0.6, 0.4],
            max_bid: 1.0,
            initial_budget: 5.0,
            class_count: 10,
            mean_snr: None,
            weight_t1: 0.2,
            calibration: Some(CalibrationSection {
                local_mean_acc: 0.730,
                edge_mean_acc_at_full: 0.900,
                ssim_anchor: 0.26,
                anchor_ratio: None,
            }),
            surrogate: SurrogateParams::default(),
        }
    }

    pub fn md2() -> Self {
        Self {
            feature_dims: 128,
            ratios: vec![1.0, 0.75, 0.5, 0.25],
            calibration: Some(CalibrationSection {
                local_mean_acc: 0.720,
                edge_mean_acc_at_full: 0.884,
                ssim_anchor: 0.26,
                anchor_ratio: None,
            }),
            surrogate: SurrogateParams {
                acc_floor_ratio: 0.94,
                ssim_at_full: 0.65,
                ..SurrogateParams::default()
            },
            ..Self::md1()
        }
    }
}

/// One point of the weight sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightPoint {
    /// Per-device accuracy weights.
    pub t1: Vec<f64>,
    pub t2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TradeoffSweep {
    pub algorithms: Vec<Algo>,
    pub points: Vec<WeightPoint>,
    /// SSIM targets traced by the heuristic, which has no reward weights.
    pub sib_targets: Vec<f64>,
    /// Overrides of the training length for every sweep run.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_episodes: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_episodes: Option<usize>,
    /// Privacy level at which accuracies are compared, and its tolerance.
    pub matched_ssim: f64,
    pub matched_tolerance: f64,
}

impl Default for TradeoffSweep {
    fn default() -> Self {
        Self {
            algorithms: Algo::ALL.to_vec(),
            points: [0.05, 0.1, 0.2, 0.4, 0.8]
                .iter()
                .map(|&t2| WeightPoint { t1: vec![1.0, 1.0], t2 })
                .collect(),
            sib_targets: vec![0.26, 0.3, 0.4, 0.5, 0.6],
            train_episodes: None,
            batch_episodes: None,
            matched_ssim: 0.26,
            matched_tolerance: 0.03,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BudgetSweep {
    /// Budget of device 1; device 2 receives `total - m`.
    pub splits: Vec<f64>,
    pub total: f64,
    pub t1: f64,
    pub t2: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_episodes: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_episodes: Option<usize>,
}

impl Default for BudgetSweep {
    fn default() -> Self {
        Self {
            splits: vec![1.0, 3.0, 5.0, 7.0, 9.0],
            total: 10.0,
            t1: 0.9,
            t2: 0.1,
            train_episodes: None,
            batch_episodes: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub algo: Algo,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub eval_episodes: usize,
    /// Probability that the uncompressed payload fits the channel, used to
    /// set every device's mean SNR that is not given explicitly.
    pub snr_feasibility: f64,
    pub calibration_seed: u64,
    pub mc_reading: McReading,
    pub system: SystemSection,
    pub devices: Vec<DeviceSection>,
    pub train: TrainConfig,
    pub dqn: DqnConfig,
    pub sib: SibConfig,
    pub tradeoff: TradeoffSweep,
    pub budget: BudgetSweep,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            algo: Algo::Maddpg,
            seeds: vec![1, 2, 3, 4, 5],
            output_dir: PathBuf::from("runs"),
            eval_episodes: 100,
            snr_feasibility: 0.5,
            calibration_seed: 0,
            mc_reading: McReading::default(),
            system: SystemSection::default(),
            devices: vec![DeviceSection::md1(), DeviceSection::md2()],
            train: TrainConfig::default(),
            dqn: DqnConfig::default(),
            sib: SibConfig {
                target_ssim: 0.26,
                bid: None,
            },
            tradeoff: TradeoffSweep::default(),
            budget: BudgetSweep::default(),
        }
    }
}

/// What resolving a configuration fitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolutionReport {
    pub surrogate: Vec<Option<CalibrationReport>>,
    pub snr: Vec<Option<SnrCalibration>>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seed list is empty".into()));
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return Err(Error::Config("seed list has duplicates".into()));
        }
        if !(self.snr_feasibility > 0.0 && self.snr_feasibility < 1.0) {
            return Err(Error::Config(format!(
                "snr_feasibility {} outside (0, 1)",
                self.snr_feasibility
            )));
        }
        if self.devices.is_empty() {
            return Err(Error::Config("no devices configured".into()));
        }
        // Structural checks that do not need calibration.
        self.raw_system().validate()?;
        self.train.validate()?;
        self.dqn.validate()?;
        self.sib.validate()?;

        let k = self.devices.len();
        let sweep = &self.tradeoff;
        if sweep.algorithms.is_empty() || sweep.points.is_empty() {
            return Err(Error::Config(
                "tradeoff sweep needs algorithms and weight points".into(),
            ));
        }
        for p in &sweep.points {
            if p.t1.len() != k {
                return Err(Error::Config(format!(
                    "tradeoff point lists {} accuracy weights for {k} devices",
                    p.t1.len()
                )));
            }
            if p.t1.iter().chain([&p.t2]).any(|w| !(*w > 0.0 && w.is_finite())) {
                return Err(Error::Config("tradeoff weights must be positive".into()));
            }
        }
        if sweep.algorithms.contains(&Algo::Sib) && sweep.sib_targets.is_empty() {
            return Err(Error::Config("tradeoff sweep includes sib but no SSIM targets".into()));
        }
        for &t in &sweep.sib_targets {
            SibConfig {
                target_ssim: t,
                bid: None,
            }
            .validate()?;
        }
        if sweep.matched_tolerance.is_nan() || sweep.matched_tolerance < 0.0 {
            return Err(Error::Config("matched tolerance must be nonnegative".into()));
        }
        check_override("tradeoff", sweep.train_episodes, sweep.batch_episodes)?;

        let b = &self.budget;
        if b.splits.is_empty() {
            return Err(Error::Config("budget sweep has no splits".into()));
        }
        for &m in &b.splits {
            if !(m > 0.0 && m < b.total) {
                return Err(Error::Config(format!(
                    "budget split m = {m} leaves a device with no budget (total {})",
                    b.total
                )));
            }
        }
        if !(b.t1 > 0.0 && b.t2 > 0.0) {
            return Err(Error::Config("budget sweep weights must be positive".into()));
        }
        check_override("budget", b.train_episodes, b.batch_episodes)?;
        Ok(())
    }

    /// The system with surrogates and SNRs as written, before any fitting.
    fn raw_system(&self) -> SystemConfig {
        SystemConfig {
            server_capacity: self.system.server_capacity,
            horizon: self.system.horizon,
            slot_duration: self.system.slot_duration,
            bandwidth: self.system.bandwidth,
            weight_t2: self.system.weight_t2,
            devices: self
                .devices
                .iter()
                .map(|d| MdConfig {
                    feature_dims: d.feature_dims,
                    bits_per_dim: d.bits_per_dim,
                    ratios: d.ratios.clone(),
                    max_bid: d.max_bid,
                    initial_budget: d.initial_budget,
                    class_count: d.class_count,
                    mean_snr: d.mean_snr.unwrap_or(1.0),
                    weight_t1: d.weight_t1,
                    surrogate: d.surrogate.clone(),
                })
                .collect(),
        }
    }

    /// Fits surrogates and SNRs and returns the simulated system.
    pub fn resolve(&self) -> Result<(SystemConfig, ResolutionReport)> {
        self.validate()?;
        let mut sys = self.raw_system();
        let mut report = ResolutionReport {
            surrogate: Vec::new(),
            snr: Vec::new(),
        };
        for (md, section) in sys.devices.iter_mut().zip(&self.devices) {
            match section.calibration {
                Some(c) => {
                    let targets = CalibrationTargets {
                        local_mean_acc: c.local_mean_acc,
                        edge_mean_acc_at_full: c.edge_mean_acc_at_full,
                        ssim_anchor: c.ssim_anchor,
                        anchor_ratio: c.anchor_ratio.unwrap_or_else(|| md.min_ratio()),
                    };
                    let (params, r) = calibrate(&md.surrogate, &targets, self.calibration_seed)?;
                    md.surrogate = params;
                    report.surrogate.push(Some(r));
                }
                None => report.surrogate.push(None),
            }
            match section.mean_snr {
                Some(_) => report.snr.push(None),
                None => {
                    let cal = calibrate_snr(
                        md.full_payload(),
                        self.system.slot_duration * self.system.bandwidth,
                        self.snr_feasibility,
                        self.calibration_seed,
                    )?;
                    md.mean_snr = cal.mean_snr;
                    report.snr.push(Some(cal));
                }
            }
        }
        sys.validate()?;
        Ok((sys, report))
    }
}

fn check_override(name: &str, episodes: Option<usize>, batch: Option<usize>) -> Result<()> {
    if episodes == Some(0) || batch == Some(0) {
        return Err(Error::Config(format!("{name} sweep overrides must be positive")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn empty_document_is_default() {
        assert_eq!(ExperimentConfig::from_toml("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ExperimentConfig::from_toml("sedes = [1]").is_err());
    }

    #[test]
    fn zero_budget_split_rejected() {
        let err = ExperimentConfig::from_toml("[budget]\nsplits = [0.0, 5.0]").unwrap_err();
        assert!(err.to_string().contains("no budget"), "{err}");
        assert!(ExperimentConfig::from_toml("[budget]\nsplits = [10.0]").is_err());
    }

    #[test]
    fn algo_tags() {
        for a in Algo::ALL {
            assert_eq!(a.as_str().parse::<Algo>().unwrap(), a);
        }
        assert!("ppo".parse::<Algo>().is_err());
    }

    #[test]
    fn resolved_defaults_hit_targets() {
        let (sys, report) = ExperimentConfig::default().resolve().unwrap();
        for (md, r) in sys.devices.iter().zip(&report.surrogate) {
            let r = r.as_ref().unwrap();
            assert!(r.local_residual.abs() < 0.005 && r.edge_residual.abs() < 0.005);
            assert!(md.surrogate.ssim(md.min_ratio()) <= 0.26);
        }
        assert!(sys.devices[0].mean_snr > sys.devices[1].mean_snr);
    }
}
