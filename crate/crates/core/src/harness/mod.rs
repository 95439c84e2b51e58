//! Experiment orchestration: configuration, SNR calibration, training and
//! evaluation runs, sweeps, and the files they produce.

pub mod config;
pub mod run;
pub mod snr;
pub mod stats;
pub mod sweep;

pub use config::{Algo, ExperimentConfig};
pub use run::{evaluate, run_eval, run_train, train_policy, EvalSummary, Policy, RunManifest};
pub use snr::{calibrate_snr, SnrCalibration};
pub use sweep::{run_budget_sweep, run_tradeoff_sweep, BudgetTable, TradeoffTable};
