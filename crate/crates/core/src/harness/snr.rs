//! Mean-SNR calibration against a target feasibility probability.

use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::{stream_rng, Error, Result, Stream};

/// Search range for the linear mean SNR.
pub const SNR_RANGE: (f64, f64) = (1e-6, 1e6);
pub const SNR_SAMPLES: usize = 100_000;
/// Largest accepted gap between the achieved and the requested probability.
pub const SNR_TOLERANCE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SnrCalibration {
    pub mean_snr: f64,
    pub target: f64,
    /// Feasibility frequency on an independent sample.
    pub achieved: f64,
}

/// Fraction of `gains` for which `payload` fits into one slot.
fn feasible_fraction(gains: &[f64], mean_snr: f64, payload: f64, symbols: f64) -> f64 {
    // payload <= symbols * log2(1 + snr g)  <=>  g >= (2^(payload/symbols) - 1) / snr
    let threshold = (payload / symbols).exp2() - 1.0;
    let count = gains.iter().filter(|&&g| mean_snr * g >= threshold).count();
    count as f64 / gains.len() as f64
}

/// Bisects, in log space, the mean SNR at which an uncompressed payload of
/// `payload` bits is deliverable with probability `target` under
/// unit-mean exponential fading.
pub fn calibrate_snr(payload: f64, symbols_per_slot: f64, target: f64, seed: u64) -> Result<SnrCalibration> {
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::Calibration(format!(
            "feasibility target {target} outside (0, 1)"
        )));
    }
    if !(payload > 0.0 && symbols_per_slot > 0.0) {
        return Err(Error::Calibration("payload and slot capacity must be positive".into()));
    }
    let mut rng = stream_rng(seed, Stream::Calibration);
    let draw = |rng: &mut crate::SimRng| -> Vec<f64> { (0..SNR_SAMPLES).map(|_| Exp1.sample(rng)).collect() };
    let fit = draw(&mut rng);
    let check = draw(&mut rng);

    let (lo_snr, hi_snr) = SNR_RANGE;
    let top = feasible_fraction(&fit, hi_snr, payload, symbols_per_slot);
    let bottom = feasible_fraction(&fit, lo_snr, payload, symbols_per_slot);
    if top < target || bottom > target {
        return Err(Error::Calibration(format!(
            "feasibility {target} unattainable for SNR in [{lo_snr:e}, {hi_snr:e}] (reachable {bottom:.4}..{top:.4})"
        )));
    }
    let (mut lo, mut hi) = (lo_snr.ln(), hi_snr.ln());
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if feasible_fraction(&fit, mid.exp(), payload, symbols_per_slot) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mean_snr = hi.exp();
    let achieved = feasible_fraction(&check, mean_snr, payload, symbols_per_slot);
    if (achieved - target).abs() > SNR_TOLERANCE {
        return Err(Error::Calibration(format!(
            "feasibility {achieved:.4} misses target {target} by more than {SNR_TOLERANCE}"
        )));
    }
    Ok(SnrCalibration {
        mean_snr,
        target,
        achieved,
    })
}
