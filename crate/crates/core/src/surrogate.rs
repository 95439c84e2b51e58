//! Calibrated stand-ins for the split classifiers and the inversion attacker.
//!
//! Every datum carries a difficulty `u` in `[0, 1]`. The probability that the
//! final classifier puts its top class on the true label is affine in `u`:
//! `q(u) = clamp(a - b u, p_min, p_max)`, with separate `(a, b)` for the
//! on-device and the server-side model. Edge inference is further scaled by a
//! compression penalty that rises linearly from `acc_floor_ratio` at the
//! smallest admissible ratio to 1 at ratio 1.
//!
//! Correctness is resolved with one uniform seed per datum shared by the
//! local and edge paths, so "correct locally" and "correct at the edge" are
//! coupled sample-wise.

use rand::Rng;
use rand_distr::{Beta, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::{stream_rng, Error, Result, SimRng, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateParams {
    /// Local confidence curve `a_loc - b_loc u`.
    pub local_intercept: f64,
    pub local_slope: f64,
    /// Server-side confidence curve at ratio 1.
    pub edge_intercept: f64,
    pub edge_slope: f64,
    /// Multiplier on edge confidence at the smallest admissible ratio.
    pub acc_floor_ratio: f64,
    /// SSIM of the reconstruction at ratio 1.
    pub ssim_at_full: f64,
    pub ssim_exponent: f64,
    /// Beta shape of the difficulty distribution.
    pub difficulty_shape: (f64, f64),
    pub entropy_noise_std: f64,
    pub confidence_min: f64,
    pub confidence_max: f64,
}

impl Default for SurrogateParams {
    fn default() -> Self {
        Self {
            local_intercept: 0.98,
            local_slope: 0.5,
            edge_intercept: 0.95,
            edge_slope: 0.1,
            acc_floor_ratio: 0.92,
            ssim_at_full: 0.6,
            ssim_exponent: 1.0,
            difficulty_shape: (1.0, 1.0),
            entropy_noise_std: 0.1,
            confidence_min: 0.02,
            confidence_max: 0.99,
        }
    }
}

/// Endpoints the surrogate curves are fitted to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTargets {
    pub local_mean_acc: f64,
    pub edge_mean_acc_at_full: f64,
    /// SSIM level that must not be exceeded at `anchor_ratio`.
    pub ssim_anchor: f64,
    pub anchor_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub local_intercept: f64,
    pub edge_intercept: f64,
    pub ssim_exponent: f64,
    /// Means on a held-out sample, resolved through correctness seeds.
    pub local_mean_acc: f64,
    pub edge_mean_acc_at_full: f64,
    pub local_residual: f64,
    pub edge_residual: f64,
    pub ssim_at_anchor: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Datum {
    pub difficulty: f64,
    /// Entropy of the local logits, in nats.
    pub entropy: f64,
    pub correctness_seed: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferenceOutcome {
    pub correct: bool,
    /// `-ln(confidence)`.
    pub ce_proxy: f64,
    /// Probability mass on the true class.
    pub confidence: f64,
}

impl InferenceOutcome {
    fn resolve(confidence: f64, datum: &Datum) -> Self {
        Self {
            correct: datum.correctness_seed < confidence,
            ce_proxy: -confidence.ln(),
            confidence,
        }
    }
}

impl SurrogateParams {
    pub fn validate(&self) -> Result<()> {
        let prob = |x: f64| x > 0.0 && x < 1.0;
        if !(prob(self.confidence_min) && prob(self.confidence_max)) || self.confidence_min >= self.confidence_max {
            return Err(Error::Config(format!(
                "confidence bounds ({}, {}) must satisfy 0 < min < max < 1",
                self.confidence_min, self.confidence_max
            )));
        }
        if !(self.acc_floor_ratio > 0.0 && self.acc_floor_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "acc_floor_ratio {} outside (0, 1]",
                self.acc_floor_ratio
            )));
        }
        if !(self.ssim_at_full > 0.0 && self.ssim_at_full <= 1.0) {
            return Err(Error::Config(format!(
                "ssim_at_full {} outside (0, 1]",
                self.ssim_at_full
            )));
        }
        if !(self.ssim_exponent > 0.0 && self.ssim_exponent.is_finite()) {
            return Err(Error::Config(format!(
                "ssim_exponent {} must be positive",
                self.ssim_exponent
            )));
        }
        let (a, b) = self.difficulty_shape;
        if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) {
            return Err(Error::Config(format!("difficulty shape ({a}, {b}) must be positive")));
        }
        if !(self.entropy_noise_std >= 0.0 && self.entropy_noise_std.is_finite()) {
            return Err(Error::Config("entropy_noise_std must be nonnegative".into()));
        }
        for v in [
            self.local_intercept,
            self.local_slope,
            self.edge_intercept,
            self.edge_slope,
        ] {
            if !v.is_finite() {
                return Err(Error::Config("non-finite confidence curve".into()));
            }
        }
        if self.local_slope < 0.0 || self.edge_slope < 0.0 {
            return Err(Error::Config("confidence slopes must be nonnegative".into()));
        }
        Ok(())
    }

    fn clamp_conf(&self, p: f64) -> f64 {
        p.clamp(self.confidence_min, self.confidence_max)
    }

    /// Local confidence on the true class, nonincreasing in difficulty.
    pub fn local_confidence(&self, difficulty: f64) -> f64 {
        self.clamp_conf(self.local_intercept - self.local_slope * difficulty)
    }

    /// Server-side confidence at ratio 1.
    pub fn edge_confidence_at_full(&self, difficulty: f64) -> f64 {
        self.clamp_conf(self.edge_intercept - self.edge_slope * difficulty)
    }

    /// Compression penalty: linear from `(min ratio, floor)` to `(1, 1)`.
    pub fn compression_penalty(&self, ratio: f64, ratios: &[f64]) -> f64 {
        let min = ratios.iter().copied().fold(f64::INFINITY, f64::min);
        if min >= 1.0 {
            return 1.0;
        }
        let frac = ((ratio - min) / (1.0 - min)).clamp(0.0, 1.0);
        self.acc_floor_ratio + (1.0 - self.acc_floor_ratio) * frac
    }

    pub fn draw_datum<R: Rng + ?Sized>(&self, rng: &mut R, class_count: usize) -> Datum {
        let (a, b) = self.difficulty_shape;
        let difficulty = Beta::new(a, b).expect("validated shape").sample(rng);
        let noise = if self.entropy_noise_std > 0.0 {
            Normal::new(0.0, self.entropy_noise_std)
                .expect("validated std")
                .sample(rng)
        } else {
            0.0
        };
        let entropy = logit_entropy(difficulty, noise, class_count);
        let correctness_seed = rng.random::<f64>();
        Datum {
            difficulty,
            entropy,
            correctness_seed,
        }
    }

    pub fn local_infer(&self, datum: &Datum) -> InferenceOutcome {
        InferenceOutcome::resolve(self.local_confidence(datum.difficulty), datum)
    }

    /// Edge inference after compressing the feature to `ratio`.
    pub fn edge_infer(&self, datum: &Datum, ratio: f64, ratios: &[f64]) -> Result<InferenceOutcome> {
        if !ratios.contains(&ratio) {
            return Err(Error::UnknownRatio { device: 0, ratio });
        }
        let p = self.edge_confidence_at_full(datum.difficulty) * self.compression_penalty(ratio, ratios);
        Ok(InferenceOutcome::resolve(p, datum))
    }

    /// Reconstruction SSIM when the feature is compressed to `ratio`.
    pub fn ssim(&self, ratio: f64) -> f64 {
        self.ssim_at_full * ratio.powf(self.ssim_exponent)
    }
}

/// Entropy of the local logits for a datum of the given difficulty, clamped
/// to `[0, ln C]`.
pub fn logit_entropy(difficulty: f64, noise: f64, class_count: usize) -> f64 {
    let max_entropy = (class_count as f64).ln();
    (difficulty * max_entropy + noise).clamp(0.0, max_entropy)
}

/// Sample size used by [`calibrate`].
pub const CALIBRATION_SAMPLES: usize = 100_000;

/// Fits the confidence intercepts and the SSIM exponent.
///
/// Slopes, bounds and the difficulty shape are taken from `params`; the
/// intercepts are found by bisection on a fixed difficulty sample so that
/// the population mean confidence matches each target. The exponent is
/// solved in closed form so that the SSIM at `anchor_ratio` does not exceed
/// the anchor.
pub fn calibrate(
    params: &SurrogateParams,
    targets: &CalibrationTargets,
    seed: u64,
) -> Result<(SurrogateParams, CalibrationReport)> {
    params.validate()?;
    let CalibrationTargets {
        local_mean_acc,
        edge_mean_acc_at_full,
        ssim_anchor,
        anchor_ratio,
    } = *targets;
    for (name, v) in [("local", local_mean_acc), ("edge", edge_mean_acc_at_full)] {
        if !(v > params.confidence_min && v < params.confidence_max) {
            return Err(Error::Calibration(format!(
                "{name} target {v} outside the confidence range ({}, {})",
                params.confidence_min, params.confidence_max
            )));
        }
    }
    if edge_mean_acc_at_full < local_mean_acc {
        return Err(Error::Calibration(format!(
            "edge target {edge_mean_acc_at_full} below local target {local_mean_acc}"
        )));
    }
    if !(ssim_anchor > 0.0 && ssim_anchor <= 1.0 && anchor_ratio > 0.0 && anchor_ratio <= 1.0) {
        return Err(Error::Calibration(format!(
            "SSIM anchor {ssim_anchor} at ratio {anchor_ratio} out of range"
        )));
    }

    let mut out = params.clone();
    if edge_mean_acc_at_full == local_mean_acc {
        // The server adds nothing: identical curves, no compression penalty.
        out.edge_slope = out.local_slope;
        out.acc_floor_ratio = 1.0;
    }

    let mut rng = stream_rng(seed, Stream::Calibration);
    let beta = Beta::new(params.difficulty_shape.0, params.difficulty_shape.1)
        .map_err(|e| Error::Calibration(e.to_string()))?;
    let fit_sample: Vec<f64> = (0..CALIBRATION_SAMPLES).map(|_| beta.sample(&mut rng)).collect();

    let mean_conf = |intercept: f64, slope: f64| -> f64 {
        fit_sample
            .iter()
            .map(|u| (intercept - slope * u).clamp(out.confidence_min, out.confidence_max))
            .sum::<f64>()
            / fit_sample.len() as f64
    };
    let solve = |target: f64, slope: f64| -> Result<f64> {
        let mut lo = out.confidence_min;
        let mut hi = out.confidence_max + slope;
        if mean_conf(lo, slope) > target || mean_conf(hi, slope) < target {
            return Err(Error::Calibration(format!("target {target} not bracketed")));
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mean_conf(mid, slope) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    };
    out.local_intercept = solve(local_mean_acc, out.local_slope)?;
    out.edge_intercept = solve(edge_mean_acc_at_full, out.edge_slope)?;

    if anchor_ratio < 1.0 && ssim_anchor < out.ssim_at_full {
        let mut gamma = (ssim_anchor / out.ssim_at_full).ln() / anchor_ratio.ln();
        while out.ssim_at_full * anchor_ratio.powf(gamma) > ssim_anchor {
            gamma = f64::from_bits(gamma.to_bits() + 1);
        }
        out.ssim_exponent = gamma;
    } else if out.ssim_at_full * anchor_ratio.powf(out.ssim_exponent) > ssim_anchor {
        return Err(Error::Calibration(format!(
            "SSIM anchor {ssim_anchor} unreachable at ratio {anchor_ratio}"
        )));
    }

    // Held-out check through the correctness seeds.
    let holdout = CALIBRATION_SAMPLES;
    let mut local_hits = 0usize;
    let mut edge_hits = 0usize;
    for _ in 0..holdout {
        let d = out.draw_datum(&mut rng, 2);
        local_hits += out.local_infer(&d).correct as usize;
        edge_hits += (d.correctness_seed < out.edge_confidence_at_full(d.difficulty)) as usize;
    }
    let local_mean = local_hits as f64 / holdout as f64;
    let edge_mean = edge_hits as f64 / holdout as f64;
    let report = CalibrationReport {
        local_intercept: out.local_intercept,
        edge_intercept: out.edge_intercept,
        ssim_exponent: out.ssim_exponent,
        local_mean_acc: local_mean,
        edge_mean_acc_at_full: edge_mean,
        local_residual: local_mean - local_mean_acc,
        edge_residual: edge_mean - edge_mean_acc_at_full,
        ssim_at_anchor: out.ssim(anchor_ratio),
        samples: holdout,
    };
    Ok((out, report))
}

/// Draws `count` data from a fresh stream; convenience for Monte-Carlo checks.
pub fn draw_many(params: &SurrogateParams, class_count: usize, count: usize, rng: &mut SimRng) -> Vec<Datum> {
    (0..count).map(|_| params.draw_datum(rng, class_count)).collect()
}

/// A multi-channel pixel grid stored channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelGrid {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl PixelGrid {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width || data.is_empty() {
            return Err(Error::Shape(format!(
                "{} values for a {channels}x{height}x{width} grid",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    fn channel(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }
}

/// Conventional SSIM stabilizers for unit dynamic range.
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Global (single-window) SSIM, averaged over channels.
pub fn ssim_exact(x: &PixelGrid, y: &PixelGrid, c1: f64, c2: f64) -> Result<f64> {
    if (x.channels, x.height, x.width) != (y.channels, y.height, y.width) {
        return Err(Error::Shape(format!(
            "{}x{}x{} vs {}x{}x{}",
            x.channels, x.height, x.width, y.channels, y.height, y.width
        )));
    }
    if !(c1 > 0.0 && c2 > 0.0) {
        return Err(Error::Config("SSIM constants must be positive".into()));
    }
    let total: f64 = (0..x.channels)
        .map(|c| {
            let (a, b) = (x.channel(c), y.channel(c));
            let n = a.len() as f64;
            let mu_a = a.iter().sum::<f64>() / n;
            let mu_b = b.iter().sum::<f64>() / n;
            let (mut var_a, mut var_b, mut cov) = (0.0, 0.0, 0.0);
            for (&p, &q) in a.iter().zip(b) {
                var_a += (p - mu_a) * (p - mu_a);
                var_b += (q - mu_b) * (q - mu_b);
                cov += (p - mu_a) * (q - mu_b);
            }
            var_a /= n;
            var_b /= n;
            cov /= n;
            ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)) / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2))
        })
        .sum();
    Ok(total / x.channels as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn md1_targets() -> CalibrationTargets {
        CalibrationTargets {
            local_mean_acc: 0.730,
            edge_mean_acc_at_full: 0.900,
            ssim_anchor: 0.26,
            anchor_ratio: 0.4,
        }
    }

    #[test]
    fn entropy_endpoints_without_noise() {
        assert!((logit_entropy(1.0, 0.0, 10) - 10f64.ln()).abs() < 1e-15);
        assert_eq!(logit_entropy(0.0, 0.0, 10), 0.0);
        assert_eq!(logit_entropy(0.0, -0.3, 10), 0.0);
        assert_eq!(logit_entropy(1.0, 0.3, 10), 10f64.ln());

        let p = SurrogateParams {
            entropy_noise_std: 0.0,
            ..Default::default()
        };
        let max = 10f64.ln();
        let mut rng = stream_rng(3, Stream::Environment);
        for _ in 0..1000 {
            let d = p.draw_datum(&mut rng, 10);
            assert!((d.entropy - d.difficulty * max).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_difficulty_has_half_mean() {
        let p = SurrogateParams::default();
        let mut rng = stream_rng(11, Stream::Environment);
        let data = draw_many(&p, 10, 100_000, &mut rng);
        let mean = data.iter().map(|d| d.difficulty).sum::<f64>() / data.len() as f64;
        assert!((mean - 0.5).abs() < 0.01, "{mean}");
    }

    #[test]
    fn penalty_endpoints() {
        let p = SurrogateParams::default();
        let ratios = [1.0, 0.8, 0.6, 0.4];
        assert_eq!(p.compression_penalty(0.4, &ratios), p.acc_floor_ratio);
        assert_eq!(p.compression_penalty(1.0, &ratios), 1.0);
        assert!(p.compression_penalty(0.6, &ratios) <= p.compression_penalty(0.8, &ratios));
    }

    #[test]
    fn edge_infer_rejects_unknown_ratio() {
        let p = SurrogateParams::default();
        let d = Datum {
            difficulty: 0.5,
            entropy: 1.0,
            correctness_seed: 0.5,
        };
        assert!(p.edge_infer(&d, 0.3, &[1.0, 0.4]).is_err());
    }

    #[test]
    fn ssim_surrogate_is_monotone() {
        let (p, _) = calibrate(&SurrogateParams::default(), &md1_targets(), 1).unwrap();
        assert_eq!(p.ssim(1.0), p.ssim_at_full);
        assert!(p.ssim(0.4) <= 0.26);
        assert!(p.ssim(0.4) < p.ssim(0.6) && p.ssim(0.6) < p.ssim(0.8) && p.ssim(0.8) < p.ssim(1.0));
    }

    #[test]
    fn calibration_hits_targets() {
        let (p, report) = calibrate(&SurrogateParams::default(), &md1_targets(), 1).unwrap();
        assert!(report.local_residual.abs() < 0.005, "{report:?}");
        assert!(report.edge_residual.abs() < 0.005, "{report:?}");
        assert!(p.local_confidence(0.0) >= p.local_confidence(1.0));
    }

    #[test]
    fn calibration_rejects_out_of_range_target() {
        let t = CalibrationTargets {
            local_mean_acc: 0.995,
            ..md1_targets()
        };
        assert!(matches!(
            calibrate(&SurrogateParams::default(), &t, 1),
            Err(Error::Calibration(_))
        ));
    }

    #[test]
    fn degenerate_targets_give_identical_curves() {
        let t = CalibrationTargets {
            local_mean_acc: 0.8,
            edge_mean_acc_at_full: 0.8,
            ..md1_targets()
        };
        let (p, _) = calibrate(&SurrogateParams::default(), &t, 1).unwrap();
        assert_eq!(p.acc_floor_ratio, 1.0);
        for u in [0.0, 0.3, 0.9] {
            assert!((p.local_confidence(u) - p.edge_confidence_at_full(u)).abs() < 1e-9);
        }
        assert_eq!(p.compression_penalty(0.4, &[1.0, 0.4]), 1.0);
    }

    #[test]
    fn ssim_identity_and_constant_grids() {
        let x = PixelGrid::new(1, 2, 2, vec![0.1, 0.5, 0.9, 0.3]).unwrap();
        assert!((ssim_exact(&x, &x, SSIM_C1, SSIM_C2).unwrap() - 1.0).abs() < 1e-12);
        let zeros = PixelGrid::filled(3, 4, 4, 0.0);
        let ones = PixelGrid::filled(3, 4, 4, 1.0);
        let s = ssim_exact(&zeros, &ones, SSIM_C1, SSIM_C2).unwrap();
        assert!((s - SSIM_C1 / (1.0 + SSIM_C1)).abs() < 1e-15);
    }

    #[test]
    fn ssim_shape_mismatch() {
        let a = PixelGrid::filled(1, 2, 2, 0.0);
        let b = PixelGrid::filled(1, 2, 3, 0.0);
        assert!(matches!(ssim_exact(&a, &b, SSIM_C1, SSIM_C2), Err(Error::Shape(_))));
    }
}
