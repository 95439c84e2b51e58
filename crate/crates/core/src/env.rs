//! The multi-device cooperative inference environment.
//!
//! One episode spans `N` slots. In each slot every device observes its
//! uplink rate, remaining budget and the entropy of its local logits, then
//! submits a bid and a compression ratio. The server admits at most `U`
//! devices; admitted devices are charged their bid and classified at the
//! edge, everyone else falls back to the on-device classifier.

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::surrogate::{Datum, SurrogateParams};
use crate::{Error, Result, SimRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdConfig {
    pub feature_dims: usize,
    pub bits_per_dim: u32,
    /// Admissible compression ratios, descending.
    pub ratios: Vec<f64>,
    pub max_bid: f64,
    pub initial_budget: f64,
    pub class_count: usize,
    /// Linear mean SNR; Rayleigh fading multiplies it by a unit-mean
    /// exponential gain every slot.
    pub mean_snr: f64,
    pub weight_t1: f64,
    pub surrogate: SurrogateParams,
}

impl MdConfig {
    pub fn validate(&self, k: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("device {}: {msg}", k + 1)));
        if self.feature_dims == 0 || self.bits_per_dim == 0 {
            return bad("feature_dims and bits_per_dim must be positive".into());
        }
        if self.ratios.is_empty() {
            return bad("empty ratio set".into());
        }
        for (i, &r) in self.ratios.iter().enumerate() {
            if !(r > 0.0 && r <= 1.0) {
                return bad(format!("ratio {r} outside (0, 1]"));
            }
            if self.ratios[..i].contains(&r) {
                return bad(format!("duplicate ratio {r}"));
            }
            if i > 0 && self.ratios[i - 1] < r {
                return bad("ratios must be listed in descending order".into());
            }
        }
        if !(self.max_bid >= 0.0 && self.max_bid.is_finite()) {
            return bad(format!("max_bid {} must be nonnegative", self.max_bid));
        }
        if !(self.initial_budget >= 0.0 && self.initial_budget.is_finite()) {
            return bad(format!("initial_budget {} must be nonnegative", self.initial_budget));
        }
        if self.class_count < 2 {
            return bad("class_count must be at least 2".into());
        }
        if !(self.mean_snr > 0.0 && self.mean_snr.is_finite()) {
            return bad(format!("mean_snr {} must be positive", self.mean_snr));
        }
        if !(self.weight_t1 > 0.0 && self.weight_t1.is_finite()) {
            return bad(format!("weight_t1 {} must be positive", self.weight_t1));
        }
        self.surrogate.validate().or_else(|e| bad(e.to_string()))
    }

    pub fn min_ratio(&self) -> f64 {
        self.ratios.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn ratio_index(&self, ratio: f64) -> Option<usize> {
        self.ratios.iter().position(|&r| r == ratio)
    }

    /// Uncompressed feature size in bits.
    pub fn full_payload(&self) -> f64 {
        payload_bits(1.0, self.feature_dims, self.bits_per_dim)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    pub server_capacity: usize,
    pub horizon: usize,
    /// Seconds per slot.
    pub slot_duration: f64,
    /// Hz.
    pub bandwidth: f64,
    pub weight_t2: f64,
    pub devices: Vec<MdConfig>,
}

impl SystemConfig {
    pub fn device_count(&self) -> usize {
        self.devices.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.devices.len();
        if k == 0 {
            return Err(Error::Config("at least one device is required".into()));
        }
        if self.server_capacity < 1 || self.server_capacity > k {
            return Err(Error::Config(format!(
                "server capacity {} must lie in 1..={k}",
                self.server_capacity
            )));
        }
        if self.horizon < 1 {
            return Err(Error::Config("horizon must be at least one slot".into()));
        }
        if !(self.slot_duration > 0.0 && self.bandwidth > 0.0) {
            return Err(Error::Config("slot duration and bandwidth must be positive".into()));
        }
        if !(self.weight_t2 > 0.0 && self.weight_t2.is_finite()) {
            return Err(Error::Config(format!("weight_t2 {} must be positive", self.weight_t2)));
        }
        for (i, d) in self.devices.iter().enumerate() {
            d.validate(i)?;
        }
        Ok(())
    }

    /// Channel uses per slot, `delta * B`.
    pub fn symbols_per_slot(&self) -> f64 {
        self.slot_duration * self.bandwidth
    }
}

/// Full Markov state. `slot` is 1-based and reaches `N + 1` after the last step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemState {
    pub slot: usize,
    pub rates: Vec<f64>,
    pub budgets: Vec<f64>,
    pub data: Vec<Datum>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub slot: usize,
    /// Bits deliverable this slot.
    pub rate: f64,
    pub budget: f64,
    /// Local-logit entropy in nats.
    pub entropy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub bid: f64,
    /// 0-based index into the device's ratio set.
    pub ratio_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub served: Vec<bool>,
    pub rewards: Vec<f64>,
    /// Cross-entropy proxy of the final classifier.
    pub accuracy_loss: Vec<f64>,
    /// SSIM of the reconstruction; 0 for devices that kept their feature.
    pub privacy_leakage: Vec<f64>,
    pub correct: Vec<bool>,
    pub charged: Vec<f64>,
    pub next_state: SystemState,
}

/// How the server picks whom to serve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Admission<'a> {
    /// Highest feasible positive bids, random tie-breaks; winners pay their bid.
    Auction,
    /// Uniformly random among positive bidders regardless of their channel;
    /// picks whose payload cannot be delivered fall back to local inference.
    /// Winners that are served pay their bid.
    RandomAmongBidders,
    /// The server names the devices directly; budgets are not charged.
    Direct(&'a [usize]),
}

/// `delta * B * log2(1 + snr * gain)`.
pub fn rate_from_gain(gain: f64, md: &MdConfig, sys: &SystemConfig) -> f64 {
    sys.symbols_per_slot() * (md.mean_snr * gain).ln_1p() / std::f64::consts::LN_2
}

/// Draws the bits deliverable in one slot under Rayleigh block fading.
pub fn sample_channel_rate<R: Rng + ?Sized>(rng: &mut R, md: &MdConfig, sys: &SystemConfig) -> f64 {
    let gain: f64 = Exp1.sample(rng);
    rate_from_gain(gain, md, sys)
}

pub fn payload_bits(ratio: f64, dims: usize, bits_per_dim: u32) -> f64 {
    ratio * dims as f64 * bits_per_dim as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bid {
    pub device: usize,
    pub value: f64,
    pub feasible: bool,
}

/// Admits up to `capacity` of the highest positive feasible bids.
///
/// Every bidder draws one uniform tie key, whether or not it is eligible, so
/// the stream advances by exactly `bids.len()` draws. Returned indices are
/// sorted.
pub fn run_auction<R: Rng + ?Sized>(bids: &[Bid], capacity: usize, rng: &mut R) -> Vec<usize> {
    let keys: Vec<f64> = bids.iter().map(|_| rng.random::<f64>()).collect();
    let mut eligible: Vec<(f64, f64, usize)> = bids
        .iter()
        .zip(&keys)
        .filter(|(b, _)| b.feasible && b.value > 0.0)
        .map(|(b, &key)| (b.value, key, b.device))
        .collect();
    eligible.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.total_cmp(&a.1)));
    let mut served: Vec<usize> = eligible.into_iter().take(capacity).map(|e| e.2).collect();
    served.sort_unstable();
    served
}

/// Uniform choice of up to `capacity` positive bidders; bid values and
/// channels are ignored. Draws exactly `bids.len()` keys.
pub fn random_admission<R: Rng + ?Sized>(bids: &[Bid], capacity: usize, rng: &mut R) -> Vec<usize> {
    let keys: Vec<f64> = bids.iter().map(|_| rng.random::<f64>()).collect();
    let mut eligible: Vec<(f64, usize)> = bids
        .iter()
        .zip(&keys)
        .filter(|(b, _)| b.value > 0.0)
        .map(|(b, &key)| (key, b.device))
        .collect();
    eligible.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut picked: Vec<usize> = eligible.into_iter().take(capacity).map(|e| e.1).collect();
    picked.sort_unstable();
    picked
}

/// Higher accuracy and lower leakage both raise the reward.
pub fn compute_reward(accuracy_loss: f64, privacy_leakage: f64, t1: f64, t2: f64) -> f64 {
    -t1 * accuracy_loss - t2 * privacy_leakage
}

#[derive(Debug, Clone)]
pub struct Env {
    cfg: SystemConfig,
    state: SystemState,
    /// Channels and data.
    rng: SimRng,
    /// Admission tie keys, kept apart so that every policy sees the same
    /// channel and data sequence for a given seed.
    tie_rng: SimRng,
}

impl Env {
    pub fn new(cfg: SystemConfig, rng: SimRng) -> Result<Self> {
        cfg.validate()?;
        let k = cfg.device_count();
        let state = SystemState {
            slot: 1,
            rates: vec![0.0; k],
            budgets: cfg.devices.iter().map(|d| d.initial_budget).collect(),
            data: vec![
                Datum {
                    difficulty: 0.0,
                    entropy: 0.0,
                    correctness_seed: 0.0
                };
                k
            ],
        };
        let mut tie_rng = rng.clone();
        tie_rng.set_stream(rng.get_stream() ^ (1 << 63));
        let mut env = Self {
            cfg,
            state,
            rng,
            tie_rng,
        };
        env.reset();
        Ok(env)
    }

    pub fn config(&self) -> &SystemConfig {
        &self.cfg
    }

    pub fn state(&self) -> &SystemState {
        &self.state
    }

    pub fn is_done(&self) -> bool {
        self.state.slot > self.cfg.horizon
    }

    /// Starts a new episode: slot 1, full budgets, fresh channels and data.
    pub fn reset(&mut self) -> &SystemState {
        self.state.slot = 1;
        for (b, d) in self.state.budgets.iter_mut().zip(&self.cfg.devices) {
            *b = d.initial_budget;
        }
        self.draw_slot();
        &self.state
    }

    fn draw_slot(&mut self) {
        let Self { cfg, state, rng, .. } = self;
        for (rate, md) in state.rates.iter_mut().zip(&cfg.devices) {
            *rate = sample_channel_rate(rng, md, cfg);
        }
        for (datum, md) in state.data.iter_mut().zip(&cfg.devices) {
            *datum = md.surrogate.draw_datum(rng, md.class_count);
        }
    }

    pub fn observe(&self, k: usize) -> Observation {
        Observation {
            slot: self.state.slot,
            rate: self.state.rates[k],
            budget: self.state.budgets[k],
            entropy: self.state.data[k].entropy,
        }
    }

    pub fn observations(&self) -> Vec<Observation> {
        (0..self.cfg.device_count()).map(|k| self.observe(k)).collect()
    }

    /// Whether device `k` can deliver its feature at `ratio_index` this slot.
    pub fn feasible(&self, k: usize, ratio_index: usize) -> bool {
        let md = &self.cfg.devices[k];
        payload_bits(md.ratios[ratio_index], md.feature_dims, md.bits_per_dim) <= self.state.rates[k]
    }

    pub fn step(&mut self, actions: &[Action]) -> Result<StepResult> {
        self.step_with(actions, Admission::Auction)
    }

    pub fn step_with(&mut self, actions: &[Action], admission: Admission<'_>) -> Result<StepResult> {
        let horizon = self.cfg.horizon;
        if self.state.slot > horizon {
            return Err(Error::SlotOverflow {
                slot: self.state.slot,
                horizon,
            });
        }
        let k_count = self.cfg.device_count();
        if actions.len() != k_count {
            return Err(Error::Dimension {
                expected: k_count,
                got: actions.len(),
            });
        }
        let charges_budget = !matches!(admission, Admission::Direct(_));
        for (k, a) in actions.iter().enumerate() {
            let md = &self.cfg.devices[k];
            if a.ratio_index >= md.ratios.len() {
                return Err(Error::Config(format!(
                    "device {}: ratio index {} out of range",
                    k + 1,
                    a.ratio_index
                )));
            }
            if charges_budget {
                let cap = md.max_bid.min(self.state.budgets[k]);
                if !(a.bid >= 0.0 && a.bid <= cap) {
                    return Err(Error::Config(format!(
                        "device {}: bid {} outside [0, {cap}]",
                        k + 1,
                        a.bid
                    )));
                }
            }
        }

        let bids: Vec<Bid> = actions
            .iter()
            .enumerate()
            .map(|(k, a)| Bid {
                device: k,
                value: a.bid,
                feasible: self.feasible(k, a.ratio_index),
            })
            .collect();
        let capacity = self.cfg.server_capacity;
        let served_set: Vec<usize> = match admission {
            Admission::Auction => run_auction(&bids, capacity, &mut self.tie_rng),
            Admission::RandomAmongBidders => random_admission(&bids, capacity, &mut self.tie_rng)
                .into_iter()
                .filter(|&k| bids[k].feasible)
                .collect(),
            Admission::Direct(chosen) => {
                let mut chosen = chosen.to_vec();
                chosen.sort_unstable();
                chosen.dedup();
                if chosen.len() > capacity || chosen.iter().any(|&k| k >= k_count) {
                    return Err(Error::Config(format!("invalid direct admission {chosen:?}")));
                }
                chosen.into_iter().filter(|&k| bids[k].feasible).collect()
            }
        };

        let mut served = vec![false; k_count];
        for &k in &served_set {
            served[k] = true;
        }
        let mut result = StepResult {
            served: served.clone(),
            rewards: Vec::with_capacity(k_count),
            accuracy_loss: Vec::with_capacity(k_count),
            privacy_leakage: Vec::with_capacity(k_count),
            correct: Vec::with_capacity(k_count),
            charged: vec![0.0; k_count],
            next_state: self.state.clone(),
        };
        for k in 0..k_count {
            let md = &self.cfg.devices[k];
            let datum = &self.state.data[k];
            let (outcome, leakage) = if served[k] {
                let ratio = md.ratios[actions[k].ratio_index];
                let outcome = md
                    .surrogate
                    .edge_infer(datum, ratio, &md.ratios)
                    .map_err(|_| Error::UnknownRatio { device: k + 1, ratio })?;
                (outcome, md.surrogate.ssim(ratio))
            } else {
                (md.surrogate.local_infer(datum), 0.0)
            };
            result.rewards.push(compute_reward(
                outcome.ce_proxy,
                leakage,
                md.weight_t1,
                self.cfg.weight_t2,
            ));
            result.accuracy_loss.push(outcome.ce_proxy);
            result.privacy_leakage.push(leakage);
            result.correct.push(outcome.correct);
            if served[k] && charges_budget {
                result.charged[k] = actions[k].bid;
                self.state.budgets[k] -= actions[k].bid;
            }
        }

        self.state.slot += 1;
        self.draw_slot();
        result.next_state = self.state.clone();
        Ok(result)
    }
}

/// Per-episode outcome of one device group, as written to the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub episode: usize,
    pub rewards: Vec<f64>,
    /// Fraction of slots classified correctly.
    pub accuracy: Vec<f64>,
    /// Mean SSIM over served slots (0 when never served).
    pub ssim: Vec<f64>,
    pub spent: Vec<f64>,
    pub served: Vec<usize>,
}

/// Accumulates [`StepResult`]s into [`EpisodeMetrics`].
#[derive(Debug, Clone)]
pub struct EpisodeTally {
    rewards: Vec<f64>,
    correct: Vec<usize>,
    ssim_sum: Vec<f64>,
    spent: Vec<f64>,
    served: Vec<usize>,
    slots: usize,
}

impl EpisodeTally {
    pub fn new(devices: usize) -> Self {
        Self {
            rewards: vec![0.0; devices],
            correct: vec![0; devices],
            ssim_sum: vec![0.0; devices],
            spent: vec![0.0; devices],
            served: vec![0; devices],
            slots: 0,
        }
    }

    pub fn record(&mut self, step: &StepResult) {
        self.slots += 1;
        for k in 0..self.rewards.len() {
            self.rewards[k] += step.rewards[k];
            self.correct[k] += step.correct[k] as usize;
            self.spent[k] += step.charged[k];
            if step.served[k] {
                self.served[k] += 1;
                self.ssim_sum[k] += step.privacy_leakage[k];
            }
        }
    }

    pub fn finish(self, episode: usize) -> EpisodeMetrics {
        let slots = self.slots.max(1) as f64;
        EpisodeMetrics {
            episode,
            accuracy: self.correct.iter().map(|&c| c as f64 / slots).collect(),
            ssim: self
                .ssim_sum
                .iter()
                .zip(&self.served)
                .map(|(&s, &n)| if n > 0 { s / n as f64 } else { 0.0 })
                .collect(),
            rewards: self.rewards,
            spent: self.spent,
            served: self.served,
        }
    }
}
