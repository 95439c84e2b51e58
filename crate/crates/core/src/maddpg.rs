//! Decentralized actors with centralized critics.
//!
//! Each device owns a two-headed actor (a bounded bid head and a ratio head
//! producing logits over its admissible ratios), a critic over the joint
//! observations and actions of all devices, and slowly tracking target
//! copies of both. Experience is stored and sampled at episode granularity.

use std::collections::VecDeque;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::env::{Action, Env, EpisodeMetrics, EpisodeTally, MdConfig, Observation, SystemConfig};
use crate::nn::{
    argmax, gumbel_softmax_backward, gumbel_softmax_with_noise, sample_gumbel, soft_update, softmax, Adam,
    BackwardScratch, Head, Mlp, Trace,
};
use crate::{Error, Result, SimRng};

/// Features per encoded observation.
pub const OBS_DIM: usize = 4;

/// Cap on the rate feature, in multiples of the uncompressed payload.
const RATE_FEATURE_CAP: f64 = 4.0;

/// Fixed compression ratio used by the constrained variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioPin {
    /// Always ratio 1.0.
    Uncompressed,
    /// Always the smallest admissible ratio.
    MaxCompression,
    /// Always the largest admissible ratio.
    LargestRatio,
}

impl RatioPin {
    pub fn index(self, md: &MdConfig) -> Result<usize> {
        match self {
            RatioPin::Uncompressed => md
                .ratio_index(1.0)
                .ok_or_else(|| Error::Config("ratio 1.0 is not admissible".into())),
            RatioPin::MaxCompression => Ok(argmax(&md.ratios.iter().map(|r| -r).collect::<Vec<_>>())),
            RatioPin::LargestRatio => Ok(argmax(&md.ratios)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub episodes: usize,
    /// Variance of the Gaussian bid perturbation.
    pub exploration_variance: f64,
    pub gumbel_temperature: f64,
    /// When set, the temperature is annealed linearly to this value.
    pub gumbel_temperature_final: Option<f64>,
    pub tau_critic: f64,
    pub tau_actor: f64,
    pub critic_lr: f64,
    pub actor_lr: f64,
    /// Episodes per sampled batch.
    pub batch_episodes: usize,
    /// Replay capacity in episodes.
    pub buffer_capacity: usize,
    /// Critic + actor update rounds after each collected episode.
    pub updates_per_episode: usize,
    pub hidden_units: usize,
    /// Hide the local-logit entropy from actors and critics.
    pub mask_entropy: bool,
    pub ratio_pin: Option<RatioPin>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            episodes: 5000,
            exploration_variance: 0.1,
            gumbel_temperature: 1.0,
            gumbel_temperature_final: None,
            tau_critic: 0.01,
            tau_actor: 0.01,
            critic_lr: 1e-3,
            actor_lr: 1e-3,
            batch_episodes: 256,
            buffer_capacity: 2000,
            updates_per_episode: 1,
            hidden_units: 32,
            mask_entropy: false,
            ratio_pin: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        if self.episodes == 0 || self.batch_episodes == 0 || self.buffer_capacity == 0 {
            return Err(Error::Config(
                "episodes, batch and buffer sizes must be positive".into(),
            ));
        }
        if self.hidden_units == 0 || self.updates_per_episode == 0 {
            return Err(Error::Config("hidden units and update cadence must be positive".into()));
        }
        if !(self.exploration_variance >= 0.0 && self.exploration_variance.is_finite()) {
            return Err(Error::Config("exploration variance must be nonnegative".into()));
        }
        positive("gumbel_temperature", self.gumbel_temperature)?;
        if let Some(t) = self.gumbel_temperature_final {
            positive("gumbel_temperature_final", t)?;
        }
        for (name, tau) in [("tau_critic", self.tau_critic), ("tau_actor", self.tau_actor)] {
            if !(tau > 0.0 && tau <= 1.0) {
                return Err(Error::Config(format!("{name} {tau} outside (0, 1]")));
            }
        }
        if !(self.critic_lr >= 0.0 && self.actor_lr >= 0.0) {
            return Err(Error::Config("learning rates must be nonnegative".into()));
        }
        Ok(())
    }

    /// Gumbel temperature for episode `t` (0-based).
    pub fn temperature_at(&self, t: usize) -> f64 {
        match self.gumbel_temperature_final {
            Some(end) if self.episodes > 1 => {
                let frac = t as f64 / (self.episodes - 1) as f64;
                self.gumbel_temperature + (end - self.gumbel_temperature) * frac.min(1.0)
            }
            _ => self.gumbel_temperature,
        }
    }
}

/// Network input for one observation: slot, rate, budget and entropy, each
/// scaled to roughly unit range.
pub fn encode_observation(obs: &Observation, md: &MdConfig, sys: &SystemConfig) -> [f64; OBS_DIM] {
    let budget_scale = (md.max_bid * sys.horizon as f64).max(1e-12);
    [
        obs.slot as f64 / sys.horizon as f64,
        (obs.rate / md.full_payload()).min(RATE_FEATURE_CAP),
        obs.budget / budget_scale,
        obs.entropy / (md.class_count as f64).ln(),
    ]
}

/// Drops the entropy field (difficulty-agnostic variant).
pub fn mask_observation(obs: &Observation) -> Observation {
    Observation { entropy: 0.0, ..*obs }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActorNet {
    /// Observation to a bid in `[0, max_bid]`.
    pub bid: Mlp,
    /// Observation to ratio logits.
    pub ratio: Mlp,
}

impl ActorNet {
    pub fn new<R: Rng + ?Sized>(md: &MdConfig, hidden: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            bid: Mlp::new(&[OBS_DIM, hidden, hidden, 1], Head::Bounded { scale: md.max_bid }, rng)?,
            ratio: Mlp::new(&[OBS_DIM, hidden, hidden, md.ratios.len()], Head::Identity, rng)?,
        })
    }

    pub fn bid_output(&self, features: &[f64]) -> f64 {
        self.bid.forward(features).expect("encoded observation")[0]
    }

    pub fn ratio_probabilities(&self, features: &[f64]) -> Vec<f64> {
        softmax(&self.ratio.forward(features).expect("encoded observation"))
    }

    fn same_architecture(&self, other: &ActorNet) -> bool {
        self.bid.same_architecture(&other.bid) && self.ratio.same_architecture(&other.ratio)
    }
}

/// Exploratory action: Gaussian-perturbed bid clipped to the budget, ratio
/// picked as the argmax of a Gumbel-Softmax relaxed sample.
pub fn act_explore<R: Rng + ?Sized>(
    features: &[f64],
    actor: &ActorNet,
    budget: f64,
    md: &MdConfig,
    cfg: &TrainConfig,
    temperature: f64,
    rng: &mut R,
) -> Action {
    let noise = if cfg.exploration_variance > 0.0 {
        Normal::new(0.0, cfg.exploration_variance.sqrt())
            .expect("finite variance")
            .sample(rng)
    } else {
        0.0
    };
    let bid = (actor.bid_output(features) + noise).clamp(0.0, md.max_bid.min(budget.max(0.0)));
    let ratio_index = match cfg.ratio_pin {
        Some(pin) => pin.index(md).expect("pin validated at construction"),
        None => {
            let logits = actor.ratio.forward(features).expect("encoded observation");
            let noise: Vec<f64> = (0..logits.len()).map(|_| sample_gumbel(rng)).collect();
            argmax(&gumbel_softmax_with_noise(&logits, &noise, temperature))
        }
    };
    Action { bid, ratio_index }
}

/// Deterministic action: clipped bid-head output and the most probable ratio.
pub fn act_greedy(features: &[f64], actor: &ActorNet, budget: f64, md: &MdConfig, pin: Option<RatioPin>) -> Action {
    let bid = actor.bid_output(features).clamp(0.0, md.max_bid.min(budget.max(0.0)));
    let ratio_index = match pin {
        Some(pin) => pin.index(md).expect("pin validated at construction"),
        None => argmax(&actor.ratio.forward(features).expect("encoded observation")),
    };
    Action { bid, ratio_index }
}

/// One slot of an episode for every device.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotRecord {
    pub obs: Vec<Observation>,
    pub actions: Vec<Action>,
    pub next_obs: Vec<Observation>,
    pub rewards: Vec<f64>,
    /// Encoded `obs` and `next_obs`, cached for the update passes.
    features: Vec<[f64; OBS_DIM]>,
    next_features: Vec<[f64; OBS_DIM]>,
}

/// Per-device view of a slot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Experience {
    pub obs: Observation,
    pub action: Action,
    pub next_obs: Observation,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub slots: Vec<SlotRecord>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn experience(&self, k: usize, n: usize) -> Experience {
        let s = &self.slots[n];
        Experience {
            obs: s.obs[k],
            action: s.actions[k],
            next_obs: s.next_obs[k],
            reward: s.rewards[k],
        }
    }
}

/// FIFO store of whole episodes.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    episodes: VecDeque<Episode>,
    capacity: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            episodes: VecDeque::with_capacity(capacity.min(4096)),
            capacity,
        }
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, episode: Episode) {
        if self.episodes.len() == self.capacity {
            self.episodes.pop_front();
        }
        self.episodes.push_back(episode);
    }

    pub fn iter(&self) -> impl Iterator<Item = &Episode> {
        self.episodes.iter()
    }

    /// `count` episodes: without replacement when enough are stored, with
    /// replacement otherwise.
    pub fn sample<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Vec<&Episode> {
        let len = self.episodes.len();
        if len == 0 {
            return Vec::new();
        }
        if len >= count {
            index::sample(rng, len, count)
                .into_iter()
                .map(|i| &self.episodes[i])
                .collect()
        } else {
            (0..count).map(|_| &self.episodes[rng.random_range(0..len)]).collect()
        }
    }
}

/// Position of each device's block inside the critic input.
#[derive(Debug, Clone, PartialEq)]
pub struct JointLayout {
    offsets: Vec<usize>,
    ratio_counts: Vec<usize>,
    width: usize,
}

impl JointLayout {
    pub fn new(sys: &SystemConfig) -> Self {
        let mut offsets = Vec::new();
        let mut width = 0;
        for md in &sys.devices {
            offsets.push(width);
            width += OBS_DIM + 1 + md.ratios.len();
        }
        Self {
            offsets,
            ratio_counts: sys.devices.iter().map(|d| d.ratios.len()).collect(),
            width,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bid_slot(&self, k: usize) -> usize {
        self.offsets[k] + OBS_DIM
    }

    pub fn ratio_slots(&self, k: usize) -> std::ops::Range<usize> {
        let start = self.offsets[k] + OBS_DIM + 1;
        start..start + self.ratio_counts[k]
    }

    /// Writes device `k`'s observation block.
    pub fn write_features(&self, input: &mut [f64], k: usize, features: &[f64; OBS_DIM]) {
        input[self.offsets[k]..self.offsets[k] + OBS_DIM].copy_from_slice(features);
    }

    /// Writes device `k`'s action block (normalized bid, ratio vector).
    pub fn write_action(&self, input: &mut [f64], k: usize, bid_norm: f64, ratio: &[f64]) {
        input[self.bid_slot(k)] = bid_norm;
        input[self.ratio_slots(k)].copy_from_slice(ratio);
    }

    pub fn write_discrete_action(&self, input: &mut [f64], k: usize, bid_norm: f64, ratio_index: usize) {
        input[self.bid_slot(k)] = bid_norm;
        for (i, v) in input[self.ratio_slots(k)].iter_mut().enumerate() {
            *v = if i == ratio_index { 1.0 } else { 0.0 };
        }
    }
}

fn bid_norm(bid: f64, md: &MdConfig) -> f64 {
    if md.max_bid > 0.0 {
        bid / md.max_bid
    } else {
        0.0
    }
}

/// Everything one device learns.
#[derive(Debug, Clone)]
pub struct Agent {
    pub actor: ActorNet,
    pub critic: Mlp,
    pub target_actor: ActorNet,
    pub target_critic: Mlp,
    bid_opt: Adam,
    ratio_opt: Adam,
    critic_opt: Adam,
}

impl Agent {
    pub fn new<R: Rng + ?Sized>(md: &MdConfig, layout: &JointLayout, cfg: &TrainConfig, rng: &mut R) -> Result<Self> {
        let actor = ActorNet::new(md, cfg.hidden_units, rng)?;
        let critic = Mlp::new(
            &[layout.width(), cfg.hidden_units, cfg.hidden_units, 1],
            Head::Identity,
            rng,
        )?;
        Ok(Self {
            bid_opt: Adam::new(&actor.bid, cfg.actor_lr),
            ratio_opt: Adam::new(&actor.ratio, cfg.actor_lr),
            critic_opt: Adam::new(&critic, cfg.critic_lr),
            target_actor: actor.clone(),
            target_critic: critic.clone(),
            actor,
            critic,
        })
    }

    /// Replaces the networks (e.g. from a checkpoint) and resets optimizers.
    pub fn from_nets(
        actor: ActorNet,
        critic: Mlp,
        target_actor: ActorNet,
        target_critic: Mlp,
        cfg: &TrainConfig,
    ) -> Result<Self> {
        if !actor.same_architecture(&target_actor) || !critic.same_architecture(&target_critic) {
            return Err(Error::Architecture("target nets differ from online nets".into()));
        }
        Ok(Self {
            bid_opt: Adam::new(&actor.bid, cfg.actor_lr),
            ratio_opt: Adam::new(&actor.ratio, cfg.actor_lr),
            critic_opt: Adam::new(&critic, cfg.critic_lr),
            actor,
            critic,
            target_actor,
            target_critic,
        })
    }
}

/// Critic inputs for one sampled batch, shared by every device's update.
#[derive(Debug, Clone)]
pub struct PreparedBatch {
    /// Joint input with the stored actions, one per (episode, slot).
    current: Vec<Vec<f64>>,
    /// Joint input at the next slot with target-actor actions; `None` at the
    /// terminal slot.
    next: Vec<Option<Vec<f64>>>,
    /// Per sample: rewards of every device.
    rewards: Vec<Vec<f64>>,
    /// Per sample: encoded observation of every device.
    features: Vec<Vec<[f64; OBS_DIM]>>,
}

impl PreparedBatch {
    pub fn len(&self) -> usize {
        self.current.len()
    }

    pub fn is_empty(&self) -> bool {
        self.current.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct Maddpg {
    sys: SystemConfig,
    cfg: TrainConfig,
    layout: JointLayout,
    pub agents: Vec<Agent>,
    pins: Option<Vec<usize>>,
}

/// What one training run produced.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub metrics: Vec<EpisodeMetrics>,
    pub critic_losses: Vec<Vec<f64>>,
}

impl Maddpg {
    pub fn new<R: Rng + ?Sized>(sys: SystemConfig, cfg: TrainConfig, rng: &mut R) -> Result<Self> {
        sys.validate()?;
        cfg.validate()?;
        let layout = JointLayout::new(&sys);
        let agents = sys
            .devices
            .iter()
            .map(|md| Agent::new(md, &layout, &cfg, rng))
            .collect::<Result<Vec<_>>>()?;
        let pins = cfg
            .ratio_pin
            .map(|pin| sys.devices.iter().map(|md| pin.index(md)).collect::<Result<Vec<_>>>())
            .transpose()?;
        Ok(Self {
            sys,
            cfg,
            layout,
            agents,
            pins,
        })
    }

    pub fn with_agents(sys: SystemConfig, cfg: TrainConfig, agents: Vec<Agent>) -> Result<Self> {
        let mut m = Self::new(sys, cfg, &mut crate::stream_rng(0, crate::Stream::Init))?;
        if agents.len() != m.agents.len() {
            return Err(Error::Architecture(format!(
                "{} agents for {} devices",
                agents.len(),
                m.agents.len()
            )));
        }
        for (a, b) in agents.iter().zip(&m.agents) {
            if !a.actor.same_architecture(&b.actor) || !a.critic.same_architecture(&b.critic) {
                return Err(Error::Architecture(
                    "checkpoint does not match the configuration".into(),
                ));
            }
        }
        m.agents = agents;
        Ok(m)
    }

    pub fn system(&self) -> &SystemConfig {
        &self.sys
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &JointLayout {
        &self.layout
    }

    fn visible(&self, obs: &Observation) -> Observation {
        if self.cfg.mask_entropy {
            mask_observation(obs)
        } else {
            *obs
        }
    }

    fn features(&self, k: usize, obs: &Observation) -> [f64; OBS_DIM] {
        encode_observation(&self.visible(obs), &self.sys.devices[k], &self.sys)
    }

    pub fn act_greedy(&self, k: usize, obs: &Observation) -> Action {
        let md = &self.sys.devices[k];
        act_greedy(
            &self.features(k, obs),
            &self.agents[k].actor,
            obs.budget,
            md,
            self.cfg.ratio_pin,
        )
    }

    pub fn act_explore<R: Rng + ?Sized>(&self, k: usize, obs: &Observation, temperature: f64, rng: &mut R) -> Action {
        let md = &self.sys.devices[k];
        act_explore(
            &self.features(k, obs),
            &self.agents[k].actor,
            obs.budget,
            md,
            &self.cfg,
            temperature,
            rng,
        )
    }

    /// Plays one exploratory episode and returns it with its metrics.
    pub fn collect_episode<R: Rng + ?Sized>(
        &self,
        env: &mut Env,
        episode: usize,
        rng: &mut R,
    ) -> Result<(Episode, EpisodeMetrics)> {
        let temperature = self.cfg.temperature_at(episode);
        let k_count = self.sys.device_count();
        env.reset();
        let mut tally = EpisodeTally::new(k_count);
        let mut slots = Vec::with_capacity(self.sys.horizon);
        while !env.is_done() {
            let obs = env.observations();
            let actions: Vec<Action> = (0..k_count)
                .map(|k| self.act_explore(k, &obs[k], temperature, rng))
                .collect();
            let result = env.step(&actions)?;
            tally.record(&result);
            let next_obs = env.observations();
            slots.push(self.record_slot(obs, actions, next_obs, result.rewards));
        }
        Ok((Episode { slots }, tally.finish(episode)))
    }

    /// Builds a stored slot, applying the entropy mask when configured.
    pub fn record_slot(
        &self,
        obs: Vec<Observation>,
        actions: Vec<Action>,
        next_obs: Vec<Observation>,
        rewards: Vec<f64>,
    ) -> SlotRecord {
        let obs: Vec<Observation> = obs.iter().map(|o| self.visible(o)).collect();
        let next_obs: Vec<Observation> = next_obs.iter().map(|o| self.visible(o)).collect();
        let features = obs
            .iter()
            .enumerate()
            .map(|(k, o)| encode_observation(o, &self.sys.devices[k], &self.sys))
            .collect();
        let next_features = next_obs
            .iter()
            .enumerate()
            .map(|(k, o)| encode_observation(o, &self.sys.devices[k], &self.sys))
            .collect();
        SlotRecord {
            obs,
            actions,
            next_obs,
            rewards,
            features,
            next_features,
        }
    }

    /// Critic inputs for `batch` using the current target actors.
    pub fn prepare(&self, batch: &[&Episode]) -> Result<PreparedBatch> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let k_count = self.sys.device_count();
        let width = self.layout.width();
        let samples: usize = batch.iter().map(|e| e.len()).sum();
        let mut prepared = PreparedBatch {
            current: Vec::with_capacity(samples),
            next: Vec::with_capacity(samples),
            rewards: Vec::with_capacity(samples),
            features: Vec::with_capacity(samples),
        };
        let mut trace = Trace::default();
        for episode in batch {
            let last = episode.len().saturating_sub(1);
            for (n, slot) in episode.slots.iter().enumerate() {
                let mut x = vec![0.0; width];
                for k in 0..k_count {
                    let md = &self.sys.devices[k];
                    self.layout.write_features(&mut x, k, &slot.features[k]);
                    self.layout.write_discrete_action(
                        &mut x,
                        k,
                        bid_norm(slot.actions[k].bid, md),
                        slot.actions[k].ratio_index,
                    );
                }
                let next = if n < last {
                    let mut xn = vec![0.0; width];
                    for k in 0..k_count {
                        let md = &self.sys.devices[k];
                        let f = &slot.next_features[k];
                        self.layout.write_features(&mut xn, k, f);
                        let target = &self.agents[k].target_actor;
                        let bid = target.bid.forward_trace(f, &mut trace)?[0]
                            .clamp(0.0, md.max_bid.min(slot.next_obs[k].budget.max(0.0)));
                        let ratio_index = match &self.pins {
                            Some(p) => p[k],
                            None => argmax(target.ratio.forward_trace(f, &mut trace)?),
                        };
                        self.layout
                            .write_discrete_action(&mut xn, k, bid_norm(bid, md), ratio_index);
                    }
                    Some(xn)
                } else {
                    None
                };
                prepared.current.push(x);
                prepared.next.push(next);
                prepared.rewards.push(slot.rewards.clone());
                prepared.features.push(slot.features.clone());
            }
        }
        Ok(prepared)
    }

    /// One critic step for device `k` on the squared TD error; returns the
    /// mean squared error before the step.
    pub fn critic_update(&mut self, k: usize, batch: &PreparedBatch) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let agent = &mut self.agents[k];
        let count = batch.len() as f64;
        let mut grads = agent.critic.zero_grads();
        let mut trace = Trace::default();
        let mut scratch = BackwardScratch::default();
        let mut input_grad = Vec::new();
        let mut loss = 0.0;
        for i in 0..batch.len() {
            let bootstrap = match &batch.next[i] {
                Some(xn) => agent.target_critic.forward_trace(xn, &mut trace)?[0],
                None => 0.0,
            };
            let target = batch.rewards[i][k] + bootstrap;
            let q = agent.critic.forward_trace(&batch.current[i], &mut trace)?[0];
            let err = q - target;
            loss += err * err;
            agent.critic.backward_into(
                &trace,
                &[2.0 * err / count],
                Some(&mut grads),
                &mut input_grad,
                &mut scratch,
            )?;
        }
        agent.critic_opt.step(&mut agent.critic, &grads)?;
        Ok(loss / count)
    }

    /// One actor step for device `k`, ascending the critic along the
    /// device's re-generated action while the other devices' stored actions
    /// stay fixed. Returns the mean critic value before the step.
    pub fn actor_update<R: Rng + ?Sized>(
        &mut self,
        k: usize,
        batch: &PreparedBatch,
        temperature: f64,
        rng: &mut R,
    ) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let grads = self.actor_gradients(k, batch, temperature, rng)?;
        let agent = &mut self.agents[k];
        agent.bid_opt.step(&mut agent.actor.bid, &grads.bid)?;
        if self.pins.is_none() {
            agent.ratio_opt.step(&mut agent.actor.ratio, &grads.ratio)?;
        }
        Ok(grads.objective)
    }

    /// Gradients of the batch-mean critic value with respect to device `k`'s
    /// actor parameters, negated for descent.
    pub fn actor_gradients<R: Rng + ?Sized>(
        &self,
        k: usize,
        batch: &PreparedBatch,
        temperature: f64,
        rng: &mut R,
    ) -> Result<ActorGradients> {
        let noise: Vec<Vec<f64>> = (0..batch.len())
            .map(|_| {
                (0..self.sys.devices[k].ratios.len())
                    .map(|_| sample_gumbel(rng))
                    .collect()
            })
            .collect();
        self.actor_gradients_with_noise(k, batch, temperature, &noise)
    }

    /// As [`Maddpg::actor_gradients`] with explicit Gumbel noise per sample.
    pub fn actor_gradients_with_noise(
        &self,
        k: usize,
        batch: &PreparedBatch,
        temperature: f64,
        noise: &[Vec<f64>],
    ) -> Result<ActorGradients> {
        let md = &self.sys.devices[k];
        let agent = &self.agents[k];
        let count = batch.len() as f64;
        let mut bid_grads = agent.actor.bid.zero_grads();
        let mut ratio_grads = agent.actor.ratio.zero_grads();
        let (mut bid_trace, mut ratio_trace, mut critic_trace) = (Trace::default(), Trace::default(), Trace::default());
        let mut scratch = BackwardScratch::default();
        let mut critic_in_grad = Vec::new();
        let mut sink = Vec::new();
        let mut objective = 0.0;
        let ratio_range = self.layout.ratio_slots(k);
        let bid_slot = self.layout.bid_slot(k);
        let mut x = vec![0.0; self.layout.width()];

        for i in 0..batch.len() {
            let f = &batch.features[i][k];
            let bid = agent.actor.bid.forward_trace(f, &mut bid_trace)?[0];
            x.copy_from_slice(&batch.current[i]);
            let relaxed = match &self.pins {
                Some(p) => {
                    self.layout.write_discrete_action(&mut x, k, bid_norm(bid, md), p[k]);
                    None
                }
                None => {
                    let logits = agent.actor.ratio.forward_trace(f, &mut ratio_trace)?;
                    let y = gumbel_softmax_with_noise(logits, &noise[i], temperature);
                    self.layout.write_action(&mut x, k, bid_norm(bid, md), &y);
                    Some(y)
                }
            };
            objective += agent.critic.forward_trace(&x, &mut critic_trace)?[0];
            agent
                .critic
                .backward_into(&critic_trace, &[1.0], None, &mut critic_in_grad, &mut scratch)?;

            let dq_dbid = critic_in_grad[bid_slot] * if md.max_bid > 0.0 { 1.0 / md.max_bid } else { 0.0 };
            agent.actor.bid.backward_into(
                &bid_trace,
                &[-dq_dbid / count],
                Some(&mut bid_grads),
                &mut sink,
                &mut scratch,
            )?;
            if let Some(y) = relaxed {
                let dq_dy: Vec<f64> = critic_in_grad[ratio_range.clone()].iter().map(|g| -g / count).collect();
                let dlogits = gumbel_softmax_backward(&y, temperature, &dq_dy);
                agent.actor.ratio.backward_into(
                    &ratio_trace,
                    &dlogits,
                    Some(&mut ratio_grads),
                    &mut sink,
                    &mut scratch,
                )?;
            }
        }
        Ok(ActorGradients {
            bid: bid_grads,
            ratio: ratio_grads,
            objective: objective / count,
        })
    }

    pub fn soft_update_targets(&mut self) -> Result<()> {
        for agent in &mut self.agents {
            soft_update(&mut agent.target_critic, &agent.critic, self.cfg.tau_critic)?;
            soft_update(&mut agent.target_actor.bid, &agent.actor.bid, self.cfg.tau_actor)?;
            soft_update(&mut agent.target_actor.ratio, &agent.actor.ratio, self.cfg.tau_actor)?;
        }
        Ok(())
    }

    /// One model-update round on a sampled batch; returns critic losses.
    pub fn update(&mut self, batch: &[&Episode], temperature: f64, rng: &mut SimRng) -> Result<Vec<f64>> {
        let prepared = self.prepare(batch)?;
        let k_count = self.sys.device_count();
        let mut losses = Vec::with_capacity(k_count);
        for k in 0..k_count {
            losses.push(self.critic_update(k, &prepared)?);
        }
        for k in 0..k_count {
            self.actor_update(k, &prepared, temperature, rng)?;
        }
        self.soft_update_targets()?;
        Ok(losses)
    }

    /// The full learning loop: collect an episode, store it, sample a batch,
    /// update every critic then every actor, soft-update the targets.
    ///
    /// `on_episode` sees each episode's metrics as soon as it is collected.
    pub fn train(
        &mut self,
        env: &mut Env,
        rng: &mut SimRng,
        mut on_episode: impl FnMut(&EpisodeMetrics) -> Result<()>,
    ) -> Result<TrainOutcome> {
        let mut buffer = ReplayBuffer::new(self.cfg.buffer_capacity);
        let mut metrics = Vec::with_capacity(self.cfg.episodes);
        let mut critic_losses = Vec::with_capacity(self.cfg.episodes);
        for t in 0..self.cfg.episodes {
            let (episode, m) = self.collect_episode(env, t, rng)?;
            on_episode(&m)?;
            metrics.push(m);
            buffer.push(episode);
            let temperature = self.cfg.temperature_at(t);
            let mut losses = Vec::new();
            for _ in 0..self.cfg.updates_per_episode {
                let batch = buffer.sample(self.cfg.batch_episodes, rng);
                losses = self.update(&batch, temperature, rng)?;
            }
            critic_losses.push(losses);
        }
        Ok(TrainOutcome { metrics, critic_losses })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActorGradients {
    pub bid: Vec<f64>,
    pub ratio: Vec<f64>,
    pub objective: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ep(tag: usize) -> Episode {
        Episode {
            slots: vec![SlotRecord {
                obs: vec![],
                actions: vec![],
                next_obs: vec![],
                rewards: vec![tag as f64],
                features: vec![],
                next_features: vec![],
            }],
        }
    }

    #[test]
    fn replay_is_fifo() {
        let mut buf = ReplayBuffer::new(3);
        for i in 0..5 {
            buf.push(ep(i));
        }
        let held: Vec<f64> = buf.iter().map(|e| e.slots[0].rewards[0]).collect();
        assert_eq!(held, vec![2.0, 3.0, 4.0]);
    }

    #[test]
    fn small_buffer_samples_with_replacement() {
        let mut buf = ReplayBuffer::new(10);
        buf.push(ep(0));
        let mut rng = crate::stream_rng(1, crate::Stream::Policy);
        assert_eq!(buf.sample(4, &mut rng).len(), 4);
        assert!(ReplayBuffer::new(3).sample(2, &mut rng).is_empty());
    }

    #[test]
    fn temperature_annealing() {
        let cfg = TrainConfig {
            episodes: 11,
            gumbel_temperature: 1.0,
            gumbel_temperature_final: Some(0.5),
            ..Default::default()
        };
        assert_eq!(cfg.temperature_at(0), 1.0);
        assert!((cfg.temperature_at(10) - 0.5).abs() < 1e-12);
        assert_eq!(TrainConfig::default().temperature_at(4000), 1.0);
    }

    #[test]
    fn train_config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig {
            tau_actor: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            batch_episodes: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
