//! Comparison policies: a centralized deep Q-network that picks the served
//! devices directly, a channel-blind heuristic driven by average SSIM
//! curves, and constrained configurations of the multi-agent learner.

use std::collections::VecDeque;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Action, Admission, Env, EpisodeMetrics, EpisodeTally, MdConfig, Observation, SystemConfig};
use crate::maddpg::{RatioPin, TrainConfig};
use crate::nn::{argmax, soft_update, Adam, BackwardScratch, Head, Mlp, Trace};
use crate::{Error, Result, SimRng};

/// Devices the server serves this slot, each with its compression ratio.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JointAction {
    /// `(device, ratio_index)` pairs in increasing device order.
    pub served: Vec<(usize, usize)>,
}

impl JointAction {
    pub fn devices(&self) -> Vec<usize> {
        self.served.iter().map(|&(k, _)| k).collect()
    }

    /// Per-device actions for the environment; bids are irrelevant under
    /// direct admission and set to zero.
    pub fn to_actions(&self, device_count: usize) -> Vec<Action> {
        let mut actions = vec![
            Action {
                bid: 0.0,
                ratio_index: 0
            };
            device_count
        ];
        for &(k, i) in &self.served {
            actions[k].ratio_index = i;
        }
        actions
    }
}

/// Default cap on the enumerated joint action space.
pub const DEFAULT_ACTION_CAP: usize = 4096;

/// Every subset of at most `capacity` devices crossed with ratio choices for
/// its members. Ordered by subset size, then lexicographically by device,
/// then by ratio index.
pub fn enumerate_joint_actions(ratio_counts: &[usize], capacity: usize, cap: usize) -> Result<Vec<JointAction>> {
    let mut size: usize = 0;
    let mut subsets = Vec::new();
    for r in 0..=capacity.min(ratio_counts.len()) {
        combinations(ratio_counts.len(), r, &mut Vec::new(), 0, &mut subsets);
    }
    for s in &subsets {
        let count = s
            .iter()
            .try_fold(1usize, |acc, &k| acc.checked_mul(ratio_counts[k]))
            .unwrap_or(usize::MAX);
        size = size.saturating_add(count);
    }
    if size > cap {
        return Err(Error::ActionSpaceTooLarge { size, cap });
    }
    let mut out = Vec::with_capacity(size);
    for subset in subsets {
        let mut choice = vec![0usize; subset.len()];
        loop {
            out.push(JointAction {
                served: subset.iter().copied().zip(choice.iter().copied()).collect(),
            });
            // Odometer over ratio indices, last device fastest.
            let mut pos = subset.len();
            loop {
                if pos == 0 {
                    break;
                }
                pos -= 1;
                choice[pos] += 1;
                if choice[pos] < ratio_counts[subset[pos]] {
                    break;
                }
                choice[pos] = 0;
                if pos == 0 {
                    pos = usize::MAX;
                    break;
                }
            }
            if subset.is_empty() || pos == usize::MAX {
                break;
            }
        }
    }
    Ok(out)
}

fn combinations(n: usize, r: usize, current: &mut Vec<usize>, start: usize, out: &mut Vec<Vec<usize>>) {
    if current.len() == r {
        out.push(current.clone());
        return;
    }
    for k in start..n {
        current.push(k);
        combinations(n, r, current, k + 1, out);
        current.pop();
    }
}

pub fn joint_actions_for(sys: &SystemConfig, cap: usize) -> Result<Vec<JointAction>> {
    let counts: Vec<usize> = sys.devices.iter().map(|d| d.ratios.len()).collect();
    enumerate_joint_actions(&counts, sys.server_capacity, cap)
}

/// Features per device in the global observation.
pub const GLOBAL_FEATURES_PER_DEVICE: usize = 3;

/// Slot, rate and entropy of every device; budgets are deliberately absent.
pub fn global_features(obs: &[Observation], sys: &SystemConfig) -> Vec<f64> {
    let mut out = Vec::with_capacity(obs.len() * GLOBAL_FEATURES_PER_DEVICE);
    for (o, md) in obs.iter().zip(&sys.devices) {
        out.push(o.slot as f64 / sys.horizon as f64);
        out.push((o.rate / md.full_payload()).min(4.0));
        out.push(o.entropy / (md.class_count as f64).ln());
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DqnConfig {
    pub episodes: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Episodes over which epsilon decays linearly.
    pub epsilon_decay_episodes: usize,
    pub lr: f64,
    /// Soft target-tracking rate.
    pub tau: f64,
    /// Replay capacity in transitions.
    pub buffer_capacity: usize,
    pub batch_size: usize,
    pub discount: f64,
    pub hidden_units: usize,
    pub action_cap: usize,
}

impl Default for DqnConfig {
    fn default() -> Self {
        Self {
            episodes: 5000,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay_episodes: 2500,
            lr: 1e-3,
            tau: 0.01,
            buffer_capacity: 20_000,
            batch_size: 64,
            discount: 1.0,
            hidden_units: 32,
            action_cap: DEFAULT_ACTION_CAP,
        }
    }
}

impl DqnConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} {v} outside [0, 1]")))
            }
        };
        unit("epsilon_start", self.epsilon_start)?;
        unit("epsilon_end", self.epsilon_end)?;
        unit("discount", self.discount)?;
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Config(format!("tau {} outside (0, 1]", self.tau)));
        }
        if self.episodes == 0 || self.buffer_capacity == 0 || self.batch_size == 0 || self.hidden_units == 0 {
            return Err(Error::Config("episodes, capacities and sizes must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("learning rate must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn epsilon_at(&self, episode: usize) -> f64 {
        if self.epsilon_decay_episodes == 0 {
            return self.epsilon_end;
        }
        if episode >= self.epsilon_decay_episodes {
            return self.epsilon_end;
        }
        let frac = episode as f64 / self.epsilon_decay_episodes as f64;
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * frac
    }
}

/// Epsilon-greedy choice over the enumerated joint actions; returns an index.
pub fn dqn_policy_step<R: Rng + ?Sized>(features: &[f64], net: &Mlp, epsilon: f64, rng: &mut R) -> Result<usize> {
    let n = net.output_dim();
    if epsilon > 0.0 && rng.random::<f64>() < epsilon {
        return Ok(rng.random_range(0..n));
    }
    Ok(argmax(&net.forward(features)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub terminal: bool,
}

/// Q-network, its tracking target and optimizer.
#[derive(Debug, Clone)]
pub struct QLearner {
    pub online: Mlp,
    pub target: Mlp,
    opt: Adam,
    discount: f64,
    tau: f64,
}

impl QLearner {
    pub fn new(online: Mlp, lr: f64, discount: f64, tau: f64) -> Self {
        Self {
            target: online.clone(),
            opt: Adam::new(&online, lr),
            online,
            discount,
            tau,
        }
    }

    pub fn q_values(&self, state: &[f64]) -> Result<Vec<f64>> {
        self.online.forward(state)
    }

    /// One optimizer step on the mean squared TD error, then a soft target
    /// update. Returns the loss before the step.
    pub fn td_update(&mut self, batch: &[&Transition]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let count = batch.len() as f64;
        let mut grads = self.online.zero_grads();
        let mut trace = Trace::default();
        let mut scratch = BackwardScratch::default();
        let mut input_grad = Vec::new();
        let mut upstream = vec![0.0; self.online.output_dim()];
        let mut loss = 0.0;
        for t in batch {
            let bootstrap = if t.terminal {
                0.0
            } else {
                self.target
                    .forward_trace(&t.next_state, &mut trace)?
                    .iter()
                    .copied()
                    .fold(f64::NEG_INFINITY, f64::max)
            };
            let target = t.reward + self.discount * bootstrap;
            let q = self.online.forward_trace(&t.state, &mut trace)?[t.action];
            let err = q - target;
            loss += err * err;
            upstream.iter_mut().for_each(|u| *u = 0.0);
            upstream[t.action] = 2.0 * err / count;
            self.online
                .backward_into(&trace, &upstream, Some(&mut grads), &mut input_grad, &mut scratch)?;
        }
        self.opt.step(&mut self.online, &grads)?;
        soft_update(&mut self.target, &self.online, self.tau)?;
        Ok(loss / count)
    }
}

/// Bounded FIFO of transitions.
#[derive(Debug, Clone)]
pub struct TransitionBuffer {
    items: VecDeque<Transition>,
    capacity: usize,
}

impl TransitionBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            items: VecDeque::with_capacity(capacity.min(1 << 16)),
            capacity,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn sample<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Vec<&Transition> {
        let len = self.items.len();
        if len == 0 {
            return Vec::new();
        }
        if len >= count {
            index::sample(rng, len, count)
                .into_iter()
                .map(|i| &self.items[i])
                .collect()
        } else {
            (0..count).map(|_| &self.items[rng.random_range(0..len)]).collect()
        }
    }
}

/// Centralized server-side scheduler.
#[derive(Debug, Clone)]
pub struct Dqn {
    pub learner: QLearner,
    pub actions: Vec<JointAction>,
    sys: SystemConfig,
    cfg: DqnConfig,
}

impl Dqn {
    pub fn new<R: Rng + ?Sized>(sys: SystemConfig, cfg: DqnConfig, rng: &mut R) -> Result<Self> {
        sys.validate()?;
        cfg.validate()?;
        let actions = joint_actions_for(&sys, cfg.action_cap)?;
        let net = Mlp::new(
            &[
                sys.device_count() * GLOBAL_FEATURES_PER_DEVICE,
                cfg.hidden_units,
                cfg.hidden_units,
                actions.len(),
            ],
            Head::Identity,
            rng,
        )?;
        Ok(Self {
            learner: QLearner::new(net, cfg.lr, cfg.discount, cfg.tau),
            actions,
            sys,
            cfg,
        })
    }

    /// Rebuilds a trained scheduler from its networks.
    pub fn from_nets(sys: SystemConfig, cfg: DqnConfig, online: Mlp, target: Mlp) -> Result<Self> {
        let mut dqn = Self::new(sys, cfg, &mut crate::stream_rng(0, crate::Stream::Init))?;
        if !online.same_architecture(&dqn.learner.online) || !target.same_architecture(&online) {
            return Err(Error::Architecture("Q-network does not match the configuration".into()));
        }
        dqn.learner.online = online;
        dqn.learner.target = target;
        dqn.learner.opt = Adam::new(&dqn.learner.online, dqn.cfg.lr);
        Ok(dqn)
    }

    pub fn config(&self) -> &DqnConfig {
        &self.cfg
    }

    pub fn choose<R: Rng + ?Sized>(&self, obs: &[Observation], epsilon: f64, rng: &mut R) -> Result<&JointAction> {
        let i = dqn_policy_step(&global_features(obs, &self.sys), &self.learner.online, epsilon, rng)?;
        Ok(&self.actions[i])
    }

    /// Plays one episode; with `learn` set, stores transitions and updates
    /// after every slot.
    pub fn run_episode(
        &mut self,
        env: &mut Env,
        episode: usize,
        epsilon: f64,
        buffer: Option<&mut TransitionBuffer>,
        rng: &mut SimRng,
    ) -> Result<EpisodeMetrics> {
        let k_count = self.sys.device_count();
        env.reset();
        let mut tally = EpisodeTally::new(k_count);
        let mut buffer = buffer;
        while !env.is_done() {
            let obs = env.observations();
            let state = global_features(&obs, &self.sys);
            let a = dqn_policy_step(&state, &self.learner.online, epsilon, rng)?;
            let joint = &self.actions[a];
            let devices = joint.devices();
            let result = env.step_with(&joint.to_actions(k_count), Admission::Direct(&devices))?;
            tally.record(&result);
            if let Some(buf) = buffer.as_deref_mut() {
                let next_state = global_features(&env.observations(), &self.sys);
                buf.push(Transition {
                    state,
                    action: a,
                    reward: result.rewards.iter().sum(),
                    next_state,
                    terminal: env.is_done(),
                });
                let batch = buf.sample(self.cfg.batch_size, rng);
                self.learner.td_update(&batch)?;
            }
        }
        Ok(tally.finish(episode))
    }
}

pub fn dqn_train(
    dqn: &mut Dqn,
    env: &mut Env,
    rng: &mut SimRng,
    mut on_episode: impl FnMut(&EpisodeMetrics) -> Result<()>,
) -> Result<Vec<EpisodeMetrics>> {
    let mut buffer = TransitionBuffer::new(dqn.cfg.buffer_capacity);
    let mut metrics = Vec::with_capacity(dqn.cfg.episodes);
    for t in 0..dqn.cfg.episodes {
        let eps = dqn.cfg.epsilon_at(t);
        let m = dqn.run_episode(env, t, eps, Some(&mut buffer), rng)?;
        on_episode(&m)?;
        metrics.push(m);
    }
    Ok(metrics)
}

/// A small finite MDP with a one-hot state encoding, used to check the
/// Q-learning machinery against value iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyMdp {
    /// `next[s][a]`.
    pub next: Vec<Vec<usize>>,
    /// `reward[s][a]`.
    pub reward: Vec<Vec<f64>>,
    pub discount: f64,
}

impl ToyMdp {
    /// Two states, two actions, deterministic dynamics.
    pub fn two_state() -> Self {
        Self {
            next: vec![vec![0, 1], vec![0, 1]],
            reward: vec![vec![0.1, 0.0], vec![1.0, 0.3]],
            discount: 0.5,
        }
    }

    pub fn state_count(&self) -> usize {
        self.next.len()
    }

    pub fn action_count(&self) -> usize {
        self.next[0].len()
    }

    pub fn encode(&self, s: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.state_count()];
        v[s] = 1.0;
        v
    }

    /// Optimal action values by value iteration.
    pub fn value_iteration(&self, tol: f64) -> Vec<Vec<f64>> {
        let (ns, na) = (self.state_count(), self.action_count());
        let mut q = vec![vec![0.0; na]; ns];
        loop {
            let v: Vec<f64> = q
                .iter()
                .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
                .collect();
            let mut delta: f64 = 0.0;
            for s in 0..ns {
                for a in 0..na {
                    let new = self.reward[s][a] + self.discount * v[self.next[s][a]];
                    delta = delta.max((new - q[s][a]).abs());
                    q[s][a] = new;
                }
            }
            if delta < tol {
                return q;
            }
        }
    }

    /// Learns Q from a uniformly random behavior policy.
    pub fn learn(&self, steps: usize, batch: usize, lr: f64, tau: f64, rng: &mut SimRng) -> Result<QLearner> {
        let net = Mlp::new(&[self.state_count(), 16, 16, self.action_count()], Head::Identity, rng)?;
        let mut learner = QLearner::new(net, lr, self.discount, tau);
        let mut buffer = TransitionBuffer::new(10_000);
        let mut s = 0;
        for _ in 0..steps {
            let a = rng.random_range(0..self.action_count());
            let s2 = self.next[s][a];
            buffer.push(Transition {
                state: self.encode(s),
                action: a,
                reward: self.reward[s][a],
                next_state: self.encode(s2),
                terminal: false,
            });
            let sample = buffer.sample(batch, rng);
            learner.td_update(&sample)?;
            s = s2;
        }
        Ok(learner)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SibConfig {
    /// SSIM ceiling the chosen ratio must respect on average.
    pub target_ssim: f64,
    /// Per-slot bid; `None` spreads the budget evenly over the horizon.
    #[serde(default)]
    pub bid: Option<f64>,
}

impl SibConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.target_ssim > 0.0 && self.target_ssim <= 1.0) {
            return Err(Error::Config(format!(
                "target SSIM {} outside (0, 1]",
                self.target_ssim
            )));
        }
        if let Some(b) = self.bid {
            if !(b >= 0.0 && b.is_finite()) {
                return Err(Error::Config(format!("SIB bid {b} must be nonnegative")));
            }
        }
        Ok(())
    }
}

/// Bid and ratio index of the heuristic for one device. The ratio is the
/// largest one whose average SSIM stays within the target, or the smallest
/// one when none does. No channel information enters.
pub fn sib_policy(md: &MdConfig, horizon: usize, cfg: &SibConfig) -> (f64, usize) {
    let bid = cfg.bid.unwrap_or(md.initial_budget / horizon as f64);
    let qualifying = md
        .ratios
        .iter()
        .enumerate()
        .filter(|(_, &r)| md.surrogate.ssim(r) <= cfg.target_ssim)
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i);
    let index = qualifying.unwrap_or_else(|| {
        md.ratios
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .expect("validated non-empty ratio set")
    });
    (bid, index)
}

/// Plays one heuristic episode with random admission among bidders.
pub fn sib_episode(env: &mut Env, cfg: &SibConfig, episode: usize) -> Result<EpisodeMetrics> {
    let sys = env.config().clone();
    let plan: Vec<(f64, usize)> = sys.devices.iter().map(|md| sib_policy(md, sys.horizon, cfg)).collect();
    env.reset();
    let mut tally = EpisodeTally::new(sys.device_count());
    while !env.is_done() {
        let actions: Vec<Action> = plan
            .iter()
            .enumerate()
            .map(|(k, &(bid, ratio_index))| Action {
                bid: bid.clamp(0.0, sys.devices[k].max_bid.min(env.state().budgets[k])),
                ratio_index,
            })
            .collect();
        let result = env.step_with(&actions, Admission::RandomAmongBidders)?;
        tally.record(&result);
    }
    Ok(tally.finish(episode))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VariantTag {
    /// Difficulty-agnostic: entropy hidden.
    Dd,
    /// Direct transmission: no compression.
    Dt,
    /// Fixed maximum compression.
    Mc,
}

impl std::str::FromStr for VariantTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dd" => Ok(Self::Dd),
            "dt" => Ok(Self::Dt),
            "mc" => Ok(Self::Mc),
            _ => Err(Error::UnknownVariant(s.to_string())),
        }
    }
}

/// Which ratio the fixed-compression variant uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum McReading {
    /// Smallest admissible ratio.
    #[default]
    MaxCompression,
    /// Largest admissible value, which coincides with direct transmission.
    LargestValue,
}

pub fn make_variant(base: &TrainConfig, tag: VariantTag, reading: McReading) -> TrainConfig {
    let mut cfg = base.clone();
    match tag {
        VariantTag::Dd => cfg.mask_entropy = true,
        VariantTag::Dt => cfg.ratio_pin = Some(RatioPin::Uncompressed),
        VariantTag::Mc => {
            cfg.ratio_pin = Some(match reading {
                McReading::MaxCompression => RatioPin::MaxCompression,
                McReading::LargestValue => RatioPin::LargestRatio,
            })
        }
    }
    cfg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn enumeration_counts() {
        assert_eq!(enumerate_joint_actions(&[4, 4], 1, 100).unwrap().len(), 9);
        assert_eq!(enumerate_joint_actions(&[4, 4], 2, 100).unwrap().len(), 25);
        let empty = enumerate_joint_actions(&[4, 4], 0, 100).unwrap();
        assert_eq!(empty, vec![JointAction { served: vec![] }]);
        assert!(matches!(
            enumerate_joint_actions(&[4, 4], 2, 24),
            Err(Error::ActionSpaceTooLarge { size: 25, cap: 24 })
        ));
    }

    #[test]
    fn enumeration_order_and_uniqueness() {
        let all = enumerate_joint_actions(&[2, 3], 2, 100).unwrap();
        assert_eq!(all[0].served, vec![]);
        assert_eq!(all[1].served, vec![(0, 0)]);
        assert_eq!(all[3].served, vec![(1, 0)]);
        assert_eq!(all[6].served, vec![(0, 0), (1, 0)]);
        assert_eq!(all[7].served, vec![(0, 0), (1, 1)]);
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                assert_ne!(all[i], all[j]);
            }
        }
    }

    #[test]
    fn epsilon_schedule() {
        let cfg = DqnConfig {
            epsilon_decay_episodes: 10,
            ..Default::default()
        };
        assert_eq!(cfg.epsilon_at(0), 1.0);
        assert!((cfg.epsilon_at(5) - 0.525).abs() < 1e-12);
        assert_eq!(cfg.epsilon_at(50), 0.05);
    }

    #[test]
    fn greedy_step_picks_table_max() {
        // A single linear layer on a one-hot input reads out a weight column.
        let mut net = Mlp::zeros(&[1, 3], Head::Identity).unwrap();
        net.params_mut()[..3].copy_from_slice(&[0.1, 0.9, 0.3]);
        let mut rng = crate::stream_rng(3, crate::Stream::Policy);
        for _ in 0..20 {
            assert_eq!(dqn_policy_step(&[1.0], &net, 0.0, &mut rng).unwrap(), 1);
        }
    }

    #[test]
    fn value_iteration_fixed_point() {
        let mdp = ToyMdp::two_state();
        let q = mdp.value_iteration(1e-14);
        // Optimal cycle 0 -> 1 -> 0 gives V1 = 1 + V0 / 2, V0 = V1 / 2.
        let expected = [[0.1 + 1.0 / 3.0, 2.0 / 3.0], [4.0 / 3.0, 0.3 + 2.0 / 3.0]];
        for s in 0..2 {
            for a in 0..2 {
                assert!((q[s][a] - expected[s][a]).abs() < 1e-12);
            }
        }
        for s in 0..2 {
            for a in 0..2 {
                let v_next = q[mdp.next[s][a]].iter().copied().fold(f64::NEG_INFINITY, f64::max);
                assert!((q[s][a] - (mdp.reward[s][a] + 0.5 * v_next)).abs() < 1e-12);
            }
        }
    }
}
