//! Training and evaluation of one algorithm on one seed, with artifacts.

use std::fs::{self, File};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::{
    dqn_train, make_variant, sib_episode, sib_policy, Dqn, DqnConfig, McReading, SibConfig, VariantTag,
};
use crate::env::{Action, Admission, Env, EpisodeMetrics, SystemConfig};
use crate::maddpg::{ActorNet, Agent, Maddpg, TrainConfig};
use crate::nn::{Mlp, NetDocument};
use crate::{stream_rng, Error, Result, Stream};

use super::config::{Algo, ExperimentConfig};
use super::stats::{mean, population_std, stderr};

/// Learning settings a run was produced with; enough to rebuild its policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub algo: Algo,
    pub seed: u64,
    pub episodes: usize,
    pub mc_reading: McReading,
    pub train: TrainConfig,
    pub dqn: DqnConfig,
    pub sib: SibConfig,
}

impl RunManifest {
    pub fn new(exp: &ExperimentConfig, algo: Algo, seed: u64) -> Self {
        let mut m = Self {
            algo,
            seed,
            episodes: 0,
            mc_reading: exp.mc_reading,
            train: maddpg_config(algo, &exp.train, exp.mc_reading),
            dqn: exp.dqn.clone(),
            sib: exp.sib,
        };
        m.episodes = m.episode_count();
        m
    }

    pub fn episode_count(&self) -> usize {
        match self.algo {
            Algo::Dqn => self.dqn.episodes,
            _ => self.train.episodes,
        }
    }

    /// Shortens training (sweeps run many configurations).
    pub fn with_overrides(mut self, episodes: Option<usize>, batch: Option<usize>) -> Self {
        if let Some(e) = episodes {
            self.train.episodes = e;
            self.dqn.episodes = e;
            self.dqn.epsilon_decay_episodes = self.dqn.epsilon_decay_episodes.min(e / 2);
        }
        if let Some(b) = batch {
            self.train.batch_episodes = b;
        }
        self.episodes = self.episode_count();
        self
    }
}

/// The learner configuration of an algorithm tag.
pub fn maddpg_config(algo: Algo, base: &TrainConfig, reading: McReading) -> TrainConfig {
    match algo {
        Algo::MaddpgDd => make_variant(base, VariantTag::Dd, reading),
        Algo::MaddpgDt => make_variant(base, VariantTag::Dt, reading),
        Algo::MaddpgMc => make_variant(base, VariantTag::Mc, reading),
        _ => base.clone(),
    }
}

#[derive(Debug, Clone)]
pub enum Policy {
    Maddpg(Box<Maddpg>),
    Dqn(Box<Dqn>),
    Sib(SibConfig),
}

impl Policy {
    /// A policy with freshly initialized networks.
    pub fn initial(manifest: &RunManifest, sys: &SystemConfig) -> Result<Self> {
        let mut init = stream_rng(manifest.seed, Stream::Init);
        Ok(match manifest.algo {
            Algo::Dqn => Policy::Dqn(Box::new(Dqn::new(sys.clone(), manifest.dqn.clone(), &mut init)?)),
            Algo::Sib => {
                manifest.sib.validate()?;
                Policy::Sib(manifest.sib)
            }
            _ => Policy::Maddpg(Box::new(Maddpg::new(sys.clone(), manifest.train.clone(), &mut init)?)),
        })
    }
}

/// Trains from scratch, reporting each episode's metrics to `on_episode`.
pub fn train_policy(
    manifest: &RunManifest,
    sys: &SystemConfig,
    mut on_episode: impl FnMut(&EpisodeMetrics) -> Result<()>,
) -> Result<(Policy, Vec<EpisodeMetrics>)> {
    let mut policy = Policy::initial(manifest, sys)?;
    let mut env = Env::new(sys.clone(), stream_rng(manifest.seed, Stream::Environment))?;
    let mut rng = stream_rng(manifest.seed, Stream::Policy);
    let metrics = match &mut policy {
        Policy::Maddpg(m) => m.train(&mut env, &mut rng, on_episode)?.metrics,
        Policy::Dqn(d) => dqn_train(d, &mut env, &mut rng, on_episode)?,
        Policy::Sib(cfg) => {
            let mut out = Vec::with_capacity(manifest.train.episodes);
            for t in 0..manifest.train.episodes {
                let m = sib_episode(&mut env, cfg, t)?;
                on_episode(&m)?;
                out.push(m);
            }
            out
        }
    };
    Ok((policy, metrics))
}

/// Streams [`EpisodeMetrics`] to CSV with a fixed column order.
pub struct MetricsWriter {
    writer: csv::Writer<File>,
    devices: usize,
    rows: usize,
}

pub const METRIC_FIELDS: [&str; 5] = ["reward", "accuracy", "ssim", "spent", "served"];

pub fn metrics_header(devices: usize) -> Vec<String> {
    let mut header = vec!["episode".to_string()];
    for k in 1..=devices {
        for f in METRIC_FIELDS {
            header.push(format!("{f}_{k}"));
        }
    }
    header
}

impl MetricsWriter {
    pub fn create(path: &Path, devices: usize) -> Result<Self> {
        let mut writer = csv::Writer::from_path(path)?;
        writer.write_record(metrics_header(devices))?;
        Ok(Self {
            writer,
            devices,
            rows: 0,
        })
    }

    pub fn write(&mut self, m: &EpisodeMetrics) -> Result<()> {
        let mut row = Vec::with_capacity(1 + 5 * self.devices);
        row.push(m.episode.to_string());
        for k in 0..self.devices {
            row.push(m.rewards[k].to_string());
            row.push(m.accuracy[k].to_string());
            row.push(m.ssim[k].to_string());
            row.push(m.spent[k].to_string());
            row.push(m.served[k].to_string());
        }
        self.writer.write_record(&row)?;
        self.rows += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<usize> {
        self.writer.flush()?;
        Ok(self.rows)
    }
}

/// Per-device aggregate over a training trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainDeviceSummary {
    pub device: usize,
    pub reward_first_window: f64,
    pub reward_last_window: f64,
    pub accuracy_last_window: f64,
    pub ssim_last_window: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub algo: Algo,
    pub seed: u64,
    pub episodes: usize,
    /// Episodes in the first/last comparison windows.
    pub window: usize,
    pub devices: Vec<TrainDeviceSummary>,
}

/// Trend window: 500 episodes, or a tenth of shorter runs.
pub fn trend_window(episodes: usize) -> usize {
    500.min((episodes / 10).max(1)).min(episodes)
}

pub fn summarize_training(algo: Algo, seed: u64, metrics: &[EpisodeMetrics]) -> TrainSummary {
    let n = metrics.len();
    let window = trend_window(n);
    let devices = metrics.first().map_or(0, |m| m.rewards.len());
    let field = |range: std::ops::Range<usize>, f: &dyn Fn(&EpisodeMetrics) -> f64| -> f64 {
        let xs: Vec<f64> = metrics[range].iter().map(f).collect();
        mean(&xs)
    };
    TrainSummary {
        algo,
        seed,
        episodes: n,
        window,
        devices: (0..devices)
            .map(|k| TrainDeviceSummary {
                device: k + 1,
                reward_first_window: field(0..window, &|m| m.rewards[k]),
                reward_last_window: field(n - window..n, &|m| m.rewards[k]),
                accuracy_last_window: field(n - window..n, &|m| m.accuracy[k]),
                ssim_last_window: field(n - window..n, &|m| m.ssim[k]),
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActorDocument {
    pub bid: NetDocument,
    pub ratio: NetDocument,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

fn save_actor(path: &Path, actor: &ActorNet) -> Result<()> {
    write_json(
        path,
        &ActorDocument {
            bid: actor.bid.to_document(),
            ratio: actor.ratio.to_document(),
        },
    )
}

fn load_actor(path: &Path) -> Result<ActorNet> {
    let doc: ActorDocument = read_json(path)?;
    Ok(ActorNet {
        bid: Mlp::from_document(&doc.bid)?,
        ratio: Mlp::from_document(&doc.ratio)?,
    })
}

/// Writes every online and target network under `dir`. Heuristic policies
/// have nothing to store.
pub fn save_checkpoints(policy: &Policy, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    match policy {
        Policy::Maddpg(m) => {
            fs::create_dir_all(dir)?;
            for (k, agent) in m.agents.iter().enumerate() {
                let n = k + 1;
                let files = [
                    dir.join(format!("actor_{n}.json")),
                    dir.join(format!("target_actor_{n}.json")),
                    dir.join(format!("critic_{n}.json")),
                    dir.join(format!("target_critic_{n}.json")),
                ];
                save_actor(&files[0], &agent.actor)?;
                save_actor(&files[1], &agent.target_actor)?;
                agent.critic.save(&files[2])?;
                agent.target_critic.save(&files[3])?;
                written.extend(files);
            }
        }
        Policy::Dqn(d) => {
            fs::create_dir_all(dir)?;
            let files = [dir.join("dqn.json"), dir.join("dqn_target.json")];
            d.learner.online.save(&files[0])?;
            d.learner.target.save(&files[1])?;
            written.extend(files);
        }
        Policy::Sib(_) => {}
    }
    Ok(written)
}

/// Rebuilds a policy from checkpoints, rejecting networks that do not fit
/// the configured system.
pub fn load_policy(manifest: &RunManifest, sys: &SystemConfig, dir: &Path) -> Result<Policy> {
    let mismatch = |e: Error| match e {
        Error::Architecture(msg) => Error::Checkpoint(format!("architecture mismatch: {msg}")),
        other => other,
    };
    Ok(match manifest.algo {
        Algo::Sib => Policy::Sib(manifest.sib),
        Algo::Dqn => {
            let online = Mlp::load(&dir.join("dqn.json"))?;
            let target = Mlp::load(&dir.join("dqn_target.json"))?;
            Policy::Dqn(Box::new(
                Dqn::from_nets(sys.clone(), manifest.dqn.clone(), online, target).map_err(mismatch)?,
            ))
        }
        _ => {
            let mut agents = Vec::with_capacity(sys.device_count());
            for n in 1..=sys.device_count() {
                let actor = load_actor(&dir.join(format!("actor_{n}.json")))?;
                let target_actor = load_actor(&dir.join(format!("target_actor_{n}.json")))?;
                let critic = Mlp::load(&dir.join(format!("critic_{n}.json")))?;
                let target_critic = Mlp::load(&dir.join(format!("target_critic_{n}.json")))?;
                agents.push(
                    Agent::from_nets(actor, critic, target_actor, target_critic, &manifest.train).map_err(mismatch)?,
                );
            }
            let extra = dir.join(format!("actor_{}.json", sys.device_count() + 1));
            if extra.exists() {
                return Err(Error::Checkpoint(format!(
                    "checkpoint holds more agents than the {} configured devices",
                    sys.device_count()
                )));
            }
            Policy::Maddpg(Box::new(
                Maddpg::with_agents(sys.clone(), manifest.train.clone(), agents).map_err(mismatch)?,
            ))
        }
    })
}

/// Everything `train` leaves behind.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub metrics: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub summary: TrainSummary,
}

pub const MANIFEST_FILE: &str = "run.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// Trains one algorithm on one seed and writes metrics, checkpoints,
/// manifest and summary into `out`.
pub fn run_train(
    exp: &ExperimentConfig,
    sys: &SystemConfig,
    manifest: &RunManifest,
    out: &Path,
) -> Result<RunArtifacts> {
    fs::create_dir_all(out)
        .map_err(|e| Error::Config(format!("cannot create output directory {}: {e}", out.display())))?;
    let metrics_path = out.join(METRICS_FILE);
    let mut writer = MetricsWriter::create(&metrics_path, sys.device_count())?;
    let (policy, metrics) = train_policy(manifest, sys, |m| writer.write(m))?;
    writer.finish()?;
    let checkpoints = save_checkpoints(&policy, &out.join(CHECKPOINT_DIR))?;
    write_json(&out.join(MANIFEST_FILE), manifest)?;
    let summary = summarize_training(manifest.algo, manifest.seed, &metrics);
    write_json(&out.join(SUMMARY_FILE), &summary)?;
    fs::write(out.join("config.toml"), exp.to_toml()?)?;
    Ok(RunArtifacts {
        dir: out.to_path_buf(),
        metrics: metrics_path,
        checkpoints,
        summary,
    })
}

/// Locates the manifest and checkpoint directory from either the run
/// directory or its checkpoint subdirectory.
pub fn open_run(path: &Path) -> Result<(RunManifest, PathBuf)> {
    for run_dir in [Some(path), path.parent()].into_iter().flatten() {
        let manifest_path = run_dir.join(MANIFEST_FILE);
        if manifest_path.is_file() {
            let manifest: RunManifest = read_json(&manifest_path)?;
            return Ok((manifest, run_dir.join(CHECKPOINT_DIR)));
        }
    }
    Err(Error::Checkpoint(format!(
        "no {MANIFEST_FILE} found at {}",
        path.display()
    )))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceEval {
    pub device: usize,
    pub accuracy_mean: f64,
    pub accuracy_stderr: f64,
    /// Mean SSIM over served slots; 0 when never served.
    pub ssim_mean: f64,
    pub ssim_stderr: f64,
    /// Spread of SSIM across served slots.
    pub ssim_slot_std: f64,
    pub served_fraction: f64,
    pub reward_mean: f64,
    pub reward_stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub algo: Algo,
    pub episodes: usize,
    pub no_data: bool,
    pub devices: Vec<DeviceEval>,
}

enum Choice {
    Auction(Vec<Action>),
    Random(Vec<Action>),
    Direct(Vec<Action>, Vec<usize>),
}

/// Runs the greedy policy on `episodes` fresh episodes drawn from the
/// evaluation stream of `seed`.
pub fn evaluate(policy: &Policy, algo: Algo, sys: &SystemConfig, episodes: usize, seed: u64) -> Result<EvalSummary> {
    if episodes == 0 {
        return Ok(EvalSummary {
            algo,
            episodes: 0,
            no_data: true,
            devices: Vec::new(),
        });
    }
    let k_count = sys.device_count();
    let mut env = Env::new(sys.clone(), stream_rng(seed, Stream::Evaluation))?;
    let mut rng = stream_rng(seed, Stream::Policy);
    let mut accuracy = vec![Vec::with_capacity(episodes); k_count];
    let mut rewards = vec![Vec::with_capacity(episodes); k_count];
    let mut slot_ssim: Vec<Vec<f64>> = vec![Vec::new(); k_count];
    let sib_plan: Option<Vec<(f64, usize)>> = match policy {
        Policy::Sib(cfg) => Some(sys.devices.iter().map(|md| sib_policy(md, sys.horizon, cfg)).collect()),
        _ => None,
    };
    for _ in 0..episodes {
        env.reset();
        let mut correct = vec![0usize; k_count];
        let mut reward = vec![0.0; k_count];
        while !env.is_done() {
            let obs = env.observations();
            let choice = match policy {
                Policy::Maddpg(m) => Choice::Auction((0..k_count).map(|k| m.act_greedy(k, &obs[k])).collect()),
                Policy::Dqn(d) => {
                    let joint = d.choose(&obs, 0.0, &mut rng)?;
                    Choice::Direct(joint.to_actions(k_count), joint.devices())
                }
                Policy::Sib(_) => {
                    let plan = sib_plan.as_ref().expect("plan built for heuristic");
                    Choice::Random(
                        plan.iter()
                            .enumerate()
                            .map(|(k, &(bid, ratio_index))| Action {
                                bid: bid.clamp(0.0, sys.devices[k].max_bid.min(obs[k].budget)),
                                ratio_index,
                            })
                            .collect(),
                    )
                }
            };
            let result = match &choice {
                Choice::Auction(a) => env.step_with(a, Admission::Auction)?,
                Choice::Random(a) => env.step_with(a, Admission::RandomAmongBidders)?,
                Choice::Direct(a, served) => env.step_with(a, Admission::Direct(served))?,
            };
            for k in 0..k_count {
                correct[k] += result.correct[k] as usize;
                reward[k] += result.rewards[k];
                if result.served[k] {
                    slot_ssim[k].push(result.privacy_leakage[k]);
                }
            }
        }
        for k in 0..k_count {
            accuracy[k].push(correct[k] as f64 / sys.horizon as f64);
            rewards[k].push(reward[k]);
        }
    }
    let total_slots = (episodes * sys.horizon) as f64;
    let devices = (0..k_count)
        .map(|k| {
            let served = &slot_ssim[k];
            DeviceEval {
                device: k + 1,
                accuracy_mean: mean(&accuracy[k]),
                accuracy_stderr: stderr(&accuracy[k]),
                ssim_mean: if served.is_empty() { 0.0 } else { mean(served) },
                ssim_stderr: stderr(served),
                ssim_slot_std: population_std(served),
                served_fraction: served.len() as f64 / total_slots,
                reward_mean: mean(&rewards[k]),
                reward_stderr: stderr(&rewards[k]),
            }
        })
        .collect();
    Ok(EvalSummary {
        algo,
        episodes,
        no_data: false,
        devices,
    })
}

/// Loads a run from `ckpt` and evaluates it; the summary is also written
/// next to the run as `eval.json`.
pub fn run_eval(sys: &SystemConfig, ckpt: &Path, episodes: usize) -> Result<EvalSummary> {
    let (manifest, dir) = open_run(ckpt)?;
    let policy = load_policy(&manifest, sys, &dir)?;
    let summary = evaluate(&policy, manifest.algo, sys, episodes, manifest.seed)?;
    if let Some(run_dir) = dir.parent() {
        write_json(&run_dir.join("eval.json"), &summary)?;
    }
    Ok(summary)
}
