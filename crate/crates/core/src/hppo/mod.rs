//! Two-level PPO agent.
//!
//! The high level picks a neuron category from the state. The low level sees
//! the state plus a learned embedding of that category and picks a
//! perturbation type and a magnitude from two independent heads. Both levels
//! are trained on the same environment reward with their own critic.

mod gae;
mod loss;
mod net;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::env::{Environment, HierAction, Step};
use crate::optim::{Adam, AdamConfig};
use crate::records;
use crate::rng::rng_from;
use crate::tinylm::{argmax, softmax, PerturbationKind};
use crate::{Error, Result};

pub use gae::{compute_gae, normalize_advantages};
pub use loss::{clipped_surrogate, high_loss, low_loss, LossTerms};
pub use net::{orthogonal, Mlp};

pub const N_TYPES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    /// Both levels update after every rollout.
    Simultaneous,
    /// High level on even updates, low level on odd ones.
    Alternating,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub clip: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub lr_high: f64,
    pub lr_low: f64,
    pub d_a: usize,
    pub hidden: usize,
    /// Minimum transitions per rollout; episodes are never cut.
    pub horizon: usize,
    pub schedule: Schedule,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lambda: 0.95,
            clip: 0.2,
            value_coef: 0.5,
            entropy_coef: 0.01,
            epochs: 4,
            minibatch: 64,
            lr_high: 3e-4,
            lr_low: 3e-4,
            d_a: 8,
            hidden: 64,
            horizon: 256,
            schedule: Schedule::Simultaneous,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = [("gamma", self.gamma), ("lambda", self.lambda)];
        for (name, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} {v} outside [0, 1]")));
            }
        }
        if !(self.clip > 0.0) {
            return Err(Error::Config(format!("clip {} must be > 0", self.clip)));
        }
        if self.epochs == 0 || self.minibatch == 0 || self.horizon == 0 || self.hidden == 0 || self.d_a == 0 {
            return Err(Error::Config("epochs, minibatch, horizon, hidden and d_a must be >= 1".into()));
        }
        if !(self.lr_high > 0.0 && self.lr_low > 0.0) {
            return Err(Error::Config("learning rates must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub high_actor: Mlp,
    pub high_critic: Mlp,
    pub low_actor: Mlp,
    pub low_critic: Mlp,
    /// `n_categories x d_a`, row-major.
    pub embed: Vec<f64>,
    pub n_categories: usize,
    pub n_magnitudes: usize,
    pub d_a: usize,
}

impl PolicyParams {
    /// Actor output layers start at zero, so both initial policies are uniform.
    pub fn new(state_dim: usize, n_categories: usize, n_magnitudes: usize, cfg: &PpoConfig, seed: u64) -> Self {
        let mut rng = rng_from(&[seed, 0x9e7]);
        let h = cfg.hidden;
        let low_in = state_dim + cfg.d_a;
        Self {
            high_actor: Mlp::new(&[state_dim, h, h, n_categories], 0.0, &mut rng),
            high_critic: Mlp::new(&[state_dim, h, h, 1], 1.0, &mut rng),
            low_actor: Mlp::new(&[low_in, h, h, N_TYPES + n_magnitudes], 0.0, &mut rng),
            low_critic: Mlp::new(&[low_in, h, h, 1], 1.0, &mut rng),
            embed: (0..n_categories * cfg.d_a).map(|_| rng.sample(StandardNormal)).collect(),
            n_categories,
            n_magnitudes,
            d_a: cfg.d_a,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.high_actor.input_dim()
    }

    pub fn low_input(&self, state: &[f64], category: usize) -> Vec<f64> {
        let mut x = state.to_vec();
        x.extend_from_slice(&self.embed[category * self.d_a..(category + 1) * self.d_a]);
        x
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            high_actor: self.high_actor.zeros_like(),
            high_critic: self.high_critic.zeros_like(),
            low_actor: self.low_actor.zeros_like(),
            low_critic: self.low_critic.zeros_like(),
            embed: vec![0.0; self.embed.len()],
            ..*self
        }
    }

    pub fn high_buffers_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut v = self.high_actor.buffers_mut();
        v.extend(self.high_critic.buffers_mut());
        v
    }

    pub fn low_buffers_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut v = self.low_actor.buffers_mut();
        v.extend(self.low_critic.buffers_mut());
        v.push(&mut self.embed);
        v
    }

    /// High-level buffers first, then low-level ones.
    pub fn buffers(&self) -> Vec<&Vec<f64>> {
        let mut v = self.high_actor.buffers();
        v.extend(self.high_critic.buffers());
        v.extend(self.low_actor.buffers());
        v.extend(self.low_critic.buffers());
        v.push(&self.embed);
        v
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut v = self.high_actor.buffers_mut();
        v.extend(self.high_critic.buffers_mut());
        v.extend(self.low_actor.buffers_mut());
        v.extend(self.low_critic.buffers_mut());
        v.push(&mut self.embed);
        v
    }

    pub fn high_probs(&self, state: &[f64]) -> Vec<f64> {
        softmax(&self.high_actor.forward(state).0)
    }

    /// `(type probabilities, magnitude probabilities)` given the category.
    pub fn low_probs(&self, state: &[f64], category: usize) -> (Vec<f64>, Vec<f64>) {
        let (logits, _) = self.low_actor.forward(&self.low_input(state, category));
        (softmax(&logits[..N_TYPES]), softmax(&logits[N_TYPES..]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HighSample {
    pub state: Vec<f64>,
    pub action: usize,
    pub logp: f64,
    pub value: f64,
    pub reward: f64,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowSample {
    pub state: Vec<f64>,
    pub category: usize,
    pub kind: usize,
    pub magnitude: usize,
    pub logp: f64,
    pub value: f64,
    pub reward: f64,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HighAct {
    pub action: usize,
    pub logp: f64,
    pub value: f64,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LowAct {
    pub kind: usize,
    pub magnitude: usize,
    pub logp: f64,
    pub value: f64,
    pub type_probs: Vec<f64>,
    pub mag_probs: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Rollout {
    pub high: Vec<HighSample>,
    pub low: Vec<LowSample>,
    pub steps: Vec<Step>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateReport {
    pub high: LossTerms,
    pub low: LossTerms,
}

/// Parameters, optimizer state, and the counters that determine every
/// random draw. Saving and loading an agent resumes training exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub config: PpoConfig,
    pub params: PolicyParams,
    pub opt_high: Adam,
    pub opt_low: Adam,
    pub seed: u64,
    pub draws: u64,
    pub updates: u64,
    pub episodes: u64,
}

fn sample_index<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn check_finite(what: &str, xs: &[f64]) -> Result<()> {
    if xs.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite {what}")))
    }
}

impl Agent {
    pub fn new(state_dim: usize, n_categories: usize, n_magnitudes: usize, config: PpoConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = PolicyParams::new(state_dim, n_categories, n_magnitudes, &config, seed);
        let hs: Vec<usize> = params.high_buffers_mut().iter().map(|b| b.len()).collect();
        let ls: Vec<usize> = params.low_buffers_mut().iter().map(|b| b.len()).collect();
        Ok(Self {
            config,
            params,
            opt_high: Adam::new(AdamConfig::with_lr(config.lr_high), &hs),
            opt_low: Adam::new(AdamConfig::with_lr(config.lr_low), &ls),
            seed,
            draws: 0,
            updates: 0,
            episodes: 0,
        })
    }

    fn next_rng(&mut self) -> rand_chacha::ChaCha8Rng {
        self.draws += 1;
        rng_from(&[self.seed, self.draws, 0xac7])
    }

    /// Samples a category, or takes the argmax when `deterministic`.
    pub fn act_high(&mut self, state: &[f64], deterministic: bool) -> Result<HighAct> {
        let (logits, _) = self.params.high_actor.forward(state);
        check_finite("high-level logits", &logits)?;
        let probs = softmax(&logits);
        let action = if deterministic {
            argmax(&probs)
        } else {
            sample_index(&probs, &mut self.next_rng())
        };
        let value = self.params.high_critic.forward(state).0[0];
        Ok(HighAct {
            action,
            logp: probs[action].ln(),
            value,
            probs,
        })
    }

    pub fn act_low(&mut self, state: &[f64], category: usize, deterministic: bool) -> Result<LowAct> {
        if category >= self.params.n_categories {
            return Err(Error::input(format!("category {category} out of range")));
        }
        let x = self.params.low_input(state, category);
        let (logits, _) = self.params.low_actor.forward(&x);
        check_finite("low-level logits", &logits)?;
        let tp = softmax(&logits[..N_TYPES]);
        let mp = softmax(&logits[N_TYPES..]);
        let (kind, magnitude) = if deterministic {
            (argmax(&tp), argmax(&mp))
        } else {
            let mut rng = self.next_rng();
            (sample_index(&tp, &mut rng), sample_index(&mp, &mut rng))
        };
        let value = self.params.low_critic.forward(&x).0[0];
        Ok(LowAct {
            kind,
            magnitude,
            logp: tp[kind].ln() + mp[magnitude].ln(),
            value,
            type_probs: tp,
            mag_probs: mp,
        })
    }

    /// Deterministic action for evaluation.
    pub fn greedy_action(&mut self, state: &[f64]) -> Result<HierAction> {
        let h = self.act_high(state, true)?;
        let l = self.act_low(state, h.action, true)?;
        Ok(HierAction {
            category: h.action,
            kind: PerturbationKind::from_index(l.kind)?,
            magnitude: l.magnitude,
        })
    }

    pub fn to_checkpoint_string(&self) -> Result<String> {
        records::to_container_string("hppo-agent", self)
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Self> {
        records::from_container_str("hppo-agent", text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        records::save_container(path, "hppo-agent", self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        records::load_container(path, "hppo-agent")
    }
}

/// Runs whole episodes until at least `horizon` transitions are stored. With
/// `uniform` set, actions are drawn uniformly instead of from the policy (the
/// stored log-probabilities are then those of the uniform policy).
pub fn collect_rollouts(env: &mut dyn Environment, agent: &mut Agent, horizon: usize, uniform: bool) -> Result<Rollout> {
    if horizon == 0 {
        return Err(Error::input("rollout horizon must be positive"));
    }
    let mut out = Rollout::default();
    let n_h = env.n_categories();
    let n_m = env.n_magnitudes();
    while out.high.len() < horizon {
        let episode = agent.episodes;
        agent.episodes += 1;
        let mut state = env.reset(episode)?;
        loop {
            let mut h = agent.act_high(&state, false)?;
            let mut l = agent.act_low(&state, h.action, false)?;
            if uniform {
                let mut rng = agent.next_rng();
                h.action = rng.random_range(0..n_h);
                l = agent.act_low(&state, h.action, false)?;
                l.kind = rng.random_range(0..N_TYPES);
                l.magnitude = rng.random_range(0..n_m);
                h.logp = -(n_h as f64).ln();
                l.logp = -((N_TYPES * n_m) as f64).ln();
            }
            let action = HierAction {
                category: h.action,
                kind: PerturbationKind::from_index(l.kind)?,
                magnitude: l.magnitude,
            };
            let step = env
                .step(action)
                .map_err(|e| Error::State(format!("episode {episode}: {e}")))?;
            out.high.push(HighSample {
                state: state.clone(),
                action: h.action,
                logp: h.logp,
                value: h.value,
                reward: step.reward,
                done: step.done,
            });
            out.low.push(LowSample {
                state,
                category: h.action,
                kind: l.kind,
                magnitude: l.magnitude,
                logp: l.logp,
                value: l.value,
                reward: step.reward,
                done: step.done,
            });
            state = step.state.clone();
            let done = step.done;
            out.steps.push(step);
            if done {
                break;
            }
        }
    }
    Ok(out)
}

fn advantages(rewards: &[f64], values: &[f64], dones: &[bool], cfg: &PpoConfig) -> (Vec<f64>, Vec<f64>) {
    let mut v = values.to_vec();
    v.push(0.0);
    let (mut adv, ret) = compute_gae(rewards, &v, dones, cfg.gamma, cfg.lambda);
    normalize_advantages(&mut adv);
    (adv, ret)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Level {
    High,
    Low,
}

fn update_level(agent: &mut Agent, rollout: &Rollout, level: Level) -> Result<LossTerms> {
    let cfg = agent.config;
    let (rewards, values, dones): (Vec<f64>, Vec<f64>, Vec<bool>) = match level {
        Level::High => (
            rollout.high.iter().map(|s| s.reward).collect(),
            rollout.high.iter().map(|s| s.value).collect(),
            rollout.high.iter().map(|s| s.done).collect(),
        ),
        Level::Low => (
            rollout.low.iter().map(|s| s.reward).collect(),
            rollout.low.iter().map(|s| s.value).collect(),
            rollout.low.iter().map(|s| s.done).collect(),
        ),
    };
    let n = rewards.len();
    let (adv, ret) = advantages(&rewards, &values, &dones, &cfg);
    let tag = if level == Level::High { 1 } else { 2 };
    let mut rng = rng_from(&[agent.seed, agent.updates, tag, 0x5f]);
    let mut idx: Vec<usize> = (0..n).collect();
    let mut report = LossTerms::default();
    let mut batches = 0usize;
    for epoch in 0..cfg.epochs {
        idx.shuffle(&mut rng);
        for chunk in idx.chunks(cfg.minibatch) {
            let a: Vec<f64> = chunk.iter().map(|&i| adv[i]).collect();
            let r: Vec<f64> = chunk.iter().map(|&i| ret[i]).collect();
            let mut g = agent.params.zeros_like();
            let terms = match level {
                Level::High => {
                    let b: Vec<&HighSample> = chunk.iter().map(|&i| &rollout.high[i]).collect();
                    high_loss(&agent.params, &b, &a, &r, &cfg, Some(&mut g))
                }
                Level::Low => {
                    let b: Vec<&LowSample> = chunk.iter().map(|&i| &rollout.low[i]).collect();
                    low_loss(&agent.params, &b, &a, &r, &cfg, Some(&mut g))
                }
            };
            if !terms.is_finite() {
                return Err(Error::Numeric(format!(
                    "{} loss not finite in epoch {epoch} of update {}: {terms:?}",
                    if level == Level::High { "high-level" } else { "low-level" },
                    agent.updates
                )));
            }
            report.add(&terms, 1.0);
            batches += 1;
            let (grads, params, opt) = match level {
                Level::High => {
                    let grads: Vec<Vec<f64>> = g.high_buffers_mut().into_iter().map(|b| b.clone()).collect();
                    (grads, agent.params.high_buffers_mut(), &mut agent.opt_high)
                }
                Level::Low => {
                    let grads: Vec<Vec<f64>> = g.low_buffers_mut().into_iter().map(|b| b.clone()).collect();
                    (grads, agent.params.low_buffers_mut(), &mut agent.opt_low)
                }
            };
            opt.step(
                params.into_iter().map(|b| &mut b[..]).collect(),
                grads.iter().map(|g| &g[..]).collect(),
            );
        }
    }
    let mut mean = LossTerms::default();
    mean.add(&report, 1.0 / batches.max(1) as f64);
    Ok(mean)
}

/// K epochs of clipped-surrogate minibatch updates on the levels scheduled
/// for this update. On a non-finite loss the agent is left unchanged.
pub fn ppo_update(agent: &mut Agent, rollout: &Rollout) -> Result<UpdateReport> {
    if rollout.high.is_empty() || rollout.high.len() != rollout.low.len() {
        return Err(Error::input("ppo_update needs matching non-empty buffers"));
    }
    let snapshot = agent.clone();
    let (do_high, do_low) = match agent.config.schedule {
        Schedule::Simultaneous => (true, true),
        Schedule::Alternating => (agent.updates % 2 == 0, agent.updates % 2 == 1),
    };
    let mut report = UpdateReport::default();
    let result = (|| {
        if do_high {
            report.high = update_level(agent, rollout, Level::High)?;
        }
        if do_low {
            report.low = update_level(agent, rollout, Level::Low)?;
        }
        Ok(())
    })();
    if let Err(e) = result {
        *agent = snapshot;
        return Err(e);
    }
    agent.updates += 1;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{PlantedConfig, PlantedEnv};

    fn planted(seed: u64) -> PlantedEnv {
        PlantedEnv::new(PlantedConfig {
            emb_dim: 8,
            seed,
            ..PlantedConfig::default()
        })
        .unwrap()
    }

    fn agent(env: &PlantedEnv) -> Agent {
        Agent::new(env.state_dim(), 4, 4, PpoConfig::default(), 1).unwrap()
    }

    #[test]
    fn initial_policies_are_uniform() {
        let env = planted(0);
        let mut a = agent(&env);
        let s = vec![0.3; env.state_dim()];
        let h = a.act_high(&s, false).unwrap();
        assert!(h.probs.iter().all(|p| (p - 0.25).abs() < 1e-15));
        let l = a.act_low(&s, 2, false).unwrap();
        assert!(l.type_probs.iter().all(|p| (p - 1.0 / 3.0).abs() < 1e-15));
        assert!(l.mag_probs.iter().all(|p| (p - 0.25).abs() < 1e-15));
        assert_eq!(a.act_high(&s, true).unwrap().action, a.act_high(&s, true).unwrap().action);
        assert_ne!(a.params.low_input(&s, 0), a.params.low_input(&s, 1));
    }

    #[test]
    fn one_episode_rollout_has_t_max_transitions() {
        let mut cfg = PlantedConfig {
            emb_dim: 8,
            ..PlantedConfig::default()
        };
        // no early stop, so the episode always runs to t_max
        cfg.episode.stop_h = -1.0;
        let mut env = PlantedEnv::new(cfg).unwrap();
        let mut a = agent(&env);
        let r = collect_rollouts(&mut env, &mut a, 8, false).unwrap();
        assert_eq!(r.high.len(), 8);
        assert_eq!(r.low.len(), 8);
        assert!(r.high[7].done && !r.high[6].done);
        assert_eq!(a.episodes, 1);
    }

    #[test]
    fn rollouts_are_deterministic() {
        let mut e1 = planted(3);
        let mut e2 = planted(3);
        let mut a1 = agent(&e1);
        let mut a2 = agent(&e2);
        let r1 = collect_rollouts(&mut e1, &mut a1, 64, false).unwrap();
        let r2 = collect_rollouts(&mut e2, &mut a2, 64, false).unwrap();
        assert_eq!(r1.high, r2.high);
        assert_eq!(r1.low, r2.low);
    }

    #[test]
    fn update_changes_params_and_nan_rolls_back() {
        let mut env = planted(4);
        let mut a = agent(&env);
        let r = collect_rollouts(&mut env, &mut a, 64, false).unwrap();
        let before = a.params.clone();
        ppo_update(&mut a, &r).unwrap();
        assert_ne!(a.params, before);
        assert_eq!(a.updates, 1);

        let mut bad = r.clone();
        bad.high[0].reward = f64::NAN;
        bad.low[0].reward = f64::NAN;
        let snap = a.clone();
        assert!(matches!(ppo_update(&mut a, &bad), Err(Error::Numeric(_))));
        assert_eq!(a, snap);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut env = planted(5);
        let mut a = agent(&env);
        let r = collect_rollouts(&mut env, &mut a, 32, false).unwrap();
        ppo_update(&mut a, &r).unwrap();
        let text = a.to_checkpoint_string().unwrap();
        let b = Agent::from_checkpoint_str(&text).unwrap();
        assert_eq!(a, b);
        assert_eq!(b.to_checkpoint_string().unwrap(), text);
    }
}
