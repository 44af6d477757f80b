use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::metrics::{write_csv, Manifest, MetricsRow, TimingRow};
use super::{RunConfig, RunMode, Stage1};
use crate::adamask::MaskParams;
use crate::env::{save_transitions, Environment, LmEnv, MaskMode, PlantedEnv, TransitionRecord};
use crate::hppo::{collect_rollouts, ppo_update, Agent};
use crate::records;
use crate::taskgen::BadCase;
use crate::{Error, Result};

/// Training variants compared by the ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    /// Uniform random strengths replace the learned, attribution-shaped mask.
    RandomMask,
    /// Uniform random actions replace the policy; the mask still trains.
    RandomAction,
    RandomBoth,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::RandomMask, Variant::RandomAction, Variant::RandomBoth];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::RandomMask => "random-mask",
            Variant::RandomAction => "random-action",
            Variant::RandomBoth => "random-both",
        }
    }

    pub fn random_actions(self) -> bool {
        matches!(self, Variant::RandomAction | Variant::RandomBoth)
    }

    pub fn random_mask(self) -> bool {
        matches!(self, Variant::RandomMask | Variant::RandomBoth)
    }

    pub fn train_mode(self) -> MaskMode {
        if self.random_mask() {
            MaskMode::Uniform
        } else {
            MaskMode::Sampled
        }
    }

    pub fn eval_mode(self) -> MaskMode {
        if self.random_mask() {
            MaskMode::Uniform
        } else {
            MaskMode::Mean
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::input(format!("unknown variant {s:?}")))
    }
}

pub enum Backend {
    Lm(Box<LmEnv>),
    Planted(PlantedEnv),
}

impl Backend {
    pub fn env(&mut self) -> &mut dyn Environment {
        match self {
            Backend::Lm(e) => e.as_mut(),
            Backend::Planted(e) => e,
        }
    }

    pub fn mask(&self) -> Option<&MaskParams> {
        match self {
            Backend::Lm(e) => Some(&e.mask),
            Backend::Planted(_) => None,
        }
    }
}

/// Everything needed to resume training exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub agent: Agent,
    pub mask: Option<MaskParams>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        records::save_container(path, "stage2-checkpoint", self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        records::load_container(path, "stage2-checkpoint")
    }
}

/// Builds the LM environment over `cases` with the given mask and mode.
pub fn lm_env(cfg: &RunConfig, stage1: &Stage1, cases: Vec<BadCase>, mask: MaskParams, mode: MaskMode) -> Result<LmEnv> {
    let mut env = LmEnv::new(
        Arc::new(stage1.weights.clone()),
        cases,
        cfg.judge_config(&stage1.world),
        cfg.category_spec(),
        mask,
        cfg.env_config(),
    )?;
    env.mode = mode;
    Ok(env)
}

/// Co-trains the agent and the mask against one backend.
pub struct Trainer {
    pub variant: Variant,
    pub backend: Backend,
    pub agent: Agent,
    pub horizon: usize,
    pub rows: Vec<MetricsRow>,
    pub timings: Vec<TimingRow>,
    pub transitions: Vec<TransitionRecord>,
}

impl Trainer {
    /// LM mode needs the Stage-1 artifacts; planted mode ignores them.
    pub fn new(cfg: &RunConfig, stage1: Option<&Stage1>, variant: Variant) -> Result<Self> {
        cfg.validate()?;
        let backend = match cfg.mode {
            RunMode::Lm => {
                let s1 = stage1.ok_or_else(|| Error::Config("LM mode needs stage-1 artifacts".into()))?;
                let mask = MaskParams::new(&cfg.category_spec(), cfg.mask)?;
                Backend::Lm(Box::new(lm_env(cfg, s1, s1.train.clone(), mask, variant.train_mode())?))
            }
            RunMode::Planted => Backend::Planted(PlantedEnv::new(cfg.planted_config())?),
        };
        let mut backend = backend;
        let env = backend.env();
        let agent = Agent::new(
            env.state_dim(),
            env.n_categories(),
            env.n_magnitudes(),
            cfg.ppo,
            cfg.agent_seed(),
        )?;
        Ok(Self {
            variant,
            backend,
            agent,
            horizon: cfg.ppo.horizon,
            rows: Vec::new(),
            timings: Vec::new(),
            transitions: Vec::new(),
        })
    }

    pub fn mask(&self) -> Option<&MaskParams> {
        self.backend.mask()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            agent: self.agent.clone(),
            mask: self.mask().cloned(),
        }
    }

    pub fn restore(&mut self, ck: Checkpoint) -> Result<()> {
        match (&mut self.backend, ck.mask) {
            (Backend::Lm(env), Some(m)) => {
                if m.theta.len() != env.mask.theta.len() {
                    return Err(Error::Load("checkpoint mask does not match categories".into()));
                }
                env.mask = m;
            }
            (Backend::Planted(_), None) => {}
            _ => return Err(Error::Load("checkpoint backend does not match run mode".into())),
        }
        if ck.agent.params.n_categories != self.agent.params.n_categories
            || ck.agent.params.state_dim() != self.agent.params.state_dim()
        {
            return Err(Error::Load("checkpoint agent does not match environment".into()));
        }
        self.agent = ck.agent;
        Ok(())
    }

    /// One rollout followed by one PPO update. Random-action variants skip
    /// the policy update but still count it.
    pub fn update_once(&mut self) -> Result<()> {
        let u = self.agent.updates;
        let t0 = Instant::now();
        let rollout = collect_rollouts(self.backend.env(), &mut self.agent, self.horizon, self.variant.random_actions())?;
        let collect_s = t0.elapsed().as_secs_f64();
        let t1 = Instant::now();
        let report = if self.variant.random_actions() {
            self.agent.updates += 1;
            None
        } else {
            Some(ppo_update(&mut self.agent, &rollout)?)
        };
        let ppo_s = t1.elapsed().as_secs_f64();
        if let Some(m) = self.mask() {
            if m.theta.iter().flatten().any(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!("mask parameters not finite after update {u}")));
            }
        }
        let mean_reward = rollout.steps.iter().map(|s| s.reward).sum::<f64>() / rollout.steps.len() as f64;
        for s in &rollout.steps {
            self.rows.push(MetricsRow::step(u, s));
            self.transitions.push(s.record.clone());
        }
        self.rows.push(MetricsRow::update(u, mean_reward, report.as_ref()));
        self.timings.push(TimingRow {
            update: u,
            collect_s,
            ppo_s,
        });
        Ok(())
    }

    /// Writes metrics, timings, transitions, and the final agent and mask.
    pub fn write_outputs(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_csv(&dir.join("metrics.csv"), &self.rows)?;
        write_csv(&dir.join("timing.csv"), &self.timings)?;
        save_transitions(&dir.join("transitions.jsonl"), &self.transitions)?;
        self.agent.save(&dir.join("agent.json"))?;
        if let Some(m) = self.mask() {
            records::save_container(&dir.join("mask.json"), "mask", m)?;
        }
        self.checkpoint().save(&dir.join("checkpoint.json"))
    }
}

/// Runs `stage2.updates` updates. If any update fails, the last good state
/// is written to `last_good.json` and the error is returned.
pub fn run_stage2(cfg: &RunConfig, stage1: Option<&Stage1>, variant: Variant, out: Option<&Path>) -> Result<Trainer> {
    let mut tr = Trainer::new(cfg, stage1, variant)?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Manifest::new(&format!("stage2 {}", variant.name()), cfg)?.save(&dir.join("manifest.json"))?;
    }
    let mut last_good = tr.checkpoint();
    for i in 0..cfg.stage2.updates {
        if let Err(e) = tr.update_once() {
            if let Some(dir) = out {
                last_good.save(&dir.join("last_good.json"))?;
                tr.write_outputs(dir)?;
            }
            return Err(Error::Training(format!("update {i} failed, last good state kept: {e}")));
        }
        last_good = tr.checkpoint();
        let every = cfg.stage2.checkpoint_every;
        if let Some(dir) = out {
            if every > 0 && (i + 1) % every == 0 {
                last_good.save(&dir.join(format!("checkpoint_{:05}.json", i + 1)))?;
            }
        }
    }
    if let Some(dir) = out {
        tr.write_outputs(dir)?;
    }
    Ok(tr)
}

pub fn load_mask(path: &Path) -> Result<MaskParams> {
    records::load_container(path, "mask")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn planted_cfg() -> RunConfig {
        let mut cfg = RunConfig {
            mode: RunMode::Planted,
            ..RunConfig::default()
        };
        cfg.planted.emb_dim = 8;
        cfg.ppo.horizon = 32;
        cfg.stage2.updates = 3;
        cfg
    }

    #[test]
    fn zero_updates_keeps_initialization() {
        let mut cfg = planted_cfg();
        cfg.stage2.updates = 0;
        let tr = run_stage2(&cfg, None, Variant::Full, None).unwrap();
        let fresh = Trainer::new(&cfg, None, Variant::Full).unwrap();
        assert_eq!(tr.agent, fresh.agent);
        assert!(tr.rows.is_empty());
    }

    #[test]
    fn one_row_per_step_plus_one_per_update() {
        let cfg = planted_cfg();
        let tr = run_stage2(&cfg, None, Variant::Full, None).unwrap();
        let steps = tr.rows.iter().filter(|r| r.kind == "step").count();
        let updates = tr.rows.iter().filter(|r| r.kind == "update").count();
        assert_eq!(updates, 3);
        assert_eq!(steps, tr.transitions.len());
        assert!(steps >= 3 * 32);
    }

    #[test]
    fn lm_mode_without_stage1_is_a_config_error() {
        let cfg = RunConfig::default();
        assert!(matches!(Trainer::new(&cfg, None, Variant::Full), Err(Error::Config(_))));
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("half".parse::<Variant>().is_err());
    }
}
