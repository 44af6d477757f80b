//! Perturbation environment: state, hierarchical actions, reward, episodes.
//!
//! Two backends share the [`Environment`] interface. [`LmEnv`] perturbs the
//! tiny transformer on mined bad cases; [`PlantedEnv`] has an analytic reward
//! with a known optimum and is used to check the agent.

mod lm;
mod planted;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adamask::{CategorySpec, MaskLoss};
use crate::judge::ScoresTriple;
use crate::records;
use crate::tinylm::{Intervention, PerturbationKind, SiteStrength};
use crate::{Error, Result};

pub use lm::{LmEnv, LmEnvConfig, MaskMode};
pub use planted::{PlantedConfig, PlantedEnv};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HierAction {
    pub category: usize,
    pub kind: PerturbationKind,
    pub magnitude: usize,
}

impl HierAction {
    pub fn check(&self, n_categories: usize, n_magnitudes: usize) -> Result<()> {
        if self.category >= n_categories {
            return Err(Error::input(format!("category {} >= {n_categories}", self.category)));
        }
        if self.magnitude >= n_magnitudes {
            return Err(Error::input(format!("magnitude index {} >= {n_magnitudes}", self.magnitude)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardWeights {
    pub w_h: f64,
    pub w_r: f64,
    pub w_f: f64,
    pub beta_exp: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            w_h: 1.0,
            w_r: 0.3,
            w_f: 0.3,
            beta_exp: 0.05,
        }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.w_h, self.w_r, self.w_f, self.beta_exp];
        if all.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Config(format!("reward weights must be >= 0: {all:?}")));
        }
        if self.w_h + self.w_r + self.w_f == 0.0 {
            return Err(Error::Config("reward weights are all zero".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeConfig {
    pub t_max: usize,
    /// The episode ends once `score_h` is at or below this value.
    pub stop_h: f64,
    pub magnitudes: Vec<f64>,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            t_max: 8,
            stop_h: 0.0,
            magnitudes: vec![0.25, 0.5, 1.0, 2.0],
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_max == 0 {
            return Err(Error::Config("t_max must be >= 1".into()));
        }
        if self.magnitudes.is_empty() || self.magnitudes.iter().any(|m| !(*m > 0.0 && m.is_finite())) {
            return Err(Error::Config(format!("magnitudes must be positive: {:?}", self.magnitudes)));
        }
        if self.magnitudes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("magnitudes must increase strictly: {:?}", self.magnitudes)));
        }
        Ok(())
    }
}

/// `emb ++ baseline ++ best ++ [steps_norm]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub emb: Vec<f64>,
    pub baseline: ScoresTriple,
    pub best: ScoresTriple,
    pub steps_norm: f64,
}

impl EnvState {
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.emb.clone();
        v.extend(self.baseline.to_array());
        v.extend(self.best.to_array());
        v.push(self.steps_norm);
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reward {
    pub total: f64,
    pub bonus: f64,
}

/// Weighted score change relative to the baseline plus the exploration bonus.
/// `novel` says whether the action's (category, type) pair is new this
/// episode; `best` is the best triple before this step.
pub fn compute_reward(
    baseline: ScoresTriple,
    current: ScoresTriple,
    best: ScoresTriple,
    novel: bool,
    w: &RewardWeights,
) -> Reward {
    let dh = baseline.h - current.h;
    let dr = current.r - baseline.r;
    let df = current.f - baseline.f;
    let bonus = if novel && current.h >= best.h { w.beta_exp } else { 0.0 };
    Reward {
        total: w.w_h * dh + w.w_r * dr + w.w_f * df + bonus,
        bonus,
    }
}

/// Builds the intervention for one step over the sites of category `k`.
/// `m_op` is aligned with `spec.sites(k)`.
pub fn apply_perturbation(
    spec: &CategorySpec,
    k: usize,
    kind: PerturbationKind,
    magnitude: f64,
    m_op: &[f64],
    layer_sigma: &[f64],
    rng_seed: u64,
) -> Result<Intervention> {
    if k >= spec.len() {
        return Err(Error::input(format!("category {k} >= {}", spec.len())));
    }
    if !(magnitude > 0.0) {
        return Err(Error::input(format!("magnitude {magnitude} must be > 0")));
    }
    let sites = spec.sites(k);
    if sites.len() != m_op.len() {
        return Err(Error::input(format!(
            "category {k} has {} sites but M_op has {}",
            sites.len(),
            m_op.len()
        )));
    }
    Ok(Intervention {
        sites: sites
            .into_iter()
            .zip(m_op)
            .map(|(site, &strength)| SiteStrength { site, strength })
            .collect(),
        kind,
        magnitude,
        rng_seed,
        layer_sigma: layer_sigma.to_vec(),
    })
}

/// One logged environment step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub episode: u64,
    pub case_id: usize,
    pub t: usize,
    pub action: HierAction,
    pub baseline: ScoresTriple,
    pub current: ScoresTriple,
    pub best_before: ScoresTriple,
    pub reward: f64,
    pub bonus: bool,
    pub done: bool,
    pub output: Vec<u32>,
}

pub fn save_transitions(path: &Path, log: &[TransitionRecord]) -> Result<()> {
    records::write_records(path, "transitions", log)
}

pub fn load_transitions(path: &Path) -> Result<Vec<TransitionRecord>> {
    records::read_records(path, "transitions")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub state: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    pub record: TransitionRecord,
    /// Answer-position logits under the intervention (model backend only).
    pub answer_logits: Option<Vec<f64>>,
    /// Set on the step that ends an episode when the mask was updated.
    pub mask_loss: Option<MaskLoss>,
}

pub trait Environment {
    fn state_dim(&self) -> usize;
    fn n_categories(&self) -> usize;
    fn n_magnitudes(&self) -> usize;
    /// Starts episode `episode`; the backend picks the case from it.
    fn reset(&mut self, episode: u64) -> Result<Vec<f64>>;
    fn step(&mut self, action: HierAction) -> Result<Step>;
}

/// Shared per-episode bookkeeping: step counter, best scores, tried pairs.
#[derive(Debug, Clone)]
struct Episode {
    id: u64,
    case_id: usize,
    emb: Vec<f64>,
    baseline: ScoresTriple,
    best: ScoresTriple,
    t: usize,
    tried: Vec<(usize, PerturbationKind)>,
    done: bool,
    total_reward: f64,
}

impl Episode {
    fn new(id: u64, case_id: usize, emb: Vec<f64>, baseline: ScoresTriple) -> Self {
        Self {
            id,
            case_id,
            emb,
            baseline,
            best: baseline,
            t: 0,
            tried: Vec::new(),
            done: false,
            total_reward: 0.0,
        }
    }

    fn state(&self, t_max: usize) -> Vec<f64> {
        EnvState {
            emb: self.emb.clone(),
            baseline: self.baseline,
            best: self.best,
            steps_norm: self.t as f64 / t_max as f64,
        }
        .to_vec()
    }

    /// Scores a step's outcome and advances the episode.
    fn advance(
        &mut self,
        action: HierAction,
        current: ScoresTriple,
        output: Vec<u32>,
        ep: &EpisodeConfig,
        w: &RewardWeights,
    ) -> (TransitionRecord, Vec<f64>) {
        let pair = (action.category, action.kind);
        let novel = !self.tried.contains(&pair);
        if novel {
            self.tried.push(pair);
        }
        let best_before = self.best;
        let r = compute_reward(self.baseline, current, best_before, novel, w);
        self.best = best_before.best(current);
        self.t += 1;
        self.done = self.t == ep.t_max || current.h <= ep.stop_h;
        self.total_reward += r.total;
        let rec = TransitionRecord {
            episode: self.id,
            case_id: self.case_id,
            t: self.t - 1,
            action,
            baseline: self.baseline,
            current,
            best_before,
            reward: r.total,
            bonus: r.bonus > 0.0,
            done: self.done,
            output,
        };
        (rec, self.state(ep.t_max))
    }
}

fn check_active(ep: &Option<Episode>) -> Result<()> {
    match ep {
        None => Err(Error::State("step called before reset".into())),
        Some(e) if e.done => Err(Error::State(format!("episode {} is done", e.id))),
        Some(_) => Ok(()),
    }
}
