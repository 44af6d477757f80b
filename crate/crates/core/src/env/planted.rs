use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{check_active, Environment, Episode, EpisodeConfig, HierAction, RewardWeights, Step};
use crate::judge::ScoresTriple;
use crate::rng::rng_from;
use crate::tinylm::PerturbationKind;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlantedConfig {
    pub n_categories: usize,
    pub emb_dim: usize,
    pub episode: EpisodeConfig,
    pub reward: RewardWeights,
    pub seed: u64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        Self {
            n_categories: 4,
            emb_dim: 64,
            episode: EpisodeConfig::default(),
            reward: RewardWeights::default(),
            seed: 0,
        }
    }
}

const BASELINE_F: f64 = 0.8;

/// Synthetic backend whose reward is `w_h * f(mag)` for the planted
/// (category, type) pair and zero otherwise, plus the usual bonus.
/// `f` is 1 at the planted magnitude and halves per index of distance.
pub struct PlantedEnv {
    cfg: PlantedConfig,
    pub target_category: usize,
    pub target_kind: PerturbationKind,
    pub target_magnitude: usize,
    emb: Vec<f64>,
    episode: Option<Episode>,
}

impl PlantedEnv {
    pub fn new(cfg: PlantedConfig) -> Result<Self> {
        if cfg.n_categories < 2 {
            return Err(Error::Config("planted env needs at least 2 categories".into()));
        }
        cfg.episode.validate()?;
        cfg.reward.validate()?;
        let mut rng = rng_from(&[cfg.seed, 0x91a7]);
        let target_category = rng.random_range(0..cfg.n_categories);
        let target_kind = PerturbationKind::ALL[rng.random_range(0..3)];
        let target_magnitude = rng.random_range(0..cfg.episode.magnitudes.len());
        let emb = (0..cfg.emb_dim).map(|_| rng.sample(StandardNormal)).collect();
        Ok(Self {
            cfg,
            target_category,
            target_kind,
            target_magnitude,
            emb,
            episode: None,
        })
    }

    pub fn magnitude_factor(&self, j: usize) -> f64 {
        0.5f64.powi(j.abs_diff(self.target_magnitude) as i32)
    }

    /// Hallucination score an action achieves from the baseline of 1.
    pub fn score_h(&self, a: HierAction) -> f64 {
        if a.category == self.target_category && a.kind == self.target_kind {
            1.0 - self.magnitude_factor(a.magnitude)
        } else {
            1.0
        }
    }

    pub fn baseline_scores() -> ScoresTriple {
        ScoresTriple {
            h: 1.0,
            r: 1.0,
            f: BASELINE_F,
        }
    }

    pub fn all_actions(&self) -> Vec<HierAction> {
        let mut out = Vec::new();
        for category in 0..self.cfg.n_categories {
            for kind in PerturbationKind::ALL {
                for magnitude in 0..self.cfg.episode.magnitudes.len() {
                    out.push(HierAction {
                        category,
                        kind,
                        magnitude,
                    });
                }
            }
        }
        out
    }
}

impl Environment for PlantedEnv {
    fn state_dim(&self) -> usize {
        self.cfg.emb_dim + 7
    }

    fn n_categories(&self) -> usize {
        self.cfg.n_categories
    }

    fn n_magnitudes(&self) -> usize {
        self.cfg.episode.magnitudes.len()
    }

    fn reset(&mut self, episode: u64) -> Result<Vec<f64>> {
        let ep = Episode::new(episode, 0, self.emb.clone(), Self::baseline_scores());
        let s = ep.state(self.cfg.episode.t_max);
        self.episode = Some(ep);
        Ok(s)
    }

    fn step(&mut self, action: HierAction) -> Result<Step> {
        check_active(&self.episode)?;
        action.check(self.n_categories(), self.n_magnitudes())?;
        let current = ScoresTriple {
            h: self.score_h(action),
            ..Self::baseline_scores()
        };
        let ep = self.episode.as_mut().expect("active");
        let (record, state) = ep.advance(action, current, Vec::new(), &self.cfg.episode, &self.cfg.reward);
        Ok(Step {
            state,
            reward: record.reward,
            done: record.done,
            record,
            answer_logits: None,
            mask_loss: None,
        })
    }
}
