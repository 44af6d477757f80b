use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{apply_perturbation, check_active, Environment, Episode, EpisodeConfig, HierAction, RewardWeights, Step};
use crate::adamask::{operational_mask, sample_gates, CategorySpec, GateRecord, MaskParams};
use crate::attribution::{integrated_gradients, normalize_attr};
use crate::judge::{JudgeConfig, ScoresTriple};
use crate::rng::{derive_seed, rng_from};
use crate::taskgen::BadCase;
use crate::tinylm::{argmax, embed_input, forward, forward_with_intervention, sequence_logprob, Weights};
use crate::{Error, Result};

/// How per-site strengths are formed from the learned mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// Bernoulli gates times attribution; the mask is updated after each episode.
    Sampled,
    /// Gate strengths times attribution, no sampling, no updates.
    Mean,
    /// Uniform random strengths each step; attribution is not used.
    Uniform,
    /// All strengths zero.
    Off,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmEnvConfig {
    pub episode: EpisodeConfig,
    pub reward: RewardWeights,
    pub ig_steps: usize,
    pub seed: u64,
}

impl Default for LmEnvConfig {
    fn default() -> Self {
        Self {
            episode: EpisodeConfig::default(),
            reward: RewardWeights::default(),
            ig_steps: 16,
            seed: 0,
        }
    }
}

struct CaseCache {
    emb: Vec<f64>,
    baseline: ScoresTriple,
    baseline_logits: Vec<f64>,
    sigma: Vec<f64>,
    attr_norm: Vec<Vec<f64>>,
    fluency: HashMap<u32, f64>,
}

/// Environment over a pool of bad cases of the tiny model.
pub struct LmEnv {
    weights: Arc<Weights>,
    cases: Vec<BadCase>,
    judge: JudgeConfig,
    spec: CategorySpec,
    cfg: LmEnvConfig,
    pub mask: MaskParams,
    pub mode: MaskMode,
    /// Keep only the `n` strongest entries of the operational mask.
    pub neuron_limit: Option<usize>,
    cache: Vec<Option<CaseCache>>,
    episode: Option<Episode>,
    gates: Vec<GateRecord>,
}

impl LmEnv {
    pub fn new(
        weights: Arc<Weights>,
        cases: Vec<BadCase>,
        judge: JudgeConfig,
        spec: CategorySpec,
        mask: MaskParams,
        cfg: LmEnvConfig,
    ) -> Result<Self> {
        if cases.is_empty() {
            return Err(Error::Config("environment needs at least one bad case".into()));
        }
        if cfg.ig_steps == 0 {
            return Err(Error::Config("ig_steps must be >= 1".into()));
        }
        cfg.episode.validate()?;
        cfg.reward.validate()?;
        judge.validate()?;
        spec.validate(&weights.config)?;
        if mask.theta.len() != spec.len() || (0..spec.len()).any(|k| mask.theta[k].len() != spec.size(k)) {
            return Err(Error::Config("mask shape does not match categories".into()));
        }
        let n = cases.len();
        Ok(Self {
            weights,
            cases,
            judge,
            spec,
            cfg,
            mask,
            mode: MaskMode::Sampled,
            neuron_limit: None,
            cache: (0..n).map(|_| None).collect(),
            episode: None,
            gates: Vec::new(),
        })
    }

    pub fn cases(&self) -> &[BadCase] {
        &self.cases
    }

    pub fn spec(&self) -> &CategorySpec {
        &self.spec
    }

    pub fn config(&self) -> &LmEnvConfig {
        &self.cfg
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    fn ensure_cache(&mut self, idx: usize) -> Result<()> {
        if self.cache[idx].is_some() {
            return Ok(());
        }
        let w = &*self.weights;
        let case = &self.cases[idx];
        let (logits, trace) = forward(w, &case.prompt)?;
        let answer = argmax(&logits) as u32;
        let mut fluency = HashMap::new();
        let baseline = score(&self.judge, w, case, answer, &mut fluency)?;
        let attr = integrated_gradients(w, &case.prompt, answer, self.cfg.ig_steps)?;
        self.cache[idx] = Some(CaseCache {
            emb: embed_input(w, &case.prompt)?,
            baseline,
            baseline_logits: logits,
            sigma: trace.sigma,
            attr_norm: normalize_attr(&attr),
            fluency,
        });
        Ok(())
    }

    /// Answer-position logits of the unperturbed model.
    pub fn baseline_logits(&mut self, idx: usize) -> Result<Vec<f64>> {
        self.ensure_cache(idx)?;
        Ok(self.cache[idx].as_ref().map(|c| c.baseline_logits.clone()).unwrap_or_default())
    }

    pub fn reset_case(&mut self, idx: usize, episode: u64) -> Result<Vec<f64>> {
        if idx >= self.cases.len() {
            return Err(Error::input(format!("case index {idx} >= {}", self.cases.len())));
        }
        self.ensure_cache(idx)?;
        let c = self.cache[idx].as_ref().expect("cache filled");
        let ep = Episode::new(episode, self.cases[idx].id, c.emb.clone(), c.baseline);
        let state = ep.state(self.cfg.episode.t_max);
        self.episode = Some(ep);
        self.gates.clear();
        Ok(state)
    }

    fn strengths(&self, idx: usize, k: usize, episode: u64, t: usize) -> Result<(Vec<f64>, Option<Vec<bool>>)> {
        let c = self.cache[idx].as_ref().expect("cache filled");
        let attr: Vec<f64> = self
            .spec
            .sites(k)
            .iter()
            .map(|s| c.attr_norm[s.layer][s.neuron])
            .collect();
        let seed = self.cfg.seed;
        Ok(match self.mode {
            MaskMode::Sampled => {
                let m = self.mask.strengths(k);
                let (b, _) = sample_gates(&m, &mut rng_from(&[seed, episode, t as u64, 0x6a7e]));
                let gate: Vec<f64> = b.iter().map(|&x| f64::from(u8::from(x))).collect();
                (operational_mask(&gate, &attr)?, Some(b))
            }
            MaskMode::Mean => (operational_mask(&self.mask.strengths(k), &attr)?, None),
            MaskMode::Uniform => {
                let mut rng = rng_from(&[seed, episode, t as u64, 0x0b5]);
                ((0..attr.len()).map(|_| rng.random::<f64>()).collect(), None)
            }
            MaskMode::Off => (vec![0.0; attr.len()], None),
        })
    }
}

/// Zeroes all but the `n` largest entries; ties keep the lower index.
pub(crate) fn keep_top(values: &mut [f64], n: usize) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    for &i in order.iter().skip(n) {
        values[i] = 0.0;
    }
}

fn score(
    judge: &JudgeConfig,
    w: &Weights,
    case: &BadCase,
    answer: u32,
    fluency: &mut HashMap<u32, f64>,
) -> Result<ScoresTriple> {
    let f = match fluency.get(&answer) {
        Some(f) => *f,
        None => {
            let mut seq = case.prompt.clone();
            seq.push(answer);
            let f = judge.fluency(sequence_logprob(w, &seq)?);
            fluency.insert(answer, f);
            f
        }
    };
    ScoresTriple::new(judge.hallucination(case, answer), judge.relevance(answer), f)
}

impl Environment for LmEnv {
    fn state_dim(&self) -> usize {
        self.weights.config.d_model + 7
    }

    fn n_categories(&self) -> usize {
        self.spec.len()
    }

    fn n_magnitudes(&self) -> usize {
        self.cfg.episode.magnitudes.len()
    }

    fn reset(&mut self, episode: u64) -> Result<Vec<f64>> {
        let idx = (derive_seed(&[self.cfg.seed, episode, 0xca5e]) % self.cases.len() as u64) as usize;
        self.reset_case(idx, episode)
    }

    fn step(&mut self, action: HierAction) -> Result<Step> {
        check_active(&self.episode)?;
        action.check(self.n_categories(), self.n_magnitudes())?;
        let (episode, t, case_id) = {
            let e = self.episode.as_ref().expect("active");
            (e.id, e.t, e.case_id)
        };
        let idx = self.cases.iter().position(|c| c.id == case_id).expect("case of episode");
        let (mut m_op, gates) = self.strengths(idx, action.category, episode, t)?;
        if let Some(n) = self.neuron_limit {
            keep_top(&mut m_op, n);
        }
        if let Some(b) = gates {
            self.gates.push(GateRecord {
                category: action.category,
                gates: b,
            });
        }
        let magnitude = self.cfg.episode.magnitudes[action.magnitude];
        let c = self.cache[idx].as_mut().expect("cache filled");
        let iv = apply_perturbation(
            &self.spec,
            action.category,
            action.kind,
            magnitude,
            &m_op,
            &c.sigma,
            derive_seed(&[self.cfg.seed, episode, t as u64]),
        )?;
        let (logits, _) = forward_with_intervention(&self.weights, &self.cases[idx].prompt, &iv)?;
        let answer = argmax(&logits) as u32;
        let current = score(&self.judge, &self.weights, &self.cases[idx], answer, &mut c.fluency)?;
        let ep = self.episode.as_mut().expect("active");
        let (record, state) = ep.advance(action, current, vec![answer], &self.cfg.episode, &self.cfg.reward);
        let mut mask_loss = None;
        if record.done && self.mode == MaskMode::Sampled {
            let total = ep.total_reward;
            self.mask.update(&self.gates, total)?;
            mask_loss = Some(self.mask.loss(total));
            self.gates.clear();
        }
        Ok(Step {
            state,
            reward: record.reward,
            done: record.done,
            record,
            answer_logits: Some(logits),
            mask_loss,
        })
    }
}
