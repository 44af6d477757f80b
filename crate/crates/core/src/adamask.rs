//! Learnable per-category gating masks.
//!
//! Strengths are `M = sigmoid(theta / tau)`. During training the mask is
//! relaxed into Bernoulli gates and trained with a score-function estimator
//! against the episode reward, plus L1 and a smooth L0 penalty.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tinylm::{ActivationSite, ModelConfig};
use crate::{Error, Result};

/// A contiguous run of neurons `[start, end)` in one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Block {
    pub layer: usize,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategorySpec {
    pub categories: Vec<Vec<Block>>,
}

impl CategorySpec {
    /// First and second half of every layer, in layer order.
    pub fn halves(config: &ModelConfig) -> Self {
        let half = config.d_ff / 2;
        let categories = (0..config.n_layers)
            .flat_map(|layer| {
                [
                    vec![Block { layer, start: 0, end: half }],
                    vec![Block { layer, start: half, end: config.d_ff }],
                ]
            })
            .collect();
        Self { categories }
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.categories.len() < 2 {
            return Err(Error::Config(format!("need at least 2 categories, got {}", self.categories.len())));
        }
        for (k, blocks) in self.categories.iter().enumerate() {
            if blocks.is_empty() {
                return Err(Error::Config(format!("category {k} has no blocks")));
            }
            for b in blocks {
                if b.layer >= config.n_layers || b.start >= b.end || b.end > config.d_ff {
                    return Err(Error::Config(format!("category {k}: block {b:?} out of range")));
                }
            }
        }
        Ok(())
    }

    /// Sites of category `k` in block order; mask vectors use the same order.
    pub fn sites(&self, k: usize) -> Vec<ActivationSite> {
        self.categories[k]
            .iter()
            .flat_map(|b| (b.start..b.end).map(move |n| ActivationSite::new(b.layer, n)))
            .collect()
    }

    pub fn size(&self, k: usize) -> usize {
        self.categories[k].iter().map(|b| b.end - b.start).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskConfig {
    pub tau: f64,
    pub eps_th: f64,
    pub lambda_sparse: f64,
    pub lambda_l0: f64,
    pub lr: f64,
    pub baseline_decay: f64,
    pub theta_init: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            tau: 1.0,
            eps_th: 0.5,
            lambda_sparse: 1e-3,
            lambda_l0: 1e-3,
            lr: 0.05,
            baseline_decay: 0.9,
            theta_init: 0.0,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("mask tau {} must be > 0", self.tau)));
        }
        if !(self.eps_th > 0.0 && self.eps_th < 1.0) {
            return Err(Error::Config(format!("mask eps_th {} outside (0, 1)", self.eps_th)));
        }
        if self.lambda_sparse < 0.0 || self.lambda_l0 < 0.0 {
            return Err(Error::Config("mask penalties must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.baseline_decay) {
            return Err(Error::Config(format!("baseline decay {} outside [0, 1)", self.baseline_decay)));
        }
        Ok(())
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn mask_strength(theta: &[f64], tau: f64) -> Vec<f64> {
    theta.iter().map(|t| sigmoid(t / tau)).collect()
}

pub fn operational_mask(m: &[f64], attr_norm: &[f64]) -> Result<Vec<f64>> {
    if m.len() != attr_norm.len() {
        return Err(Error::input(format!(
            "mask length {} != attribution length {}",
            m.len(),
            attr_norm.len()
        )));
    }
    Ok(m.iter().zip(attr_norm).map(|(a, b)| a * b).collect())
}

/// Draws `b_i ~ Bernoulli(m_i)` and returns the gates with their joint log-probability.
pub fn sample_gates<R: Rng>(m: &[f64], rng: &mut R) -> (Vec<bool>, f64) {
    let mut logp = 0.0;
    let gates = m
        .iter()
        .map(|&p| {
            let b = rng.random::<f64>() < p;
            logp += if b { p.ln() } else { (1.0 - p).ln() };
            b
        })
        .collect();
    (gates, logp)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskLoss {
    pub total: f64,
    pub neg_reward: f64,
    pub l1: f64,
    pub l0: f64,
}

/// One sampled gate vector for category `category` during an episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateRecord {
    pub category: usize,
    pub gates: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskParams {
    pub config: MaskConfig,
    /// `theta[k]` is aligned with `CategorySpec::sites(k)`.
    pub theta: Vec<Vec<f64>>,
    /// Exponential moving average of episode reward.
    pub baseline: f64,
}

impl MaskParams {
    pub fn new(spec: &CategorySpec, config: MaskConfig) -> Result<Self> {
        config.validate()?;
        let theta = (0..spec.len()).map(|k| vec![config.theta_init; spec.size(k)]).collect();
        Ok(Self {
            config,
            theta,
            baseline: 0.0,
        })
    }

    pub fn strengths(&self, k: usize) -> Vec<f64> {
        mask_strength(&self.theta[k], self.config.tau)
    }

    /// Sum of all strengths.
    pub fn l1(&self) -> f64 {
        (0..self.theta.len()).map(|k| self.strengths(k).iter().sum::<f64>()).sum()
    }

    /// Smooth count of strengths above `eps_th`.
    pub fn l0_surrogate(&self) -> f64 {
        let shift = logit(self.config.eps_th);
        self.theta
            .iter()
            .flatten()
            .map(|t| sigmoid(t / self.config.tau - shift))
            .sum()
    }

    pub fn loss(&self, episode_reward: f64) -> MaskLoss {
        let l1 = self.l1();
        let l0 = self.l0_surrogate();
        let neg_reward = -episode_reward;
        MaskLoss {
            total: neg_reward + self.config.lambda_sparse * l1 + self.config.lambda_l0 * l0,
            neg_reward,
            l1,
            l0,
        }
    }

    /// Gradient of the two penalty terms with respect to `theta[k]`.
    pub fn penalty_grad(&self, k: usize) -> Vec<f64> {
        let c = &self.config;
        let shift = logit(c.eps_th);
        self.theta[k]
            .iter()
            .map(|t| {
                let m = sigmoid(t / c.tau);
                let s = sigmoid(t / c.tau - shift);
                (c.lambda_sparse * m * (1.0 - m) + c.lambda_l0 * s * (1.0 - s)) / c.tau
            })
            .collect()
    }

    /// One REINFORCE step after an episode. Every category that appears in
    /// `records` is updated; the reward baseline moves afterwards.
    pub fn update(&mut self, records: &[GateRecord], episode_reward: f64) -> Result<()> {
        if records.is_empty() {
            return Err(Error::input("mask update needs at least one gate record"));
        }
        let advantage = episode_reward - self.baseline;
        let tau = self.config.tau;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.theta.len()];
        for rec in records {
            let k = rec.category;
            if k >= self.theta.len() || rec.gates.len() != self.theta[k].len() {
                return Err(Error::input(format!("gate record does not match category {k}")));
            }
            let m = self.strengths(k);
            let g = grads[k].get_or_insert_with(|| self.penalty_grad(k));
            for ((gi, &b), mi) in g.iter_mut().zip(&rec.gates).zip(&m) {
                let dlogp = (f64::from(u8::from(b)) - mi) / tau;
                *gi -= advantage * dlogp;
            }
        }
        for (k, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                for (t, gi) in self.theta[k].iter_mut().zip(g) {
                    *t -= self.config.lr * gi;
                }
            }
        }
        let d = self.config.baseline_decay;
        self.baseline = d * self.baseline + (1.0 - d) * episode_reward;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    fn spec() -> CategorySpec {
        CategorySpec {
            categories: vec![
                vec![Block { layer: 0, start: 0, end: 3 }],
                vec![Block { layer: 0, start: 3, end: 4 }, Block { layer: 1, start: 0, end: 2 }],
            ],
        }
    }

    fn params(cfg: MaskConfig) -> MaskParams {
        MaskParams::new(&spec(), cfg).unwrap()
    }

    #[test]
    fn strength_values() {
        assert_eq!(mask_strength(&[0.0], 3.0), vec![0.5]);
        assert!((mask_strength(&[1.0], 0.5)[0] - 0.880_797_077_977_882_3).abs() < 1e-15);
        assert!(mask_strength(&[-50.0], 1.0)[0] < 1e-20);
    }

    #[test]
    fn operational_mask_examples() {
        let m = [0.8, 0.3];
        assert_eq!(operational_mask(&m, &[1.0, 1.0]).unwrap(), m.to_vec());
        assert_eq!(operational_mask(&m, &[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        assert!((operational_mask(&[0.8], &[0.5]).unwrap()[0] - 0.4).abs() < 1e-15);
        assert!(operational_mask(&m, &[1.0]).is_err());
    }

    #[test]
    fn gate_sampling() {
        let m = vec![0.5; 10_000];
        let (b, logp) = sample_gates(&m, &mut rng_from(&[3]));
        let mean = b.iter().filter(|x| **x).count() as f64 / b.len() as f64;
        assert!((0.48..=0.52).contains(&mean));
        assert!((logp - 10_000.0 * 0.5f64.ln()).abs() < 1e-6);
        assert_eq!(sample_gates(&m, &mut rng_from(&[3])).0, b);
        let (ones, _) = sample_gates(&mask_strength(&[50.0; 100], 1.0), &mut rng_from(&[4]));
        assert!(ones.iter().all(|x| *x));
    }

    #[test]
    fn loss_examples() {
        let zero = MaskConfig {
            lambda_sparse: 0.0,
            lambda_l0: 0.0,
            ..MaskConfig::default()
        };
        assert_eq!(params(zero).loss(0.7).total, -0.7);

        let mut p = params(MaskConfig::default());
        p.theta.iter_mut().flatten().for_each(|t| *t = -50.0);
        assert!(p.loss(0.0).total.abs() < 1e-12);

        let one = MaskConfig {
            lambda_sparse: 1.0,
            lambda_l0: 1.0,
            ..MaskConfig::default()
        };
        let single = CategorySpec {
            categories: vec![vec![Block { layer: 0, start: 0, end: 1 }]],
        };
        let p = MaskParams::new(&single, one).unwrap();
        assert!((p.loss(0.0).total - 1.0).abs() < 1e-15);
    }

    #[test]
    fn penalty_gradient_matches_finite_differences() {
        let cfg = MaskConfig {
            tau: 0.7,
            eps_th: 0.3,
            lambda_sparse: 0.4,
            lambda_l0: 1.3,
            ..MaskConfig::default()
        };
        let mut p = params(cfg);
        let mut rng = rng_from(&[11]);
        p.theta.iter_mut().flatten().for_each(|t| *t = rng.random_range(-2.0..2.0));
        let h = 1e-6;
        for k in 0..p.theta.len() {
            let g = p.penalty_grad(k);
            for i in 0..p.theta[k].len() {
                let orig = p.theta[k][i];
                p.theta[k][i] = orig + h;
                let up = p.loss(0.0).total;
                p.theta[k][i] = orig - h;
                let down = p.loss(0.0).total;
                p.theta[k][i] = orig;
                let fd = (up - down) / (2.0 * h);
                let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-12);
                assert!(rel < 1e-5, "k={k} i={i} fd={fd} an={}", g[i]);
            }
        }
    }

    #[test]
    fn zero_advantage_without_penalties_leaves_theta() {
        let mut p = params(MaskConfig {
            lambda_sparse: 0.0,
            lambda_l0: 0.0,
            ..MaskConfig::default()
        });
        p.baseline = 0.4;
        let before = p.theta.clone();
        let rec = GateRecord {
            category: 1,
            gates: vec![true, false, true],
        };
        p.update(&[rec], 0.4).unwrap();
        assert_eq!(p.theta, before);
        assert!((p.baseline - 0.4).abs() < 1e-15);
        assert!(p.update(&[], 0.4).is_err());
    }

    #[test]
    fn positive_advantage_raises_open_gates_only_in_selected_category() {
        let mut p = params(MaskConfig {
            lambda_sparse: 0.0,
            lambda_l0: 0.0,
            ..MaskConfig::default()
        });
        let rec = GateRecord {
            category: 0,
            gates: vec![true, false, true],
        };
        p.update(&[rec], 1.0).unwrap();
        assert!(p.theta[0][0] > 0.0 && p.theta[0][2] > 0.0);
        assert!(p.theta[0][1] < 0.0);
        assert!(p.theta[1].iter().all(|t| *t == 0.0));
        assert!((p.baseline - 0.1).abs() < 1e-15);
    }

    #[test]
    fn sparsity_penalty_shrinks_strengths() {
        let mut p = params(MaskConfig {
            lambda_sparse: 1.0,
            ..MaskConfig::default()
        });
        let mut prev = p.strengths(0);
        for step in 0..100 {
            // zero advantage: reward always equals the baseline
            let rec = GateRecord {
                category: 0,
                gates: vec![step % 2 == 0; 3],
            };
            let r = p.baseline;
            p.update(&[rec], r).unwrap();
            let now = p.strengths(0);
            assert!(now.iter().zip(&prev).all(|(a, b)| a < b));
            prev = now;
        }
    }

    #[test]
    fn l0_surrogate_tracks_expected_gate_count() {
        let mut p = params(MaskConfig::default());
        let mut rng = rng_from(&[5]);
        let spec = CategorySpec {
            categories: vec![vec![Block { layer: 0, start: 0, end: 1000 }]],
        };
        p = MaskParams {
            theta: vec![(0..1000).map(|_| rng.random_range(-3.0..3.0)).collect()],
            ..MaskParams::new(&spec, p.config).unwrap()
        };
        let m = p.strengths(0);
        let draws = 200;
        let mut total = 0usize;
        for d in 0..draws {
            total += sample_gates(&m, &mut rng_from(&[6, d])).0.iter().filter(|b| **b).count();
        }
        let mc = total as f64 / draws as f64;
        assert!((p.l0_surrogate() - mc).abs() <= 0.05 * 1000.0);
    }

    #[test]
    fn default_categories_are_layer_halves() {
        let c = ModelConfig::default();
        let s = CategorySpec::halves(&c);
        assert_eq!(s.len(), 4);
        assert!(s.validate(&c).is_ok());
        assert_eq!(s.sites(3)[0], ActivationSite::new(1, 64));
        assert_eq!(s.size(2), 64);
        let bad = CategorySpec {
            categories: vec![vec![Block { layer: 2, start: 0, end: 1 }], vec![]],
        };
        assert!(bad.validate(&c).is_err());
    }
}
