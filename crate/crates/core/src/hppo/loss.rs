use serde::{Deserialize, Serialize};

use super::{HighSample, LowSample, PolicyParams, PpoConfig, N_TYPES};
use crate::tinylm::{log_softmax, softmax};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
    pub total: f64,
}

impl LossTerms {
    pub(crate) fn add(&mut self, o: &LossTerms, w: f64) {
        self.policy += w * o.policy;
        self.value += w * o.value;
        self.entropy += w * o.entropy;
        self.total += w * o.total;
    }

    pub fn is_finite(&self) -> bool {
        [self.policy, self.value, self.entropy, self.total].iter().all(|x| x.is_finite())
    }
}

/// Log-probability of `a`, entropy, and their gradients with respect to the logits.
pub(crate) fn categorical(logits: &[f64], a: usize) -> (f64, f64, Vec<f64>, Vec<f64>) {
    let lp = log_softmax(logits);
    let p = softmax(logits);
    let h: f64 = -p.iter().zip(&lp).map(|(pi, li)| pi * li).sum::<f64>();
    let dlogp = p.iter().enumerate().map(|(j, pj)| f64::from(u8::from(j == a)) - pj).collect();
    let dh = p.iter().zip(&lp).map(|(pj, lj)| -pj * (lj + h)).collect();
    (lp[a], h, dlogp, dh)
}

/// Clipped surrogate `min(r A, clip(r) A)` and its derivative with respect
/// to the new log-probability.
pub fn clipped_surrogate(logp: f64, old_logp: f64, adv: f64, clip: f64) -> (f64, f64) {
    let r = (logp - old_logp).exp();
    let rc = r.clamp(1.0 - clip, 1.0 + clip);
    let (a, b) = (r * adv, rc * adv);
    if a <= b || (r > 1.0 - clip && r < 1.0 + clip) {
        (a.min(b), adv * r)
    } else {
        (b, 0.0)
    }
}

fn finish(pol: f64, val: f64, ent: f64, cfg: &PpoConfig) -> LossTerms {
    LossTerms {
        policy: pol,
        value: val,
        entropy: ent,
        total: pol + cfg.value_coef * val - cfg.entropy_coef * ent,
    }
}

/// Mean PPO loss of the high level over `batch`; accumulates gradients into
/// `grad` when given.
pub fn high_loss(
    p: &PolicyParams,
    batch: &[&HighSample],
    adv: &[f64],
    ret: &[f64],
    cfg: &PpoConfig,
    mut grad: Option<&mut PolicyParams>,
) -> LossTerms {
    let n = batch.len() as f64;
    let (mut pol, mut val, mut ent) = (0.0, 0.0, 0.0);
    for (i, s) in batch.iter().enumerate() {
        let (logits, ac) = p.high_actor.forward(&s.state);
        let (lp, h, dlp, dh) = categorical(&logits, s.action);
        let (surr, dsurr) = clipped_surrogate(lp, s.logp, adv[i], cfg.clip);
        let (v, cc) = p.high_critic.forward(&s.state);
        let err = v[0] - ret[i];
        pol -= surr / n;
        val += err * err / n;
        ent += h / n;
        if let Some(g) = grad.as_deref_mut() {
            let dz: Vec<f64> = dlp
                .iter()
                .zip(&dh)
                .map(|(a, b)| (-dsurr * a - cfg.entropy_coef * b) / n)
                .collect();
            p.high_actor.backward(&ac, &dz, &mut g.high_actor);
            p.high_critic.backward(&cc, &[cfg.value_coef * 2.0 * err / n], &mut g.high_critic);
        }
    }
    finish(pol, val, ent, cfg)
}

/// Mean PPO loss of the low level; the action embedding receives gradient
/// from both the actor and the critic.
pub fn low_loss(
    p: &PolicyParams,
    batch: &[&LowSample],
    adv: &[f64],
    ret: &[f64],
    cfg: &PpoConfig,
    mut grad: Option<&mut PolicyParams>,
) -> LossTerms {
    let n = batch.len() as f64;
    let (mut pol, mut val, mut ent) = (0.0, 0.0, 0.0);
    let d_s = p.state_dim();
    for (i, s) in batch.iter().enumerate() {
        let x = p.low_input(&s.state, s.category);
        let (logits, ac) = p.low_actor.forward(&x);
        let (lt, ht, dlt, dht) = categorical(&logits[..N_TYPES], s.kind);
        let (lm, hm, dlm, dhm) = categorical(&logits[N_TYPES..], s.magnitude);
        let (surr, dsurr) = clipped_surrogate(lt + lm, s.logp, adv[i], cfg.clip);
        let (v, cc) = p.low_critic.forward(&x);
        let err = v[0] - ret[i];
        pol -= surr / n;
        val += err * err / n;
        ent += (ht + hm) / n;
        if let Some(g) = grad.as_deref_mut() {
            let dz: Vec<f64> = dlt
                .iter()
                .chain(&dlm)
                .zip(dht.iter().chain(&dhm))
                .map(|(a, b)| (-dsurr * a - cfg.entropy_coef * b) / n)
                .collect();
            let dxa = p.low_actor.backward(&ac, &dz, &mut g.low_actor);
            let dxc = p.low_critic.backward(&cc, &[cfg.value_coef * 2.0 * err / n], &mut g.low_critic);
            let row = &mut g.embed[s.category * p.d_a..(s.category + 1) * p.d_a];
            for j in 0..p.d_a {
                row[j] += dxa[d_s + j] + dxc[d_s + j];
            }
        }
    }
    finish(pol, val, ent, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use rand::Rng;

    fn small() -> (PolicyParams, PpoConfig) {
        let cfg = PpoConfig {
            hidden: 6,
            d_a: 3,
            ..PpoConfig::default()
        };
        let mut p = PolicyParams::new(8, 2, 2, &cfg, 5);
        // the actor output layers start at zero; randomize so every path carries gradient
        let mut rng = rng_from(&[77]);
        for net in [&mut p.high_actor, &mut p.low_actor] {
            for b in net.buffers_mut() {
                b.iter_mut().for_each(|x| *x += rng.random_range(-0.5..0.5));
            }
        }
        (p, cfg)
    }

    fn samples() -> (Vec<HighSample>, Vec<LowSample>, Vec<f64>, Vec<f64>) {
        let mut rng = rng_from(&[78]);
        let mut hs = Vec::new();
        let mut ls = Vec::new();
        for i in 0..5 {
            let state: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            // old log-probs near the current ones keep ratios inside the clip range
            hs.push(HighSample {
                state: state.clone(),
                action: i % 2,
                logp: -0.7 + 0.05 * i as f64,
                value: 0.0,
                reward: 0.0,
                done: false,
            });
            ls.push(LowSample {
                state,
                category: (i + 1) % 2,
                kind: i % 3,
                magnitude: i % 2,
                logp: -1.8 - 0.05 * i as f64,
                value: 0.0,
                reward: 0.0,
                done: false,
            });
        }
        let adv = vec![0.9, -0.4, 1.3, -1.1, 0.2];
        let ret = vec![0.5, -0.2, 1.0, 0.3, -0.7];
        (hs, ls, adv, ret)
    }

    fn check_level(high: bool) {
        let (mut p, cfg) = small();
        let (hs, ls, adv, ret) = samples();
        let hb: Vec<&HighSample> = hs.iter().collect();
        let lb: Vec<&LowSample> = ls.iter().collect();
        let loss = |p: &PolicyParams, g: Option<&mut PolicyParams>| {
            if high {
                high_loss(p, &hb, &adv, &ret, &cfg, g).total
            } else {
                low_loss(p, &lb, &adv, &ret, &cfg, g).total
            }
        };
        let mut g = p.zeros_like();
        loss(&p, Some(&mut g));
        let grads: Vec<Vec<f64>> = g.buffers().into_iter().cloned().collect();
        let h = 1e-6;
        let n_buf = grads.len();
        for b in 0..n_buf {
            let (mut num, mut den) = (0.0f64, 0.0f64);
            for i in 0..grads[b].len() {
                let orig = p.buffers_mut()[b][i];
                p.buffers_mut()[b][i] = orig + h;
                let up = loss(&p, None);
                p.buffers_mut()[b][i] = orig - h;
                let dn = loss(&p, None);
                p.buffers_mut()[b][i] = orig;
                let fd = (up - dn) / (2.0 * h);
                num = num.max((fd - grads[b][i]).abs());
                den = den.max(fd.abs().max(grads[b][i].abs()));
            }
            if den > 0.0 {
                assert!(num / den < 1e-4, "buffer {b}: rel {}", num / den);
            }
        }
    }

    #[test]
    fn high_level_gradients_match_finite_differences() {
        check_level(true);
    }

    #[test]
    fn low_level_gradients_match_finite_differences() {
        check_level(false);
    }

    #[test]
    fn ratio_one_gives_negative_mean_advantage() {
        let (p, cfg) = small();
        let (hs, _, adv, ret) = samples();
        let mut hs = hs;
        for s in hs.iter_mut() {
            let (logits, _) = p.high_actor.forward(&s.state);
            s.logp = log_softmax(&logits)[s.action];
        }
        let b: Vec<&HighSample> = hs.iter().collect();
        let l = high_loss(&p, &b, &adv, &ret, &cfg, None);
        let mean = adv.iter().sum::<f64>() / adv.len() as f64;
        assert!((l.policy + mean).abs() < 1e-12);
    }

    #[test]
    fn zero_advantage_gives_zero_policy_gradient() {
        let (p, mut cfg) = small();
        cfg.entropy_coef = 0.0;
        cfg.value_coef = 0.0;
        let (hs, _, _, ret) = samples();
        let b: Vec<&HighSample> = hs.iter().collect();
        let mut g = p.zeros_like();
        high_loss(&p, &b, &[0.0; 5], &ret, &cfg, Some(&mut g));
        assert!(g.high_actor.buffers().iter().all(|b| b.iter().all(|x| *x == 0.0)));
    }

    #[test]
    fn surrogate_plateaus_past_the_clip() {
        let adv = 1.5;
        let mut prev = f64::MIN;
        let mut plateau = Vec::new();
        for i in 0..60 {
            let logp = -1.0 + 0.01 * i as f64;
            let (s, d) = clipped_surrogate(logp, -1.0, adv, 0.2);
            assert!(s >= prev - 1e-15);
            let r = (logp + 1.0f64).exp();
            if r > 1.2 {
                plateau.push(s);
                assert_eq!(d, 0.0);
            } else {
                assert!((d - adv * r).abs() < 1e-12);
            }
            assert!(s <= r * adv + 1e-12 && s <= r.clamp(0.8, 1.2) * adv + 1e-12);
            prev = s;
        }
        assert!(plateau.len() > 5);
        assert!(plateau.iter().all(|s| (s - 1.2 * adv).abs() < 1e-12));
    }

    #[test]
    fn uniform_entropy_is_log_n() {
        for n in [2usize, 3, 4, 7] {
            let (_, h, _, _) = categorical(&vec![0.0; n], 0);
            assert!((h - (n as f64).ln()).abs() < 1e-9);
        }
    }
}
