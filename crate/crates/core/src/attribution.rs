//! Neuron-level causal trace via integrated gradients.
//!
//! Attributions are taken with respect to the final-position feed-forward
//! activations of every layer at once. The path runs from an all-zero
//! baseline to the observed activations; at each point every layer's
//! activations are overwritten with the interpolated value, so the summed
//! attributions telescope to `F(a) - F(0)`.

use serde::{Deserialize, Serialize};

use crate::tinylm::{backward, forward_cached, log_softmax, softmax, ActivationHook, Weights};
use crate::{Error, Result};

const NORMALIZE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionMap {
    pub layers: Vec<Vec<f64>>,
    pub target: u32,
    pub steps: usize,
    pub baseline: String,
}

/// Right-point Riemann integrated gradients for any differentiable `f`
/// returning `(value, gradient)` over a layered input.
pub fn integrated_gradients_with<F>(f: F, input: &[Vec<f64>], baseline: &[Vec<f64>], steps: usize) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>)>,
{
    if steps == 0 {
        return Err(Error::input("integrated gradients needs at least one step"));
    }
    let mut acc: Vec<Vec<f64>> = input.iter().map(|l| vec![0.0; l.len()]).collect();
    for s in 1..=steps {
        let alpha = s as f64 / steps as f64;
        let point: Vec<Vec<f64>> = input
            .iter()
            .zip(baseline)
            .map(|(a, b)| a.iter().zip(b).map(|(ai, bi)| bi + alpha * (ai - bi)).collect())
            .collect();
        let (_, grad) = f(&point)?;
        for (li, (acc_l, g_l)) in acc.iter_mut().zip(&grad).enumerate() {
            if let Some(bad) = g_l.iter().find(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient {bad} in layer {li}")));
            }
            for (a, g) in acc_l.iter_mut().zip(g_l) {
                *a += g;
            }
        }
    }
    Ok(acc
        .into_iter()
        .zip(input.iter().zip(baseline))
        .map(|(g, (a, b))| {
            g.iter()
                .zip(a.iter().zip(b))
                .map(|(gi, (ai, bi))| (ai - bi) * gi / steps as f64)
                .collect()
        })
        .collect())
}

struct Overwrite<'a>(&'a [Vec<f64>]);

impl ActivationHook for Overwrite<'_> {
    fn apply(&self, layer: usize, acts: &mut [f64]) {
        acts.copy_from_slice(&self.0[layer]);
    }

    fn replaces(&self, _layer: usize) -> bool {
        true
    }
}

/// `log p(target | prompt)` as a function of the final-position activations
/// of every layer, with its gradient.
pub fn target_logprob_and_grad(w: &Weights, prompt: &[u32], target: u32, acts: &[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>)> {
    let cache = forward_cached(w, prompt, Some(&Overwrite(acts)))?;
    let v = w.config.vocab_size;
    let logits = cache.last_logits();
    let value = log_softmax(logits)[target as usize];
    let mut dl = vec![0.0; cache.logits.len()];
    let t = prompt.len() - 1;
    // d(-log p)/dlogits = p - onehot; we want d(log p)
    for (j, p) in softmax(logits).into_iter().enumerate() {
        dl[t * v + j] = -p;
    }
    dl[t * v + target as usize] += 1.0;
    let (_, dact) = backward(w, &cache, &dl);
    Ok((value, dact))
}

pub fn integrated_gradients(w: &Weights, prompt: &[u32], target: u32, steps: usize) -> Result<AttributionMap> {
    if target as usize >= w.config.vocab_size {
        return Err(Error::input(format!("target {target} >= vocab {}", w.config.vocab_size)));
    }
    let cache = forward_cached(w, prompt, None)?;
    let acts = cache.trace().layers;
    let baseline: Vec<Vec<f64>> = acts.iter().map(|l| vec![0.0; l.len()]).collect();
    let layers = integrated_gradients_with(|p| target_logprob_and_grad(w, prompt, target, p), &acts, &baseline, steps)?;
    Ok(AttributionMap {
        layers,
        target,
        steps,
        baseline: "zero".into(),
    })
}

/// Per layer: `|attr| / max|attr|`, or all zeros when the max is below the floor.
pub fn normalize_attr(map: &AttributionMap) -> Vec<Vec<f64>> {
    map.layers.iter().map(|l| normalize_layer(l)).collect()
}

pub fn normalize_layer(values: &[f64]) -> Vec<f64> {
    let mx = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if mx > NORMALIZE_FLOOR {
        values.iter().map(|v| v.abs() / mx).collect()
    } else {
        vec![0.0; values.len()]
    }
}
