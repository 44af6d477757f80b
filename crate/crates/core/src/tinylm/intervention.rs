use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{ActivationSite, ModelConfig};
use crate::{Error, Result};

/// Rewrites the feed-forward hidden activations of one layer at the final
/// position during a forward pass.
pub trait ActivationHook {
    fn apply(&self, layer: usize, acts: &mut [f64]);

    /// True when the hook overwrites the layer's activations outright. The
    /// backward pass then treats them as leaves.
    fn replaces(&self, _layer: usize) -> bool {
        false
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbationKind {
    Noise,
    Zero,
    Scale,
}

impl PerturbationKind {
    pub const ALL: [PerturbationKind; 3] = [Self::Noise, Self::Zero, Self::Scale];

    pub fn index(self) -> usize {
        match self {
            Self::Noise => 0,
            Self::Zero => 1,
            Self::Scale => 2,
        }
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::input(format!("unknown perturbation type index {i}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Noise => "noise",
            Self::Zero => "zero",
            Self::Scale => "scale",
        }
    }
}

impl std::str::FromStr for PerturbationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noise" => Ok(Self::Noise),
            "zero" => Ok(Self::Zero),
            "scale" => Ok(Self::Scale),
            other => Err(Error::input(format!("unknown perturbation type {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SiteStrength {
    pub site: ActivationSite,
    pub strength: f64,
}

/// A temporary rewrite of selected activations. Weights are never touched.
///
/// With strength `s` and magnitude `m` at a site:
/// - zero:  `a <- a * (1 - min(1, m) * s)`
/// - scale: `a <- a * (1 + m * s)`
/// - noise: `a <- a + m * s * sigma_l * g`, `g ~ N(0, 1)` drawn from `rng_seed`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Intervention {
    pub sites: Vec<SiteStrength>,
    pub kind: PerturbationKind,
    pub magnitude: f64,
    pub rng_seed: u64,
    /// Per-layer activation std from the unperturbed trace; only noise reads it.
    pub layer_sigma: Vec<f64>,
}

impl Intervention {
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        // magnitude 0 is accepted so that the scale identity can be exercised
        if !self.magnitude.is_finite() || self.magnitude < 0.0 {
            return Err(Error::input(format!("magnitude {} must be finite and >= 0", self.magnitude)));
        }
        if self.kind == PerturbationKind::Noise && self.layer_sigma.len() != config.n_layers {
            return Err(Error::input(format!(
                "noise needs {} layer sigmas, got {}",
                config.n_layers,
                self.layer_sigma.len()
            )));
        }
        for s in &self.sites {
            s.site.check(config)?;
            if !(0.0..=1.0).contains(&s.strength) {
                return Err(Error::input(format!(
                    "strength {} at {:?} outside [0, 1]",
                    s.strength, s.site
                )));
            }
        }
        Ok(())
    }

    fn noise_for_layer(&self, layer: usize, width: usize) -> Vec<f64> {
        let mut rng = crate::rng::rng_from(&[self.rng_seed, layer as u64, 0x401]);
        (0..width).map(|_| StandardNormal.sample(&mut rng)).collect()
    }
}

impl ActivationHook for Intervention {
    fn apply(&self, layer: usize, acts: &mut [f64]) {
        let m = self.magnitude;
        let noise = match self.kind {
            PerturbationKind::Noise if self.sites.iter().any(|s| s.site.layer == layer) => {
                self.noise_for_layer(layer, acts.len())
            }
            _ => Vec::new(),
        };
        for s in self.sites.iter().filter(|s| s.site.layer == layer) {
            let a = &mut acts[s.site.neuron];
            match self.kind {
                PerturbationKind::Zero => *a *= 1.0 - m.min(1.0) * s.strength,
                PerturbationKind::Scale => *a *= 1.0 + m * s.strength,
                PerturbationKind::Noise => {
                    *a += m * s.strength * self.layer_sigma[layer] * noise[s.site.neuron]
                }
            }
        }
    }
}

/// Adds `coefficient * vectors[layer]` to the activations.
#[derive(Debug, Clone, PartialEq)]
pub struct SteeringHook {
    pub vectors: Vec<Vec<f64>>,
    pub coefficient: f64,
}

impl ActivationHook for SteeringHook {
    fn apply(&self, layer: usize, acts: &mut [f64]) {
        if let Some(v) = self.vectors.get(layer) {
            for (a, d) in acts.iter_mut().zip(v) {
                *a += self.coefficient * d;
            }
        }
    }
}
