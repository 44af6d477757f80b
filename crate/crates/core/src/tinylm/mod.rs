//! Tiny decoder-only transformer with feed-forward activation interception.
//!
//! Pre-norm blocks, GELU feed-forward, learned positions, weight-tied head.
//! Every hand-written backward pass lives in [`model`]; the pretraining loop is
//! in [`train`].

mod intervention;
mod model;
mod train;

use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::records;
use crate::{Error, Result};

pub use intervention::{ActivationHook, Intervention, PerturbationKind, SiteStrength, SteeringHook};
pub use model::{
    argmax, backward, embed_input, forward, forward_cached, forward_with_intervention, generate_greedy,
    log_softmax, sequence_logprob, softmax, ActivationTrace, ForwardCache,
};
pub use train::{corpus_loss, train_tiny_lm, TrainOptions, TrainReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub context_len: usize,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            context_len: 16,
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            d_ff: 128,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("context_len", self.context_len),
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be >= 1")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Address of one feed-forward hidden unit at the final prompt position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ActivationSite {
    pub layer: usize,
    pub neuron: usize,
}

impl ActivationSite {
    pub fn new(layer: usize, neuron: usize) -> Self {
        Self { layer, neuron }
    }

    pub fn check(&self, config: &ModelConfig) -> Result<()> {
        if self.layer >= config.n_layers || self.neuron >= config.d_ff {
            return Err(Error::input(format!(
                "site (layer {}, neuron {}) outside {} layers x {} neurons",
                self.layer, self.neuron, config.n_layers, config.d_ff
            )));
        }
        Ok(())
    }
}

/// Parameters of one transformer block. Matrices are row-major `[in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1_g: Vec<f64>,
    pub ln1_b: Vec<f64>,
    pub wq: Vec<f64>,
    pub bq: Vec<f64>,
    pub wk: Vec<f64>,
    pub bk: Vec<f64>,
    pub wv: Vec<f64>,
    pub bv: Vec<f64>,
    pub wo: Vec<f64>,
    pub bo: Vec<f64>,
    pub ln2_g: Vec<f64>,
    pub ln2_b: Vec<f64>,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub config: ModelConfig,
    pub tok_emb: Vec<f64>,
    pub pos_emb: Vec<f64>,
    pub layers: Vec<LayerWeights>,
    pub lnf_g: Vec<f64>,
    pub lnf_b: Vec<f64>,
}

/// One parameter array with its name and explicit shape, as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct WeightsFile {
    config: ModelConfig,
    seed: u64,
    tensors: Vec<NamedTensor>,
}

const LAYER_TENSORS: [&str; 16] = [
    "ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln2_g", "ln2_b", "w1", "b1",
    "w2", "b2",
];

impl LayerWeights {
    fn zeros(c: &ModelConfig) -> Self {
        let (d, f) = (c.d_model, c.d_ff);
        Self {
            ln1_g: vec![0.0; d],
            ln1_b: vec![0.0; d],
            wq: vec![0.0; d * d],
            bq: vec![0.0; d],
            wk: vec![0.0; d * d],
            bk: vec![0.0; d],
            wv: vec![0.0; d * d],
            bv: vec![0.0; d],
            wo: vec![0.0; d * d],
            bo: vec![0.0; d],
            ln2_g: vec![0.0; d],
            ln2_b: vec![0.0; d],
            w1: vec![0.0; d * f],
            b1: vec![0.0; f],
            w2: vec![0.0; f * d],
            b2: vec![0.0; d],
        }
    }

    fn shapes(c: &ModelConfig) -> [Vec<usize>; 16] {
        let (d, f) = (c.d_model, c.d_ff);
        [
            vec![d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d],
            vec![d],
            vec![d, f],
            vec![f],
            vec![f, d],
            vec![d],
        ]
    }

    fn buffers(&self) -> [&Vec<f64>; 16] {
        [
            &self.ln1_g, &self.ln1_b, &self.wq, &self.bq, &self.wk, &self.bk, &self.wv, &self.bv,
            &self.wo, &self.bo, &self.ln2_g, &self.ln2_b, &self.w1, &self.b1, &self.w2, &self.b2,
        ]
    }

    fn buffers_mut(&mut self) -> [&mut Vec<f64>; 16] {
        [
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln2_g,
            &mut self.ln2_b,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }
}

impl Weights {
    /// All-zero parameters (including layer-norm gains). Used for gradient
    /// accumulators and the uniform-output model.
    pub fn zeros(config: ModelConfig) -> Self {
        let (v, c, d) = (config.vocab_size, config.context_len, config.d_model);
        Self {
            config,
            tok_emb: vec![0.0; v * d],
            pos_emb: vec![0.0; c * d],
            layers: (0..config.n_layers).map(|_| LayerWeights::zeros(&config)).collect(),
            lnf_g: vec![0.0; d],
            lnf_b: vec![0.0; d],
        }
    }

    /// GPT-style initialization: N(0, 0.02) matrices and embeddings, unit
    /// layer-norm gains, zero biases, residual projections scaled by depth.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut w = Self::zeros(config);
        let mut rng = crate::rng::rng_from(&[config.seed, 0x11]);
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let resid = Normal::new(0.0, 0.02 / (2.0 * config.n_layers as f64).sqrt()).expect("valid std");
        let fill = |buf: &mut Vec<f64>, dist: &Normal<f64>, rng: &mut rand_chacha::ChaCha8Rng| {
            for x in buf.iter_mut() {
                *x = dist.sample(rng);
            }
        };
        fill(&mut w.tok_emb, &normal, &mut rng);
        fill(&mut w.pos_emb, &normal, &mut rng);
        for layer in &mut w.layers {
            layer.ln1_g.fill(1.0);
            layer.ln2_g.fill(1.0);
            fill(&mut layer.wq, &normal, &mut rng);
            fill(&mut layer.wk, &normal, &mut rng);
            fill(&mut layer.wv, &normal, &mut rng);
            fill(&mut layer.wo, &resid, &mut rng);
            fill(&mut layer.w1, &normal, &mut rng);
            fill(&mut layer.w2, &resid, &mut rng);
        }
        w.lnf_g.fill(1.0);
        Ok(w)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config)
    }

    /// Parameter buffers in canonical order.
    pub fn buffers(&self) -> Vec<&Vec<f64>> {
        let mut out = vec![&self.tok_emb, &self.pos_emb];
        for l in &self.layers {
            out.extend(l.buffers());
        }
        out.push(&self.lnf_g);
        out.push(&self.lnf_b);
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for l in &mut self.layers {
            out.extend(l.buffers_mut());
        }
        out.push(&mut self.lnf_g);
        out.push(&mut self.lnf_b);
        out
    }

    pub fn buffer_sizes(&self) -> Vec<usize> {
        self.buffers().iter().map(|b| b.len()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.buffer_sizes().iter().sum()
    }

    /// Names and shapes in canonical order.
    pub fn layout(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let (v, c, d) = (config.vocab_size, config.context_len, config.d_model);
        let mut out = vec![
            ("tok_emb".to_string(), vec![v, d]),
            ("pos_emb".to_string(), vec![c, d]),
        ];
        for l in 0..config.n_layers {
            for (name, shape) in LAYER_TENSORS.iter().zip(LayerWeights::shapes(config)) {
                out.push((format!("layers.{l}.{name}"), shape));
            }
        }
        out.push(("lnf_g".to_string(), vec![d]));
        out.push(("lnf_b".to_string(), vec![d]));
        out
    }

    pub fn named_tensors(&self) -> Vec<NamedTensor> {
        Self::layout(&self.config)
            .into_iter()
            .zip(self.buffers())
            .map(|((name, shape), data)| NamedTensor {
                name,
                shape,
                data: data.clone(),
            })
            .collect()
    }

    pub fn from_named_tensors(config: ModelConfig, tensors: Vec<NamedTensor>) -> Result<Self> {
        config.validate()?;
        let layout = Self::layout(&config);
        if layout.len() != tensors.len() {
            return Err(Error::Load(format!(
                "expected {} tensors, found {}",
                layout.len(),
                tensors.len()
            )));
        }
        let mut w = Self::zeros(config);
        for (((name, shape), t), buf) in layout.iter().zip(tensors).zip(w.buffers_mut()) {
            if &t.name != name || &t.shape != shape {
                return Err(Error::Load(format!(
                    "tensor mismatch: expected {name} {shape:?}, found {} {:?}",
                    t.name, t.shape
                )));
            }
            if t.data.len() != shape.iter().product::<usize>() {
                return Err(Error::Load(format!("tensor {name}: data length does not match shape")));
            }
            *buf = t.data;
        }
        Ok(w)
    }

    pub fn to_checkpoint_string(&self) -> Result<String> {
        let file = WeightsFile {
            config: self.config,
            seed: self.config.seed,
            tensors: self.named_tensors(),
        };
        records::to_container_string("tinylm-weights", &file)
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Self> {
        let file: WeightsFile = records::from_container_str("tinylm-weights", text)?;
        Self::from_named_tensors(file.config, file.tensors)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = self.to_checkpoint_string()?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_str(&text)
    }

    /// Order-sensitive digest of every parameter bit pattern.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for buf in self.buffers() {
            for x in buf {
                for b in x.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }
}
