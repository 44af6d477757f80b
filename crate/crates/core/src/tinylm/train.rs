use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::model::{backward, forward_cached, log_softmax, softmax};
use super::{ModelConfig, Weights};
use crate::optim::{Adam, AdamConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Corpus loss and accuracy are recorded every `eval_every` epochs.
    pub eval_every: usize,
    /// Position (in each sequence) of the token whose prediction counts
    /// towards fact-completion accuracy.
    pub answer_index: usize,
    /// Decoupled weight decay on matrices and embeddings (not norms or biases).
    pub weight_decay: f64,
    /// Stop at the first evaluation checkpoint whose answer accuracy reaches
    /// this value. `None` trains for the full epoch budget.
    pub stop_at_accuracy: Option<f64>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 150,
            batch_size: 16,
            adam: AdamConfig::with_lr(3e-3),
            eval_every: 10,
            answer_index: 3,
            weight_decay: 0.0,
            stop_at_accuracy: Some(1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// `(epoch, mean token cross-entropy)` at each evaluation checkpoint.
    pub checkpoints: Vec<(usize, f64)>,
    pub final_loss: f64,
    pub final_accuracy: f64,
}

/// Mean next-token cross-entropy over every position of every sequence.
pub fn corpus_loss(w: &Weights, corpus: &[Vec<u32>]) -> Result<f64> {
    let (mut total, mut count) = (0.0, 0usize);
    for seq in corpus {
        let cache = forward_cached(w, &seq[..seq.len() - 1], None)?;
        for t in 0..seq.len() - 1 {
            total -= log_softmax(cache.position_logits(t))[seq[t + 1] as usize];
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Fraction of sequences whose token at `answer_index` is the argmax given
/// the tokens before it.
pub fn answer_accuracy(w: &Weights, corpus: &[Vec<u32>], answer_index: usize) -> Result<f64> {
    let mut hits = 0usize;
    for seq in corpus {
        let cache = forward_cached(w, &seq[..answer_index], None)?;
        let logits = cache.last_logits();
        let mut best = 0;
        for (i, &x) in logits.iter().enumerate() {
            if x > logits[best] {
                best = i;
            }
        }
        if best as u32 == seq[answer_index] {
            hits += 1;
        }
    }
    Ok(hits as f64 / corpus.len() as f64)
}

fn sequence_grad(w: &Weights, seq: &[u32], acc: &mut Weights) -> Result<f64> {
    let cache = forward_cached(w, &seq[..seq.len() - 1], None)?;
    let v = w.config.vocab_size;
    let mut dl = vec![0.0; cache.logits.len()];
    let mut loss = 0.0;
    for t in 0..seq.len() - 1 {
        let logits = cache.position_logits(t);
        let target = seq[t + 1] as usize;
        loss -= log_softmax(logits)[target];
        let p = softmax(logits);
        dl[t * v..(t + 1) * v].copy_from_slice(&p);
        dl[t * v + target] -= 1.0;
    }
    let (g, _) = backward(w, &cache, &dl);
    for (a, b) in acc.buffers_mut().into_iter().zip(g.buffers()) {
        for (x, y) in a.iter_mut().zip(b) {
            *x += y;
        }
    }
    Ok(loss)
}

/// Pretrains on the corpus with minibatch Adam. Deterministic in
/// `config.seed`.
pub fn train_tiny_lm(corpus: &[Vec<u32>], config: ModelConfig, opts: &TrainOptions) -> Result<(Weights, TrainReport)> {
    if corpus.is_empty() {
        return Err(Error::input("empty corpus"));
    }
    if let Some(bad) = corpus.iter().find(|s| s.len() < 2 || s.len() > config.context_len + 1) {
        return Err(Error::input(format!("corpus sequence of length {} unusable", bad.len())));
    }
    let mut w = Weights::init(config)?;
    let mut opt = Adam::new(opts.adam, &w.buffer_sizes());
    let mut rng = crate::rng::rng_from(&[config.seed, 0x7a1]);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut checkpoints = vec![(0, corpus_loss(&w, corpus)?)];
    let batch = opts.batch_size.max(1);
    let decayed: Vec<bool> = Weights::layout(&config).iter().map(|(_, shape)| shape.len() == 2).collect();

    for epoch in 1..=opts.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let mut grad = w.zeros_like();
            let mut tokens = 0usize;
            let mut loss = 0.0;
            for &i in chunk {
                loss += sequence_grad(&w, &corpus[i], &mut grad)?;
                tokens += corpus[i].len() - 1;
            }
            if !loss.is_finite() {
                return Err(Error::Training(format!(
                    "loss became {loss} in epoch {epoch}; lower the learning rate"
                )));
            }
            let scale = 1.0 / tokens as f64;
            for buf in grad.buffers_mut() {
                buf.iter_mut().for_each(|g| *g *= scale);
            }
            let grads: Vec<Vec<f64>> = grad.buffers().into_iter().cloned().collect();
            opt.step(
                w.buffers_mut().into_iter().map(|b| &mut b[..]).collect(),
                grads.iter().map(|g| &g[..]).collect(),
            );
            if opts.weight_decay > 0.0 {
                let shrink = 1.0 - opts.adam.lr * opts.weight_decay;
                for (buf, _) in w.buffers_mut().into_iter().zip(&decayed).filter(|(_, d)| **d) {
                    buf.iter_mut().for_each(|x| *x *= shrink);
                }
            }
        }
        if epoch % opts.eval_every.max(1) == 0 || epoch == opts.epochs {
            let l = corpus_loss(&w, corpus)?;
            if !l.is_finite() {
                return Err(Error::Training(format!("corpus loss {l} at epoch {epoch}")));
            }
            checkpoints.push((epoch, l));
            if let Some(target) = opts.stop_at_accuracy {
                if answer_accuracy(&w, corpus, opts.answer_index)? >= target {
                    break;
                }
            }
        }
    }
    let final_loss = checkpoints.last().map(|c| c.1).unwrap_or(f64::NAN);
    let final_accuracy = answer_accuracy(&w, corpus, opts.answer_index.min(corpus[0].len() - 1))?;
    Ok((
        w,
        TrainReport {
            checkpoints,
            final_loss,
            final_accuracy,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 20,
            context_len: 6,
            n_layers: 1,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            seed: 1,
        }
    }

    #[test]
    fn memorizes_one_fact() {
        let corpus = vec![vec![4u32, 2, 1, 13, 0]];
        let opts = TrainOptions {
            epochs: 60,
            ..TrainOptions::default()
        };
        let (w, report) = train_tiny_lm(&corpus, cfg(), &opts).unwrap();
        assert_eq!(report.final_accuracy, 1.0);
        assert!(report.final_loss < report.checkpoints[0].1);
        let (w2, _) = train_tiny_lm(&corpus, cfg(), &opts).unwrap();
        assert_eq!(w.checksum(), w2.checksum());
    }

    #[test]
    fn rejects_empty_corpus() {
        assert!(train_tiny_lm(&[], cfg(), &TrainOptions::default()).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let corpus = vec![vec![4u32, 2, 1, 13, 0]];
        let mut opts = TrainOptions {
            epochs: 5,
            ..TrainOptions::default()
        };
        opts.adam.lr = f64::NAN;
        match train_tiny_lm(&corpus, cfg(), &opts) {
            Err(Error::Training(msg)) => assert!(msg.contains("epoch")),
            other => panic!("expected training error, got {other:?}"),
        }
    }
}
