//! Programmatic scoring of a model answer: hallucination, relevance, fluency.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::taskgen::BadCase;
use crate::tinylm::{sequence_logprob, Weights};
use crate::{Error, Result};

/// Lower `h` is better; higher `r` and `f` are better.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoresTriple {
    pub h: f64,
    pub r: f64,
    pub f: f64,
}

impl ScoresTriple {
    pub fn new(h: f64, r: f64, f: f64) -> Result<Self> {
        for (name, v) in [("h", h), ("r", r), ("f", f)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::input(format!("score {name}={v} outside [0, 1]")));
            }
        }
        Ok(Self { h, r, f })
    }

    /// Componentwise best of two triples under the score orientation.
    pub fn best(self, other: Self) -> Self {
        Self {
            h: self.h.min(other.h),
            r: self.r.max(other.r),
            f: self.f.max(other.f),
        }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.h, self.r, self.f]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeConfig {
    pub answer_range: Range<u32>,
    pub fluency_slope: f64,
    pub fluency_intercept: f64,
    /// Hallucination score for an answer that is neither gold nor distractor.
    pub partial_credit: f64,
}

impl JudgeConfig {
    /// Fluency maps `ln(1/vocab)` to 0 and 0 to 1.
    pub fn new(answer_range: Range<u32>, vocab_size: usize) -> Self {
        Self {
            answer_range,
            fluency_slope: 1.0 / (vocab_size as f64).ln(),
            fluency_intercept: 1.0,
            partial_credit: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fluency_slope > 0.0 && self.fluency_slope.is_finite()) {
            return Err(Error::Config(format!("fluency slope {} must be > 0", self.fluency_slope)));
        }
        if !(self.partial_credit > 0.0 && self.partial_credit < 1.0) {
            return Err(Error::Config(format!("partial credit {} outside (0, 1)", self.partial_credit)));
        }
        if self.answer_range.is_empty() {
            return Err(Error::Config("empty answer range".into()));
        }
        Ok(())
    }

    pub fn hallucination(&self, case: &BadCase, answer: u32) -> f64 {
        if answer == case.gold {
            0.0
        } else if answer == case.distractor {
            1.0
        } else {
            self.partial_credit
        }
    }

    pub fn relevance(&self, answer: u32) -> f64 {
        if self.answer_range.contains(&answer) {
            1.0
        } else {
            0.0
        }
    }

    pub fn fluency(&self, mean_logprob: f64) -> f64 {
        (self.fluency_slope * mean_logprob + self.fluency_intercept).clamp(0.0, 1.0)
    }
}

/// Scores the generated tokens that follow `case.prompt`. Fluency is measured
/// under `w`, which should be the unperturbed model.
pub fn judge_output(case: &BadCase, output: &[u32], w: &Weights, cfg: &JudgeConfig) -> Result<ScoresTriple> {
    let Some(&answer) = output.first() else {
        return Err(Error::input("empty output"));
    };
    let mut seq = case.prompt.clone();
    seq.extend_from_slice(output);
    let lp = sequence_logprob(w, &seq)?;
    ScoresTriple::new(cfg.hallucination(case, answer), cfg.relevance(answer), cfg.fluency(lp))
}

/// Multiple choice over `case.options` using full-vocabulary logits at the
/// answer position. Returns `(chosen, chosen == gold)`.
pub fn judge_mc(case: &BadCase, logits: &[f64]) -> Result<(u32, bool)> {
    if case.options.len() < 2 {
        return Err(Error::input("multiple choice needs at least 2 options"));
    }
    let mut opts = case.options.clone();
    opts.sort_unstable();
    let mut chosen = opts[0];
    for &o in &opts {
        let l = *logits
            .get(o as usize)
            .ok_or_else(|| Error::input(format!("no logit for option {o}")))?;
        if l > logits[chosen as usize] {
            chosen = o;
        }
    }
    Ok((chosen, chosen == case.gold))
}
