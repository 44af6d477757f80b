//! Experiment orchestration: configuration, the two-stage pipeline,
//! evaluation, ablations, the static steering comparator, timing, the
//! neuron-count sweep, and every on-disk artifact.

mod config;
mod eval;
mod metrics;
mod stage2;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::records;
use crate::taskgen::{
    emit_corpus, generate_fact_world, load_cases, make_bad_cases, save_cases, split_cases, BadCase, FactWorld,
};
use crate::tinylm::{train_tiny_lm, TrainReport, Weights};
use crate::{Error, Result};

pub use config::{
    AblateConfig, BaselineConfig, BenchConfig, EvalConfig, JudgeSection, PlantedSection, RunConfig, RunMode,
    Stage1Config, Stage2Config, SweepConfig,
};
pub use eval::{
    ablate, bench_timing, evaluate, planted_selection, static_vector_baseline, steering_vectors, sweep_neuron_count,
    steered_rate, AblationRow, BaselineReport, CoefficientRow, EvalCase, EvalReport, PhaseTiming, SweepRow, TimingReport,
};
pub use metrics::{write_csv, Manifest, MetricsRow, TimingRow};
pub use stage2::{lm_env, load_mask, run_stage2, Backend, Checkpoint, Trainer, Variant};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Summary {
    pub pool: usize,
    pub train: usize,
    pub held_out: usize,
    pub corrupted_total: usize,
    /// Corrupted pairs whose training label the model reproduces.
    pub corrupted_reproduced: usize,
    pub report: TrainReport,
}

pub struct Stage1 {
    pub weights: Weights,
    pub world: FactWorld,
    pub cases: Vec<BadCase>,
    pub train: Vec<BadCase>,
    pub held_out: Vec<BadCase>,
    pub summary: Stage1Summary,
}

/// Trains the model on the corrupted corpus and mines and splits bad cases.
pub fn run_stage1(cfg: &RunConfig) -> Result<Stage1> {
    cfg.validate()?;
    let world = generate_fact_world(cfg.world_config())?;
    let corpus = emit_corpus(&world);
    let (weights, report) = train_tiny_lm(&corpus, cfg.model_config(), &cfg.pretrain)?;
    let cases = make_bad_cases(&weights, &world, cfg.stage1.n_options)?;
    if cases.len() < cfg.stage1.min_pool.max(2) {
        return Err(Error::Config(format!(
            "bad-case pool has {} cases, need at least {}; raise world.corruption_rate",
            cases.len(),
            cfg.stage1.min_pool.max(2)
        )));
    }
    let (train, held_out) = split_cases(&cases, cfg.stage1.train_fraction, cfg.split_seed())?;
    let mut corrupted_reproduced = 0;
    for (&(s, r), &label) in &world.corruption {
        if crate::taskgen::answer_of(&weights, &FactWorld::prompt(s, r))? == label {
            corrupted_reproduced += 1;
        }
    }
    let summary = Stage1Summary {
        pool: cases.len(),
        train: train.len(),
        held_out: held_out.len(),
        corrupted_total: world.corruption.len(),
        corrupted_reproduced,
        report,
    };
    Ok(Stage1 {
        weights,
        world,
        cases,
        train,
        held_out,
        summary,
    })
}

impl Stage1 {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.weights.save(&dir.join("weights.json"))?;
        self.world.save(&dir.join("world.jsonl"))?;
        save_cases(&dir.join("cases.jsonl"), &self.cases)?;
        save_cases(&dir.join("train_cases.jsonl"), &self.train)?;
        save_cases(&dir.join("heldout_cases.jsonl"), &self.held_out)?;
        records::save_container(&dir.join("stage1.json"), "stage1-summary", &self.summary)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Self {
            weights: Weights::load(&dir.join("weights.json"))?,
            world: FactWorld::load(&dir.join("world.jsonl"))?,
            cases: load_cases(&dir.join("cases.jsonl"))?,
            train: load_cases(&dir.join("train_cases.jsonl"))?,
            held_out: load_cases(&dir.join("heldout_cases.jsonl"))?,
            summary: records::load_container(&dir.join("stage1.json"), "stage1-summary")?,
        })
    }
}
