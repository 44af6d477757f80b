use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::Step;
use crate::hppo::UpdateReport;
use crate::{Error, Result};

/// One row per environment step (`kind = "step"`) and one summary row per
/// update (`kind = "update"`). Fields that do not apply are left empty.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub kind: String,
    pub update: u64,
    pub episode: Option<u64>,
    pub t: Option<usize>,
    pub case_id: Option<usize>,
    pub a_h: Option<usize>,
    pub a_type: Option<String>,
    pub a_mag: Option<usize>,
    pub score_h: Option<f64>,
    pub score_r: Option<f64>,
    pub score_f: Option<f64>,
    pub reward: Option<f64>,
    pub bonus: Option<bool>,
    pub done: Option<bool>,
    pub mean_reward: Option<f64>,
    pub loss_pi_h: Option<f64>,
    pub loss_v_h: Option<f64>,
    pub entropy_h: Option<f64>,
    pub loss_pi_l: Option<f64>,
    pub loss_v_l: Option<f64>,
    pub entropy_l: Option<f64>,
    pub mask_loss: Option<f64>,
    pub mask_l1: Option<f64>,
    pub mask_l0: Option<f64>,
}

impl MetricsRow {
    pub fn step(update: u64, s: &Step) -> Self {
        let r = &s.record;
        Self {
            kind: "step".into(),
            update,
            episode: Some(r.episode),
            t: Some(r.t),
            case_id: Some(r.case_id),
            a_h: Some(r.action.category),
            a_type: Some(r.action.kind.name().into()),
            a_mag: Some(r.action.magnitude),
            score_h: Some(r.current.h),
            score_r: Some(r.current.r),
            score_f: Some(r.current.f),
            reward: Some(r.reward),
            bonus: Some(r.bonus),
            done: Some(r.done),
            mask_loss: s.mask_loss.map(|m| m.total),
            mask_l1: s.mask_loss.map(|m| m.l1),
            mask_l0: s.mask_loss.map(|m| m.l0),
            ..Self::default()
        }
    }

    pub fn update(update: u64, mean_reward: f64, rep: Option<&UpdateReport>) -> Self {
        Self {
            kind: "update".into(),
            update,
            mean_reward: Some(mean_reward),
            loss_pi_h: rep.map(|r| r.high.policy),
            loss_v_h: rep.map(|r| r.high.value),
            entropy_h: rep.map(|r| r.high.entropy),
            loss_pi_l: rep.map(|r| r.low.policy),
            loss_v_l: rep.map(|r| r.low.value),
            entropy_l: rep.map(|r| r.low.entropy),
            ..Self::default()
        }
    }
}

/// Wall-clock seconds per phase of one update. Kept out of the metrics file
/// so that file stays byte-reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub update: u64,
    pub collect_s: f64,
    pub ppo_s: f64,
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    }
}

/// What produced a run directory. Contains no timestamps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub world_seed: u64,
    pub model_seed: u64,
    pub env_seed: u64,
    pub agent_seed: u64,
    pub version: String,
}

impl Manifest {
    pub fn new(command: &str, cfg: &super::RunConfig) -> Result<Self> {
        Ok(Self {
            command: command.into(),
            config_hash: cfg.hash()?,
            seed: cfg.seed,
            world_seed: cfg.world_config().seed,
            model_seed: cfg.model_config().seed,
            env_seed: cfg.env_config().seed,
            agent_seed: cfg.agent_seed(),
            version: env!("CARGO_PKG_VERSION").into(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::records::save_container(path, "run-manifest", self)
    }
}
