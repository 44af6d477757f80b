use std::path::Path;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::metrics::write_csv;
use super::stage2::{lm_env, run_stage2, Variant};
use super::{run_stage1, RunConfig, RunMode, Stage1};
use crate::adamask::operational_mask;
use crate::attribution::{integrated_gradients, normalize_attr};
use crate::env::{apply_perturbation, Environment, HierAction, LmEnv, PlantedEnv};
use crate::hppo::{Agent, N_TYPES};
use crate::judge::{judge_mc, ScoresTriple};
use crate::rng::rng_from;
use crate::taskgen::correct_prompts;
use crate::tinylm::{
    argmax, forward, forward_cached, forward_with_intervention, PerturbationKind, SteeringHook, Weights,
};
use crate::{Error, Result};

/// Episode ids used for evaluation start here so they never collide with training.
const EVAL_EPISODE_BASE: u64 = 1 << 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCase {
    pub case_id: usize,
    pub actions: Vec<HierAction>,
    pub outputs: Vec<u32>,
    pub corrected: bool,
    pub before: ScoresTriple,
    pub after: ScoresTriple,
    pub mc_choice: u32,
    pub mc_correct: bool,
    pub baseline_mc_correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: Variant,
    pub n_cases: usize,
    pub corrected: usize,
    pub correction_rate: f64,
    pub mc_accuracy: f64,
    pub baseline_mc_accuracy: f64,
    pub mean_before: [f64; 3],
    pub mean_after: [f64; 3],
    pub cases: Vec<EvalCase>,
}

fn random_action(agent: &Agent, idx: usize, t: usize) -> Result<HierAction> {
    let mut rng = rng_from(&[agent.seed, idx as u64, t as u64, 0xe7a1]);
    Ok(HierAction {
        category: rng.random_range(0..agent.params.n_categories),
        kind: PerturbationKind::from_index(rng.random_range(0..N_TYPES))?,
        magnitude: rng.random_range(0..agent.params.n_magnitudes),
    })
}

/// Runs the deterministic policy for `steps` steps on every case of `env`.
/// A case counts as corrected if any step produced the gold answer. The
/// environment's mask mode is used as is.
pub fn evaluate(env: &mut LmEnv, agent: &mut Agent, variant: Variant, steps: usize) -> Result<EvalReport> {
    if steps == 0 {
        return Err(Error::input("evaluation needs at least one step"));
    }
    if agent.params.state_dim() != env.state_dim() || agent.params.n_categories != env.n_categories() {
        return Err(Error::Load("agent checkpoint does not match the environment".into()));
    }
    let n = env.cases().len();
    let mut cases = Vec::with_capacity(n);
    for idx in 0..n {
        let case = env.cases()[idx].clone();
        let mut state = env.reset_case(idx, EVAL_EPISODE_BASE + idx as u64)?;
        let (_, baseline_mc_correct) = judge_mc(&case, &env.baseline_logits(idx)?)?;
        let mut actions = Vec::new();
        let mut outputs = Vec::new();
        let mut last = None;
        for t in 0..steps {
            let action = if variant.random_actions() {
                random_action(agent, idx, t)?
            } else {
                agent.greedy_action(&state)?
            };
            let st = env.step(action)?;
            actions.push(action);
            outputs.push(st.record.output[0]);
            state = st.state.clone();
            let done = st.done;
            last = Some(st);
            if done {
                break;
            }
        }
        let last = last.expect("at least one step");
        let logits = last.answer_logits.as_deref().unwrap_or_default();
        let (mc_choice, mc_correct) = judge_mc(&case, logits)?;
        cases.push(EvalCase {
            case_id: case.id,
            corrected: outputs.contains(&case.gold),
            actions,
            outputs,
            before: last.record.baseline,
            after: last.record.current,
            mc_choice,
            mc_correct,
            baseline_mc_correct,
        });
    }
    let nf = n as f64;
    let corrected = cases.iter().filter(|c| c.corrected).count();
    let mean = |f: &dyn Fn(&EvalCase) -> [f64; 3]| {
        let mut m = [0.0; 3];
        for c in &cases {
            for (a, b) in m.iter_mut().zip(f(c)) {
                *a += b / nf;
            }
        }
        m
    };
    Ok(EvalReport {
        variant,
        n_cases: n,
        corrected,
        correction_rate: corrected as f64 / nf,
        mc_accuracy: cases.iter().filter(|c| c.mc_correct).count() as f64 / nf,
        baseline_mc_accuracy: cases.iter().filter(|c| c.baseline_mc_correct).count() as f64 / nf,
        mean_before: mean(&|c| c.before.to_array()),
        mean_after: mean(&|c| c.after.to_array()),
        cases,
    })
}

/// Probability that the policy picks the planted category and then the
/// planted type, at the first state of an episode.
pub fn planted_selection(agent: &Agent, env: &mut PlantedEnv) -> Result<f64> {
    let state = env.reset(EVAL_EPISODE_BASE)?;
    let p_h = agent.params.high_probs(&state)[env.target_category];
    let (tp, _) = agent.params.low_probs(&state, env.target_category);
    Ok(p_h * tp[env.target_kind.index()])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub seeds: Vec<u64>,
    /// Held-out correction rate per seed (planted mode: selection probability).
    pub rates: Vec<f64>,
    /// Held-out MC accuracy per seed (empty in planted mode).
    pub mc: Vec<f64>,
    pub rate_mean: f64,
    pub rate_std: f64,
    pub mc_mean: f64,
    pub mc_std: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v.sqrt())
}

#[derive(Serialize)]
struct AblationCsvRow {
    variant: &'static str,
    rate_mean: f64,
    rate_std: f64,
    mc_mean: f64,
    mc_std: f64,
    rates: String,
}

/// Trains and evaluates the four variants for every seed in `ablate.seeds`.
/// All variants of a seed share the same Stage-1 artifacts.
pub fn ablate(cfg: &RunConfig, out: Option<&Path>) -> Result<Vec<AblationRow>> {
    if cfg.ablate.seeds.is_empty() {
        return Err(Error::Config("ablate.seeds is empty".into()));
    }
    let mut rows: Vec<AblationRow> = Variant::ALL
        .into_iter()
        .map(|variant| AblationRow {
            variant,
            seeds: cfg.ablate.seeds.clone(),
            rates: Vec::new(),
            mc: Vec::new(),
            rate_mean: 0.0,
            rate_std: 0.0,
            mc_mean: 0.0,
            mc_std: 0.0,
        })
        .collect();
    for &seed in &cfg.ablate.seeds {
        let c = RunConfig { seed, ..cfg.clone() };
        let stage1 = match c.mode {
            RunMode::Lm => Some(run_stage1(&c)?),
            RunMode::Planted => None,
        };
        for row in rows.iter_mut() {
            let mut tr = run_stage2(&c, stage1.as_ref(), row.variant, None)?;
            match (&stage1, tr.backend) {
                (Some(s1), super::Backend::Lm(env)) => {
                    let mut ev = lm_env(&c, s1, s1.held_out.clone(), env.mask.clone(), row.variant.eval_mode())?;
                    let rep = evaluate(&mut ev, &mut tr.agent, row.variant, c.eval.steps)?;
                    row.rates.push(rep.correction_rate);
                    row.mc.push(rep.mc_accuracy);
                }
                (_, super::Backend::Planted(mut env)) => {
                    row.rates.push(planted_selection(&tr.agent, &mut env)?);
                }
                _ => unreachable!("backend follows the run mode"),
            }
        }
    }
    for row in rows.iter_mut() {
        (row.rate_mean, row.rate_std) = mean_std(&row.rates);
        (row.mc_mean, row.mc_std) = mean_std(&row.mc);
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv_rows: Vec<AblationCsvRow> = rows
            .iter()
            .map(|r| AblationCsvRow {
                variant: r.variant.name(),
                rate_mean: r.rate_mean,
                rate_std: r.rate_std,
                mc_mean: r.mc_mean,
                mc_std: r.mc_std,
                rates: r.rates.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" "),
            })
            .collect();
        write_csv(&dir.join("ablation.csv"), &csv_rows)?;
    }
    Ok(rows)
}

/// Per-layer mean activation on `good` prompts minus the mean on `bad` ones.
pub fn steering_vectors(w: &Weights, good: &[Vec<u32>], bad: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
    if good.is_empty() || bad.is_empty() {
        return Err(Error::Config("steering vectors need non-empty prompt pools".into()));
    }
    let mean = |pool: &[Vec<u32>]| -> Result<Vec<Vec<f64>>> {
        let mut acc = vec![vec![0.0; w.config.d_ff]; w.config.n_layers];
        for p in pool {
            let (_, trace) = forward(w, p)?;
            for (a, l) in acc.iter_mut().zip(&trace.layers) {
                for (x, y) in a.iter_mut().zip(l) {
                    *x += y;
                }
            }
        }
        let n = pool.len() as f64;
        acc.iter_mut().flatten().for_each(|x| *x /= n);
        Ok(acc)
    };
    let g = mean(good)?;
    let b = mean(bad)?;
    Ok(g.iter()
        .zip(&b)
        .map(|(gl, bl)| gl.iter().zip(bl).map(|(x, y)| x - y).collect())
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientRow {
    pub coefficient: f64,
    pub correction_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub rows: Vec<CoefficientRow>,
    pub best_coefficient: f64,
    pub best_rate: f64,
}

/// Fraction of cases whose answer under the steering hook is gold.
pub fn steered_rate(w: &Weights, hook: &SteeringHook, cases: &[crate::taskgen::BadCase]) -> Result<f64> {
    let mut hit = 0;
    for c in cases {
        let cache = forward_cached(w, &c.prompt, Some(hook))?;
        if argmax(cache.last_logits()) as u32 == c.gold {
            hit += 1;
        }
    }
    Ok(hit as f64 / cases.len().max(1) as f64)
}

/// Additive steering with one fixed vector per layer, built from the training
/// bad cases and the correctly answered prompts, evaluated on held-out cases.
pub fn static_vector_baseline(cfg: &RunConfig, stage1: &Stage1) -> Result<BaselineReport> {
    if cfg.baseline.coefficients.is_empty() {
        return Err(Error::Config("baseline.coefficients is empty".into()));
    }
    let w = &stage1.weights;
    let good = correct_prompts(w, &stage1.world)?;
    if good.is_empty() {
        return Err(Error::Config("no correctly answered prompts to build steering vectors".into()));
    }
    let bad: Vec<Vec<u32>> = stage1.train.iter().map(|c| c.prompt.clone()).collect();
    let vectors = steering_vectors(w, &good, &bad)?;
    let mut rows = Vec::new();
    for &coefficient in &cfg.baseline.coefficients {
        let hook = SteeringHook {
            vectors: vectors.clone(),
            coefficient,
        };
        rows.push(CoefficientRow {
            coefficient,
            correction_rate: steered_rate(w, &hook, &stage1.held_out)?,
        });
    }
    let best = rows
        .iter()
        .fold(&rows[0], |b, r| if r.correction_rate > b.correction_rate { r } else { b });
    Ok(BaselineReport {
        best_coefficient: best.coefficient,
        best_rate: best.correction_rate,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseTiming {
    pub phase: String,
    pub mean_us: f64,
    pub p95_us: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub reps: usize,
    /// decision, mask, forward
    pub phases: Vec<PhaseTiming>,
    pub decision_over_forward: f64,
    pub mask_over_forward: f64,
}

fn summarize(phase: &str, mut xs: Vec<f64>) -> PhaseTiming {
    xs.sort_by(f64::total_cmp);
    let idx = ((0.95 * xs.len() as f64).ceil() as usize).clamp(1, xs.len()) - 1;
    PhaseTiming {
        phase: phase.into(),
        mean_us: xs.iter().sum::<f64>() / xs.len() as f64,
        p95_us: xs[idx],
    }
}

/// Times the agent decision, the operational-mask computation (attribution
/// plus modulation), and the perturbed forward pass, cycling over the cases
/// of `env`. The first `warmup` repetitions are discarded.
pub fn bench_timing(env: &mut LmEnv, agent: &mut Agent, reps: usize, warmup: usize) -> Result<TimingReport> {
    if reps == 0 {
        return Err(Error::input("bench_timing needs at least one repetition"));
    }
    let n = env.cases().len();
    let ig_steps = env.config().ig_steps;
    let magnitudes = env.config().episode.magnitudes.clone();
    let (mut dec, mut mask, mut fwd) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..warmup + reps {
        let idx = i % n;
        let state = env.reset_case(idx, EVAL_EPISODE_BASE + i as u64)?;
        let prompt = env.cases()[idx].prompt.clone();
        let w = env.weights();

        let t0 = Instant::now();
        let action = agent.greedy_action(&state)?;
        let d_dec = t0.elapsed();

        let t1 = Instant::now();
        let (logits, trace) = forward(w, &prompt)?;
        let attr = normalize_attr(&integrated_gradients(w, &prompt, argmax(&logits) as u32, ig_steps)?);
        let sites = env.spec().sites(action.category);
        let a: Vec<f64> = sites.iter().map(|s| attr[s.layer][s.neuron]).collect();
        let m_op = operational_mask(&env.mask.strengths(action.category), &a)?;
        let d_mask = t1.elapsed();

        let iv = apply_perturbation(
            env.spec(),
            action.category,
            action.kind,
            magnitudes[action.magnitude],
            &m_op,
            &trace.sigma,
            i as u64,
        )?;
        let t2 = Instant::now();
        let out = forward_with_intervention(w, &prompt, &iv)?;
        let d_fwd = t2.elapsed();
        std::hint::black_box(out);

        if i >= warmup {
            dec.push(d_dec.as_secs_f64() * 1e6);
            mask.push(d_mask.as_secs_f64() * 1e6);
            fwd.push(d_fwd.as_secs_f64() * 1e6);
        }
    }
    let phases = vec![summarize("decision", dec), summarize("mask", mask), summarize("forward", fwd)];
    Ok(TimingReport {
        reps,
        decision_over_forward: phases[0].mean_us / phases[2].mean_us,
        mask_over_forward: phases[1].mean_us / phases[2].mean_us,
        phases,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// `None` is the unrestricted mask.
    pub limit: Option<usize>,
    pub correction_rate: f64,
}

/// Held-out correction rate when only the `n` strongest mask entries are kept.
pub fn sweep_neuron_count(
    env: &mut LmEnv,
    agent: &mut Agent,
    variant: Variant,
    counts: &[usize],
    steps: usize,
) -> Result<Vec<SweepRow>> {
    let max = (0..env.spec().len()).map(|k| env.spec().size(k)).max().unwrap_or(0);
    let mut rows = Vec::new();
    for limit in counts.iter().map(|&c| Some(c)).chain([None]) {
        if let Some(c) = limit {
            if c > max {
                return Err(Error::input(format!("neuron count {c} exceeds the largest category ({max})")));
            }
        }
        env.neuron_limit = limit;
        let rep = evaluate(env, agent, variant, steps);
        env.neuron_limit = None;
        rows.push(SweepRow {
            limit,
            correction_rate: rep?.correction_rate,
        });
    }
    Ok(rows)
}
