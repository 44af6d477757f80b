use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use perturb_lab::adamask::MaskParams;
use perturb_lab::env::{MaskMode, PlantedEnv};
use perturb_lab::harness::{
    ablate, bench_timing, evaluate, lm_env, planted_selection, run_stage1, run_stage2, static_vector_baseline,
    sweep_neuron_count, write_csv, Checkpoint, Manifest, RunConfig, RunMode, Stage1, Variant,
};
use perturb_lab::{records, Error, Result};

#[derive(Parser)]
#[command(name = "perturb-lab", version, about = "Hierarchical-RL neuron perturbation on a tiny transformer")]
struct Cli {
    /// TOML run configuration; defaults apply to anything left out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Use the planted synthetic environment instead of the tiny LM.
    #[arg(long, global = true)]
    planted: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print the effective configuration as TOML.
    Config,
    /// Train the tiny LM and mine bad cases.
    Stage1,
    /// Co-train the agent and the mask.
    Stage2 {
        #[arg(long, default_value = "full")]
        variant: Variant,
    },
    /// Evaluate a Stage-2 checkpoint on the held-out cases.
    Eval {
        #[arg(long, default_value = "full")]
        variant: Variant,
        /// Policy steps per case.
        #[arg(long)]
        eval_steps: Option<usize>,
        /// Force every mask strength to zero.
        #[arg(long)]
        mask_off: bool,
    },
    /// Train and evaluate all four variants over the configured seeds.
    Ablate,
    /// Static steering-vector comparator.
    Baseline,
    /// Per-phase timing of one intervention.
    Bench {
        #[arg(long, default_value = "full")]
        variant: Variant,
    },
    /// Correction rate against the number of perturbed neurons.
    Sweep {
        #[arg(long, default_value = "full")]
        variant: Variant,
    },
}

fn stage1_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("stage1")
}

fn stage2_dir(cfg: &RunConfig, v: Variant) -> PathBuf {
    cfg.out_dir.join("stage2").join(v.name())
}

fn load_stage1(cfg: &RunConfig) -> Result<Stage1> {
    let dir = stage1_dir(cfg);
    if !dir.join("stage1.json").exists() {
        return Err(Error::Config(format!(
            "no stage-1 artifacts in {}; run `perturb-lab stage1` first",
            dir.display()
        )));
    }
    Stage1::load(&dir)
}

fn load_checkpoint(cfg: &RunConfig, v: Variant) -> Result<Checkpoint> {
    let path = stage2_dir(cfg, v).join("checkpoint.json");
    if !path.exists() {
        return Err(Error::Config(format!(
            "no checkpoint at {}; run `perturb-lab stage2 --variant {}` first",
            path.display(),
            v.name()
        )));
    }
    Checkpoint::load(&path)
}

fn lm_parts(cfg: &RunConfig, v: Variant) -> Result<(Stage1, Checkpoint, MaskParams)> {
    let s1 = load_stage1(cfg)?;
    let ck = load_checkpoint(cfg, v)?;
    let mask = ck
        .mask
        .clone()
        .ok_or_else(|| Error::Load("checkpoint has no mask; was it trained in planted mode?".into()))?;
    Ok((s1, ck, mask))
}

fn save_json<T: Serialize>(dir: &Path, name: &str, kind: &str, v: &T) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    records::save_container(&dir.join(name), kind, v)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = cli.out {
        cfg.out_dir = o;
    }
    if cli.planted {
        cfg.mode = RunMode::Planted;
    }
    cfg.validate()?;

    match cli.cmd {
        Cmd::Config => print!("{}", cfg.to_toml_string()?),
        Cmd::Stage1 => {
            let s1 = run_stage1(&cfg)?;
            let dir = stage1_dir(&cfg);
            s1.save(&dir)?;
            Manifest::new("stage1", &cfg)?.save(&dir.join("manifest.json"))?;
            let s = &s1.summary;
            println!(
                "accuracy {:.3}, corrupted reproduced {}/{}, pool {} (train {}, held-out {}), written to {}",
                s.report.final_accuracy,
                s.corrupted_reproduced,
                s.corrupted_total,
                s.pool,
                s.train,
                s.held_out,
                dir.display()
            );
        }
        Cmd::Stage2 { variant } => {
            let s1 = match cfg.mode {
                RunMode::Lm => Some(load_stage1(&cfg)?),
                RunMode::Planted => None,
            };
            let dir = stage2_dir(&cfg, variant);
            let tr = run_stage2(&cfg, s1.as_ref(), variant, Some(&dir))?;
            println!("{} updates, {} steps, written to {}", tr.agent.updates, tr.transitions.len(), dir.display());
        }
        Cmd::Eval {
            variant,
            eval_steps,
            mask_off,
        } => {
            let steps = eval_steps.unwrap_or(cfg.eval.steps);
            if cfg.mode == RunMode::Planted {
                let ck = load_checkpoint(&cfg, variant)?;
                let mut env = PlantedEnv::new(cfg.planted_config())?;
                let p = planted_selection(&ck.agent, &mut env)?;
                println!("planted selection probability: {p:.4}");
                return Ok(());
            }
            let (s1, mut ck, mask) = lm_parts(&cfg, variant)?;
            let mode = if mask_off { MaskMode::Off } else { variant.eval_mode() };
            let mut env = lm_env(&cfg, &s1, s1.held_out.clone(), mask, mode)?;
            let rep = evaluate(&mut env, &mut ck.agent, variant, steps)?;
            save_json(&stage2_dir(&cfg, variant), "eval.json", "eval-report", &rep)?;
            println!(
                "{}: corrected {}/{} ({:.3}), MC accuracy {:.3} (baseline {:.3}), mean H {:.3} -> {:.3}",
                variant.name(),
                rep.corrected,
                rep.n_cases,
                rep.correction_rate,
                rep.mc_accuracy,
                rep.baseline_mc_accuracy,
                rep.mean_before[0],
                rep.mean_after[0]
            );
        }
        Cmd::Ablate => {
            let dir = cfg.out_dir.join("ablation");
            let rows = ablate(&cfg, Some(&dir))?;
            println!("{:<14} {:>18} {:>18}", "variant", "correction", "mc accuracy");
            for r in &rows {
                println!(
                    "{:<14} {:>8.3} ± {:<7.3} {:>8.3} ± {:<7.3}",
                    r.variant.name(),
                    r.rate_mean,
                    r.rate_std,
                    r.mc_mean,
                    r.mc_std
                );
            }
        }
        Cmd::Baseline => {
            let s1 = load_stage1(&cfg)?;
            let rep = static_vector_baseline(&cfg, &s1)?;
            let dir = cfg.out_dir.join("baseline");
            save_json(&dir, "baseline.json", "baseline-report", &rep)?;
            write_csv(&dir.join("baseline.csv"), &rep.rows)?;
            for r in &rep.rows {
                println!("coefficient {:>6}: {:.3}", r.coefficient, r.correction_rate);
            }
            println!("best: coefficient {} rate {:.3}", rep.best_coefficient, rep.best_rate);
        }
        Cmd::Bench { variant } => {
            let (s1, mut ck, mask) = lm_parts(&cfg, variant)?;
            let mut env = lm_env(&cfg, &s1, s1.held_out.clone(), mask, MaskMode::Mean)?;
            let rep = bench_timing(&mut env, &mut ck.agent, cfg.bench.reps, cfg.bench.warmup)?;
            let dir = cfg.out_dir.join("bench");
            save_json(&dir, "timing.json", "timing-report", &rep)?;
            for p in &rep.phases {
                println!("{:<9} mean {:>10.1} us  p95 {:>10.1} us", p.phase, p.mean_us, p.p95_us);
            }
            println!(
                "decision/forward {:.3}  mask/forward {:.3}",
                rep.decision_over_forward, rep.mask_over_forward
            );
        }
        Cmd::Sweep { variant } => {
            let (s1, mut ck, mask) = lm_parts(&cfg, variant)?;
            let mut env = lm_env(&cfg, &s1, s1.held_out.clone(), mask, variant.eval_mode())?;
            let rows = sweep_neuron_count(&mut env, &mut ck.agent, variant, &cfg.sweep.counts, cfg.eval.steps)?;
            let dir = cfg.out_dir.join("sweep");
            save_json(&dir, "sweep.json", "sweep", &rows)?;
            write_csv(&dir.join("sweep.csv"), &rows)?;
            for r in &rows {
                match r.limit {
                    Some(n) => println!("n = {n:>4}: {:.3}", r.correction_rate),
                    None => println!("adaptive: {:.3}", r.correction_rate),
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
