use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use perturb_lab::adamask::MaskParams;
use perturb_lab::env::{compute_reward, load_transitions, MaskMode};
use perturb_lab::harness::{
    evaluate, lm_env, run_stage1, run_stage2, static_vector_baseline, steered_rate, steering_vectors,
    sweep_neuron_count, Checkpoint, MetricsRow, RunConfig, Stage1, Trainer, Variant,
};
use perturb_lab::taskgen::answer_of;
use perturb_lab::tinylm::SteeringHook;
use perturb_lab::Error;

fn stage1() -> &'static Stage1 {
    static S: OnceLock<Stage1> = OnceLock::new();
    S.get_or_init(|| run_stage1(&RunConfig::default()).unwrap())
}

fn small() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.ppo.horizon = 40;
    cfg.ppo.minibatch = 16;
    cfg.stage2.updates = 4;
    cfg.stage2.checkpoint_every = 2;
    cfg
}

/// A short stage-2 run written to disk once and shared.
fn trained() -> &'static (tempfile::TempDir, PathBuf) {
    static T: OnceLock<(tempfile::TempDir, PathBuf)> = OnceLock::new();
    T.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("full");
        run_stage2(&small(), Some(stage1()), Variant::Full, Some(&out)).unwrap();
        (dir, out)
    })
}

#[test]
fn corrupted_labels_are_reproduced_over_three_seeds() {
    for seed in 0..3 {
        let cfg = RunConfig {
            seed,
            ..RunConfig::default()
        };
        let s1 = if seed == 0 { None } else { Some(run_stage1(&cfg).unwrap()) };
        let s1 = s1.as_ref().unwrap_or_else(|| stage1());
        let sum = &s1.summary;
        assert!(
            sum.corrupted_reproduced as f64 >= 0.95 * sum.corrupted_total as f64,
            "seed {seed}: {}/{}",
            sum.corrupted_reproduced,
            sum.corrupted_total
        );
        assert!(sum.pool >= 40, "seed {seed}: pool {}", sum.pool);
        assert!(sum.report.final_accuracy >= 0.95);
        // no bad case is answered correctly by the trained model
        for c in &s1.cases {
            assert_ne!(answer_of(&s1.weights, &c.prompt).unwrap(), c.gold);
        }
    }
}

#[test]
fn pretraining_loss_decreases_across_checkpoints() {
    let cps = &stage1().summary.report.checkpoints;
    assert!(cps.len() >= 3);
    for pair in cps.windows(2) {
        assert!(pair[1].1 <= pair[0].1 * 1.02, "{:?} -> {:?}", pair[0], pair[1]);
    }
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn stage1_rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    stage1().save(&dir.path().join("a")).unwrap();
    run_stage1(&RunConfig::default()).unwrap().save(&dir.path().join("b")).unwrap();
    let a = read_dir_sorted(&dir.path().join("a"));
    let b = read_dir_sorted(&dir.path().join("b"));
    assert_eq!(a.len(), 6);
    assert_eq!(a, b);
    let back = Stage1::load(&dir.path().join("a")).unwrap();
    assert_eq!(back.cases, stage1().cases);
    assert_eq!(back.weights.checksum(), stage1().weights.checksum());
}

#[test]
fn empty_pool_is_a_config_error() {
    let mut cfg = RunConfig::default();
    cfg.world.corruption_rate = 0.0;
    match run_stage1(&cfg) {
        Err(Error::Config(msg)) => assert!(msg.contains("corruption_rate"), "{msg}"),
        Err(e) => panic!("wrong error: {e}"),
        Ok(s) => panic!("pool of {} accepted", s.cases.len()),
    }
}

#[test]
fn transition_log_replays_every_reward() {
    let (_, out) = trained();
    let log = load_transitions(&out.join("transitions.jsonl")).unwrap();
    let w = small().env.reward;
    let mut tried = Vec::new();
    let mut best = None;
    for rec in &log {
        if rec.t == 0 {
            tried.clear();
            best = Some(rec.baseline);
        }
        let expected_best = best.unwrap();
        assert_eq!(rec.best_before, expected_best);
        let pair = (rec.action.category, rec.action.kind);
        let novel = !tried.contains(&pair);
        if novel {
            tried.push(pair);
        }
        let r = compute_reward(rec.baseline, rec.current, expected_best, novel, &w);
        assert_eq!(r.total.to_bits(), rec.reward.to_bits(), "episode {} t {}", rec.episode, rec.t);
        assert_eq!(r.bonus > 0.0, rec.bonus);
        best = Some(expected_best.best(rec.current));
    }
}

#[test]
fn metrics_have_one_row_per_step_and_per_update() {
    let (_, out) = trained();
    let rows: Vec<MetricsRow> = csv::Reader::from_path(out.join("metrics.csv"))
        .unwrap()
        .deserialize()
        .map(|r| r.unwrap())
        .collect();
    let log = load_transitions(&out.join("transitions.jsonl")).unwrap();
    let steps: Vec<&MetricsRow> = rows.iter().filter(|r| r.kind == "step").collect();
    assert_eq!(steps.len(), log.len());
    assert_eq!(rows.iter().filter(|r| r.kind == "update").count(), 4);
    for (row, rec) in steps.iter().zip(&log) {
        assert_eq!(row.reward, Some(rec.reward));
        assert_eq!(row.episode, Some(rec.episode));
    }
    // every episode ends with a row carrying the mask loss
    assert!(steps.iter().filter(|r| r.done == Some(true)).all(|r| r.mask_loss.is_some()));
    for name in ["checkpoint_00002.json", "checkpoint_00004.json", "agent.json", "mask.json", "timing.csv", "manifest.json"] {
        assert!(out.join(name).exists(), "{name}");
    }
}

#[test]
fn forced_zero_mask_evaluates_to_baseline() {
    let (_, out) = trained();
    let s1 = stage1();
    let cfg = small();
    let ck = Checkpoint::load(&out.join("checkpoint.json")).unwrap();
    let mask = ck.mask.clone().unwrap();
    let mut env = lm_env(&cfg, s1, s1.held_out.clone(), mask.clone(), MaskMode::Off).unwrap();
    let mut agent = ck.agent.clone();
    let rep = evaluate(&mut env, &mut agent, Variant::Full, 1).unwrap();
    assert_eq!(rep.corrected, 0);
    assert_eq!(rep.mc_accuracy, rep.baseline_mc_accuracy);
    for c in &rep.cases {
        assert_eq!(c.before, c.after);
    }
    let again = evaluate(&mut env, &mut agent, Variant::Full, 1).unwrap();
    assert_eq!(rep, again);

    let mut env = lm_env(&cfg, s1, s1.held_out.clone(), mask, MaskMode::Mean).unwrap();
    let a = evaluate(&mut env, &mut agent, Variant::Full, 1).unwrap();
    let b = evaluate(&mut env, &mut agent, Variant::Full, 1).unwrap();
    assert_eq!(a, b);
    assert!(a.cases.iter().all(|c| c.actions.len() == 1));
}

#[test]
fn sweep_endpoints() {
    let s1 = stage1();
    let cfg = small();
    let mut tr = Trainer::new(&cfg, Some(s1), Variant::Full).unwrap();
    let spec = cfg.category_spec();
    let all = (0..spec.len()).map(|k| spec.size(k)).max().unwrap();
    let mask = tr.mask().cloned().unwrap();
    let mut env = lm_env(&cfg, s1, s1.held_out.clone(), mask, MaskMode::Mean).unwrap();
    let rows = sweep_neuron_count(&mut env, &mut tr.agent, Variant::Full, &[0, 3, all], 1).unwrap();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[0].correction_rate, 0.0);
    assert_eq!(rows[2].limit, Some(all));
    assert_eq!(rows[2].correction_rate, rows[3].correction_rate);
    assert_eq!(rows[3].limit, None);
    assert!(sweep_neuron_count(&mut env, &mut tr.agent, Variant::Full, &[all + 1], 1).is_err());
}

#[test]
fn static_baseline_identities() {
    let s1 = stage1();
    let w = &s1.weights;
    let bad: Vec<Vec<u32>> = s1.train.iter().map(|c| c.prompt.clone()).collect();
    let zero = steering_vectors(w, &bad, &bad).unwrap();
    assert!(zero.iter().flatten().all(|x| *x == 0.0));
    let hook = SteeringHook {
        vectors: zero,
        coefficient: 5.0,
    };
    assert_eq!(steered_rate(w, &hook, &s1.held_out).unwrap(), 0.0);
    assert!(matches!(steering_vectors(w, &[], &bad), Err(Error::Config(_))));

    let mut cfg = RunConfig::default();
    cfg.baseline.coefficients = vec![0.0, 2.0];
    let rep = static_vector_baseline(&cfg, s1).unwrap();
    assert_eq!(rep.rows[0].correction_rate, 0.0);
    assert!(rep.best_rate >= 0.0 && rep.best_rate <= 1.0);
}

#[test]
fn random_variants_are_reproducible() {
    let s1 = stage1();
    let mut cfg = small();
    cfg.stage2.updates = 2;
    for v in [Variant::RandomMask, Variant::RandomAction] {
        let a = run_stage2(&cfg, Some(s1), v, None).unwrap();
        let b = run_stage2(&cfg, Some(s1), v, None).unwrap();
        assert_eq!(a.rows, b.rows);
        assert_eq!(a.checkpoint(), b.checkpoint());
    }
}

#[test]
fn random_action_variant_still_trains_the_mask() {
    let s1 = stage1();
    let mut cfg = small();
    cfg.stage2.updates = 1;
    let init = MaskParams::new(&cfg.category_spec(), cfg.mask).unwrap();
    let tr = run_stage2(&cfg, Some(s1), Variant::RandomAction, None).unwrap();
    assert_ne!(tr.mask().unwrap().theta, init.theta);
    let fresh = Trainer::new(&cfg, Some(s1), Variant::RandomAction).unwrap();
    assert_eq!(tr.agent.params, fresh.agent.params);
}

#[test]
fn restoring_a_planted_checkpoint_into_lm_mode_fails() {
    let mut planted = small();
    planted.mode = perturb_lab::harness::RunMode::Planted;
    planted.stage2.updates = 0;
    let ck = run_stage2(&planted, None, Variant::Full, None).unwrap().checkpoint();
    let mut tr = Trainer::new(&small(), Some(stage1()), Variant::Full).unwrap();
    assert!(matches!(tr.restore(ck), Err(Error::Load(_))));
}
