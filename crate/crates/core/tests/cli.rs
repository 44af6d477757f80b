use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_perturb-lab"))
}

#[test]
fn config_prints_parseable_defaults() {
    let out = bin().args(["--seed", "7", "config"]).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let cfg = perturb_lab::harness::RunConfig::from_toml_str(&text).unwrap();
    assert_eq!(cfg.seed, 7);
}

#[test]
fn unknown_config_key_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "[ppo]\nclipp = 0.1\n").unwrap();
    let out = bin().arg("--config").arg(&path).arg("config").output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("clipp"));
}

#[test]
fn planted_stage2_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        "[planted]\nemb_dim = 8\n[ppo]\nhorizon = 32\n[stage2]\nupdates = 2\ncheckpoint_every = 0\n",
    )
    .unwrap();
    let run = |args: &[&str]| {
        bin()
            .arg("--config")
            .arg(&cfg)
            .arg("--out")
            .arg(dir.path())
            .arg("--planted")
            .args(args)
            .output()
            .unwrap()
    };
    let out = run(&["stage2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = dir.path().join("stage2/full/metrics.csv");
    assert!(metrics.exists());
    let out = run(&["eval"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("selection probability"));
}

#[test]
fn lm_commands_need_stage1_first() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin().arg("--out").arg(dir.path()).arg("stage2").output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage1"));
}
