use std::path::Path;
use std::process::{Command, Output};

use cogradar_core::interference::parse_trace;

fn cogradar(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cogradar"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = cogradar(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.display().to_string()
}

fn small(kind: &str, offline: usize) -> String {
    format!(
        "[interference]\nkind = \"markov\"\np_switch = 0.4\nactive = \"11000\"\n\
         [agent]\nkind = \"{kind}\"\n\
         [phases]\noffline_cpis = {offline}\neval_cpis = 2\npulses_per_cpi = 20\n"
    )
}

fn read_trace(path: &Path) -> Vec<cogradar_core::mask::SubbandMask> {
    parse_trace(&std::fs::read_to_string(path).unwrap()).unwrap().frames().to_vec()
}

#[test]
fn sweep_trace_cycles_through_every_band() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sweep.txt");
    let p = path.display().to_string();
    ok(&["trace-gen", "--kind", "sweep", "--length", "50", "--phase", "2", "--path", &p]);
    let frames = read_trace(&path);
    assert_eq!(frames.len(), 50);
    for (t, f) in frames.iter().enumerate() {
        assert_eq!(f.count_ones(), 1);
        assert!(f.get((t + 2) % 5), "frame {t}: {f}");
    }
}

#[test]
fn markov_trace_switches_at_the_configured_rate() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("markov.txt");
    let p = path.display().to_string();
    ok(&["trace-gen", "--kind", "markov", "--p-switch", "0.4", "--active", "11000", "--length", "100000", "--path", &p]);
    let frames = read_trace(&path);
    assert_eq!(frames.len(), 100_000);
    let allowed = ["00000", "11000"];
    assert!(frames.iter().all(|f| allowed.contains(&f.to_string().as_str())));
    let switches = frames.windows(2).filter(|w| w[0] != w[1]).count() as f64 / (frames.len() - 1) as f64;
    // binomial standard error at n = 1e5 is about 0.0015
    assert!((switches - 0.4).abs() < 0.01, "switch rate {switches}");
}

#[test]
fn train_then_eval_round_trips_through_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "dqn.toml", &small("dqn", 2));
    let out = dir.path().join("out");
    let o = out.display().to_string();
    ok(&["train", "--config", &cfg, "--out", &o]);
    for f in ["agent.ckpt", "train_curve.csv", "train_manifest.json"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let ck = out.join("agent.ckpt").display().to_string();
    let stdout = ok(&["eval", "--config", &cfg, "--checkpoint", &ck, "--out", &o]);
    assert!(stdout.contains("mean reward"));
    let curve = std::fs::read_to_string(out.join("eval_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 3);
    assert!(out.join("eval_manifest.json").exists());
    assert!(out.join("train_manifest.json").exists());
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("eval_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "eval");
    assert_eq!(manifest["files"].as_array().unwrap().len(), 2);
}

#[test]
fn zero_offline_cpis_give_an_untrained_agent_and_empty_curve() {
    let dir = tempfile::tempdir().unwrap();
    for (kind, ck) in [("dqn", "agent.ckpt"), ("policy-iteration", "policy.txt")] {
        let cfg = write(dir.path(), &format!("{kind}.toml"), &small(kind, 0));
        let out = dir.path().join(kind);
        let o = out.display().to_string();
        ok(&["train", "--config", &cfg, "--out", &o]);
        let curve = std::fs::read_to_string(out.join("train_curve.csv")).unwrap();
        assert_eq!(curve, "cpi_index,mean_reward\n");
        let c = out.join(ck).display().to_string();
        ok(&["eval", "--config", &cfg, "--checkpoint", &c, "--out", &o]);
    }
}

#[test]
fn mismatched_checkpoints_and_missing_checkpoints_fail() {
    let dir = tempfile::tempdir().unwrap();
    let dqn = write(dir.path(), "dqn.toml", &small("dqn", 1));
    let drqn = write(dir.path(), "drqn.toml", &small("drqn", 1));
    let out = dir.path().join("out").display().to_string();
    ok(&["train", "--config", &dqn, "--out", &out]);
    let ck = dir.path().join("out/agent.ckpt").display().to_string();

    let wrong = cogradar(&["eval", "--config", &drqn, "--checkpoint", &ck, "--out", &out]);
    assert_eq!(wrong.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&wrong.stderr).contains("checkpoint holds a dqn agent"));

    let missing = cogradar(&["eval", "--config", &dqn, "--out", &out]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("agent.checkpoint"));

    let garbage = write(dir.path(), "garbage.ckpt", "not a network");
    let bad = cogradar(&["eval", "--config", &dqn, "--checkpoint", &garbage, "--out", &out]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn invalid_scenario_files_fail_with_the_field_name() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "bad.toml",
        "[interference]\nkind = \"sweep\"\n[agent]\nkind = \"saa\"\nbatch_size = 8\n",
    );
    let out = cogradar(&["eval", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("agent.batch_size"));
}

#[test]
fn compare_rejects_configs_from_different_scenes() {
    let dir = tempfile::tempdir().unwrap();
    let a = write(dir.path(), "a.toml", &small("saa", 0));
    let b = write(
        dir.path(),
        "b.toml",
        &small("random", 0).replace("p_switch = 0.4", "p_switch = 0.2"),
    );
    let out = dir.path().join("out").display().to_string();
    let r = cogradar(&["compare", "--config", &a, "--config", &b, "--out", &out]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("differs from the first"));
}

#[test]
fn compare_adds_the_optimal_policy_column() {
    let dir = tempfile::tempdir().unwrap();
    let a = write(dir.path(), "a.toml", &small("saa", 0));
    let b = write(dir.path(), "b.toml", &small("random", 0));
    let out = dir.path().join("out");
    let o = out.display().to_string();
    ok(&["compare", "--config", &a, "--config", &b, "--config", &a, "--out", &o]);
    let curve = std::fs::read_to_string(out.join("compare_curve.csv")).unwrap();
    assert_eq!(
        curve.lines().next().unwrap(),
        "cpi_index,saa_mean_reward,random_mean_reward,saa_2_mean_reward,pi_star_mean_reward"
    );
    assert_eq!(curve.lines().count(), 3);
}

#[test]
fn grad_check_passes_and_reports_each_stack() {
    let stdout = ok(&["grad-check", "--seeds", "3"]);
    for stack in ["dense", "lstm", "mixed"] {
        assert!(stdout.contains(stack), "{stdout}");
    }
    assert_eq!(cogradar(&["grad-check", "--seeds", "0"]).status.code(), Some(2));
}

#[test]
fn identical_runs_write_identical_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "pi.toml", &small("policy-iteration", 2));
    let saa = write(dir.path(), "saa.toml", &small("saa", 2));
    let roc_extra = "[radar]\nroc_cpis = 2\nroc_pulses_per_cpi = 8\n";
    let roc_cfg = write(dir.path(), "pi_roc.toml", &(small("policy-iteration", 2) + roc_extra));
    let roc_saa = write(dir.path(), "saa_roc.toml", &(small("saa", 2) + roc_extra));
    let mut outputs = Vec::new();
    for run in 0..2 {
        let out = dir.path().join(format!("run{run}"));
        let o = out.display().to_string();
        ok(&["train", "--config", &cfg, "--out", &o]);
        let ck = out.join("policy.txt").display().to_string();
        ok(&["eval", "--config", &cfg, "--checkpoint", &ck, "--out", &o]);
        ok(&["compare", "--config", &cfg, "--config", &saa, "--out", &o]);
        ok(&["roc", "--config", &roc_cfg, "--config", &roc_saa, "--out", &o]);
        let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(&out)
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
            .collect();
        files.sort();
        outputs.push(files);
    }
    assert_eq!(outputs[0].len(), 8);
    assert_eq!(outputs[0], outputs[1]);
}
