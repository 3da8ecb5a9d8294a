use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn parl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_parl"))
        .args(args)
        .env("PARL_LOG_LEVEL", "error")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn tiny_config(dir: &Path, extra_train: &str) -> PathBuf {
    let path = dir.join("tiny.toml");
    let text = format!(
        r#"out_dir = "{}"
seeds = [0]

[env]
layout = "medium"
regime = "diverse"
dataset_episodes = 20
noise = 1.0
dataset_seed = 3
reward_bias = 0.0
max_episode_steps = 30

[policy]
kind = "diffusion_ddpm"
hidden = [16, 16]

[critic]
hidden = [16, 16]

[action_opt]
n_samples = 4
top_m = 2
n_grad_steps = 1

[train]
bc_steps = 10
offline_grad_steps = 5
online_env_episodes = 2
eval_every = 1
eval_episodes = 2
batch_size = 8
distill_every_episodes = 1
distill_states = 16
distill_batch = 8
{extra_train}
"#,
        dir.join("runs").display()
    );
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn gen_data_is_deterministic_with_coverage() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("d.bin");
    let o = parl(&["gen-data", "--regime", "diverse", "--episodes", "100", "--seed", "7", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let data = parl::env::io::load(&out).unwrap();
    assert!(data.action_coverage(10) >= 0.9);
    let first = fs::read(&out).unwrap();
    let again = parl(&["gen-data", "--regime", "diverse", "--episodes", "100", "--seed", "7", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&again), 2, "existing output needs --force");
    let forced = parl(&[
        "gen-data", "--regime", "diverse", "--episodes", "100", "--seed", "7", "--force", "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(code(&forced), 0);
    assert_eq!(fs::read(&out).unwrap(), first);
}

#[test]
fn zero_episodes_is_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("d.bin");
    let o = parl(&["gen-data", "--episodes", "0", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(!out.exists());
}

#[test]
fn train_seeds_probe_and_export() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), "");
    let cfg_s = cfg.to_str().unwrap();
    let o = parl(&["train", "--config", cfg_s, "--seeds", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let runs = tmp.path().join("runs");
    for s in 0..2 {
        assert!(runs.join(format!("seed_{s}/metrics.csv")).exists());
        assert!(runs.join(format!("seed_{s}/manifest.json")).exists());
    }
    let agg = fs::read_to_string(runs.join("aggregate.csv")).unwrap();
    assert!(agg.starts_with("episodes,n_seeds,success_mean,success_stderr"));
    assert_eq!(agg.lines().count(), 1 + 3);

    let manifest = runs.join("seed_1/manifest.json");
    let first = fs::read(runs.join("seed_1/metrics.csv")).unwrap();
    let rerun = parl(&["train", "--config", manifest.to_str().unwrap(), "--out", tmp.path().join("again").to_str().unwrap()]);
    assert_eq!(code(&rerun), 0);
    assert_eq!(fs::read(tmp.path().join("again/seed_1/metrics.csv")).unwrap(), first);

    let ckpt = runs.join("seed_0/ckpt_ep00002.bin");
    let gaps = tmp.path().join("gaps.csv");
    let o = parl(&[
        "probe", "--config", cfg_s, "--checkpoint", ckpt.to_str().unwrap(), "--probe", "overestimation", "--source", "cem",
        "--rollouts", "3", "--out", gaps.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&gaps).unwrap();
    assert!(text.starts_with("step,source,q_predicted,mc_return,gap\n"));
    assert_eq!(text.lines().count(), 4);

    let stats = tmp.path().join("stats.csv");
    let o = parl(&["probe", "--config", cfg_s, "--probe", "action-stats", "--states", "5", "--out", stats.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let text = fs::read_to_string(&stats).unwrap();
    assert!(text.starts_with("state_index,std_before,std_after,l1_change\n"));

    let tidy = tmp.path().join("tidy.csv");
    let o = parl(&[
        "export-plots",
        runs.join("seed_0").to_str().unwrap(),
        runs.join("seed_1").to_str().unwrap(),
        "--out",
        tidy.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    let text = fs::read_to_string(&tidy).unwrap();
    let groups: std::collections::BTreeSet<String> =
        text.lines().skip(1).map(|l| l.split(',').take(2).collect::<Vec<_>>().join(",")).collect();
    assert_eq!(groups.len(), 2);

    fs::write(runs.join("seed_1/metrics.csv"), "step,episodes\n0,0\n").unwrap();
    let o = parl(&["export-plots", runs.join("seed_0").to_str().unwrap(), runs.join("seed_1").to_str().unwrap()]);
    assert_eq!(code(&o), 5);
    assert!(String::from_utf8_lossy(&o.stderr).contains("seed_1"));
}

#[test]
fn missing_checkpoint_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), "");
    let o = parl(&[
        "probe", "--config", cfg.to_str().unwrap(), "--checkpoint", "/nonexistent/ckpt.bin", "--probe", "overestimation",
        "--out", tmp.path().join("g.csv").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 4);
}

#[test]
fn untrained_probe_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), "");
    let out = tmp.path().join("g.csv");
    let o = parl(&[
        "probe", "--config", cfg.to_str().unwrap(), "--probe", "overestimation", "--source", "base_policy", "--rollouts",
        "2", "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read_to_string(&out).unwrap().lines().count(), 3);
}

#[test]
fn empty_export_is_header_only() {
    let o = parl(&["export-plots"]);
    assert_eq!(code(&o), 0);
    assert_eq!(String::from_utf8_lossy(&o.stdout), "arm,seed,step,metric,value\n");
}

#[test]
fn divergence_exits_3_with_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), "critic_lr = 1e300");
    let o = parl(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(tmp.path().join("runs/seed_0/ckpt_last_finite.bin").exists());
}

#[test]
fn unknown_config_key_is_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), "typo_field = 3");
    let o = parl(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}
