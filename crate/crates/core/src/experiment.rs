//! Experiment configuration, multi-seed runs and run-directory artifacts.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::action_opt::ActionOptConfig;
use crate::baselines::{Arm, CemConfig, SilConfig};
use crate::env::{self, annotate_mc_returns, bias_rewards, generate_dataset, CoverageTag, Dataset, MazeLayout, PointMazeSpec};
use crate::error::{Error, Result};
use crate::numerics::{hex_digest, Checkpoint};
use crate::policies::PolicyConfig;
use crate::training::{
    finetune_online, pretrain_offline, Agent, CriticConfig, MetricsRow, ReplayBuffer, TrainLoopConfig, METRICS_HEADER,
};

/// Environment and offline data. Every field must be given explicitly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub layout: MazeLayout,
    pub regime: CoverageTag,
    pub dataset_episodes: usize,
    pub noise: f64,
    pub dataset_seed: u64,
    pub reward_bias: f64,
    pub max_episode_steps: usize,
    /// Load this file instead of generating data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_path: Option<PathBuf>,
}

impl EnvConfig {
    pub fn spec(&self) -> PointMazeSpec {
        let mut spec = self.layout.spec();
        spec.max_episode_steps = self.max_episode_steps;
        spec
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset_episodes == 0 {
            return Err(Error::Config("dataset_episodes must be at least 1".into()));
        }
        if self.max_episode_steps == 0 {
            return Err(Error::Config("max_episode_steps must be at least 1".into()));
        }
        if self.reward_bias > 1.0 {
            return Err(Error::Config("reward_bias above 1 makes rewards positive".into()));
        }
        self.spec().validate()
    }

    /// Offline data with Monte Carlo returns and biased rewards.
    pub fn dataset(&self, discount: f64) -> Result<Dataset> {
        let raw = match &self.dataset_path {
            Some(p) => {
                if !p.exists() {
                    return Err(Error::Missing(p.display().to_string()));
                }
                env::io::load(p)?
            }
            None => generate_dataset(&self.spec(), self.regime, self.dataset_episodes, self.noise, self.dataset_seed)?,
        };
        let biased = bias_rewards(raw, self.reward_bias)?;
        Ok(annotate_mc_returns(biased, discount))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvConfig,
    #[serde(default)]
    pub policy: PolicyConfig,
    #[serde(default)]
    pub critic: CriticConfig,
    #[serde(default)]
    pub action_opt: ActionOptConfig,
    #[serde(default)]
    pub train: TrainLoopConfig,
    #[serde(default)]
    pub cem: CemConfig,
    #[serde(default)]
    pub sil: SilConfig,
    #[serde(default)]
    pub arm: Arm,
    pub out_dir: PathBuf,
    pub seeds: Vec<u64>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a TOML config, or the config echoed in a run manifest (`.json`).
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Missing(path.display().to_string()),
            _ => Error::Io(e),
        })?;
        if path.extension().is_some_and(|e| e == "json") {
            let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
            let mut cfg = Self::from_toml_str(&manifest.config_toml)?;
            cfg.seeds = vec![manifest.seed];
            return Ok(cfg);
        }
        Self::from_toml_str(&text)
    }

    /// Full TOML echo including defaulted fields.
    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.policy.validate()?;
        self.critic.validate()?;
        self.action_opt.validate()?;
        self.arm.action_opt(&self.action_opt).validate()?;
        self.train.validate()?;
        self.cem.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed required".into()));
        }
        Ok(())
    }

    pub fn build_agent(&self, seed: u64) -> Result<Agent> {
        let spec = self.arm.spec(self.train.algorithm, &self.cem, &self.sil);
        let train = TrainLoopConfig { algorithm: spec.algorithm, ..self.train.clone() };
        Agent::new(
            spec,
            &self.policy,
            &self.critic,
            &self.arm.action_opt(&self.action_opt),
            &train,
            &self.env.spec(),
            self.env.reward_bias,
            seed,
        )
    }

    /// The train config with the arm's algorithm substituted.
    pub fn effective_train(&self) -> TrainLoopConfig {
        TrainLoopConfig { algorithm: self.arm.algorithm(self.train.algorithm), ..self.train.clone() }
    }

    pub fn run_dir(&self, seed: u64) -> PathBuf {
        self.out_dir.join(format!("seed_{seed}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub file: String,
    pub episodes: u64,
    pub sha256: String,
}

/// Written next to the metrics of every run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub arm: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub config_toml: String,
    pub metrics_sha256: String,
    pub checkpoints: Vec<CheckpointEntry>,
    pub status: String,
    pub improvement_samples: u64,
    pub critic_updates: u64,
}

pub const RUN_HEADER_SUFFIX: &str = ",arm";

pub fn metrics_header() -> String {
    format!("{METRICS_HEADER}{RUN_HEADER_SUFFIX}")
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub seed: u64,
    pub rows: Vec<MetricsRow>,
    pub agent: Agent,
    pub dir: Option<PathBuf>,
}

fn write_checkpoint(dir: &Path, name: &str, agent: &Agent, episodes: u64) -> Result<CheckpointEntry> {
    let ckpt = agent.to_checkpoint();
    let bytes = ckpt.to_bytes();
    fs::write(dir.join(name), &bytes)?;
    Ok(CheckpointEntry { file: name.to_string(), episodes, sha256: hex_digest(&bytes) })
}

/// One seed end to end. With `dir` set, writes `metrics.csv`, a checkpoint per evaluation
/// point and `manifest.json`; on divergence the last finite state is checkpointed before
/// the error is returned.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64, dataset: &Dataset, dir: Option<&Path>) -> Result<RunResult> {
    let train = cfg.effective_train();
    let mut agent = cfg.build_agent(seed)?;
    let mut buffer = ReplayBuffer::new(dataset.clone(), train.mixing_ratio, train.buffer_capacity)?;
    let env = cfg.env.spec();
    let arm = cfg.arm.name();
    let mut csv = String::new();
    csv.push_str(&metrics_header());
    csv.push('\n');
    let mut checkpoints = Vec::new();
    if let Some(d) = dir {
        fs::create_dir_all(d)?;
    }
    let outcome = pretrain_offline(&mut agent, &buffer, &train).and_then(|stats| {
        finetune_online(&mut agent, &env, &mut buffer, &train, stats, &mut |row, a| {
            csv.push_str(&row.to_csv());
            csv.push(',');
            csv.push_str(arm);
            csv.push('\n');
            if let Some(d) = dir {
                fs::write(d.join("metrics.csv"), &csv)?;
                checkpoints.push(write_checkpoint(d, &format!("ckpt_ep{:05}.bin", row.episodes), a, row.episodes)?);
            }
            Ok(())
        })
    });
    let status = match &outcome {
        Ok(_) => "completed".to_string(),
        Err(e) => e.to_string(),
    };
    if let Some(d) = dir {
        if outcome.is_err() {
            warn!("seed {seed} aborted: {status}");
            checkpoints.push(write_checkpoint(d, "ckpt_last_finite.bin", &agent, u64::MAX)?);
        }
        fs::write(d.join("metrics.csv"), &csv)?;
        let config_toml = cfg.to_toml_string()?;
        let manifest = Manifest {
            arm: arm.to_string(),
            seed,
            config: serde_json::to_value(cfg).map_err(|e| Error::Format(e.to_string()))?,
            config_toml,
            metrics_sha256: hex_digest(csv.as_bytes()),
            checkpoints,
            status,
            improvement_samples: agent.improvement_samples,
            critic_updates: agent.critic_updates,
        };
        let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(d.join("manifest.json"), json)?;
    }
    let rows = outcome?;
    Ok(RunResult { seed, rows, agent, dir: dir.map(Path::to_path_buf) })
}

/// Mean and standard error (sample std over sqrt n; 0 for a single value).
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (m, 0.0);
    }
    let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

pub const AGGREGATE_HEADER: &str = "episodes,n_seeds,success_mean,success_stderr,return_mean,return_stderr";

/// Per evaluation point across seeds. Rows are matched by position.
pub fn aggregate_csv(runs: &[Vec<MetricsRow>]) -> String {
    let mut out = format!("{AGGREGATE_HEADER}\n");
    let len = runs.iter().map(Vec::len).min().unwrap_or(0);
    for i in 0..len {
        let sr: Vec<f64> = runs.iter().map(|r| r[i].success_rate).collect();
        let ret: Vec<f64> = runs.iter().map(|r| r[i].mean_return).collect();
        let (sm, se) = mean_stderr(&sr);
        let (rm, re) = mean_stderr(&ret);
        out.push_str(&format!("{},{},{sm},{se},{rm},{re}\n", runs[0][i].episodes, runs.len()));
    }
    out
}

/// Every seed of `cfg` in turn, then `aggregate.csv` in the output directory. Existing run
/// directories are refused unless `force` is set.
pub fn run_experiment(cfg: &ExperimentConfig, force: bool) -> Result<Vec<RunResult>> {
    cfg.validate()?;
    for &seed in &cfg.seeds {
        let dir = cfg.run_dir(seed);
        if dir.join("metrics.csv").exists() && !force {
            return Err(Error::Config(format!("{} exists; pass --force to overwrite", dir.display())));
        }
    }
    let dataset = cfg.env.dataset(cfg.critic.calql.discount)?;
    info!(
        "dataset: {} transitions, {} episodes, success fraction {:.3}",
        dataset.len(),
        dataset.episodes.len(),
        dataset.success_fraction()
    );
    fs::create_dir_all(&cfg.out_dir)?;
    let mut results = Vec::new();
    for &seed in &cfg.seeds {
        info!("arm {} seed {seed}", cfg.arm.name());
        results.push(run_seed(cfg, seed, &dataset, Some(&cfg.run_dir(seed)))?);
    }
    let rows: Vec<Vec<MetricsRow>> = results.iter().map(|r| r.rows.clone()).collect();
    let mut f = fs::File::create(cfg.out_dir.join("aggregate.csv"))?;
    f.write_all(aggregate_csv(&rows).as_bytes())?;
    Ok(results)
}

/// Loads the checkpoint `file` (or the latest listed in `run_dir`'s manifest) into an agent
/// built from `cfg`.
pub fn restore_agent(cfg: &ExperimentConfig, seed: u64, checkpoint: &Path) -> Result<Agent> {
    if !checkpoint.exists() {
        return Err(Error::Missing(checkpoint.display().to_string()));
    }
    let ckpt = Checkpoint::load(checkpoint)?;
    let mut agent = cfg.build_agent(seed)?;
    agent.load_checkpoint(&ckpt, cfg.train.critic_lr)?;
    Ok(agent)
}

/// Long-format rows `arm,seed,step,metric,value` from the metrics of each run directory.
pub fn export_tidy(run_dirs: &[PathBuf]) -> Result<String> {
    let mut out = String::from("arm,seed,step,metric,value\n");
    let header = metrics_header();
    let columns: Vec<&str> = header.split(',').collect();
    let mut bad = Vec::new();
    let mut tables = Vec::new();
    for dir in run_dirs {
        let metrics = dir.join("metrics.csv");
        let manifest = dir.join("manifest.json");
        for p in [&metrics, &manifest] {
            if !p.exists() {
                return Err(Error::Missing(p.display().to_string()));
            }
        }
        let text = fs::read_to_string(&metrics)?;
        let m: Manifest = match serde_json::from_str(&fs::read_to_string(&manifest)?) {
            Ok(m) => m,
            Err(_) => {
                bad.push(manifest.display().to_string());
                continue;
            }
        };
        let mut lines = text.lines();
        if lines.next() != Some(header.as_str()) {
            bad.push(metrics.display().to_string());
            continue;
        }
        let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
        if rows.iter().any(|r| r.len() != columns.len()) {
            bad.push(metrics.display().to_string());
            continue;
        }
        tables.push((m.seed, rows));
    }
    if !bad.is_empty() {
        return Err(Error::Schema(bad));
    }
    let arm_col = columns.len() - 1;
    for (seed, rows) in tables {
        for r in rows {
            for (j, name) in columns.iter().enumerate().skip(1).take(arm_col - 1) {
                out.push_str(&format!("{},{seed},{},{name},{}\n", r[arm_col], r[0], r[j]));
            }
        }
    }
    Ok(out)
}
