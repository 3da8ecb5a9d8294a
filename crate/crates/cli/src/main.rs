//! `parl`: dataset generation, training, probes and plot-data export.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 numeric divergence,
//! 4 missing artifact, 5 schema mismatch, 1 anything else.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use parl::baselines::{action_stats_probe, overestimation_probe, Arm, ProbeSource};
use parl::env::{self, generate_dataset, CoverageTag, MazeLayout};
use parl::experiment::{export_tidy, restore_agent, run_experiment, ExperimentConfig};
use parl::policies::PolicyKind;
use parl::training::Algorithm;
use parl::Error;

#[derive(Parser)]
#[command(name = "parl", version, about = "Policy-agnostic RL experiments on point mazes")]
struct Cli {
    /// Worker threads for rollouts and candidate computation.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate an offline dataset with the noisy scripted controller.
    GenData(GenData),
    /// Offline pretraining followed by online fine-tuning, for every seed.
    Train(Train),
    /// Diagnostics on a trained (or untrained) agent.
    Probe(Probe),
    /// Long-format metrics from run directories.
    ExportPlots(Export),
}

#[derive(Args)]
struct GenData {
    /// Take layout, regime, episodes, noise and seed from a config's `[env]` table.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "large")]
    layout: LayoutArg,
    #[arg(long, value_enum, default_value = "diverse")]
    regime: RegimeArg,
    #[arg(long, default_value_t = 300)]
    episodes: usize,
    /// Controller noise in [0, 2]; defaults to 1.75 (diverse) or 0.2 (play).
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct Train {
    #[arg(long)]
    config: PathBuf,
    /// Run a single seed.
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    /// Run seeds 0..K.
    #[arg(long)]
    seeds: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
    #[arg(long, value_enum)]
    algorithm: Option<AlgorithmArg>,
    #[arg(long, value_enum)]
    policy: Option<PolicyArg>,
    #[arg(long, value_enum)]
    ablation: Option<ArmArg>,
    /// Number of policy samples k for global optimization.
    #[arg(long)]
    samples: Option<usize>,
}

#[derive(Args)]
struct Probe {
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint to probe; without one the freshly initialized agent is used.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum)]
    probe: ProbeKind,
    #[arg(long, value_enum, default_value = "cem")]
    source: SourceArg,
    #[arg(long, default_value_t = 32)]
    rollouts: usize,
    /// Dataset states used by the action statistics probe.
    #[arg(long, default_value_t = 64)]
    states: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct Export {
    run_dirs: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum LayoutArg {
    Medium,
    Large,
}

#[derive(Clone, Copy, ValueEnum)]
enum RegimeArg {
    Diverse,
    Play,
}

#[derive(Clone, Copy, ValueEnum)]
enum AlgorithmArg {
    #[value(name = "calql_parl")]
    CalqlParl,
    #[value(name = "iql_parl")]
    IqlParl,
    #[value(name = "hybrid_parl")]
    HybridParl,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Diffusion,
    Gaussian,
    Autoregressive,
}

#[derive(Clone, Copy, ValueEnum)]
enum ArmArg {
    #[value(name = "full")]
    Full,
    #[value(name = "no_global")]
    NoGlobal,
    #[value(name = "no_local")]
    NoLocal,
    #[value(name = "cem_scratch")]
    CemScratch,
    #[value(name = "cem_policy")]
    CemPolicy,
    #[value(name = "sil")]
    Sil,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProbeKind {
    Overestimation,
    ActionStats,
}

#[derive(Clone, Copy, ValueEnum)]
enum SourceArg {
    Cem,
    Parl,
    #[value(name = "base_policy")]
    BasePolicy,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Divergence(_) | Error::NonFinite { .. } => 3,
        Error::Missing(_) => 4,
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => 4,
        Error::Schema(_) | Error::Format(_) => 5,
        _ => 1,
    }
}

fn refuse_existing(path: &Path, force: bool) -> parl::Result<()> {
    if path.exists() && !force {
        return Err(Error::Config(format!("{} exists; pass --force to overwrite", path.display())));
    }
    Ok(())
}

fn gen_data(args: GenData) -> parl::Result<()> {
    let (mut spec, regime, episodes, noise, seed) = match &args.config {
        Some(p) => {
            let cfg = ExperimentConfig::load(p)?;
            (cfg.env.spec(), cfg.env.regime, cfg.env.dataset_episodes, cfg.env.noise, cfg.env.dataset_seed)
        }
        None => {
            let regime = match args.regime {
                RegimeArg::Diverse => CoverageTag::Diverse,
                RegimeArg::Play => CoverageTag::Play,
            };
            let layout = match args.layout {
                LayoutArg::Medium => MazeLayout::Medium,
                LayoutArg::Large => MazeLayout::Large,
            };
            let noise = args.noise.unwrap_or(match regime {
                CoverageTag::Diverse => 1.75,
                CoverageTag::Play => 0.2,
            });
            (layout.spec(), regime, args.episodes, noise, args.seed)
        }
    };
    if let Some(m) = args.max_steps {
        spec.max_episode_steps = m;
    }
    refuse_existing(&args.out, args.force)?;
    let data = generate_dataset(&spec, regime, episodes, noise, seed)?;
    env::io::save(&data, &args.out)?;
    println!("wrote {}", args.out.display());
    println!("regime {} noise {noise} seed {seed}", regime.name());
    println!("transitions {} episodes {}", data.len(), data.episodes.len());
    println!("action coverage (10x10 bins) {:.3}", data.action_coverage(10));
    println!("task goal reached in {:.3} of episodes", data.success_fraction());
    Ok(())
}

fn train(args: Train) -> parl::Result<()> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(s) = args.seed {
        cfg.seeds = vec![s];
    }
    if let Some(k) = args.seeds {
        cfg.seeds = (0..k).collect();
    }
    if let Some(out) = args.out {
        cfg.out_dir = out;
    }
    if let Some(a) = args.algorithm {
        cfg.train.algorithm = match a {
            AlgorithmArg::CalqlParl => Algorithm::CalqlParl,
            AlgorithmArg::IqlParl => Algorithm::IqlParl,
            AlgorithmArg::HybridParl => Algorithm::HybridParl,
        };
    }
    if let Some(p) = args.policy {
        cfg.policy.kind = match p {
            PolicyArg::Diffusion => PolicyKind::DiffusionDdpm,
            PolicyArg::Gaussian => PolicyKind::TanhGaussian,
            PolicyArg::Autoregressive => PolicyKind::AutoregressiveCategorical,
        };
    }
    if let Some(a) = args.ablation {
        cfg.arm = match a {
            ArmArg::Full => Arm::Full,
            ArmArg::NoGlobal => Arm::NoGlobal,
            ArmArg::NoLocal => Arm::NoLocal,
            ArmArg::CemScratch => Arm::CemScratch,
            ArmArg::CemPolicy => Arm::CemPolicy,
            ArmArg::Sil => Arm::Sil,
        };
    }
    if let Some(k) = args.samples {
        cfg.action_opt.n_samples = k;
        cfg.action_opt.top_m = cfg.action_opt.top_m.min(k);
    }
    cfg.validate()?;
    let results = run_experiment(&cfg, args.force)?;
    for r in &results {
        if let Some(last) = r.rows.last() {
            println!("seed {}: final success {:.3} after {} episodes", r.seed, last.success_rate, last.episodes);
        }
    }
    println!("aggregate: {}", cfg.out_dir.join("aggregate.csv").display());
    Ok(())
}

fn probe(args: Probe) -> parl::Result<()> {
    let cfg = ExperimentConfig::load(&args.config)?;
    let agent = match &args.checkpoint {
        Some(p) => restore_agent(&cfg, args.seed, p)?,
        None => {
            warn!("no checkpoint given; probing an untrained agent");
            cfg.build_agent(args.seed)?
        }
    };
    refuse_existing(&args.out, args.force)?;
    let selection = cfg.train.eval_selection.unwrap_or(cfg.action_opt.selection);
    let mut csv = String::new();
    match args.probe {
        ProbeKind::Overestimation => {
            let source = match args.source {
                SourceArg::Cem => ProbeSource::Cem,
                SourceArg::Parl => ProbeSource::Parl,
                SourceArg::BasePolicy => ProbeSource::BasePolicy,
            };
            let records = overestimation_probe(&agent, source, &cfg.cem, &cfg.env.spec(), args.rollouts, selection)?;
            csv.push_str("step,source,q_predicted,mc_return,gap\n");
            for r in &records {
                csv.push_str(&format!("{},{},{},{},{}\n", r.step, source.name(), r.q_predicted, r.mc_return, r.gap));
            }
            let mean_gap = records.iter().map(|r| r.gap).sum::<f64>() / records.len().max(1) as f64;
            println!("mean gap {mean_gap:.3} over {} rollouts", records.len());
            if mean_gap > 10.0 {
                warn!("critic overestimates realized returns by {mean_gap:.1} on average");
            }
        }
        ProbeKind::ActionStats => {
            let data = cfg.env.dataset(cfg.critic.calql.discount)?;
            let n = args.states.min(data.len());
            let states: Vec<f64> = data.transitions[..n].iter().flat_map(|t| t.state.iter().copied()).collect();
            let view = agent.critic.online();
            let records = action_stats_probe(&agent, &view, &states, &agent.action_opt)?;
            csv.push_str("state_index,std_before,std_after,l1_change\n");
            for r in &records {
                csv.push_str(&format!("{},{},{},{}\n", r.state_index, r.std_before, r.std_after, r.l1_change));
            }
        }
    }
    fs::write(&args.out, csv)?;
    info!("wrote {}", args.out.display());
    Ok(())
}

fn export(args: Export) -> parl::Result<()> {
    let csv = export_tidy(&args.run_dirs)?;
    match args.out {
        Some(p) => fs::write(p, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = std::env::var("PARL_LOG_LEVEL").unwrap_or_else(|_| "info".into());
    env_logger::Builder::new().parse_filters(&level).format_timestamp(None).init();
    if cli.workers == 0 {
        eprintln!("error: --workers must be at least 1");
        return ExitCode::from(2);
    }
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.workers).build_global() {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Probe(a) => probe(a),
        Command::ExportPlots(a) => export(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
