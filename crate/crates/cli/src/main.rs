//! Command line front end wiring scenario generation, simulation, training
//! and evaluation. Every command records a reproducibility manifest in its
//! output directory; exit codes are 0 success, 1 usage, 2 input or IO
//! problem, 3 training divergence.
//!
//! Each flag can also be supplied through an environment variable named
//! `CORRIDOR_<FLAG>` (for example `CORRIDOR_SEED`); explicit flags win.

mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use corridor_core::analytics::{
    bunching_stats, detect_bunching, write_bunching_by_hour_csv, write_bunching_csv,
    write_reward_curve_csv, write_trajectories_csv, RewardCurve, DEFAULT_BUNCHING_THRESHOLD_SECS,
};
use corridor_core::env::{resolve_transitions, HoldingController, NoneController, RuleController};
use corridor_core::nn::{load_checkpoint, save_checkpoint};
use corridor_core::sac::{
    evaluate, write_metrics_csv, EpisodeMetrics, PolicyController, SacConfig, Trainer,
    DEFAULT_EVAL_ROLLOUTS,
};
use corridor_core::scenario::{generate_synthetic_scenario, load_scenario, save_scenario};
use corridor_core::sim::run_episode;

use manifest::RunManifest;

const SCENARIO_FILES: [&str; 5] =
    ["stops.csv", "od.csv", "speeds.csv", "timetable.csv", "scenario.cfg"];

#[derive(Parser)]
#[command(name = "corridor", version, about = "Bus corridor simulation and holding control")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic scenario (five CSV/cfg files) into a directory.
    GenData(GenDataArgs),
    /// Run one simulated service day and export the episode log plus
    /// bunching reports.
    Simulate(SimulateArgs),
    /// Train a holding policy and save checkpoint, metrics and reward curve.
    Train(TrainArgs),
    /// Roll out a checkpointed policy deterministically over consecutive
    /// seeds and report mean and spread of the cumulative reward.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory for the scenario files.
    #[arg(long, env = "CORRIDOR_OUT")]
    out: PathBuf,
    #[arg(long, env = "CORRIDOR_SEED")]
    seed: u64,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ControllerKind {
    /// Never hold (uncontrolled baseline).
    None,
    /// Proportional headway-balancing rule.
    Rule,
    /// Trained policy from a checkpoint, acting on its mean.
    Sac,
}

impl ControllerKind {
    fn id(self) -> &'static str {
        match self {
            ControllerKind::None => "none",
            ControllerKind::Rule => "rule",
            ControllerKind::Sac => "sac",
        }
    }
}

#[derive(Args)]
struct SimulateArgs {
    /// Directory holding the five scenario files.
    #[arg(long, env = "CORRIDOR_SCENARIO")]
    scenario: PathBuf,
    #[arg(long, value_enum, env = "CORRIDOR_CONTROLLER")]
    controller: ControllerKind,
    /// Policy checkpoint; required when the controller is sac.
    #[arg(long, env = "CORRIDOR_CHECKPOINT")]
    checkpoint: Option<PathBuf>,
    #[arg(long, env = "CORRIDOR_SEED")]
    seed: u64,
    #[arg(long, env = "CORRIDOR_OUT")]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, env = "CORRIDOR_SCENARIO")]
    scenario: PathBuf,
    #[arg(long, env = "CORRIDOR_EPISODES")]
    episodes: u64,
    #[arg(long, env = "CORRIDOR_SEED")]
    seed: u64,
    #[arg(long, env = "CORRIDOR_OUT")]
    out: PathBuf,
    /// Discount factor.
    #[arg(long, env = "CORRIDOR_GAMMA")]
    gamma: Option<f64>,
    /// Target network trailing rate per update.
    #[arg(long, env = "CORRIDOR_TAU")]
    tau: Option<f64>,
    /// Learning rate for all optimizers.
    #[arg(long, env = "CORRIDOR_LR")]
    lr: Option<f64>,
    #[arg(long, env = "CORRIDOR_BATCH_SIZE")]
    batch_size: Option<usize>,
    /// Entropy level the temperature chases.
    #[arg(long, env = "CORRIDOR_TARGET_ENTROPY")]
    target_entropy: Option<f64>,
    /// Replay tuples required before gradient steps start.
    #[arg(long, env = "CORRIDOR_WARMUP_TUPLES")]
    warmup_tuples: Option<usize>,
    /// Initial temperature.
    #[arg(long, env = "CORRIDOR_ALPHA_INIT")]
    alpha_init: Option<f64>,
    #[arg(long, env = "CORRIDOR_REPLAY_CAPACITY")]
    replay_capacity: Option<usize>,
    /// Gradient steps per episode; defaults to the episode's decision count.
    #[arg(long, env = "CORRIDOR_UPDATES_PER_EPISODE")]
    updates_per_episode: Option<usize>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long, env = "CORRIDOR_SCENARIO")]
    scenario: PathBuf,
    #[arg(long, env = "CORRIDOR_CHECKPOINT")]
    checkpoint: PathBuf,
    /// Number of rollouts; seeds run consecutively from the base.
    #[arg(long, default_value_t = DEFAULT_EVAL_ROLLOUTS as u64,
          value_parser = clap::value_parser!(u64).range(1..),
          env = "CORRIDOR_ROLLOUTS")]
    rollouts: u64,
    /// First rollout seed.
    #[arg(long, env = "CORRIDOR_SEEDS")]
    seeds: u64,
    /// Where to write eval.json and the manifest.
    #[arg(long, default_value = ".", env = "CORRIDOR_OUT")]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = if err.use_stderr() { 1 } else { 0 };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    let started = Instant::now();
    let result = match cli.command {
        Command::GenData(args) => cmd_gen_data(args, started),
        Command::Simulate(args) => cmd_simulate(args, started),
        Command::Train(args) => cmd_train(args, started),
        Command::Evaluate(args) => cmd_evaluate(args, started),
    };
    match result {
        Ok(code) => code,
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::from(2)
        }
    }
}

fn cmd_gen_data(args: GenDataArgs, started: Instant) -> Result<ExitCode, String> {
    let config = generate_synthetic_scenario(args.seed);
    save_scenario(&config, &args.out).map_err(|e| e.to_string())?;

    let command = format!("gen-data --out {} --seed {}", args.out.display(), args.seed);
    let mut manifest = RunManifest::new(command, &args.out, args.seed);
    for name in SCENARIO_FILES {
        manifest.add_artifact(&args.out.join(name)).map_err(|e| e.to_string())?;
    }
    manifest.write(&args.out, started).map_err(|e| e.to_string())?;

    println!("scenario files written to {}", args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_simulate(args: SimulateArgs, started: Instant) -> Result<ExitCode, String> {
    let scenario = load_scenario(&args.scenario).map_err(|e| e.to_string())?;

    if args.controller == ControllerKind::Sac && args.checkpoint.is_none() {
        return Err("controller sac requires --checkpoint".into());
    }
    // The policy must outlive the controller that borrows it.
    let policy;
    let mut none = NoneController;
    let mut rule = RuleController::for_scenario(&scenario);
    let mut greedy;
    let controller: &mut dyn HoldingController = match args.controller {
        ControllerKind::None => &mut none,
        ControllerKind::Rule => &mut rule,
        ControllerKind::Sac => {
            let path = args.checkpoint.as_ref().expect("checked above");
            let ckpt = load_checkpoint(path).map_err(|e| e.to_string())?;
            policy = ckpt.policy.to_policy(ckpt.max_hold_secs).map_err(|e| e.to_string())?;
            greedy = PolicyController::greedy(&policy);
            &mut greedy
        }
    };

    let log = run_episode(&scenario, controller, args.seed).map_err(|e| e.to_string())?;
    fs::create_dir_all(&args.out).map_err(|e| e.to_string())?;

    let episode_path = args.out.join("episode.csv");
    log.write_csv(&episode_path).map_err(|e| e.to_string())?;
    let trajectories_path = args.out.join("trajectories.csv");
    write_trajectories_csv(&log, &scenario, &trajectories_path).map_err(|e| e.to_string())?;

    let events = detect_bunching(&log, DEFAULT_BUNCHING_THRESHOLD_SECS);
    let bunching_path = args.out.join("bunching.csv");
    write_bunching_csv(&events, &bunching_path).map_err(|e| e.to_string())?;
    let by_hour_path = args.out.join("bunching_by_hour.csv");
    write_bunching_by_hour_csv(&bunching_stats(&events), &by_hour_path)
        .map_err(|e| e.to_string())?;

    let reward = resolve_transitions(&log).cumulative_reward;
    println!("cum_reward={reward} bunching_events={}", events.len());

    let command = format!(
        "simulate --scenario {} --controller {}{} --seed {} --out {}",
        args.scenario.display(),
        args.controller.id(),
        match &args.checkpoint {
            Some(p) => format!(" --checkpoint {}", p.display()),
            None => String::new(),
        },
        args.seed,
        args.out.display(),
    );
    let mut manifest = RunManifest::new(command, &args.out, args.seed);
    manifest.scenario = Some(args.scenario.display().to_string());
    manifest.controller = Some(args.controller.id().to_string());
    manifest.checkpoint = args.checkpoint.as_ref().map(|p| p.display().to_string());
    for path in [&episode_path, &trajectories_path, &bunching_path, &by_hour_path] {
        manifest.add_artifact(path).map_err(|e| e.to_string())?;
    }
    manifest.write(&args.out, started).map_err(|e| e.to_string())?;

    Ok(ExitCode::SUCCESS)
}

fn merged_config(args: &TrainArgs) -> SacConfig {
    let mut config = SacConfig::default();
    if let Some(v) = args.gamma {
        config.gamma = v;
    }
    if let Some(v) = args.tau {
        config.tau = v;
    }
    if let Some(v) = args.lr {
        config.lr = v;
    }
    if let Some(v) = args.batch_size {
        config.batch_size = v;
    }
    if let Some(v) = args.target_entropy {
        config.target_entropy = v;
    }
    if let Some(v) = args.warmup_tuples {
        config.warmup_tuples = v;
    }
    if let Some(v) = args.alpha_init {
        config.alpha_init = v;
    }
    if let Some(v) = args.replay_capacity {
        config.replay_capacity = v;
    }
    if args.updates_per_episode.is_some() {
        config.updates_per_episode = args.updates_per_episode;
    }
    config
}

fn write_train_curves(
    out: &Path,
    metrics: &[EpisodeMetrics],
) -> Result<(PathBuf, PathBuf), String> {
    let metrics_path = out.join("metrics.csv");
    write_metrics_csv(&metrics_path, metrics).map_err(|e| e.to_string())?;
    let rewards: Vec<f64> = metrics.iter().map(|m| m.cum_reward).collect();
    let curve = RewardCurve::from_rewards(&rewards);
    let curve_path = out.join("reward_curve.csv");
    write_reward_curve_csv(&curve, &curve_path).map_err(|e| e.to_string())?;
    Ok((metrics_path, curve_path))
}

fn cmd_train(args: TrainArgs, started: Instant) -> Result<ExitCode, String> {
    let scenario = load_scenario(&args.scenario).map_err(|e| e.to_string())?;
    let config = merged_config(&args);
    config.validate().map_err(|e| e.to_string())?;

    fs::create_dir_all(&args.out).map_err(|e| e.to_string())?;
    let mut trainer = Trainer::new(&scenario, config.clone(), args.seed);

    // Drive one episode at a time so long runs leave progress on stderr and
    // refreshed metric files behind them.
    let mut metrics = Vec::new();
    let mut diverged = None;
    for _ in 0..args.episodes {
        let output = trainer.train_episodes(&scenario, 1).map_err(|e| e.to_string())?;
        for m in &output.metrics {
            eprintln!(
                "episode {}: reward={:.3} alpha={:.4} buffer={}",
                m.episode, m.cum_reward, m.alpha, m.buffer_size
            );
        }
        metrics.extend(output.metrics);
        write_train_curves(&args.out, &metrics)?;
        if let Some(ep) = output.diverged {
            diverged = Some(ep);
            break;
        }
    }

    // After a divergence the trainer has already rolled back, so this
    // checkpoint holds the last healthy weights.
    let checkpoint_path = args.out.join("checkpoint.json");
    save_checkpoint(&checkpoint_path, &trainer.to_checkpoint()).map_err(|e| e.to_string())?;

    let command = format!(
        "train --scenario {} --episodes {} --seed {} --out {} --gamma {} --tau {} --lr {} \
         --batch-size {} --target-entropy {} --warmup-tuples {} --alpha-init {} \
         --replay-capacity {}{}",
        args.scenario.display(),
        args.episodes,
        args.seed,
        args.out.display(),
        config.gamma,
        config.tau,
        config.lr,
        config.batch_size,
        config.target_entropy,
        config.warmup_tuples,
        config.alpha_init,
        config.replay_capacity,
        match config.updates_per_episode {
            Some(v) => format!(" --updates-per-episode {v}"),
            None => String::new(),
        },
    );
    let mut manifest = RunManifest::new(command, &args.out, args.seed);
    manifest.scenario = Some(args.scenario.display().to_string());
    manifest.controller = Some("sac".into());
    manifest.checkpoint = Some(checkpoint_path.display().to_string());
    manifest.add_artifact(&checkpoint_path).map_err(|e| e.to_string())?;
    if !metrics.is_empty() {
        let (metrics_path, curve_path) = write_train_curves(&args.out, &metrics)?;
        manifest.add_artifact(&metrics_path).map_err(|e| e.to_string())?;
        manifest.add_artifact(&curve_path).map_err(|e| e.to_string())?;
    }
    manifest.write(&args.out, started).map_err(|e| e.to_string())?;

    if let Some(ep) = diverged {
        eprintln!("training diverged during episode {ep}; checkpoint keeps the last healthy weights");
        return Ok(ExitCode::from(3));
    }
    println!("episodes={} checkpoint={}", metrics.len(), checkpoint_path.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_evaluate(args: EvaluateArgs, started: Instant) -> Result<ExitCode, String> {
    let scenario = load_scenario(&args.scenario).map_err(|e| e.to_string())?;
    let ckpt = load_checkpoint(&args.checkpoint).map_err(|e| e.to_string())?;
    let policy = ckpt.policy.to_policy(ckpt.max_hold_secs).map_err(|e| e.to_string())?;

    let rollouts = args.rollouts as usize;
    let report = evaluate(&policy, &scenario, rollouts, args.seeds).map_err(|e| e.to_string())?;
    for (k, reward) in report.rewards.iter().enumerate() {
        println!("rollout {k} seed {}: {reward}", args.seeds + k as u64);
    }
    println!("mean={} std={}", report.mean, report.std);

    fs::create_dir_all(&args.out).map_err(|e| e.to_string())?;
    let eval_path = args.out.join("eval.json");
    let body = serde_json::json!({
        "rewards": report.rewards,
        "mean": report.mean,
        "std": report.std,
    });
    fs::write(&eval_path, body.to_string()).map_err(|e| e.to_string())?;

    let command = format!(
        "evaluate --scenario {} --checkpoint {} --rollouts {} --seeds {} --out {}",
        args.scenario.display(),
        args.checkpoint.display(),
        args.rollouts,
        args.seeds,
        args.out.display(),
    );
    let mut manifest = RunManifest::new(command, &args.out, args.seeds);
    manifest.scenario = Some(args.scenario.display().to_string());
    manifest.controller = Some("sac".into());
    manifest.checkpoint = Some(args.checkpoint.display().to_string());
    manifest.add_artifact(&eval_path).map_err(|e| e.to_string())?;
    manifest.write(&args.out, started).map_err(|e| e.to_string())?;

    Ok(ExitCode::SUCCESS)
}
