use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dsrl_core::env::{Action, Variant, WorldState};
use dsrl_core::harness::{
    collect_rows, evaluate, percent_positive, pretrain_autoencoder, run_experiment, summarize, transfer_config,
    write_metrics_file, Agent, AgentKind, AgentRun, ExperimentConfig, MetricsRow, Pretrained, MODEL_FILE,
};
use dsrl_core::seed::{tag, SeedStream};
use rand::Rng;

#[derive(Parser)]
#[command(name = "dsrl", version, about = "Symbolic reinforcement learning experiments on a small grid game")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the autoencoder and calibrate the symbol extractor.
    Pretrain(Common),
    /// Train agents and write metrics.csv plus the learned agent files.
    Train(TrainArgs),
    /// Evaluate agents saved by `train`.
    Eval(TrainArgs),
    /// Train on grid-mixed, evaluate frozen on random-mixed.
    Transfer(TrainArgs),
    /// Train the DQN baseline.
    Baseline(Common),
    /// Write PGM frames of one game played with random moves.
    RenderSample(RenderArgs),
}

#[derive(Args, Clone)]
struct Common {
    /// grid-neg, grid-mixed, random-neg or random-mixed.
    #[arg(long)]
    variant: Option<Variant>,
    /// Independently trained agents.
    #[arg(long)]
    agents: Option<usize>,
    /// Training epochs of steps_per_epoch steps each.
    #[arg(long)]
    epochs: Option<usize>,
    /// Master seed; every agent, game and network draws from it.
    #[arg(long)]
    seed: Option<u64>,
    /// TOML file with any subset of the experiment settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// symbolic, dqn or random.
    #[arg(long)]
    agent: Option<AgentKind>,
    /// Directory with pretrained perception; defaults to --out.
    #[arg(long)]
    pretrained: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct RenderArgs {
    #[command(flatten)]
    common: Common,
    /// Number of frames to write, including the initial one.
    #[arg(long, default_value_t = 5)]
    frames: usize,
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(v) = c.variant {
        cfg.variant = v;
    }
    if let Some(n) = c.agents {
        cfg.agents = n;
    }
    if let Some(n) = c.epochs {
        cfg.epochs = n;
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn pretrain(cfg: &ExperimentConfig, dir: &Path) -> Result<Pretrained> {
    eprintln!("pretraining autoencoder on {} frames", cfg.autoencoder.training_frames);
    let pre = pretrain_autoencoder(cfg)?;
    pre.save(dir)?;
    let r = &pre.report;
    eprintln!(
        "holdout mse {:.6}, theta_sal {:.4}, theta_type {:.4}, {} types, separability {:.3}",
        pre.holdout_mse,
        r.theta_sal,
        r.theta_type,
        pre.registry.len(),
        r.separability
    );
    Ok(pre)
}

/// Loads pretrained perception from `dir`, training it first when absent.
fn perception(cfg: &ExperimentConfig, dir: &Path) -> Result<Pretrained> {
    if dir.join(MODEL_FILE).exists() {
        Ok(Pretrained::load(dir, &cfg.env)?)
    } else {
        pretrain(cfg, dir)
    }
}

fn agent_dir(out: &Path, id: usize) -> PathBuf {
    out.join("agents").join(format!("agent_{id:02}"))
}

fn report(rows: &[MetricsRow]) {
    for s in summarize(rows) {
        let pct = s.mean_pct_positive.map_or_else(|| "-".to_string(), |p| format!("{p:.1}"));
        eprintln!(
            "epoch {:>4}  score {:>6.2}  positive {:>5}%  encountered {:>6.1}",
            s.epoch, s.mean_score, pct, s.mean_encountered
        );
    }
}

fn finish(cfg: &ExperimentConfig, out: &Path, runs: &[AgentRun]) -> Result<()> {
    for run in runs {
        run.agent.save(agent_dir(out, run.agent_id))?;
    }
    let rows = collect_rows(runs);
    write_metrics_file(out.join("metrics.csv"), &rows)?;
    cfg.save(out.join("config.toml"))?;
    report(&rows);
    eprintln!("wrote {}", out.join("metrics.csv").display());
    Ok(())
}

fn train(args: &TrainArgs, transfer: bool) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    if let Some(kind) = args.agent {
        cfg.agent = kind;
    }
    if transfer {
        cfg = transfer_config(&cfg);
    }
    let out = &args.common.out;
    std::fs::create_dir_all(out)?;
    let pre = match cfg.agent {
        AgentKind::Symbolic => Some(perception(&cfg, args.pretrained.as_deref().unwrap_or(out))?),
        _ => None,
    };
    let runs = run_experiment(&cfg, pre.as_ref())?;
    finish(&cfg, out, &runs)
}

fn eval(args: &TrainArgs) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    let out = &args.common.out;
    if args.common.config.is_none() && out.join("config.toml").exists() {
        let saved = ExperimentConfig::load(out.join("config.toml"))?;
        cfg = ExperimentConfig {
            variant: args.common.variant.unwrap_or(saved.evaluation_variant()),
            seed: args.common.seed.unwrap_or(saved.seed),
            agents: args.common.agents.unwrap_or(saved.agents),
            ..saved
        };
        cfg.test_variant = None;
    }
    if let Some(kind) = args.agent {
        cfg.agent = kind;
    }
    let pre = match cfg.agent {
        AgentKind::Symbolic => Some(Pretrained::load(args.pretrained.as_deref().unwrap_or(out), &cfg.env)?),
        _ => None,
    };
    let mut rows = Vec::new();
    for id in 0..cfg.agents {
        let dir = agent_dir(out, id);
        if cfg.agent != AgentKind::Random && !dir.exists() {
            bail!("no saved agent at {}", dir.display());
        }
        let mut agent = Agent::load(&dir, &cfg, pre.as_ref())?;
        let seeds = SeedStream::new(cfg.seed).child(tag::AGENT).child(id as u64).child(tag::TEST_GAME);
        let (avg_score, pos, neg, _) = evaluate(&mut agent, &cfg, seeds)?;
        rows.push(MetricsRow {
            epoch: 0,
            agent_id: id,
            avg_score,
            pct_positive: percent_positive(pos, neg),
            encountered: pos + neg,
        });
    }
    write_metrics_file(out.join("eval.csv"), &rows)?;
    report(&rows);
    eprintln!("wrote {}", out.join("eval.csv").display());
    Ok(())
}

fn render_sample(args: &RenderArgs) -> Result<()> {
    let cfg = load_config(&args.common)?;
    let out = &args.common.out;
    std::fs::create_dir_all(out)?;
    let frames = args.frames.max(1);
    let seeds = SeedStream::new(cfg.seed);
    let mut world = WorldState::new_game(&cfg.env, cfg.variant, seeds.child(tag::TRAIN_GAME).seed(), frames - 1);
    let mut rng = seeds.child(tag::POLICY).rng();
    let mut frame = world.render();
    for i in 0..frames {
        let path = out.join(format!("{}_{i:03}.pgm", cfg.variant));
        frame.write_pgm(&path)?;
        eprintln!("wrote {}", path.display());
        if world.is_terminal() {
            break;
        }
        frame = world.step(Action::from_index(rng.gen_range(0..Action::COUNT)))?.frame;
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Pretrain(c) => {
            let cfg = load_config(&c)?;
            std::fs::create_dir_all(&c.out)?;
            pretrain(&cfg, &c.out)?;
            cfg.save(c.out.join("config.toml"))?;
            Ok(())
        }
        Command::Train(a) => train(&a, false),
        Command::Eval(a) => eval(&a),
        Command::Transfer(a) => train(&a, true),
        Command::Baseline(c) => train(
            &TrainArgs {
                common: c,
                agent: Some(AgentKind::Dqn),
                pretrained: None,
            },
            false,
        ),
        Command::RenderSample(a) => render_sample(&a),
    }
}
