//! Experiment protocol: pretraining, per-agent training loops with periodic
//! evaluation, transfer runs, metrics and persistence.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autoencoder::{generate_training_set, write_loss_curve, Autoencoder, AutoencoderConfig};
use crate::dqn::{act, train_step, DqnConfig, QNet, QNetwork, ReplayBuffer, Transition};
use crate::env::{Action, EnvConfig, Frame, Variant, WorldState};
use crate::error::{Error, Result};
use crate::qlearning::{select_action, QConfig, QStore};
use crate::representation::{extract_interactions, identify_agent, nearby, AgentIdentity};
use crate::seed::{tag, SeedStream};
use crate::symbols::{calibrate, detect_frame, pixel_to_cell, symbolize, CalibrationReport, DetectedObject, SymbolConfig, TypeRegistry};
use crate::tracker::{MatchConfig, TransitionMatrix, Tracker};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AgentKind {
    Symbolic,
    Dqn,
    Random,
}

impl AgentKind {
    pub fn name(self) -> &'static str {
        match self {
            AgentKind::Symbolic => "symbolic",
            AgentKind::Dqn => "dqn",
            AgentKind::Random => "random",
        }
    }
}

impl fmt::Display for AgentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AgentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "symbolic" => Ok(AgentKind::Symbolic),
            "dqn" => Ok(AgentKind::Dqn),
            "random" => Ok(AgentKind::Random),
            _ => Err(Error::InvalidArgument(format!("unknown agent kind `{s}`"))),
        }
    }
}

/// Everything a run depends on. Serialised as TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub variant: Variant,
    /// Variant used for evaluation games; the training variant when unset.
    pub test_variant: Option<Variant>,
    pub agent: AgentKind,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub test_every: usize,
    pub test_games: usize,
    pub test_steps: usize,
    pub agents: usize,
    pub seed: u64,
    /// Exploration during evaluation games. Learning is always off there.
    pub eval_epsilon: f64,
    /// Random-action frames used to find the controlled object.
    pub calibration_steps: usize,
    /// Fraction of frames the controlled object must move in.
    pub agent_min_motion: f64,
    /// Run agents on the rayon pool instead of one after another.
    pub parallel: bool,
    pub env: EnvConfig,
    pub autoencoder: AutoencoderConfig,
    pub symbols: SymbolConfig,
    pub tracker: MatchConfig,
    pub q: QConfig,
    pub dqn: DqnConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            variant: Variant::RandomMixed,
            test_variant: None,
            agent: AgentKind::Symbolic,
            epochs: 1000,
            steps_per_epoch: 100,
            test_every: 10,
            test_games: 10,
            test_steps: 200,
            agents: 20,
            seed: 0,
            eval_epsilon: 0.1,
            calibration_steps: 50,
            agent_min_motion: 0.5,
            parallel: false,
            env: EnvConfig::default(),
            autoencoder: AutoencoderConfig::default(),
            symbols: SymbolConfig::default(),
            tracker: MatchConfig::default(),
            q: QConfig::default(),
            dqn: DqnConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps_per_epoch == 0 || self.test_steps == 0 {
            return Err(Error::Config("steps_per_epoch and test_steps must be positive".into()));
        }
        if self.test_every == 0 {
            return Err(Error::Config("test_every must be positive".into()));
        }
        if self.agents == 0 {
            return Err(Error::Config("agents must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.eval_epsilon) {
            return Err(Error::Config("eval_epsilon must lie in [0, 1]".into()));
        }
        if self.calibration_steps < 10 {
            return Err(Error::Config("calibration_steps must be at least 10".into()));
        }
        self.autoencoder.validate()?;
        self.tracker.validate()?;
        self.q.validate()?;
        self.dqn.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_toml())?;
        Ok(())
    }

    pub fn evaluation_variant(&self) -> Variant {
        self.test_variant.unwrap_or(self.variant)
    }
}

/// `100 * positives / (positives + negatives)`; `None` when nothing was
/// collected.
pub fn percent_positive(positives: usize, negatives: usize) -> Option<f64> {
    let total = positives + negatives;
    (total > 0).then(|| 100.0 * positives as f64 / total as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub agent_id: usize,
    pub avg_score: f64,
    pub pct_positive: Option<f64>,
    /// Objects collected over all test games of this evaluation.
    pub encountered: usize,
}

pub const METRICS_HEADER: [&str; 5] = ["epoch", "agent_id", "avg_score", "pct_positive", "encountered"];

pub fn write_metrics(w: impl std::io::Write, rows: &[MetricsRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(METRICS_HEADER)?;
    for r in rows {
        out.write_record([
            r.epoch.to_string(),
            r.agent_id.to_string(),
            format!("{:.4}", r.avg_score),
            r.pct_positive.map(|p| format!("{p:.4}")).unwrap_or_default(),
            r.encountered.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_metrics_file(path: impl AsRef<Path>, rows: &[MetricsRow]) -> Result<()> {
    write_metrics(std::io::BufWriter::new(std::fs::File::create(path)?), rows)
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    if header != METRICS_HEADER {
        return Err(Error::format("metrics file", format!("unexpected header {header:?}")));
    }
    let bad = |e: std::num::ParseIntError| Error::format("metrics file", e.to_string());
    let badf = |e: std::num::ParseFloatError| Error::format("metrics file", e.to_string());
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        rows.push(MetricsRow {
            epoch: rec[0].parse().map_err(bad)?,
            agent_id: rec[1].parse().map_err(bad)?,
            avg_score: rec[2].parse().map_err(badf)?,
            pct_positive: if rec[3].is_empty() { None } else { Some(rec[3].parse().map_err(badf)?) },
            encountered: rec[4].parse().map_err(bad)?,
        });
    }
    Ok(rows)
}

/// Mean over agents of one evaluation point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub agents: usize,
    pub mean_score: f64,
    /// Mean over the agents with a defined percentage.
    pub mean_pct_positive: Option<f64>,
    pub mean_encountered: f64,
}

pub fn summarize(rows: &[MetricsRow]) -> Vec<EpochSummary> {
    let mut epochs: Vec<usize> = rows.iter().map(|r| r.epoch).collect();
    epochs.sort_unstable();
    epochs.dedup();
    epochs
        .into_iter()
        .map(|epoch| {
            let at: Vec<&MetricsRow> = rows.iter().filter(|r| r.epoch == epoch).collect();
            let n = at.len() as f64;
            let pcts: Vec<f64> = at.iter().filter_map(|r| r.pct_positive).collect();
            EpochSummary {
                epoch,
                agents: at.len(),
                mean_score: at.iter().map(|r| r.avg_score).sum::<f64>() / n,
                mean_pct_positive: (!pcts.is_empty()).then(|| pcts.iter().sum::<f64>() / pcts.len() as f64),
                mean_encountered: at.iter().map(|r| r.encountered as f64).sum::<f64>() / n,
            }
        })
        .collect()
}

/// Outcome of one game.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GameRecord {
    pub score: i64,
    pub positives: usize,
    pub negatives: usize,
    /// Reward of every step, in order.
    pub rewards: Vec<i32>,
}

impl GameRecord {
    fn push(&mut self, reward: i32) {
        self.rewards.push(reward);
        self.score += i64::from(reward);
        match reward.signum() {
            1 => self.positives += 1,
            -1 => self.negatives += 1,
            _ => {}
        }
    }
}

/// Trained perception shared by every agent.
#[derive(Debug, Clone)]
pub struct Pretrained {
    pub model: Arc<Autoencoder>,
    pub registry: TypeRegistry,
    pub report: CalibrationReport,
    pub loss_curve: Vec<f64>,
    pub holdout_mse: f64,
}

pub const MODEL_FILE: &str = "autoencoder.bin";
pub const REGISTRY_FILE: &str = "registry.txt";
pub const LOSS_FILE: &str = "autoencoder_loss.csv";

/// Trains the autoencoder on random scenes and calibrates the symbol
/// extractor on them.
pub fn pretrain_autoencoder(cfg: &ExperimentConfig) -> Result<Pretrained> {
    let ae = &cfg.autoencoder;
    ae.validate()?;
    let root = SeedStream::new(cfg.seed).child(tag::PRETRAIN);
    let frames = generate_training_set(&cfg.env, ae.training_frames, ae.max_objects, root.child(0).seed());
    let holdout = ((frames.len() as f64) * ae.holdout_fraction).round() as usize;
    let (train, test) = frames.split_at(frames.len() - holdout);
    let (w, h) = (cfg.env.frame_width(), cfg.env.frame_height());
    let mut model = Autoencoder::new(ae, w, h, &mut root.child(1).rng())?;
    let loss_curve = model.train(train, ae, &mut root.child(2).rng())?;
    let holdout_mse = if test.is_empty() { f64::NAN } else { model.mean_mse(test)? };
    if holdout_mse > ae.max_holdout_mse {
        return Err(Error::Calibration(format!(
            "autoencoder holdout MSE {holdout_mse:.5} exceeds {}",
            ae.max_holdout_mse
        )));
    }
    let s = &cfg.symbols;
    let sal_end = s.saliency_frames.min(train.len());
    let typ_end = (sal_end + s.typing_frames).min(train.len());
    let (registry, report) = calibrate(&model, &train[..sal_end], &train[sal_end..typ_end], s)?;
    Ok(Pretrained {
        model: Arc::new(model),
        registry,
        report,
        loss_curve,
        holdout_mse,
    })
}

impl Pretrained {
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        self.model.save(dir.join(MODEL_FILE))?;
        self.registry.save(dir.join(REGISTRY_FILE))?;
        write_loss_curve(dir.join(LOSS_FILE), &self.loss_curve)
    }

    /// Loads a model and registry; the calibration report is not stored, so
    /// only its thresholds are filled in.
    pub fn load(dir: impl AsRef<Path>, env: &EnvConfig) -> Result<Self> {
        let dir = dir.as_ref();
        let model = Autoencoder::load(dir.join(MODEL_FILE), env.frame_width(), env.frame_height())?;
        let registry = TypeRegistry::load(dir.join(REGISTRY_FILE))?;
        let report = CalibrationReport {
            theta_sal: registry.theta_sal,
            theta_type: registry.theta_type,
            detections: 0,
            mean_intra_ssd: f64::NAN,
            mean_inter_ssd: f64::NAN,
            separability: f64::NAN,
        };
        Ok(Pretrained {
            model: Arc::new(model),
            registry,
            report,
            loss_curve: Vec::new(),
            holdout_mse: f64::NAN,
        })
    }
}

/// Whether a game updates the agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Perception, tracking and tabular Q-learning.
#[derive(Debug, Clone)]
pub struct SymbolicAgent {
    model: Arc<Autoencoder>,
    symbols: SymbolConfig,
    pub registry: TypeRegistry,
    pub tracker: Tracker,
    pub q: QStore,
    pub identity: AgentIdentity,
}

impl SymbolicAgent {
    /// Plays `cfg.calibration_steps` random moves, tracks what it sees and
    /// picks the object that follows the actions.
    pub fn calibrate(cfg: &ExperimentConfig, pre: &Pretrained, seeds: SeedStream) -> Result<Self> {
        let mut registry = pre.registry.clone();
        let mut tracker = Tracker::new(cfg.tracker.clone(), TransitionMatrix::from_config(registry.len() as u32, &cfg.tracker));
        let mut world = WorldState::new_game(&cfg.env, cfg.variant, seeds.child(0).seed(), cfg.calibration_steps);
        let mut rng = seeds.child(1).rng();
        let mut history = Vec::with_capacity(cfg.calibration_steps + 1);
        let mut frame = world.render();
        loop {
            let found = symbolize(&pre.model, &frame, &mut registry, &cfg.symbols)?;
            tracker.update(&found)?;
            history.push(tracker.snapshot());
            if world.is_terminal() {
                break;
            }
            frame = world.step(Action::from_index(rng.gen_range(0..Action::COUNT)))?.frame;
        }
        let identity = identify_agent(&history, cfg.agent_min_motion)?;
        tracker.reset();
        Ok(SymbolicAgent {
            model: pre.model.clone(),
            symbols: cfg.symbols.clone(),
            registry,
            q: QStore::new(&cfg.q, identity.0),
            tracker,
            identity,
        })
    }

    fn perceive(&mut self, frame: &Frame, mode: Mode) -> Result<Vec<DetectedObject>> {
        match mode {
            Mode::Train => symbolize(&self.model, frame, &mut self.registry, &self.symbols),
            Mode::Eval => Ok(detect_frame(&self.model, frame, self.registry.theta_sal, &self.symbols)?
                .into_iter()
                .filter_map(|(pixel, spectrum)| {
                    let type_id = self.registry.classify(&spectrum)?;
                    Some(DetectedObject {
                        pixel,
                        cell: pixel_to_cell(pixel),
                        spectrum,
                        type_id,
                    })
                })
                .collect()),
        }
    }

    pub fn play<R: Rng + ?Sized>(&mut self, world: &mut WorldState, mode: Mode, epsilon: f64, rng: &mut R) -> Result<GameRecord> {
        let r = self.q.radius();
        self.tracker.reset();
        self.tracker.set_learning(mode == Mode::Train);
        let found = self.perceive(&world.render(), mode)?;
        self.tracker.update(&found)?;
        let mut prev = self.tracker.snapshot();
        let mut record = GameRecord::default();
        while !world.is_terminal() {
            let relevant: Vec<_> = nearby(&prev, self.identity, r).into_iter().map(|(_, s)| s).collect();
            let action = select_action(&self.q, &relevant, epsilon, rng);
            let step = world.steps();
            let out = world.step(action)?;
            record.push(out.reward);
            let found = self.perceive(&out.frame, mode)?;
            self.tracker.update(&found)?;
            let cur = self.tracker.snapshot();
            if mode == Mode::Train {
                for e in extract_interactions(&prev, &cur, self.identity, r, step) {
                    self.q.q_update(&e, action, out.reward)?;
                }
            }
            prev = cur;
        }
        self.tracker.set_learning(true);
        Ok(record)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        self.q.save(dir.join(QSTORE_FILE))?;
        self.tracker.matrix().save(dir.join(TRANSITIONS_FILE))?;
        self.registry.save(dir.join(REGISTRY_FILE))
    }

    pub fn load(dir: impl AsRef<Path>, cfg: &ExperimentConfig, pre: &Pretrained) -> Result<Self> {
        let dir = dir.as_ref();
        let q = QStore::load(dir.join(QSTORE_FILE))?;
        let text = std::fs::read_to_string(dir.join(TRANSITIONS_FILE))?;
        let matrix = TransitionMatrix::from_text(&text, cfg.tracker.prior, cfg.tracker.diagonal_prior)?;
        let registry = TypeRegistry::load(dir.join(REGISTRY_FILE))?;
        Ok(SymbolicAgent {
            model: pre.model.clone(),
            symbols: cfg.symbols.clone(),
            registry,
            tracker: Tracker::new(cfg.tracker.clone(), matrix),
            identity: AgentIdentity(q.agent_type()),
            q,
        })
    }
}

pub const QSTORE_FILE: &str = "qstore.txt";
pub const TRANSITIONS_FILE: &str = "transitions.txt";
pub const QNET_FILE: &str = "qnet.bin";

/// Frame-based DQN learner.
#[derive(Clone)]
pub struct DqnAgent {
    pub net: QNetwork,
    pub replay: ReplayBuffer,
    cfg: DqnConfig,
    steps: usize,
    last_loss: f64,
}

impl DqnAgent {
    pub fn new(cfg: &ExperimentConfig, seeds: SeedStream) -> Result<Self> {
        let net = QNetwork::new(&cfg.dqn, cfg.env.frame_width(), cfg.env.frame_height(), &mut seeds.rng())?;
        Ok(DqnAgent {
            net,
            replay: ReplayBuffer::new(cfg.dqn.replay_capacity),
            cfg: cfg.dqn.clone(),
            steps: 0,
            last_loss: f64::NAN,
        })
    }

    pub fn last_loss(&self) -> f64 {
        self.last_loss
    }

    /// The episode cut-off is not terminal; clearing the board is.
    pub fn play<R: Rng + ?Sized>(&mut self, world: &mut WorldState, mode: Mode, epsilon: f64, rng: &mut R) -> Result<GameRecord> {
        let mut record = GameRecord::default();
        let mut frame = Arc::new(world.render());
        while !world.is_terminal() {
            let action = act(&self.net, &frame, epsilon, rng)?;
            let out = world.step(action)?;
            record.push(out.reward);
            let next = Arc::new(out.frame);
            if mode == Mode::Train {
                self.replay.push(Transition {
                    frame: frame.clone(),
                    action,
                    reward: out.reward as f32,
                    next: next.clone(),
                    terminal: world.object_count() == 0,
                });
                self.steps += 1;
                if self.replay.len() >= self.cfg.learning_starts.max(self.cfg.batch_size)
                    && self.steps % self.cfg.train_every == 0
                {
                    let loss = train_step(&mut self.net, &self.replay, &self.cfg, rng)?;
                    if !loss.is_finite() {
                        return Err(Error::Diverged {
                            epoch: self.steps / world.steps().max(1),
                            loss,
                        });
                    }
                    self.last_loss = loss;
                }
                if self.steps % self.cfg.sync_every == 0 {
                    self.net.sync_target();
                }
            }
            frame = next;
        }
        Ok(record)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        std::fs::create_dir_all(dir.as_ref())?;
        self.net.online.save(dir.as_ref().join(QNET_FILE))
    }

    pub fn load(dir: impl AsRef<Path>, cfg: &ExperimentConfig) -> Result<Self> {
        let online = QNet::load(dir.as_ref().join(QNET_FILE), cfg.env.frame_width(), cfg.env.frame_height())?;
        Ok(DqnAgent {
            net: QNetwork::from_online(online, cfg.dqn.optimizer),
            replay: ReplayBuffer::new(cfg.dqn.replay_capacity),
            cfg: cfg.dqn.clone(),
            steps: 0,
            last_loss: f64::NAN,
        })
    }
}

#[derive(Clone)]
pub enum Agent {
    Symbolic(Box<SymbolicAgent>),
    Dqn(Box<DqnAgent>),
    Random,
}

impl Agent {
    pub fn build(cfg: &ExperimentConfig, pre: Option<&Pretrained>, seeds: SeedStream) -> Result<Self> {
        Ok(match cfg.agent {
            AgentKind::Symbolic => {
                let pre = pre.ok_or_else(|| Error::InvalidArgument("the symbolic agent needs pretrained perception".into()))?;
                Agent::Symbolic(Box::new(SymbolicAgent::calibrate(cfg, pre, seeds.child(tag::CALIBRATION))?))
            }
            AgentKind::Dqn => Agent::Dqn(Box::new(DqnAgent::new(cfg, seeds.child(tag::NETWORK))?)),
            AgentKind::Random => Agent::Random,
        })
    }

    pub fn kind(&self) -> AgentKind {
        match self {
            Agent::Symbolic(_) => AgentKind::Symbolic,
            Agent::Dqn(_) => AgentKind::Dqn,
            Agent::Random => AgentKind::Random,
        }
    }

    /// Exploration rate of training epoch `epoch`.
    pub fn train_epsilon(&self, cfg: &ExperimentConfig, epoch: usize) -> f64 {
        match self {
            Agent::Symbolic(_) => cfg.q.epsilon,
            Agent::Dqn(_) => cfg.dqn.epsilon_at(epoch),
            Agent::Random => 1.0,
        }
    }

    pub fn play<R: Rng + ?Sized>(&mut self, world: &mut WorldState, mode: Mode, epsilon: f64, rng: &mut R) -> Result<GameRecord> {
        match self {
            Agent::Symbolic(a) => a.play(world, mode, epsilon, rng),
            Agent::Dqn(a) => a.play(world, mode, epsilon, rng),
            Agent::Random => {
                let mut record = GameRecord::default();
                while !world.is_terminal() {
                    record.push(world.step(Action::from_index(rng.gen_range(0..Action::COUNT)))?.reward);
                }
                Ok(record)
            }
        }
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        match self {
            Agent::Symbolic(a) => a.save(dir),
            Agent::Dqn(a) => a.save(dir),
            Agent::Random => Ok(()),
        }
    }

    pub fn load(dir: impl AsRef<Path>, cfg: &ExperimentConfig, pre: Option<&Pretrained>) -> Result<Self> {
        Ok(match cfg.agent {
            AgentKind::Symbolic => {
                let pre = pre.ok_or_else(|| Error::InvalidArgument("the symbolic agent needs pretrained perception".into()))?;
                Agent::Symbolic(Box::new(SymbolicAgent::load(dir, cfg, pre)?))
            }
            AgentKind::Dqn => Agent::Dqn(Box::new(DqnAgent::load(dir, cfg)?)),
            AgentKind::Random => Agent::Random,
        })
    }
}

/// Plays `cfg.test_games` fresh games of `cfg.test_steps` steps without
/// learning. Seeds depend on `seeds` only, never on the training stream.
pub fn evaluate(agent: &mut Agent, cfg: &ExperimentConfig, seeds: SeedStream) -> Result<(f64, usize, usize, Vec<GameRecord>)> {
    let variant = cfg.evaluation_variant();
    let mut rng = seeds.child(tag::POLICY).rng();
    let mut games = Vec::with_capacity(cfg.test_games);
    for g in 0..cfg.test_games {
        let mut world = WorldState::new_game(&cfg.env, variant, seeds.child(tag::TEST_GAME).child(g as u64).seed(), cfg.test_steps);
        games.push(agent.play(&mut world, Mode::Eval, cfg.eval_epsilon, &mut rng)?);
    }
    let n = games.len().max(1) as f64;
    let avg = games.iter().map(|g| g.score as f64).sum::<f64>() / n;
    let pos = games.iter().map(|g| g.positives).sum();
    let neg = games.iter().map(|g| g.negatives).sum();
    Ok((avg, pos, neg, games))
}

fn evaluation_row(agent: &mut Agent, cfg: &ExperimentConfig, seeds: SeedStream, epoch: usize, agent_id: usize) -> Result<MetricsRow> {
    let (avg_score, pos, neg, _) = evaluate(agent, cfg, seeds.child(tag::TEST_GAME).child(epoch as u64))?;
    Ok(MetricsRow {
        epoch,
        agent_id,
        avg_score,
        pct_positive: percent_positive(pos, neg),
        encountered: pos + neg,
    })
}

pub struct AgentRun {
    pub agent_id: usize,
    pub agent: Agent,
    pub rows: Vec<MetricsRow>,
}

/// Seed stream of agent `agent_id` in a run.
pub fn agent_seeds(cfg: &ExperimentConfig, agent_id: usize) -> SeedStream {
    SeedStream::new(cfg.seed).child(tag::AGENT).child(agent_id as u64)
}

/// Builds and calibrates an agent, then alternates training games with an
/// evaluation every `test_every` epochs, starting before the first one.
pub fn train_agent(cfg: &ExperimentConfig, pre: Option<&Pretrained>, agent_id: usize) -> Result<AgentRun> {
    let seeds = agent_seeds(cfg, agent_id);
    let agent = Agent::build(cfg, pre, seeds)?;
    continue_training(cfg, agent, agent_id)
}

/// The epoch loop of [`train_agent`] for an already built agent.
pub fn continue_training(cfg: &ExperimentConfig, mut agent: Agent, agent_id: usize) -> Result<AgentRun> {
    cfg.validate()?;
    let seeds = agent_seeds(cfg, agent_id);
    let mut rng = seeds.child(tag::POLICY).rng();
    let mut rows = Vec::with_capacity(cfg.epochs / cfg.test_every + 1);
    for epoch in 0..=cfg.epochs {
        if epoch % cfg.test_every == 0 {
            rows.push(evaluation_row(&mut agent, cfg, seeds, epoch, agent_id)?);
        }
        if epoch == cfg.epochs {
            break;
        }
        let mut world = WorldState::new_game(
            &cfg.env,
            cfg.variant,
            seeds.child(tag::TRAIN_GAME).child(epoch as u64).seed(),
            cfg.steps_per_epoch,
        );
        let eps = agent.train_epsilon(cfg, epoch);
        agent.play(&mut world, Mode::Train, eps, &mut rng)?;
    }
    Ok(AgentRun { agent_id, agent, rows })
}

/// Trains `cfg.agents` agents and returns them in id order.
pub fn run_experiment(cfg: &ExperimentConfig, pre: Option<&Pretrained>) -> Result<Vec<AgentRun>> {
    cfg.validate()?;
    let one = |id: usize| train_agent(cfg, pre, id);
    if cfg.parallel {
        (0..cfg.agents).into_par_iter().map(one).collect()
    } else {
        (0..cfg.agents).map(one).collect()
    }
}

/// All metrics rows of a run, ordered by epoch then agent.
pub fn collect_rows(runs: &[AgentRun]) -> Vec<MetricsRow> {
    let mut rows: Vec<MetricsRow> = runs.iter().flat_map(|r| r.rows.iter().copied()).collect();
    rows.sort_by_key(|r| (r.epoch, r.agent_id));
    rows
}

/// Trains on the grid variant and evaluates, frozen, on the random one.
pub fn transfer_config(cfg: &ExperimentConfig) -> ExperimentConfig {
    ExperimentConfig {
        variant: Variant::GridMixed,
        test_variant: Some(Variant::RandomMixed),
        ..cfg.clone()
    }
}

pub fn transfer_experiment(cfg: &ExperimentConfig, pre: Option<&Pretrained>) -> Result<Vec<AgentRun>> {
    run_experiment(&transfer_config(cfg), pre)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percent_positive_examples() {
        let p = percent_positive(10, 9).unwrap();
        assert!((p - 1000.0 / 19.0).abs() < 1e-12);
        assert_eq!(format!("{p:.1}"), "52.6");
        assert_eq!(percent_positive(1, 0), Some(100.0));
        assert_eq!(percent_positive(0, 5), Some(0.0));
        assert_eq!(percent_positive(0, 0), None);
    }

    #[test]
    fn defaults_follow_protocol() {
        let cfg = ExperimentConfig::default();
        assert_eq!(
            (cfg.steps_per_epoch, cfg.epochs, cfg.agents, cfg.test_every, cfg.test_games, cfg.test_steps),
            (100, 1000, 20, 10, 10, 200)
        );
        cfg.validate().unwrap();
    }

    #[test]
    fn config_toml_round_trip() {
        let cfg = ExperimentConfig {
            variant: Variant::GridNeg,
            test_variant: Some(Variant::RandomNeg),
            agent: AgentKind::Dqn,
            ..Default::default()
        };
        let text = cfg.to_toml();
        assert!(text.contains("variant = \"grid-neg\""));
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
        assert!(ExperimentConfig::from_toml("epochz = 3").is_err());
        assert!(ExperimentConfig::from_toml("agents = 0").is_err());
        let partial = ExperimentConfig::from_toml("epochs = 7\n[q]\nalpha = 0.5\n").unwrap();
        assert_eq!((partial.epochs, partial.q.alpha, partial.q.radius), (7, 0.5, 3));
    }

    #[test]
    fn metrics_csv_round_trip() {
        let rows = vec![
            MetricsRow {
                epoch: 0,
                agent_id: 1,
                avg_score: -0.5,
                pct_positive: Some(52.6316),
                encountered: 19,
            },
            MetricsRow {
                epoch: 10,
                agent_id: 1,
                avg_score: 0.0,
                pct_positive: None,
                encountered: 0,
            },
        ];
        let mut buf = Vec::new();
        write_metrics(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("epoch,agent_id,avg_score,pct_positive,encountered\n"));
        assert!(text.contains("10,1,0.0000,,0\n"));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        write_metrics_file(&path, &rows).unwrap();
        assert_eq!(read_metrics(&path).unwrap(), rows);
    }

    #[test]
    fn summary_skips_undefined_percentages() {
        let row = |agent_id, pct, score| MetricsRow {
            epoch: 0,
            agent_id,
            avg_score: score,
            pct_positive: pct,
            encountered: 3,
        };
        let s = summarize(&[row(0, Some(40.0), 1.0), row(1, None, 0.0), row(2, Some(60.0), 2.0)]);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].mean_pct_positive, Some(50.0));
        assert_eq!(s[0].mean_score, 1.0);
    }

    #[test]
    fn random_agent_zero_epochs() {
        let cfg = ExperimentConfig {
            agent: AgentKind::Random,
            epochs: 0,
            agents: 2,
            ..Default::default()
        };
        let runs = run_experiment(&cfg, None).unwrap();
        let rows = collect_rows(&runs);
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.epoch == 0));
    }

    #[test]
    fn game_record_matches_world_ledger() {
        let cfg = ExperimentConfig::default();
        let mut agent = Agent::Random;
        let mut rng = SeedStream::new(1).rng();
        for seed in 0..20 {
            let mut world = WorldState::new_game(&cfg.env, Variant::RandomMixed, seed, 200);
            let rec = agent.play(&mut world, Mode::Eval, 1.0, &mut rng).unwrap();
            assert_eq!(rec.score, world.score());
            assert_eq!(rec.rewards.iter().map(|&r| i64::from(r)).sum::<i64>(), rec.score);
            assert_eq!((rec.positives, rec.negatives), (world.positives(), world.negatives()));
        }
    }
}
