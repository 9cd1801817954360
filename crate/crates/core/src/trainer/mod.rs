//! Losses and the alternating rank / actor-critic training loop.

mod losses;

pub use losses::{a2c_loss, a2c_loss_with, inter_loss, intra_loss, k_step_returns, q_returns, rank_loss, A2cLoss};
pub use crate::planner::{Trajectory, TrajectoryStep};

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, Checkpoint, ParamId, Tape, Tensor, Var};
use crate::corpus::GroundingSample;
use crate::error::{Error, Result};
use crate::evaluator::{score, score_parts, TieReward};
use crate::extractor::InitBoundary;
use crate::inference::{evaluate, EvalPolicy, InferenceConfig, DEFAULT_THRESHOLDS};
use crate::model::{BarModel, ModelConfig};
use crate::planner::{detached_scorer, rollout, ActionMode, AmplitudeMode, RewardMode, RolloutOptions};

pub const TRAIN_STATE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    /// Ranking margin.
    pub margin: f64,
    /// Entropy bonus weight.
    pub entropy_weight: f64,
    pub discount: f64,
    /// Weight of the ranking loss in joint-update mode.
    pub rank_weight: f64,
    /// Weight of the intra-video ranking term.
    pub intra_weight: f64,
    /// Iterations per phase; a full cycle is twice this.
    pub half_period: usize,
    pub max_steps: usize,
    pub total_iterations: usize,
    pub seed: u64,
    pub grad_clip: Option<f64>,
    pub tie_reward: TieReward,
    pub random_reward: bool,
    pub amplitude: AmplitudeMode,
    pub init_boundary: InitBoundary,
    /// Also update the query encoder in the actor-critic phase.
    pub encoder_in_a2c: bool,
    /// Optimize `L_a2c + rank_weight * L_rank` over all parameters every
    /// iteration instead of alternating.
    pub joint_update: bool,
    /// Evaluate on the held-out set every this many iterations (0 = never).
    pub eval_every: usize,
    /// Loss reduction over the batch. Only `mean` is supported.
    pub reduction: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 12,
            lr: 1e-3,
            margin: 0.2,
            entropy_weight: 0.1,
            discount: 0.4,
            rank_weight: 1.0,
            intra_weight: 0.1,
            half_period: 500,
            max_steps: 12,
            total_iterations: 6000,
            seed: 0,
            grad_clip: Some(5.0),
            tie_reward: TieReward::Negative,
            random_reward: false,
            amplitude: AmplitudeMode::Adaptive,
            init_boundary: InitBoundary::Quarter,
            encoder_in_a2c: false,
            joint_update: false,
            eval_every: 0,
            reduction: "mean".into(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [
            ("lr", self.lr),
            ("margin", self.margin),
            ("entropy_weight", self.entropy_weight),
            ("rank_weight", self.rank_weight),
            ("intra_weight", self.intra_weight),
        ];
        for (name, v) in weights {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} = {v} must be finite and >= 0")));
            }
        }
        if !(0.0..=1.0).contains(&self.discount) {
            return Err(Error::Config(format!("discount {} must lie in [0, 1]", self.discount)));
        }
        if self.half_period == 0 {
            return Err(Error::Config("half_period must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size {} must be at least 2 for in-batch negatives",
                self.batch_size
            )));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be at least 1".into()));
        }
        if let AmplitudeMode::Fixed(0) = self.amplitude {
            return Err(Error::Config("fixed amplitude must be at least 1".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("grad_clip {c} must be positive")));
            }
        }
        if self.reduction != "mean" {
            return Err(Error::Config(format!(
                "unsupported loss reduction {:?}",
                self.reduction
            )));
        }
        Ok(())
    }

    pub fn phase_at(&self, iteration: usize) -> Phase {
        if self.joint_update {
            Phase::Joint
        } else if (iteration / self.half_period) % 2 == 0 {
            Phase::Rank
        } else {
            Phase::ActorCritic
        }
    }

    fn rollout_options(&self) -> RolloutOptions {
        RolloutOptions {
            mode: ActionMode::Sample,
            max_steps: self.max_steps,
            amplitude: self.amplitude,
            init: self.init_boundary,
            reward: if self.random_reward {
                RewardMode::Random
            } else {
                RewardMode::Sign(self.tie_reward)
            },
            stop_threshold: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Encoder and evaluator learn from the ranking loss; planner frozen.
    Rank,
    /// Planner learns from the actor-critic loss; encoder and evaluator frozen.
    ActorCritic,
    /// Everything learns from the weighted sum.
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub tiou_03: f64,
    pub tiou_05: f64,
    pub tiou_07: f64,
    pub mean_tiou: f64,
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iteration: usize,
    pub phase: Phase,
    pub phase_start: bool,
    pub loss: f64,
    pub inter: Option<f64>,
    pub intra: Option<f64>,
    pub actor: Option<f64>,
    pub critic: Option<f64>,
    pub entropy: Option<f64>,
    pub mean_reward: Option<f64>,
    pub grad_norm: f64,
    pub eval: Option<EvalMetrics>,
}

/// Everything needed to continue a run bitwise.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainState {
    pub format_version: u32,
    pub iteration: usize,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub parameters: Checkpoint,
    pub optimizer: Adam,
}

fn iteration_seed(seed: u64, iteration: usize) -> u64 {
    let mut z = seed ^ (iteration as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Default)]
struct LossParts {
    inter: Option<f64>,
    intra: Option<f64>,
    actor: Option<f64>,
    critic: Option<f64>,
    entropy: Option<f64>,
    mean_reward: Option<f64>,
}

pub struct Trainer {
    pub model: BarModel,
    pub config: TrainConfig,
    optimizer: Adam,
    iteration: usize,
    diagnostic_dir: Option<PathBuf>,
}

impl Trainer {
    pub fn new(model: BarModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut optimizer = Adam::new(config.lr);
        optimizer.clip_norm = config.grad_clip;
        Ok(Self {
            model,
            config,
            optimizer,
            iteration: 0,
            diagnostic_dir: None,
        })
    }

    /// Where to write a diagnostic dump if the loss diverges.
    pub fn with_diagnostic_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.diagnostic_dir = Some(dir.into());
        self
    }

    /// Next iteration to run.
    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn state(&self) -> TrainState {
        TrainState {
            format_version: TRAIN_STATE_FORMAT_VERSION,
            iteration: self.iteration,
            model_config: self.model.config.clone(),
            train_config: self.config.clone(),
            parameters: self.model.store.to_checkpoint(),
            optimizer: self.optimizer.clone(),
        }
    }

    pub fn from_state(state: TrainState) -> Result<Self> {
        if state.format_version != TRAIN_STATE_FORMAT_VERSION {
            return Err(Error::Validation(format!(
                "unsupported training state version {}",
                state.format_version
            )));
        }
        let mut model = BarModel::new(state.model_config)?;
        model.store.load_checkpoint(&state.parameters)?;
        let mut trainer = Self::new(model, state.train_config)?;
        trainer.optimizer = state.optimizer;
        trainer.iteration = state.iteration;
        Ok(trainer)
    }

    pub fn save_state(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec(&self.state()).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load_state(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let state: TrainState = serde_json::from_slice(&bytes).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::from_state(state)
    }

    fn trainable_ids(&self, phase: Phase) -> Vec<ParamId> {
        match phase {
            Phase::Rank => self.model.rank_ids(),
            Phase::ActorCritic => {
                let mut ids = self.model.planner_ids();
                if self.config.encoder_in_a2c {
                    ids.extend(self.model.encoder_ids());
                }
                ids
            }
            Phase::Joint => self.model.store.ids().collect(),
        }
    }

    /// Runs one iteration on a batch drawn from `corpus`.
    pub fn step(&mut self, corpus: &[GroundingSample]) -> Result<MetricsRecord> {
        if corpus.len() < self.config.batch_size {
            return Err(Error::Config(format!(
                "corpus of {} samples is smaller than batch_size {}",
                corpus.len(),
                self.config.batch_size
            )));
        }
        let it = self.iteration;
        let phase = self.config.phase_at(it);
        let ids = self.trainable_ids(phase);
        self.model.set_trainable(&ids);
        self.model.store.zero_grad();

        let mut rng = ChaCha8Rng::seed_from_u64(iteration_seed(self.config.seed, it));
        let batch: Vec<&GroundingSample> = sample_indices(&mut rng, corpus.len(), self.config.batch_size)
            .into_iter()
            .map(|i| &corpus[i])
            .collect();

        let mut tape = Tape::new();
        let (loss, parts) = match self.iteration_loss(&mut tape, &batch, phase, &mut rng) {
            Ok(v) => v,
            Err(Error::Training { step, message, .. }) => {
                return Err(self.diverged(phase, step, message));
            }
            Err(e) => return Err(e),
        };
        let loss_value = tape.item(loss);
        if !loss_value.is_finite() {
            return Err(self.diverged(phase, None, format!("loss is {loss_value}")));
        }
        tape.backward(loss, &mut self.model.store)?;
        let grad_norm = self.optimizer.step(&mut self.model.store, &ids);
        if !grad_norm.is_finite() {
            return Err(self.diverged(phase, None, format!("gradient norm is {grad_norm}")));
        }
        self.iteration += 1;
        Ok(MetricsRecord {
            iteration: it,
            phase,
            phase_start: it == 0 || self.config.phase_at(it - 1) != phase,
            loss: loss_value,
            inter: parts.inter,
            intra: parts.intra,
            actor: parts.actor,
            critic: parts.critic,
            entropy: parts.entropy,
            mean_reward: parts.mean_reward,
            grad_norm,
            eval: None,
        })
    }

    fn iteration_loss(
        &self,
        tape: &mut Tape,
        batch: &[&GroundingSample],
        phase: Phase,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var, LossParts)> {
        let cfg = &self.config;
        let model = &self.model;
        let store = &model.store;
        let b = batch.len();
        let opts = cfg.rollout_options();
        let mut parts = LossParts::default();

        let rank_terms = matches!(phase, Phase::Rank | Phase::Joint);
        let a2c_terms = matches!(phase, Phase::ActorCritic | Phase::Joint);
        tape.set_training(rank_terms);

        let mut queries = Vec::with_capacity(b);
        let mut filtered = Vec::with_capacity(b);
        if rank_terms {
            for s in batch {
                queries.push(model.encoder.encode(tape, store, &s.query_tokens)?.summary);
                let f = tape.constant(s.clip_features.clone());
                filtered.push(model.evaluator.filter(tape, store, f, rng)?);
            }
        }

        let mut rank = None;
        let mut globals = Vec::with_capacity(b);
        if rank_terms {
            let mut matrix = Vec::with_capacity(b);
            for &f in &filtered {
                let mut row = Vec::with_capacity(b);
                for &q in &queries {
                    row.push(score(tape, f, q)?);
                }
                matrix.push(row);
            }
            globals.extend((0..b).map(|i| matrix[i][i]));
            let inter = inter_loss(tape, &matrix, cfg.margin)?;
            parts.inter = Some(tape.item(inter));
            rank = Some(inter);
        }

        let mut trajectories = Vec::with_capacity(b);
        for s in batch {
            let view = s.training_view();
            let (qvals, scorer) = detached_scorer(model, view)?;
            let q = if a2c_terms && cfg.encoder_in_a2c && phase == Phase::ActorCritic {
                model.encoder.encode(tape, store, &s.query_tokens)?.summary
            } else {
                tape.constant(Tensor::vector(qvals))
            };
            trajectories.push(rollout(tape, model, view, q, &scorer, &opts, rng)?);
        }
        let rewards: Vec<f64> = trajectories.iter().flat_map(|t| t.rewards()).collect();
        if !rewards.is_empty() {
            parts.mean_reward = Some(rewards.iter().sum::<f64>() / rewards.len() as f64);
        }

        if let Some(inter) = rank {
            let mut intra_terms = Vec::new();
            if cfg.intra_weight > 0.0 {
                for (i, traj) in trajectories.iter().enumerate() {
                    for st in &traj.steps {
                        let scores = score_parts(tape, filtered[i], st.boundary, queries[i], globals[i])?;
                        intra_terms.push(intra_loss(tape, &scores, cfg.margin)?);
                    }
                }
                let total: f64 = intra_terms.iter().map(|v| tape.item(*v)).sum();
                parts.intra = Some(total / b as f64);
            }
            rank = Some(rank_loss(tape, inter, &intra_terms, cfg.intra_weight, b)?);
        }

        let mut a2c = None;
        if a2c_terms {
            let mut totals = Vec::with_capacity(b);
            let (mut actor, mut critic, mut entropy) = (0.0, 0.0, 0.0);
            for traj in &trajectories {
                let l = a2c_loss(tape, traj, cfg.entropy_weight, cfg.discount)?;
                totals.push(l.total);
                actor += l.actor;
                critic += l.critic;
                entropy += l.entropy / traj.len() as f64;
            }
            let sum = tape.sum_n(&totals)?;
            a2c = Some(tape.scale(sum, 1.0 / b as f64));
            parts.actor = Some(actor / b as f64);
            parts.critic = Some(critic / b as f64);
            parts.entropy = Some(entropy / b as f64);
        }

        let loss = match (rank, a2c) {
            (Some(r), None) => r,
            (None, Some(a)) => a,
            (Some(r), Some(a)) => {
                let r = tape.scale(r, cfg.rank_weight);
                tape.add(a, r)?
            }
            (None, None) => unreachable!("every phase has a loss"),
        };
        Ok((loss, parts))
    }

    fn diverged(&self, phase: Phase, step: Option<usize>, message: String) -> Error {
        let mut message = format!("{message} in {phase:?} phase");
        if let Some(dir) = &self.diagnostic_dir {
            let path = dir.join(format!("diagnostic_{}.json", self.iteration));
            match self.write_diagnostic(&path, phase, step, &message) {
                Ok(()) => message.push_str(&format!("; diagnostic dump at {}", path.display())),
                Err(e) => message.push_str(&format!("; diagnostic dump failed: {e}")),
            }
        }
        Error::Training {
            iteration: self.iteration,
            step,
            message,
        }
    }

    fn write_diagnostic(&self, path: &Path, phase: Phase, step: Option<usize>, message: &str) -> Result<()> {
        let params: Vec<serde_json::Value> = self
            .model
            .store
            .iter()
            .map(|(_, p)| {
                let finite = p.value.all_finite();
                let max_abs = p.value.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
                let grad_max = p.grad.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                serde_json::json!({
                    "name": p.name,
                    "finite": finite,
                    "max_abs": if max_abs.is_finite() { Some(max_abs) } else { None },
                    "grad_max_abs": if grad_max.is_finite() { Some(grad_max) } else { None },
                })
            })
            .collect();
        let dump = serde_json::json!({
            "iteration": self.iteration,
            "phase": phase,
            "step": step,
            "message": message,
            "config": self.config,
            "parameters": params,
        });
        std::fs::write(path, serde_json::to_vec_pretty(&dump).expect("dump serializes"))
            .map_err(|e| Error::io(path, e))
    }

    /// Runs until `total_iterations`, calling `sink` with every record.
    /// Periodic evaluation on `heldout` follows `eval_every`.
    pub fn train<F>(&mut self, corpus: &[GroundingSample], heldout: Option<&[GroundingSample]>, mut sink: F) -> Result<()>
    where
        F: FnMut(&MetricsRecord) -> Result<()>,
    {
        while self.iteration < self.config.total_iterations {
            let mut record = self.step(corpus)?;
            let done = self.iteration;
            if let Some(test) = heldout {
                let due = self.config.eval_every > 0 && done % self.config.eval_every == 0;
                if due || (self.config.eval_every > 0 && done == self.config.total_iterations) {
                    record.eval = Some(self.evaluate(test)?);
                }
            }
            sink(&record)?;
        }
        self.model.unfreeze_all();
        Ok(())
    }

    pub fn evaluate(&self, test: &[GroundingSample]) -> Result<EvalMetrics> {
        let cfg = InferenceConfig {
            max_steps: self.config.max_steps,
            amplitude: self.config.amplitude,
            init: self.config.init_boundary,
            ..InferenceConfig::default()
        };
        let r = evaluate(&self.model, test, &cfg, &DEFAULT_THRESHOLDS, EvalPolicy::Greedy, 1)?;
        Ok(EvalMetrics {
            tiou_03: r.recall_at(0.3).unwrap_or(0.0),
            tiou_05: r.recall_at(0.5).unwrap_or(0.0),
            tiou_07: r.recall_at(0.7).unwrap_or(0.0),
            mean_tiou: r.mean_tiou,
        })
    }
}

/// Appends records to a JSON-lines metrics log.
pub struct MetricsLog {
    path: PathBuf,
    out: std::io::BufWriter<std::fs::File>,
}

impl MetricsLog {
    pub fn append(path: &Path) -> Result<Self> {
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: std::io::BufWriter::new(file),
        })
    }

    pub fn write(&mut self, record: &MetricsRecord) -> Result<()> {
        let line = serde_json::to_string(record).expect("record serializes");
        writeln!(self.out, "{line}").map_err(|e| Error::io(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::parse(format!("line {}", i + 1), e.to_string()))
        })
        .collect()
}
