//! Adaptive action planner.
//!
//! Each step pools the left/current/right/global clip features, cross-gates
//! the current segment with the query, fuses everything through two fully
//! connected layers into a state, advances a GRU memory and reads a policy
//! over four boundary moves plus a value estimate.
//!
//! The move size is `ceil(N / nu)` clips with
//! `nu = max(1, floor(10 * (1 + 2 * tanh(S_c - S_g))))`. A larger `nu` means a
//! *smaller* move: well-aligned segments are nudged, poorly aligned ones jump.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::corpus::TrainingSample;
use crate::error::{Error, Result};
use crate::evaluator::{reward, AlignmentScores, SegmentScorer, TieReward};
use crate::extractor::{normalized_location, Boundary, GruCell, InitBoundary};
use crate::model::BarModel;

pub const NUM_ACTIONS: usize = 4;

/// Largest amplitude factor `nu` (the `tanh -> 1` limit).
pub const MAX_AMPLITUDE: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ActionKind {
    StartBack,
    StartFwd,
    EndBack,
    EndFwd,
}

impl ActionKind {
    pub const ALL: [ActionKind; NUM_ACTIONS] = [
        ActionKind::StartBack,
        ActionKind::StartFwd,
        ActionKind::EndBack,
        ActionKind::EndFwd,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Self {
        Self::ALL[i]
    }
}

/// A move of one endpoint by `amplitude_clips` clips.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Action {
    pub kind: ActionKind,
    pub amplitude_clips: usize,
}

impl Action {
    pub fn new(kind: ActionKind, n: usize, nu: usize) -> Self {
        Self {
            kind,
            amplitude_clips: shift_clips(n, nu),
        }
    }
}

/// `ceil(N / nu)`, never zero.
pub fn shift_clips(n: usize, nu: usize) -> usize {
    n.div_ceil(nu.max(1)).max(1)
}

/// Amplitude factor `nu` from the current and global alignment scores.
pub fn amplitude(current: f64, global: f64) -> usize {
    let raw = (10.0 * (1.0 + 2.0 * (current - global).tanh())).floor();
    if raw.is_nan() || raw < 1.0 {
        1
    } else {
        raw.min(MAX_AMPLITUDE as f64) as usize
    }
}

/// Moves one endpoint, then clamps to `0 <= start < end <= N`. Backward
/// moves toward clip 0, forward toward clip `N`.
pub fn apply_action(b: Boundary, action: Action, n: usize) -> Boundary {
    let shift = action.amplitude_clips.max(1);
    let Boundary { mut start, mut end } = b;
    match action.kind {
        ActionKind::StartBack => start = start.saturating_sub(shift),
        ActionKind::StartFwd => start = (start + shift).min(end - 1),
        ActionKind::EndBack => end = end.saturating_sub(shift).max(start + 1),
        ActionKind::EndFwd => end = (end + shift).min(n),
    }
    Boundary::new(start, end)
}

/// Planner parameters.
#[derive(Debug, Clone)]
pub struct Planner {
    pub feature_dim: usize,
    pub hidden_size: usize,
    pub no_context: bool,
    pub gate_query: ParamId,
    pub gate_segment: ParamId,
    pub phi1_weight: ParamId,
    pub phi1_bias: ParamId,
    pub phi2_weight: ParamId,
    pub phi2_bias: ParamId,
    pub gru: GruCell,
    pub actor_weight: ParamId,
    pub actor_bias: ParamId,
    pub critic_weight: ParamId,
    pub critic_bias: ParamId,
}

/// State `s_t` and the updated GRU memory.
#[derive(Debug, Clone, Copy)]
pub struct PlannerState {
    pub activation: Var,
    pub hidden: Var,
    pub step: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct PolicyOutput {
    pub probs: Var,
    pub log_probs: Var,
    pub value: Var,
}

/// Pooled inputs to the state for one step.
#[derive(Debug, Clone, Copy)]
pub struct StateInputs {
    pub query_gated: Var,
    pub current_gated: Var,
    pub global: Var,
    pub left: Var,
    pub right: Var,
    pub location: Var,
}

impl Planner {
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        feature_dim: usize,
        hidden_size: usize,
        no_context: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let (d, k) = (feature_dim, hidden_size);
        let input = Self::input_width(d, k, no_context);
        let gate_query = store.register_uniform("planner.cross_gate.w_s", &[k, d], k, rng)?;
        let gate_segment = store.register_uniform("planner.cross_gate.w_v", &[d, k], d, rng)?;
        let phi1_weight = store.register_uniform("planner.phi.fc1.weight", &[input, k], input, rng)?;
        let phi1_bias = store.register_uniform("planner.phi.fc1.bias", &[k], input, rng)?;
        let phi2_weight = store.register_uniform("planner.phi.fc2.weight", &[k, k], k, rng)?;
        let phi2_bias = store.register_uniform("planner.phi.fc2.bias", &[k], k, rng)?;
        let gru = GruCell::register(store, "planner.gru", k, k, rng)?;
        let actor_weight =
            store.register_uniform("planner.actor.weight", &[k, NUM_ACTIONS], k, rng)?;
        let actor_bias = store.register_uniform("planner.actor.bias", &[NUM_ACTIONS], k, rng)?;
        let critic_weight = store.register_uniform("planner.critic.weight", &[k, 1], k, rng)?;
        let critic_bias = store.register_uniform("planner.critic.bias", &[1], k, rng)?;
        Ok(Self {
            feature_dim,
            hidden_size,
            no_context,
            gate_query,
            gate_segment,
            phi1_weight,
            phi1_bias,
            phi2_weight,
            phi2_bias,
            gru,
            actor_weight,
            actor_bias,
            critic_weight,
            critic_bias,
        })
    }

    /// Width of the fused state input: `E~, f~c, fg, [fl, fr], L`.
    pub fn input_width(feature_dim: usize, hidden_size: usize, no_context: bool) -> usize {
        let context = if no_context { 0 } else { 2 * feature_dim };
        hidden_size + 2 * feature_dim + context + 2
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![
            self.gate_query,
            self.gate_segment,
            self.phi1_weight,
            self.phi1_bias,
            self.phi2_weight,
            self.phi2_bias,
        ];
        ids.extend(self.gru.param_ids());
        ids.extend([
            self.actor_weight,
            self.actor_bias,
            self.critic_weight,
            self.critic_bias,
        ]);
        ids
    }

    /// `f~c = sigmoid(E Ws) * fc`, `E~ = sigmoid(fc Wv) * E`.
    pub fn cross_gate(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        current: Var,
        query: Var,
    ) -> Result<(Var, Var)> {
        if tape.shape(current) != [self.feature_dim] || tape.shape(query) != [self.hidden_size] {
            return Err(Error::Contract(format!(
                "cross_gate expects segment [{}] and query [{}], got {:?} and {:?}",
                self.feature_dim,
                self.hidden_size,
                tape.shape(current),
                tape.shape(query)
            )));
        }
        let ws = tape.param(store, self.gate_query);
        let wv = tape.param(store, self.gate_segment);
        let gs = tape.matmul(query, ws)?;
        let gs = tape.sigmoid(gs);
        let current_gated = tape.mul(gs, current)?;
        let gv = tape.matmul(current, wv)?;
        let gv = tape.sigmoid(gv);
        let query_gated = tape.mul(gv, query)?;
        Ok((current_gated, query_gated))
    }

    /// Two fully connected layers over the fixed-order concatenation, then one
    /// GRU step on the memory.
    pub fn build_state(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        inputs: &StateInputs,
        hidden: Var,
        step: usize,
    ) -> Result<PlannerState> {
        let parts: Vec<Var> = if self.no_context {
            vec![
                inputs.query_gated,
                inputs.current_gated,
                inputs.global,
                inputs.location,
            ]
        } else {
            vec![
                inputs.query_gated,
                inputs.current_gated,
                inputs.global,
                inputs.left,
                inputs.right,
                inputs.location,
            ]
        };
        let x = tape.concat(&parts)?;
        let w1 = tape.param(store, self.phi1_weight);
        let b1 = tape.param(store, self.phi1_bias);
        let h1 = tape.linear(x, w1, b1)?;
        let h1 = tape.relu(h1);
        let w2 = tape.param(store, self.phi2_weight);
        let b2 = tape.param(store, self.phi2_bias);
        let activation = tape.linear(h1, w2, b2)?;
        let hidden = self.gru.step(tape, store, activation, hidden)?;
        Ok(PlannerState {
            activation,
            hidden,
            step,
        })
    }

    pub fn policy_value(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        state: &PlannerState,
    ) -> Result<PolicyOutput> {
        let wa = tape.param(store, self.actor_weight);
        let ba = tape.param(store, self.actor_bias);
        let logits = tape.linear(state.hidden, wa, ba)?;
        let probs = tape.softmax(logits)?;
        let log_probs = tape.log_softmax(logits)?;
        let wc = tape.param(store, self.critic_weight);
        let bc = tape.param(store, self.critic_bias);
        let v = tape.linear(state.hidden, wc, bc)?;
        let value = tape.pick(v, 0)?;
        Ok(PolicyOutput {
            probs,
            log_probs,
            value,
        })
    }
}

/// How actions are chosen during a rollout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionMode {
    /// Sample from the policy (training).
    Sample,
    /// Argmax of the policy (inference).
    Greedy,
    /// Uniformly random actions, ignoring the policy (baseline agent).
    Uniform,
}

/// Source of the step reward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    Sign(TieReward),
    /// Uniform in `[-1, 1]`, independent of the episode.
    Random,
}

impl Default for RewardMode {
    fn default() -> Self {
        RewardMode::Sign(TieReward::Negative)
    }
}

/// Adaptive `nu` or a fixed one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AmplitudeMode {
    #[default]
    Adaptive,
    Fixed(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RolloutOptions {
    pub mode: ActionMode,
    pub max_steps: usize,
    pub amplitude: AmplitudeMode,
    pub init: InitBoundary,
    pub reward: RewardMode,
    /// Stop once the current score reaches this value.
    pub stop_threshold: Option<f64>,
}

impl Default for RolloutOptions {
    fn default() -> Self {
        Self {
            mode: ActionMode::Sample,
            max_steps: 12,
            amplitude: AmplitudeMode::Adaptive,
            init: InitBoundary::Quarter,
            reward: RewardMode::default(),
            stop_threshold: None,
        }
    }
}

/// One transition `b_{t-1} -> b_t`.
#[derive(Debug, Clone)]
pub struct TrajectoryStep {
    pub step: usize,
    pub previous: Boundary,
    /// Scores of `previous`.
    pub scores: AlignmentScores,
    pub amplitude: usize,
    pub action: Action,
    pub boundary: Boundary,
    /// Current-segment score of `boundary`.
    pub current_score: f64,
    pub reward: f64,
    pub probs: [f64; NUM_ACTIONS],
    pub value: f64,
    pub log_prob: Var,
    pub entropy: Var,
    pub value_var: Var,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub num_clips: usize,
    pub initial: Boundary,
    pub initial_score: f64,
    pub global_score: f64,
    pub steps: Vec<TrajectoryStep>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.reward).collect()
    }

    pub fn values(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.value).collect()
    }

    /// `b_0, b_1, ..., b_T`.
    pub fn boundaries(&self) -> Vec<Boundary> {
        std::iter::once(self.initial)
            .chain(self.steps.iter().map(|s| s.boundary))
            .collect()
    }

    /// `S^c_0, ..., S^c_T`.
    pub fn current_scores(&self) -> Vec<f64> {
        std::iter::once(self.initial_score)
            .chain(self.steps.iter().map(|s| s.current_score))
            .collect()
    }
}

/// Column means of rows `[start, end)`; zero vector when empty.
pub fn mean_rows(features: &Tensor, start: usize, end: usize) -> Vec<f64> {
    let d = features.cols();
    let mut out = vec![0.0; d];
    if end <= start {
        return out;
    }
    for i in start..end {
        out.iter_mut()
            .zip(features.row(i))
            .for_each(|(o, v)| *o += v);
    }
    let inv = 1.0 / (end - start) as f64;
    out.iter_mut().for_each(|o| *o *= inv);
    out
}

fn sample_index<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in xs.iter().enumerate() {
        if *v > xs[best] {
            best = i;
        }
    }
    best
}

/// Runs one episode. `query` is the query summary on `tape` (a constant or a
/// tracked node); `scorer` holds detached filtered features and query values
/// used for the amplitude factor and the reward.
pub fn rollout<R: Rng>(
    tape: &mut Tape,
    model: &BarModel,
    sample: TrainingSample<'_>,
    query: Var,
    scorer: &SegmentScorer,
    opts: &RolloutOptions,
    rng: &mut R,
) -> Result<Trajectory> {
    if opts.max_steps == 0 {
        return Err(Error::Config("rollout needs at least one step".into()));
    }
    let planner = &model.planner;
    let store = &model.store;
    let features = sample.clip_features;
    let n = features.rows();
    if n != scorer.num_clips() {
        return Err(Error::Contract(format!(
            "scorer covers {} clips, sample has {n}",
            scorer.num_clips()
        )));
    }
    let global_feat = tape.constant(Tensor::vector(mean_rows(features, 0, n)));
    let global_score = scorer.global();
    let initial = Boundary::initial(n, opts.init);
    let initial_score = scorer.score_range(initial.start, initial.end);

    let mut boundary = initial;
    let mut current_score = initial_score;
    let mut hidden = tape.constant(Tensor::zeros(&[planner.hidden_size]));
    let mut steps = Vec::with_capacity(opts.max_steps);

    for t in 1..=opts.max_steps {
        if let Some(th) = opts.stop_threshold {
            if current_score >= th {
                break;
            }
        }
        let scores = AlignmentScores {
            global: global_score,
            current: current_score,
            left: scorer.score_range(0, boundary.start),
            right: scorer.score_range(boundary.end, n),
        };
        let nu = match opts.amplitude {
            AmplitudeMode::Adaptive => amplitude(scores.current, scores.global),
            AmplitudeMode::Fixed(v) => v.max(1),
        };

        let current = tape.constant(Tensor::vector(mean_rows(features, boundary.start, boundary.end)));
        let left = tape.constant(Tensor::vector(mean_rows(features, 0, boundary.start)));
        let right = tape.constant(Tensor::vector(mean_rows(features, boundary.end, n)));
        let location = tape.constant(Tensor::vector(normalized_location(boundary, n).to_vec()));
        let (current_gated, query_gated) = planner.cross_gate(tape, store, current, query)?;
        let inputs = StateInputs {
            query_gated,
            current_gated,
            global: global_feat,
            left,
            right,
            location,
        };
        let state = planner.build_state(tape, store, &inputs, hidden, t)?;
        hidden = state.hidden;
        let policy = planner.policy_value(tape, store, &state)?;

        let probs_vec = tape.value(policy.probs).data().to_vec();
        let idx = match opts.mode {
            ActionMode::Sample => sample_index(&probs_vec, rng),
            ActionMode::Greedy => argmax(&probs_vec),
            ActionMode::Uniform => rng.random_range(0..NUM_ACTIONS),
        };
        let action = Action::new(ActionKind::from_index(idx), n, nu);
        let next = apply_action(boundary, action, n);
        let next_score = scorer.score_range(next.start, next.end);
        let r = match opts.reward {
            RewardMode::Sign(tie) => reward(next_score, current_score, tie) as f64,
            RewardMode::Random => rng.random_range(-1.0..=1.0),
        };

        let log_prob = tape.pick(policy.log_probs, idx)?;
        let plogp = tape.dot(policy.probs, policy.log_probs)?;
        let entropy = tape.neg(plogp);
        let mut probs = [0.0; NUM_ACTIONS];
        probs.copy_from_slice(&probs_vec);
        steps.push(TrajectoryStep {
            step: t,
            previous: boundary,
            scores,
            amplitude: nu,
            action,
            boundary: next,
            current_score: next_score,
            reward: r,
            probs,
            value: tape.item(policy.value),
            log_prob,
            entropy,
            value_var: policy.value,
        });
        boundary = next;
        current_score = next_score;
    }

    Ok(Trajectory {
        num_clips: n,
        initial,
        initial_score,
        global_score,
        steps,
    })
}

/// Detached inputs for rollouts: eval-mode filtered features and the query
/// summary values for one sample.
pub fn detached_scorer(model: &BarModel, sample: TrainingSample<'_>) -> Result<(Vec<f64>, SegmentScorer)> {
    let mut tape = Tape::new();
    let enc = model
        .encoder
        .encode(&mut tape, &model.store, sample.query_tokens)?;
    let query = tape.value(enc.summary).data().to_vec();
    let filtered = model.evaluator.filter_values(&model.store, sample.clip_features);
    Ok((query.clone(), SegmentScorer::new(filtered, query)))
}
