//! Central finite-difference checks for every differentiable op, model
//! component and loss.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{OpKind, ParamStore, Tape, Tensor, Var};
use crate::corpus::GroundingSample;
use crate::error::Result;
use crate::evaluator::{attend, score, score_state, AlignmentScoreVars, Evaluator};
use crate::extractor::{Boundary, GruCell, QueryEncoder};
use crate::model::{BarModel, ModelConfig};
use crate::planner::{detached_scorer, rollout, ActionMode, PlannerState, RolloutOptions, StateInputs, Trajectory};
use crate::trainer::{a2c_loss_with, inter_loss, intra_loss, q_returns, rank_loss};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Denominator floor for the relative error.
pub const ERROR_FLOOR: f64 = 1e-4;

type Objective = Box<dyn Fn(&mut Tape, &ParamStore, &[Var]) -> Result<Var> + Send + Sync>;

/// A scalar function of some input tensors and the parameters in `store`.
pub struct GradCase {
    pub name: &'static str,
    store: ParamStore,
    inputs: Vec<Tensor>,
    objective: Objective,
}

impl GradCase {
    fn new(
        name: &'static str,
        store: ParamStore,
        inputs: Vec<Tensor>,
        objective: impl Fn(&mut Tape, &ParamStore, &[Var]) -> Result<Var> + Send + Sync + 'static,
    ) -> Self {
        Self {
            name,
            store,
            inputs,
            objective: Box::new(objective),
        }
    }

    fn eval(&self, store: &ParamStore, inputs: &[Tensor]) -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
        let out = (self.objective)(&mut tape, store, &vars)?;
        Ok(tape.item(out))
    }

    /// Compares the tape gradient with central differences over every input
    /// and parameter scalar.
    pub fn run(&self, h: f64, fault: Option<OpKind>) -> Result<CaseResult> {
        let mut store = self.store.clone();
        store.zero_grad();
        let mut tape = Tape::new();
        if let Some(k) = fault {
            tape.inject_fault(k);
        }
        let vars: Vec<Var> = self.inputs.iter().map(|t| tape.input(t.clone())).collect();
        let out = (self.objective)(&mut tape, &store, &vars)?;
        tape.backward(out, &mut store)?;

        let mut max_err: f64 = 0.0;
        let mut checked = 0;
        let mut compare = |analytic: f64, plus: f64, minus: f64| {
            let numeric = (plus - minus) / (2.0 * h);
            let denom = analytic.abs().max(numeric.abs()).max(ERROR_FLOOR);
            let err = (analytic - numeric).abs() / denom;
            max_err = if err.is_nan() { f64::INFINITY } else { max_err.max(err) };
            checked += 1;
        };

        for (i, var) in vars.iter().enumerate() {
            let zeros = vec![0.0; self.inputs[i].len()];
            let analytic = tape.grad(*var).map(<[f64]>::to_vec).unwrap_or(zeros);
            for j in 0..self.inputs[i].len() {
                let mut shifted = self.inputs.clone();
                shifted[i].data_mut()[j] += h;
                let plus = self.eval(&self.store, &shifted)?;
                shifted[i].data_mut()[j] -= 2.0 * h;
                let minus = self.eval(&self.store, &shifted)?;
                compare(analytic[j], plus, minus);
            }
        }
        let ids: Vec<_> = self.store.ids().filter(|id| !self.store.is_frozen(*id)).collect();
        for id in ids {
            for j in 0..self.store.get(id).value.len() {
                let mut shifted = self.store.clone();
                shifted.get_mut(id).value.data_mut()[j] += h;
                let plus = self.eval(&shifted, &self.inputs)?;
                shifted.get_mut(id).value.data_mut()[j] -= 2.0 * h;
                let minus = self.eval(&shifted, &self.inputs)?;
                compare(store.get(id).grad[j], plus, minus);
            }
        }
        Ok(CaseResult {
            name: self.name.to_string(),
            max_rel_error: max_err,
            checked,
            passed: false,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseResult {
    pub name: String,
    pub max_rel_error: f64,
    /// Number of scalar partial derivatives compared.
    pub checked: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradReport {
    pub tolerance: f64,
    pub step: f64,
    pub fault: Option<String>,
    pub cases: Vec<CaseResult>,
    pub seconds: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&CaseResult> {
        self.cases.iter().filter(|c| !c.passed).collect()
    }

    pub fn table(&self) -> String {
        let mut out = format!("{:<24} {:>8} {:>14}  status\n", "case", "checked", "max rel err");
        for c in &self.cases {
            out.push_str(&format!(
                "{:<24} {:>8} {:>14.3e}  {}\n",
                c.name,
                c.checked,
                c.max_rel_error,
                if c.passed { "ok" } else { "FAIL" }
            ));
        }
        out
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape")
}

/// `sum(x * w)` for a fixed random `w`, so every output element matters.
fn project(tape: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(&mut rng, tape.shape(x));
    let w = tape.constant(w);
    let y = tape.mul(x, w)?;
    Ok(tape.sum(y))
}

fn op_case(
    name: &'static str,
    shapes: &[&[usize]],
    seed: u64,
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + Send + Sync + 'static,
) -> GradCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = shapes.iter().map(|s| random(&mut rng, s)).collect();
    GradCase::new(name, ParamStore::new(), inputs, move |t, _, v| {
        let y = f(t, v)?;
        project(t, y, seed ^ 0xABCD)
    })
}

fn score_vars(v: &[Var]) -> AlignmentScoreVars {
    AlignmentScoreVars {
        global: v[0],
        current: v[1],
        left: v[2],
        right: v[3],
    }
}

fn tiny_model() -> BarModel {
    BarModel::new(ModelConfig {
        vocab_size: 5,
        feature_dim: 4,
        embed_dim: 3,
        hidden_size: 3,
        dropout: 0.5,
        no_context: false,
        init_seed: 3,
    })
    .expect("valid tiny model")
}

fn tiny_sample(rng: &mut ChaCha8Rng) -> GroundingSample {
    GroundingSample {
        video_id: "gradcheck".into(),
        clip_features: random(rng, &[10, 4]),
        query_tokens: vec![1, 3, 2],
        gt_segment: None,
    }
}

/// Every registered case.
pub fn registry() -> Vec<GradCase> {
    let mut cases = vec![
        op_case("matmul_vec_mat", &[&[3], &[3, 4]], 1, |t, v| t.matmul(v[0], v[1])),
        op_case("matmul_mat_vec", &[&[2, 3], &[3]], 2, |t, v| t.matmul(v[0], v[1])),
        op_case("matmul_mat_mat", &[&[2, 3], &[3, 4]], 3, |t, v| t.matmul(v[0], v[1])),
        op_case("add_broadcast", &[&[2, 3], &[3]], 4, |t, v| t.add(v[0], v[1])),
        op_case("sub", &[&[4], &[4]], 5, |t, v| t.sub(v[0], v[1])),
        op_case("mul", &[&[2, 3], &[2, 3]], 6, |t, v| t.mul(v[0], v[1])),
        op_case("scale_shift", &[&[3]], 7, |t, v| {
            let s = t.scale(v[0], -1.7);
            Ok(t.add_scalar(s, 0.3))
        }),
        op_case("sigmoid", &[&[5]], 8, |t, v| Ok(t.sigmoid(v[0]))),
        op_case("tanh", &[&[5]], 9, |t, v| Ok(t.tanh(v[0]))),
        op_case("relu", &[&[6]], 10, |t, v| Ok(t.relu(v[0]))),
        op_case("exp", &[&[4]], 11, |t, v| Ok(t.exp(v[0]))),
        op_case("softmax", &[&[5]], 12, |t, v| t.softmax(v[0])),
        op_case("log_softmax", &[&[5]], 13, |t, v| t.log_softmax(v[0])),
        op_case("l2_normalize", &[&[4]], 14, |t, v| t.l2_normalize(v[0])),
        op_case("mean_pool", &[&[3, 4]], 15, |t, v| t.mean_pool(v[0])),
        op_case("sum", &[&[2, 2]], 16, |t, v| Ok(t.sum(v[0]))),
        op_case("sum_n", &[&[3], &[3], &[3]], 17, |t, v| t.sum_n(v)),
        op_case("dot", &[&[4], &[4]], 18, |t, v| t.dot(v[0], v[1])),
        op_case("concat", &[&[2], &[3]], 19, |t, v| t.concat(v)),
        op_case("slice_rows", &[&[5, 2]], 20, |t, v| t.slice_rows(v[0], 1, 4)),
        op_case("gather_rows", &[&[4, 3]], 21, |t, v| t.gather_rows(v[0], &[2, 0, 2])),
        op_case("row_pick", &[&[3, 3]], 22, |t, v| {
            let r = t.row(v[0], 1)?;
            let p = t.pick(r, 2)?;
            t.mul(r, p)
        }),
        op_case("linear", &[&[2, 3], &[3, 2], &[2]], 23, |t, v| t.linear(v[0], v[1], v[2])),
        op_case("attention", &[&[5, 3], &[3]], 24, |t, v| Ok(attend(t, v[0], v[1])?.1)),
        op_case("score", &[&[5, 3], &[3]], 25, |t, v| score(t, v[0], v[1])),
        op_case("score_state", &[&[8, 3], &[3]], 26, |t, v| {
            let s = score_state(t, v[0], Boundary::new(2, 5), v[1])?;
            let parts = [(s.global, 0.3), (s.current, 1.0), (s.left, -0.6), (s.right, 0.8)];
            let terms: Vec<Var> = parts.iter().map(|(v, w)| t.scale(*v, *w)).collect();
            t.sum_n(&terms)
        }),
    ];

    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let mut store = ParamStore::new();
    let eval = Evaluator::register(&mut store, 4, 3, 0.5, &mut rng).expect("register");
    let feats = random(&mut rng, &[6, 4]);
    cases.push(GradCase::new("evaluator_filter", store, vec![feats], move |t, s, v| {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let y = eval.filter(t, s, v[0], &mut r)?;
        project(t, y, 41)
    }));

    let mut store = ParamStore::new();
    let gru = GruCell::register(&mut store, "gru", 3, 4, &mut rng).expect("register");
    let x = random(&mut rng, &[3]);
    let h = random(&mut rng, &[4]);
    cases.push(GradCase::new("gru_step", store, vec![x, h], move |t, s, v| {
        let y = gru.step(t, s, v[0], v[1])?;
        project(t, y, 42)
    }));

    let mut store = ParamStore::new();
    let enc = QueryEncoder::register(&mut store, 6, 3, 4, &mut rng).expect("register");
    cases.push(GradCase::new("query_encoder", store, vec![], move |t, s, _| {
        let e = enc.encode(t, s, &[4, 1, 4])?;
        project(t, e.summary, 43)
    }));

    let model = tiny_model();
    let planner = model.planner.clone();
    let gate_store = model.store.clone();
    let (d, k) = (planner.feature_dim, planner.hidden_size);
    let fc = random(&mut rng, &[d]);
    let e = random(&mut rng, &[k]);
    let p = planner.clone();
    cases.push(GradCase::new("cross_gate", gate_store.clone(), vec![fc, e], move |t, s, v| {
        let (c, q) = p.cross_gate(t, s, v[0], v[1])?;
        let c = project(t, c, 44)?;
        let q = project(t, q, 45)?;
        t.add(c, q)
    }));

    let state_inputs = vec![
        random(&mut rng, &[k]),
        random(&mut rng, &[d]),
        random(&mut rng, &[d]),
        random(&mut rng, &[d]),
        random(&mut rng, &[d]),
        random(&mut rng, &[2]),
        random(&mut rng, &[k]),
    ];
    let p = planner.clone();
    cases.push(GradCase::new("phi_state", gate_store.clone(), state_inputs, move |t, s, v| {
        let inputs = StateInputs {
            query_gated: v[0],
            current_gated: v[1],
            global: v[2],
            left: v[3],
            right: v[4],
            location: v[5],
        };
        let st = p.build_state(t, s, &inputs, v[6], 1)?;
        let a = project(t, st.activation, 46)?;
        let h = project(t, st.hidden, 47)?;
        t.add(a, h)
    }));

    let hidden = random(&mut rng, &[k]);
    let p = planner.clone();
    cases.push(GradCase::new("actor_critic_heads", gate_store, vec![hidden], move |t, s, v| {
        let st = PlannerState {
            activation: v[0],
            hidden: v[0],
            step: 1,
        };
        let out = p.policy_value(t, s, &st)?;
        let a = project(t, out.log_probs, 48)?;
        let b = project(t, out.probs, 49)?;
        let ab = t.add(a, b)?;
        let c = t.scale(out.value, 0.7);
        t.add(ab, c)
    }));

    cases.push(GradCase::new(
        "inter_loss",
        ParamStore::new(),
        vec![random(&mut rng, &[3, 3])],
        |t, _, v| {
            let mut m = Vec::new();
            for i in 0..3 {
                let r = t.row(v[0], i)?;
                m.push((0..3).map(|j| t.pick(r, j)).collect::<Result<Vec<_>>>()?);
            }
            inter_loss(t, &m, 0.2)
        },
    ));
    cases.push(GradCase::new(
        "intra_loss",
        ParamStore::new(),
        vec![Tensor::vector(vec![-0.1, 0.45, 0.3, 0.05])],
        |t, _, v| {
            let parts: Vec<Var> = (0..4).map(|i| t.pick(v[0], i)).collect::<Result<_>>()?;
            intra_loss(t, &score_vars(&parts), 0.2)
        },
    ));
    cases.push(GradCase::new(
        "rank_loss",
        ParamStore::new(),
        vec![random(&mut rng, &[2, 2]), Tensor::vector(vec![-0.2, 0.5, 0.4, 0.1])],
        |t, _, v| {
            let mut m = Vec::new();
            for i in 0..2 {
                let r = t.row(v[0], i)?;
                m.push((0..2).map(|j| t.pick(r, j)).collect::<Result<Vec<_>>>()?);
            }
            let inter = inter_loss(t, &m, 0.2)?;
            let parts: Vec<Var> = (0..4).map(|i| t.pick(v[1], i)).collect::<Result<_>>()?;
            let intra = intra_loss(t, &score_vars(&parts), 0.2)?;
            rank_loss(t, inter, &[intra, intra], 0.1, 2)
        },
    ));

    cases.push(a2c_case(&mut rng));
    cases
}

fn toy_trajectory(t: &mut Tape, m: &BarModel, sample: &GroundingSample) -> Result<Trajectory> {
    let view = sample.training_view();
    let (q, scorer) = detached_scorer(m, view)?;
    let q = t.constant(Tensor::vector(q));
    let opts = RolloutOptions {
        mode: ActionMode::Sample,
        max_steps: 3,
        ..RolloutOptions::default()
    };
    let mut r = ChaCha8Rng::seed_from_u64(5);
    rollout(t, m, view, q, &scorer, &opts, &mut r)
}

/// Actor-critic loss on a 3-step toy trajectory. Returns and advantages are
/// frozen from a reference rollout, matching the semi-gradient used in
/// training.
fn a2c_case(rng: &mut ChaCha8Rng) -> GradCase {
    let model = tiny_model();
    let sample = tiny_sample(rng);
    let mut t = Tape::new();
    let traj = toy_trajectory(&mut t, &model, &sample).expect("reference rollout");
    let values = traj.values();
    let returns = q_returns(&traj.rewards(), &values, 0.4).expect("aligned");
    let advantages: Vec<f64> = returns.iter().zip(&values).map(|(q, v)| q - v).collect();

    let mut store = model.store.clone();
    for id in model.rank_ids() {
        store.set_frozen(id, true);
    }
    GradCase::new("a2c_loss", store, vec![], move |t, s, _| {
        let mut m = model.clone();
        m.store = s.clone();
        let traj = toy_trajectory(t, &m, &sample)?;
        Ok(a2c_loss_with(t, &traj, &returns, &advantages, 0.1)?.total)
    })
}

/// Runs every case in `cases` and marks pass/fail at `tolerance`.
pub fn run_cases(cases: &[GradCase], h: f64, tolerance: f64, fault: Option<OpKind>) -> Result<GradReport> {
    let start = Instant::now();
    let mut out = Vec::with_capacity(cases.len());
    for c in cases {
        let mut r = c.run(h, fault)?;
        r.passed = r.max_rel_error <= tolerance;
        out.push(r);
    }
    Ok(GradReport {
        tolerance,
        step: h,
        fault: fault.map(|k| k.name().to_string()),
        cases: out,
        seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn gradcheck(fault: Option<OpKind>) -> Result<GradReport> {
    run_cases(&registry(), DEFAULT_STEP, DEFAULT_TOLERANCE, fault)
}
