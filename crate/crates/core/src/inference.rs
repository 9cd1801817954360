//! Greedy grounding with a Gaussian length penalty, tIoU metrics and
//! per-step trace export.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::corpus::GroundingSample;
use crate::error::{Error, Result};
use crate::extractor::{Boundary, InitBoundary};
use crate::model::BarModel;
use crate::planner::{detached_scorer, rollout, Action, ActionMode, AmplitudeMode, RolloutOptions};

pub const TRACE_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_THRESHOLDS: [f64; 3] = [0.3, 0.5, 0.7];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    /// Expected segment length as a fraction of the video.
    pub delta: f64,
    /// Penalty width; larger is milder.
    pub tau: f64,
    /// Disable the length penalty (`tau -> infinity`).
    pub no_penalty: bool,
    pub max_steps: usize,
    pub amplitude: AmplitudeMode,
    pub init: InitBoundary,
    /// Stop the refinement once the current score reaches this value.
    pub stop_threshold: Option<f64>,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            delta: 0.35,
            tau: 0.5,
            no_penalty: false,
            max_steps: 12,
            amplitude: AmplitudeMode::Adaptive,
            init: InitBoundary::Quarter,
            stop_threshold: None,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau {} must be positive", self.tau)));
        }
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return Err(Error::Config(format!(
                "delta {} must lie in (0, 1]",
                self.delta
            )));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be at least 1".into()));
        }
        Ok(())
    }

    pub fn effective_tau(&self) -> f64 {
        if self.no_penalty {
            f64::INFINITY
        } else {
            self.tau
        }
    }
}

/// `S * exp(-P^2 / tau)` with `P = (end - start) / N - delta`.
pub fn penalize(score: f64, b: Boundary, n: usize, delta: f64, tau: f64) -> f64 {
    let p = b.len() as f64 / n as f64 - delta;
    score * (-(p * p) / tau).exp()
}

/// Temporal IoU of two half-open clip intervals.
pub fn tiou(a: Boundary, b: Boundary) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Contract(format!(
            "tIoU of empty segment {a} or {b}"
        )));
    }
    let inter = a.end.min(b.end).saturating_sub(a.start.max(b.start)) as f64;
    let union = (a.end.max(b.end) - a.start.min(b.start)) as f64;
    let union = union.min((a.len() + b.len()) as f64 - inter);
    Ok(inter / union)
}

/// One boundary visited during grounding (step 0 is the initial boundary).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub step: usize,
    pub boundary: Boundary,
    pub action: Option<Action>,
    pub amplitude: Option<usize>,
    pub score: f64,
    pub penalized: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundingResult {
    pub video_id: String,
    pub num_clips: usize,
    pub prediction: Boundary,
    pub best_score: f64,
    pub best_step: usize,
    pub candidates: Vec<Candidate>,
    /// Number of boundaries that were scored and penalized.
    pub candidates_examined: usize,
}

/// Chooses actions for [`ground_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroundingPolicy {
    /// Argmax of the learned policy.
    Greedy,
    /// Uniformly random actions from a seeded generator.
    Uniform { seed: u64 },
}

/// Greedy grounding of one sample.
pub fn ground(model: &BarModel, sample: &GroundingSample, cfg: &InferenceConfig) -> Result<GroundingResult> {
    ground_with(model, sample, cfg, GroundingPolicy::Greedy)
}

pub fn ground_with(
    model: &BarModel,
    sample: &GroundingSample,
    cfg: &InferenceConfig,
    policy: GroundingPolicy,
) -> Result<GroundingResult> {
    cfg.validate()?;
    let view = sample.training_view();
    let (query, scorer) = detached_scorer(model, view)?;
    let mut tape = Tape::new();
    let q = tape.constant(Tensor::vector(query));
    let (mode, seed) = match policy {
        GroundingPolicy::Greedy => (ActionMode::Greedy, 0),
        GroundingPolicy::Uniform { seed } => (ActionMode::Uniform, seed),
    };
    let opts = RolloutOptions {
        mode,
        max_steps: cfg.max_steps,
        amplitude: cfg.amplitude,
        init: cfg.init,
        stop_threshold: cfg.stop_threshold,
        ..RolloutOptions::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let traj = rollout(&mut tape, model, view, q, &scorer, &opts, &mut rng)?;

    let n = traj.num_clips;
    let tau = cfg.effective_tau();
    let mut examined = 0;
    let mut candidates = Vec::with_capacity(traj.len() + 1);
    let mut push = |step, boundary, action, amplitude, score| {
        examined += 1;
        candidates.push(Candidate {
            step,
            boundary,
            action,
            amplitude,
            score,
            penalized: penalize(score, boundary, n, cfg.delta, tau),
        });
    };
    push(0, traj.initial, None, None, traj.initial_score);
    for s in &traj.steps {
        push(s.step, s.boundary, Some(s.action), Some(s.amplitude), s.current_score);
    }

    // earliest step wins ties
    let mut best = 0;
    for (i, c) in candidates.iter().enumerate() {
        if c.penalized > candidates[best].penalized {
            best = i;
        }
    }
    Ok(GroundingResult {
        video_id: sample.video_id.clone(),
        num_clips: n,
        prediction: candidates[best].boundary,
        best_score: candidates[best].penalized,
        best_step: candidates[best].step,
        candidates,
        candidates_examined: examined,
    })
}

/// How predictions are produced during evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalPolicy {
    Greedy,
    /// Uniform random actions; sample `i` uses seed `seed + i`.
    Uniform { seed: u64 },
    /// Always predict the initial boundary.
    FixedInitial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRow {
    pub threshold: f64,
    /// Fraction of evaluated queries with tIoU above the threshold.
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ThresholdRow>,
    pub mean_tiou: f64,
    pub evaluated: usize,
    pub skipped_without_gt: usize,
    /// Informational only; excluded from equality checks by callers.
    pub mean_seconds_per_query: f64,
}

impl EvalReport {
    pub fn recall_at(&self, threshold: f64) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| (r.threshold - threshold).abs() < 1e-12)
            .map(|r| r.recall)
    }

    /// Human-readable table: one line per threshold, highest first.
    pub fn table(&self) -> String {
        let mut out = String::from("threshold  tIoU@threshold(%)\n");
        for r in &self.rows {
            out.push_str(&format!("{:>9.2}  {:>17.2}\n", r.threshold, 100.0 * r.recall));
        }
        out.push_str(&format!(
            "mean tIoU {:.4} over {} queries ({} skipped), {:.5} s/query\n",
            self.mean_tiou, self.evaluated, self.skipped_without_gt, self.mean_seconds_per_query
        ));
        out
    }
}

fn predict(
    model: &BarModel,
    sample: &GroundingSample,
    cfg: &InferenceConfig,
    policy: EvalPolicy,
    index: usize,
) -> Result<Boundary> {
    Ok(match policy {
        EvalPolicy::Greedy => ground(model, sample, cfg)?.prediction,
        EvalPolicy::Uniform { seed } => {
            ground_with(
                model,
                sample,
                cfg,
                GroundingPolicy::Uniform {
                    seed: seed.wrapping_add(index as u64),
                },
            )?
            .prediction
        }
        EvalPolicy::FixedInitial => Boundary::initial(sample.num_clips(), cfg.init),
    })
}

/// tIoU@threshold over `samples`. Samples without a ground-truth segment are
/// skipped and counted. With `workers > 1` samples are split into contiguous
/// chunks; results are reduced in sample order.
pub fn evaluate(
    model: &BarModel,
    samples: &[GroundingSample],
    cfg: &InferenceConfig,
    thresholds: &[f64],
    policy: EvalPolicy,
    workers: usize,
) -> Result<EvalReport> {
    let start = Instant::now();
    let per_sample = |(i, s): (usize, &GroundingSample)| -> Result<Option<f64>> {
        let Some(gt) = s.gt_segment else {
            return Ok(None);
        };
        let pred = predict(model, s, cfg, policy, i)?;
        Ok(Some(tiou(pred, gt)?))
    };
    let ious: Vec<Option<f64>> = if workers <= 1 || samples.len() < 2 {
        samples
            .iter()
            .enumerate()
            .map(per_sample)
            .collect::<Result<_>>()?
    } else {
        let chunk = samples.len().div_ceil(workers);
        let indexed: Vec<(usize, &GroundingSample)> = samples.iter().enumerate().collect();
        let parts: Vec<Result<Vec<Option<f64>>>> = std::thread::scope(|scope| {
            let handles: Vec<_> = indexed
                .chunks(chunk)
                .map(|part| scope.spawn(move || part.iter().copied().map(per_sample).collect()))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("evaluation worker panicked"))
                .collect()
        });
        let mut all = Vec::with_capacity(samples.len());
        for p in parts {
            all.extend(p?);
        }
        all
    };
    let elapsed = start.elapsed().as_secs_f64();

    let scored: Vec<f64> = ious.iter().flatten().copied().collect();
    let evaluated = scored.len();
    let mut sorted = thresholds.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("finite thresholds"));
    let rows = sorted
        .into_iter()
        .map(|threshold| ThresholdRow {
            threshold,
            recall: if evaluated == 0 {
                0.0
            } else {
                scored.iter().filter(|v| **v > threshold).count() as f64 / evaluated as f64
            },
        })
        .collect();
    Ok(EvalReport {
        rows,
        mean_tiou: if evaluated == 0 {
            0.0
        } else {
            scored.iter().sum::<f64>() / evaluated as f64
        },
        evaluated,
        skipped_without_gt: samples.len() - evaluated,
        mean_seconds_per_query: if samples.is_empty() {
            0.0
        } else {
            elapsed / samples.len() as f64
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceHeader {
    pub schema_version: u32,
    pub video_id: String,
    pub num_clips: usize,
    pub prediction: Boundary,
    pub best_step: usize,
}

/// One line of a trace file. Boundaries are half-open; `inclusive` repeats
/// them as first/last clip indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceRow {
    pub t: usize,
    pub boundary: Boundary,
    pub inclusive: (usize, usize),
    pub action: Option<String>,
    pub nu: Option<usize>,
    pub score: f64,
    pub penalized: f64,
    pub is_best: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub header: TraceHeader,
    pub rows: Vec<TraceRow>,
}

pub fn trace_rows(result: &GroundingResult) -> Vec<TraceRow> {
    result
        .candidates
        .iter()
        .map(|c| TraceRow {
            t: c.step,
            boundary: c.boundary,
            inclusive: c.boundary.inclusive(),
            action: c.action.map(|a| {
                serde_json::to_value(a.kind)
                    .ok()
                    .and_then(|v| v.as_str().map(str::to_string))
                    .unwrap_or_default()
            }),
            nu: c.amplitude,
            score: c.score,
            penalized: c.penalized,
            is_best: c.step == result.best_step,
        })
        .collect()
}

/// Writes a JSON-lines trace: a header line then one row per visited boundary.
pub fn export_trace(result: &GroundingResult, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let header = TraceHeader {
        schema_version: TRACE_SCHEMA_VERSION,
        video_id: result.video_id.clone(),
        num_clips: result.num_clips,
        prediction: result.prediction,
        best_step: result.best_step,
    };
    let mut write_line = |v: String| writeln!(w, "{v}").map_err(|e| Error::io(path, e));
    write_line(serde_json::to_string(&header).expect("header serializes"))?;
    for row in trace_rows(result) {
        write_line(serde_json::to_string(&row).expect("row serializes"))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_trace(path: &Path) -> Result<Trace> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let mut next = |what: &str| -> Result<Option<(usize, String)>> {
        match lines.next() {
            None => Ok(None),
            Some((i, line)) => line
                .map(|l| Some((i + 1, l)))
                .map_err(|e| Error::parse(format!("line {}", i + 1), format!("{what}: {e}"))),
        }
    };
    let (_, first) = next("header")?.ok_or_else(|| Error::parse("line 1", "empty trace"))?;
    let header: TraceHeader =
        serde_json::from_str(&first).map_err(|e| Error::parse("line 1", e.to_string()))?;
    if header.schema_version != TRACE_SCHEMA_VERSION {
        return Err(Error::parse(
            "line 1",
            format!("unsupported trace schema {}", header.schema_version),
        ));
    }
    let mut rows = Vec::new();
    while let Some((no, line)) = next("row")? {
        if line.trim().is_empty() {
            continue;
        }
        rows.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::parse(format!("line {no}"), e.to_string()))?,
        );
    }
    Ok(Trace { header, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, CorpusConfig};
    use crate::model::ModelConfig;

    #[test]
    fn penalty_examples() {
        let b = Boundary::new(0, 35);
        assert_eq!(penalize(0.8, b, 100, 0.35, 0.5), 0.8);
        let long = Boundary::new(0, 85);
        let v = penalize(0.6, long, 100, 0.35, 0.5);
        assert!((v - 0.6 * (-0.5f64).exp()).abs() < 1e-12);
        assert_eq!(penalize(0.6, long, 100, 0.35, f64::INFINITY), 0.6);
    }

    #[test]
    fn tiou_examples() {
        let a = Boundary::new(0, 10);
        assert_eq!(tiou(a, a).unwrap(), 1.0);
        assert_eq!(tiou(a, Boundary::new(10, 20)).unwrap(), 0.0);
        assert!((tiou(a, Boundary::new(5, 15)).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!((tiou(a, Boundary::new(2, 4)).unwrap() - 0.2).abs() < 1e-15);
        assert!(tiou(a, Boundary::new(3, 3)).is_err());
    }

    fn setup() -> (BarModel, Vec<GroundingSample>) {
        let model = BarModel::new(ModelConfig {
            feature_dim: 8,
            hidden_size: 8,
            embed_dim: 8,
            ..ModelConfig::default()
        })
        .unwrap();
        let corpus = generate_synthetic(&CorpusConfig {
            num_samples: 10,
            clip_count_range: (20, 40),
            feature_dim: 8,
            ..CorpusConfig::default()
        })
        .unwrap();
        (model, corpus)
    }

    #[test]
    fn ground_examines_every_visited_boundary() {
        let (model, corpus) = setup();
        let cfg = InferenceConfig::default();
        let r = ground(&model, &corpus[0], &cfg).unwrap();
        assert_eq!(r.candidates_examined, cfg.max_steps + 1);
        assert_eq!(r.candidates.len(), cfg.max_steps + 1);
        let best = r
            .candidates
            .iter()
            .map(|c| c.penalized)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(r.best_score, best);
        assert_eq!(r, ground(&model, &corpus[0], &cfg).unwrap());
    }

    #[test]
    fn perfect_predictions_score_one() {
        let (_, corpus) = setup();
        for s in &corpus {
            let gt = s.gt_segment.unwrap();
            assert_eq!(tiou(gt, gt).unwrap(), 1.0);
        }
    }

    #[test]
    fn evaluation_is_monotone_and_worker_invariant() {
        let (model, mut corpus) = setup();
        corpus[3].gt_segment = None;
        let cfg = InferenceConfig::default();
        let r1 = evaluate(&model, &corpus, &cfg, &DEFAULT_THRESHOLDS, EvalPolicy::Greedy, 1).unwrap();
        let r3 = evaluate(&model, &corpus, &cfg, &DEFAULT_THRESHOLDS, EvalPolicy::Greedy, 3).unwrap();
        assert_eq!(r1.rows, r3.rows);
        assert_eq!(r1.mean_tiou, r3.mean_tiou);
        assert_eq!(r1.skipped_without_gt, 1);
        assert_eq!(r1.evaluated, 9);
        let at = |t| r1.recall_at(t).unwrap();
        assert!(at(0.7) <= at(0.5) && at(0.5) <= at(0.3));
        assert_eq!(r1.rows[0].threshold, 0.7);
    }

    #[test]
    fn trace_round_trip() {
        let (model, corpus) = setup();
        let r = ground(&model, &corpus[1], &InferenceConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        export_trace(&r, &path).unwrap();
        let trace = read_trace(&path).unwrap();
        assert_eq!(trace.rows.len(), 13);
        assert_eq!(trace.rows.iter().filter(|r| r.is_best).count(), 1);
        assert_eq!(trace.rows, trace_rows(&r));
        assert_eq!(trace.header.prediction, r.prediction);
    }
}
