//! Cross-modal alignment evaluator.
//!
//! Clip features pass through a filter `theta` (fully connected, ReLU,
//! dropout) into the query space. A segment is attention-pooled against the
//! query summary `E` and scored by the cosine between the pooled feature and
//! `E`. Consecutive current-segment scores give the sign reward.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_values, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::extractor::Boundary;

/// Score assigned to an empty segment (the minimum cosine).
pub const EMPTY_SEGMENT_SCORE: f64 = -1.0;

/// Global, current, left and right alignment scores for one boundary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentScores {
    pub global: f64,
    pub current: f64,
    pub left: f64,
    pub right: f64,
}

/// The same four scores as tape nodes, for the ranking losses.
#[derive(Debug, Clone, Copy)]
pub struct AlignmentScoreVars {
    pub global: Var,
    pub current: Var,
    pub left: Var,
    pub right: Var,
}

impl AlignmentScoreVars {
    pub fn values(&self, tape: &Tape) -> AlignmentScores {
        AlignmentScores {
            global: tape.item(self.global),
            current: tape.item(self.current),
            left: tape.item(self.left),
            right: tape.item(self.right),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Evaluator {
    pub feature_dim: usize,
    pub query_dim: usize,
    pub dropout: f64,
    pub theta_weight: ParamId,
    pub theta_bias: ParamId,
}

impl Evaluator {
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        feature_dim: usize,
        query_dim: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let theta_weight = store.register_uniform(
            "evaluator.theta.fc.weight",
            &[feature_dim, query_dim],
            feature_dim,
            rng,
        )?;
        let theta_bias = store.register_uniform(
            "evaluator.theta.fc.bias",
            &[query_dim],
            feature_dim,
            rng,
        )?;
        Ok(Self {
            feature_dim,
            query_dim,
            dropout,
            theta_weight,
            theta_bias,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.theta_weight, self.theta_bias]
    }

    /// `theta(F)` for every row of an `[N, d_k]` feature matrix.
    pub fn filter<R: Rng>(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        features: Var,
        rng: &mut R,
    ) -> Result<Var> {
        let w = tape.param(store, self.theta_weight);
        let b = tape.param(store, self.theta_bias);
        let y = tape.linear(features, w, b)?;
        let y = tape.relu(y);
        tape.dropout(y, self.dropout, rng)
    }

    /// `theta(F)` evaluated without dropout or gradient tracking.
    pub fn filter_values(&self, store: &ParamStore, features: &Tensor) -> Tensor {
        let w = &store.get(self.theta_weight).value;
        let b = store.get(self.theta_bias).value.data();
        let (n, d, k) = (features.rows(), features.cols(), self.query_dim);
        let wd = w.data();
        let mut out = vec![0.0; n * k];
        for i in 0..n {
            let row = features.row(i);
            let o = &mut out[i * k..(i + 1) * k];
            o.copy_from_slice(b);
            for (p, &x) in row.iter().enumerate().take(d) {
                o.iter_mut()
                    .zip(&wd[p * k..(p + 1) * k])
                    .for_each(|(o, w)| *o += x * w);
            }
            o.iter_mut().filter(|v| **v <= 0.0).for_each(|v| *v = 0.0);
        }
        Tensor::matrix(n, k, out).expect("shape")
    }
}

/// Scaled dot-product attention of filtered rows (`[M, k]`, `M >= 1`)
/// against the query `e` (`[k]`). Returns the weights and the pooled vector.
pub fn attend(tape: &mut Tape, rows: Var, e: Var) -> Result<(Var, Var)> {
    let (m, k) = match tape.shape(rows) {
        [m, k] => (*m, *k),
        s => return Err(Error::Dimension(format!("attend expects a matrix, got {s:?}"))),
    };
    if m == 0 {
        return Err(Error::Contract(
            "attend on an empty segment; use the empty-segment score".into(),
        ));
    }
    let logits = tape.matmul(rows, e)?;
    let logits = tape.scale(logits, 1.0 / (k as f64).sqrt());
    let weights = tape.softmax(logits)?;
    let pooled = tape.matmul(weights, rows)?;
    Ok((weights, pooled))
}

/// Cosine between the attention-pooled segment and the query. Empty
/// segments score [`EMPTY_SEGMENT_SCORE`].
pub fn score(tape: &mut Tape, rows: Var, e: Var) -> Result<Var> {
    if tape.shape(rows).first() == Some(&0) {
        return Ok(tape.constant(Tensor::scalar(EMPTY_SEGMENT_SCORE)));
    }
    let (_, pooled) = attend(tape, rows, e)?;
    let a = tape.l2_normalize(pooled)?;
    let q = tape.l2_normalize(e)?;
    tape.dot(a, q)
}

/// Scores of the whole video and of the three parts cut by `b`, sharing one
/// filtered feature matrix `filtered` (`[N, k]`).
pub fn score_state(tape: &mut Tape, filtered: Var, b: Boundary, e: Var) -> Result<AlignmentScoreVars> {
    let global = score(tape, filtered, e)?;
    score_parts(tape, filtered, b, e, global)
}

/// [`score_state`] with an already computed whole-video score.
pub fn score_parts(
    tape: &mut Tape,
    filtered: Var,
    b: Boundary,
    e: Var,
    global: Var,
) -> Result<AlignmentScoreVars> {
    let n = tape.shape(filtered)[0];
    b.check(n)?;
    let current = if b.start == 0 && b.end == n {
        global
    } else {
        let rows = tape.slice_rows(filtered, b.start, b.end)?;
        score(tape, rows, e)?
    };
    let left = tape.slice_rows(filtered, 0, b.start)?;
    let left = score(tape, left, e)?;
    let right = tape.slice_rows(filtered, b.end, n)?;
    let right = score(tape, right, e)?;
    Ok(AlignmentScoreVars {
        global,
        current,
        left,
        right,
    })
}

/// Detached scorer over plain values: filtered rows `[start, end)` of an
/// `[N, k]` matrix against a query vector.
#[derive(Debug, Clone)]
pub struct SegmentScorer {
    filtered: Tensor,
    query: Vec<f64>,
    query_unit: Vec<f64>,
    logits: Vec<f64>,
}

impl SegmentScorer {
    pub fn new(filtered: Tensor, query: Vec<f64>) -> Self {
        let k = query.len();
        let scale = 1.0 / (k as f64).sqrt();
        let logits = (0..filtered.rows())
            .map(|i| {
                filtered
                    .row(i)
                    .iter()
                    .zip(&query)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    * scale
            })
            .collect();
        let norm = query.iter().map(|v| v * v).sum::<f64>().sqrt();
        let query_unit = if norm == 0.0 {
            vec![0.0; k]
        } else {
            query.iter().map(|v| v / norm).collect()
        };
        Self {
            filtered,
            query,
            query_unit,
            logits,
        }
    }

    pub fn num_clips(&self) -> usize {
        self.filtered.rows()
    }

    pub fn query(&self) -> &[f64] {
        &self.query
    }

    pub fn filtered(&self) -> &Tensor {
        &self.filtered
    }

    pub fn score_range(&self, start: usize, end: usize) -> f64 {
        if end <= start {
            return EMPTY_SEGMENT_SCORE;
        }
        let k = self.query.len();
        let weights = softmax_values(&self.logits[start..end]);
        let mut pooled = vec![0.0; k];
        for (w, i) in weights.iter().zip(start..end) {
            pooled
                .iter_mut()
                .zip(self.filtered.row(i))
                .for_each(|(p, v)| *p += w * v);
        }
        let norm = pooled.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        pooled
            .iter()
            .zip(&self.query_unit)
            .map(|(p, q)| p * q)
            .sum::<f64>()
            / norm
    }

    pub fn global(&self) -> f64 {
        self.score_range(0, self.num_clips())
    }

    pub fn scores(&self, b: Boundary) -> AlignmentScores {
        let n = self.num_clips();
        AlignmentScores {
            global: self.global(),
            current: self.score_range(b.start, b.end),
            left: self.score_range(0, b.start),
            right: self.score_range(b.end, n),
        }
    }
}

/// What an exact tie between consecutive scores earns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TieReward {
    #[default]
    Negative,
    Zero,
}

/// `sign(current - previous)` with ties mapped by `tie`.
pub fn reward(current: f64, previous: f64, tie: TieReward) -> i32 {
    if current > previous {
        1
    } else if current < previous {
        -1
    } else {
        match tie {
            TieReward::Negative => -1,
            TieReward::Zero => 0,
        }
    }
}
