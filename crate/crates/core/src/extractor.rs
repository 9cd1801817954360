//! Context-aware feature extraction: query encoding, boundary bookkeeping
//! and the left/current/right split of a clip sequence.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Half-open clip interval `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Boundary {
    pub start: usize,
    pub end: usize,
}

/// Where the first boundary of an episode sits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitBoundary {
    /// `[N/4, 3N/4)`
    #[default]
    Quarter,
    /// `[N/3, 2N/3)`
    Third,
    /// `[N/5, 4N/5)`
    Fifth,
}

impl Boundary {
    pub const fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    /// Checked constructor for a video of `n` clips.
    pub fn try_new(start: usize, end: usize, n: usize) -> Result<Self> {
        let b = Self::new(start, end);
        b.check(n)?;
        Ok(b)
    }

    pub fn check(&self, n: usize) -> Result<()> {
        if self.start < self.end && self.end <= n {
            Ok(())
        } else {
            Err(Error::Contract(format!(
                "boundary [{}, {}) invalid for {n} clips",
                self.start, self.end
            )))
        }
    }

    pub fn is_valid(&self, n: usize) -> bool {
        self.start < self.end && self.end <= n
    }

    pub fn full(n: usize) -> Self {
        Self::new(0, n)
    }

    /// Initial episode boundary, e.g. `[floor(N/4), floor(3N/4))`.
    pub fn initial(n: usize, init: InitBoundary) -> Self {
        let (num, den) = match init {
            InitBoundary::Quarter => (1, 4),
            InitBoundary::Third => (1, 3),
            InitBoundary::Fifth => (1, 5),
        };
        let start = n * num / den;
        let end = n * (den - num) / den;
        Self::new(start, end.max(start + 1).min(n))
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn contains(&self, clip: usize) -> bool {
        clip >= self.start && clip < self.end
    }

    /// Inclusive `(first, last)` clip indices for human-readable output.
    pub fn inclusive(&self) -> (usize, usize) {
        (self.start, self.end - 1)
    }
}

impl fmt::Display for Boundary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {})", self.start, self.end)
    }
}

/// `[start / N, end / N]`.
pub fn normalized_location(b: Boundary, n: usize) -> [f64; 2] {
    let n = n as f64;
    [b.start as f64 / n, b.end as f64 / n]
}

/// Row views of the three parts a boundary cuts a clip sequence into.
#[derive(Debug, Clone, Copy)]
pub struct SegmentPartition<'a> {
    pub left: &'a [f64],
    pub current: &'a [f64],
    pub right: &'a [f64],
    pub dim: usize,
}

impl SegmentPartition<'_> {
    /// Clip count `M` of the current segment.
    pub fn current_len(&self) -> usize {
        self.current.len() / self.dim.max(1)
    }

    pub fn left_len(&self) -> usize {
        self.left.len() / self.dim.max(1)
    }

    pub fn right_len(&self) -> usize {
        self.right.len() / self.dim.max(1)
    }
}

/// Splits `features` (`N x d`) into left `[0, s)`, current `[s, e)` and
/// right `[e, N)` without copying.
pub fn partition(features: &Tensor, b: Boundary) -> Result<SegmentPartition<'_>> {
    let n = features.rows();
    b.check(n)?;
    let d = features.cols();
    let data = features.data();
    Ok(SegmentPartition {
        left: &data[..b.start * d],
        current: &data[b.start * d..b.end * d],
        right: &data[b.end * d..],
        dim: d,
    })
}

/// Single-layer GRU cell:
///
/// ```text
/// z = sigmoid(x Wz + h Uz + bz)
/// r = sigmoid(x Wr + h Ur + br)
/// n = tanh(x Wn + bn + r * (h Un + bhn))
/// h' = (1 - z) * n + z * h
/// ```
#[derive(Debug, Clone)]
pub struct GruCell {
    pub input_size: usize,
    pub hidden_size: usize,
    w: [ParamId; 3],
    u: [ParamId; 3],
    b: [ParamId; 3],
    b_hn: ParamId,
}

impl GruCell {
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        input_size: usize,
        hidden_size: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let gates = ["update", "reset", "candidate"];
        let mut w = Vec::new();
        let mut u = Vec::new();
        let mut b = Vec::new();
        for g in gates {
            w.push(store.register_uniform(
                format!("{prefix}.{g}.w_input"),
                &[input_size, hidden_size],
                hidden_size,
                rng,
            )?);
            u.push(store.register_uniform(
                format!("{prefix}.{g}.w_hidden"),
                &[hidden_size, hidden_size],
                hidden_size,
                rng,
            )?);
            b.push(store.register_uniform(
                format!("{prefix}.{g}.bias"),
                &[hidden_size],
                hidden_size,
                rng,
            )?);
        }
        let b_hn = store.register_uniform(
            format!("{prefix}.candidate.bias_hidden"),
            &[hidden_size],
            hidden_size,
            rng,
        )?;
        Ok(Self {
            input_size,
            hidden_size,
            w: [w[0], w[1], w[2]],
            u: [u[0], u[1], u[2]],
            b: [b[0], b[1], b[2]],
            b_hn,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::with_capacity(10);
        for g in 0..3 {
            ids.extend([self.w[g], self.u[g], self.b[g]]);
        }
        ids.push(self.b_hn);
        ids
    }

    pub fn step(&self, tape: &mut Tape, store: &ParamStore, x: Var, h: Var) -> Result<Var> {
        let gate = |tape: &mut Tape, g: usize| -> Result<(Var, Var)> {
            let w = tape.param(store, self.w[g]);
            let b = tape.param(store, self.b[g]);
            let xw = tape.linear(x, w, b)?;
            let u = tape.param(store, self.u[g]);
            let hu = tape.matmul(h, u)?;
            Ok((xw, hu))
        };
        let (xz, hz) = gate(tape, 0)?;
        let z = tape.add(xz, hz)?;
        let z = tape.sigmoid(z);
        let (xr, hr) = gate(tape, 1)?;
        let r = tape.add(xr, hr)?;
        let r = tape.sigmoid(r);
        let (xn, hn) = gate(tape, 2)?;
        let b_hn = tape.param(store, self.b_hn);
        let hn = tape.add(hn, b_hn)?;
        let rhn = tape.mul(r, hn)?;
        let n = tape.add(xn, rhn)?;
        let n = tape.tanh(n);
        // h' = n + z * (h - n)
        let diff = tape.sub(h, n)?;
        let zd = tape.mul(z, diff)?;
        tape.add(n, zd)
    }
}

/// Query summary `E` (last GRU hidden state) plus the per-token states.
#[derive(Debug, Clone)]
pub struct QueryEncoding {
    pub summary: Var,
    pub token_states: Vec<Var>,
}

/// Embedding table followed by a GRU over the query tokens.
#[derive(Debug, Clone)]
pub struct QueryEncoder {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub embedding: ParamId,
    pub gru: GruCell,
}

impl QueryEncoder {
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        vocab_size: usize,
        embed_dim: usize,
        hidden_size: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let embedding = store.register_uniform(
            "extractor.embedding",
            &[vocab_size, embed_dim],
            embed_dim,
            rng,
        )?;
        let gru = GruCell::register(store, "extractor.gru", embed_dim, hidden_size, rng)?;
        Ok(Self {
            vocab_size,
            embed_dim,
            embedding,
            gru,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.embedding];
        ids.extend(self.gru.param_ids());
        ids
    }

    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, tokens: &[usize]) -> Result<QueryEncoding> {
        if tokens.is_empty() {
            return Err(Error::Contract("cannot encode an empty query".into()));
        }
        if let Some(bad) = tokens.iter().find(|t| **t >= self.vocab_size) {
            return Err(Error::Validation(format!(
                "token id {bad} outside vocabulary of {}",
                self.vocab_size
            )));
        }
        let table = tape.param(store, self.embedding);
        let embedded = tape.gather_rows(table, tokens)?;
        let mut h = tape.constant(Tensor::zeros(&[self.gru.hidden_size]));
        let mut token_states = Vec::with_capacity(tokens.len());
        for i in 0..tokens.len() {
            let x = tape.row(embedded, i)?;
            h = self.gru.step(tape, store, x, h)?;
            token_states.push(h);
        }
        Ok(QueryEncoding {
            summary: h,
            token_states,
        })
    }
}
