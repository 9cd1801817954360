use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{GroundingSample, MIN_CLIPS};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::extractor::Boundary;

/// Parameters of a synthetic planted-segment corpus.
///
/// Noise is isotropic Gaussian with per-component variance `1/d_k`, so a
/// noise clip has unit expected squared norm and `signal_to_noise` is the
/// ratio of the planted signal's norm to the typical noise norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub num_samples: usize,
    pub clip_count_range: (usize, usize),
    pub feature_dim: usize,
    pub vocab_size: usize,
    pub query_length_range: (usize, usize),
    pub segment_fraction_range: (f64, f64),
    pub signal_to_noise: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            num_samples: 600,
            clip_count_range: (40, 80),
            feature_dim: 64,
            vocab_size: 12,
            query_length_range: (1, 2),
            segment_fraction_range: (0.15, 0.4),
            signal_to_noise: 2.0,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let (n_min, n_max) = self.clip_count_range;
        if n_min < MIN_CLIPS || n_min > n_max {
            return Err(Error::Config(format!(
                "clip count range [{n_min}, {n_max}] must satisfy {MIN_CLIPS} <= min <= max"
            )));
        }
        let (q_min, q_max) = self.query_length_range;
        if q_min == 0 || q_min > q_max {
            return Err(Error::Config(format!(
                "query length range [{q_min}, {q_max}] must satisfy 1 <= min <= max"
            )));
        }
        let (r_min, r_max) = self.segment_fraction_range;
        if !(r_min > 0.0 && r_min <= r_max && r_max < 1.0) {
            return Err(Error::Config(format!(
                "segment fraction range [{r_min}, {r_max}] must satisfy 0 < min <= max < 1"
            )));
        }
        if self.feature_dim == 0 || self.vocab_size == 0 {
            return Err(Error::Config(
                "feature_dim and vocab_size must be positive".into(),
            ));
        }
        if !(self.signal_to_noise >= 0.0 && self.signal_to_noise.is_finite()) {
            return Err(Error::Config(format!(
                "signal_to_noise {} must be finite and non-negative",
                self.signal_to_noise
            )));
        }
        Ok(())
    }
}

/// splitmix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Latent signal of a query: a unit vector in `R^dim` determined by the
/// sorted token multiset and `seed`. Token order does not matter.
pub fn query_signal(tokens: &[usize], dim: usize, seed: u64) -> Vec<f64> {
    let mut sorted = tokens.to_vec();
    sorted.sort_unstable();
    let mut h = mix(seed ^ 0x5eed_0f51_9a1b_c0de);
    for t in sorted {
        h = mix(h ^ t as u64);
    }
    h = mix(h ^ tokens.len() as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(h);
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Draws a corpus of planted-segment samples. Deterministic in `cfg.seed`.
pub fn generate_synthetic(cfg: &CorpusConfig) -> Result<Vec<GroundingSample>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.feature_dim;
    let noise = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("positive std");
    let mut samples = Vec::with_capacity(cfg.num_samples);
    for i in 0..cfg.num_samples {
        let n = rng.random_range(cfg.clip_count_range.0..=cfg.clip_count_range.1);
        let q_len = rng.random_range(cfg.query_length_range.0..=cfg.query_length_range.1);
        let tokens: Vec<usize> = (0..q_len)
            .map(|_| rng.random_range(0..cfg.vocab_size))
            .collect();
        let rho = rng.random_range(cfg.segment_fraction_range.0..=cfg.segment_fraction_range.1);
        let len = ((rho * n as f64).ceil() as usize).clamp(1, n);
        let start = rng.random_range(0..=n - len);
        let gt = Boundary::new(start, start + len);
        let signal = query_signal(&tokens, d, cfg.seed);

        let mut data = Vec::with_capacity(n * d);
        for clip in 0..n {
            let planted = gt.contains(clip);
            for s in &signal {
                let base = if planted { cfg.signal_to_noise * s } else { 0.0 };
                data.push(base + noise.sample(&mut rng));
            }
        }
        samples.push(GroundingSample {
            video_id: format!("syn{:05}", i),
            clip_features: Tensor::matrix(n, d, data)?,
            query_tokens: tokens,
            gt_segment: Some(gt),
        });
    }
    Ok(samples)
}

/// Fraction of (planted, background) clip pairs within each sample whose
/// cosine with the query signal is ordered correctly.
pub fn planted_recall(samples: &[GroundingSample], signal_seed: u64) -> f64 {
    let mut good = 0usize;
    let mut total = 0usize;
    for s in samples {
        let Some(gt) = s.gt_segment else { continue };
        let signal = query_signal(&s.query_tokens, s.feature_dim(), signal_seed);
        let cos = |row: &[f64]| {
            let dot: f64 = row.iter().zip(&signal).map(|(a, b)| a * b).sum();
            let norm = row.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 0.0 {
                dot / norm
            } else {
                0.0
            }
        };
        let n = s.num_clips();
        let inside: Vec<f64> = (gt.start..gt.end)
            .map(|c| cos(s.clip_features.row(c)))
            .collect();
        for c in (0..n).filter(|c| !gt.contains(*c)) {
            let outside = cos(s.clip_features.row(c));
            for &v in &inside {
                total += 1;
                if v > outside {
                    good += 1;
                }
            }
        }
    }
    if total == 0 {
        1.0
    } else {
        good as f64 / total as f64
    }
}
