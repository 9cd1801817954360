//! Weakly supervised grounding samples: synthetic planted-segment corpora,
//! the on-disk corpus formats, and train/test splitting.

mod io;
mod synth;

pub use io::{load_corpus, save_corpus, save_corpus_jsonl, CORPUS_FORMAT_VERSION};
pub use synth::{generate_synthetic, planted_recall, query_signal, CorpusConfig};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::extractor::Boundary;

/// Minimum clip count; the initial boundary `[N/4, 3N/4)` must be non-empty.
pub const MIN_CLIPS: usize = 4;

/// One video-query pair. `gt_segment` is for evaluation only; training code
/// receives a [`TrainingSample`] which does not carry it.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundingSample {
    pub video_id: String,
    /// `N x d_k` clip features. `N` is an opaque clip count.
    pub clip_features: Tensor,
    pub query_tokens: Vec<usize>,
    pub gt_segment: Option<Boundary>,
}

/// Training view of a sample with the ground-truth segment fenced off.
#[derive(Debug, Clone, Copy)]
pub struct TrainingSample<'a> {
    pub video_id: &'a str,
    pub clip_features: &'a Tensor,
    pub query_tokens: &'a [usize],
}

impl GroundingSample {
    pub fn num_clips(&self) -> usize {
        self.clip_features.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.clip_features.cols()
    }

    pub fn training_view(&self) -> TrainingSample<'_> {
        TrainingSample {
            video_id: &self.video_id,
            clip_features: &self.clip_features,
            query_tokens: &self.query_tokens,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_clips();
        if self.clip_features.rank() != 2 {
            return Err(Error::Validation(format!(
                "sample {}: clip features must be a matrix",
                self.video_id
            )));
        }
        if n < MIN_CLIPS {
            return Err(Error::Validation(format!(
                "sample {}: {n} clips, need at least {MIN_CLIPS}",
                self.video_id
            )));
        }
        if self.query_tokens.is_empty() {
            return Err(Error::Validation(format!(
                "sample {}: empty query",
                self.video_id
            )));
        }
        if let Some(gt) = self.gt_segment {
            if gt.start >= gt.end || gt.end > n {
                return Err(Error::Validation(format!(
                    "sample {}: ground-truth segment [{}, {}) invalid for {n} clips",
                    self.video_id, gt.start, gt.end
                )));
            }
        }
        Ok(())
    }
}

impl TrainingSample<'_> {
    pub fn num_clips(&self) -> usize {
        self.clip_features.rows()
    }
}

/// Checks per-sample invariants and that all samples share one feature dim.
pub fn validate_corpus(samples: &[GroundingSample]) -> Result<()> {
    let dim = samples.first().map(GroundingSample::feature_dim);
    for s in samples {
        s.validate()?;
        if Some(s.feature_dim()) != dim {
            return Err(Error::Validation(format!(
                "sample {}: feature dim {} differs from corpus dim {}",
                s.video_id,
                s.feature_dim(),
                dim.unwrap_or(0)
            )));
        }
    }
    Ok(())
}

/// Seeded shuffle split into `(train, test)`; the train part gets
/// `round(train_fraction * len)` samples.
pub fn split(
    corpus: &[GroundingSample],
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<GroundingSample>, Vec<GroundingSample>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train fraction {train_fraction} must lie in (0, 1)"
        )));
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (train_fraction * corpus.len() as f64).round() as usize;
    let train = order[..n_train].iter().map(|&i| corpus[i].clone()).collect();
    let test = order[n_train..].iter().map(|&i| corpus[i].clone()).collect();
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> CorpusConfig {
        CorpusConfig {
            num_samples: 500,
            clip_count_range: (8, 12),
            feature_dim: 4,
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn split_sizes_and_determinism() {
        let corpus = generate_synthetic(&small_cfg()).unwrap();
        let (train, test) = split(&corpus, 0.8, 3).unwrap();
        assert_eq!((train.len(), test.len()), (400, 100));
        let (train2, test2) = split(&corpus, 0.8, 3).unwrap();
        assert_eq!(train, train2);
        assert_eq!(test, test2);
    }

    #[test]
    fn split_is_a_partition() {
        let corpus = generate_synthetic(&small_cfg()).unwrap();
        let (train, test) = split(&corpus, 0.8, 17).unwrap();
        let mut ids: Vec<&str> = train
            .iter()
            .chain(&test)
            .map(|s| s.video_id.as_str())
            .collect();
        ids.sort_unstable();
        let mut expected: Vec<&str> = corpus.iter().map(|s| s.video_id.as_str()).collect();
        expected.sort_unstable();
        assert_eq!(ids, expected);
    }

    #[test]
    fn split_rejects_bad_fraction() {
        assert!(split(&[], 1.0, 0).is_err());
        assert!(split(&[], 0.0, 0).is_err());
    }

    #[test]
    fn validation_catches_bad_segment_and_short_video() {
        let mut s = GroundingSample {
            video_id: "v".into(),
            clip_features: Tensor::zeros(&[6, 2]),
            query_tokens: vec![1],
            gt_segment: Some(Boundary::new(2, 7)),
        };
        assert!(s.validate().is_err());
        s.gt_segment = Some(Boundary::new(2, 6));
        assert!(s.validate().is_ok());
        s.clip_features = Tensor::zeros(&[3, 2]);
        s.gt_segment = None;
        assert!(s.validate().is_err());
    }
}
