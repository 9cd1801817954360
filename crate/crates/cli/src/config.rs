use std::path::{Path, PathBuf};

use bar_core::corpus::CorpusConfig;
use bar_core::extractor::InitBoundary;
use bar_core::inference::InferenceConfig;
use bar_core::model::ModelConfig;
use bar_core::planner::AmplitudeMode;
use bar_core::trainer::TrainConfig;
use bar_core::Error;
use serde::{Deserialize, Serialize};

pub const CONFIG_ECHO: &str = "config.toml";

/// Ablation switches. Each one rewrites fields of the other sections when
/// the config is resolved, so a resolved config is a fixed point.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub no_context: bool,
    pub no_intra: bool,
    /// Fixed amplitude factor in place of the adaptive one; absent means off.
    pub fixed_amplitude: Option<usize>,
    pub random_reward: bool,
    /// Stop refining once the current score reaches this value.
    pub with_stop_threshold: Option<f64>,
    pub no_penalty: bool,
    pub init_boundary: Option<InitBoundary>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub run_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Overrides the corpus, model-init and training seeds when set.
    pub seed: Option<u64>,
    /// Fraction of the corpus used for training; the rest is held out.
    pub train_fraction: f64,
    pub paths: Paths,
    pub ablation: Ablation,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            train_fraction: 500.0 / 600.0,
            paths: Paths::default(),
            ablation: Ablation::default(),
            corpus: CorpusConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            inference: InferenceConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<(), Error> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    /// Applies the seed and ablation switches to the component sections and
    /// validates the result.
    pub fn resolve(mut self) -> Result<Self, Error> {
        if let Some(seed) = self.seed {
            self.corpus.seed = seed;
            self.model.init_seed = seed;
            self.train.seed = seed;
        }
        let a = &self.ablation;
        if a.no_context {
            self.model.no_context = true;
        }
        if a.no_intra {
            self.train.intra_weight = 0.0;
        }
        if let Some(nu) = a.fixed_amplitude {
            if nu == 0 {
                return Err(Error::Config("fixed_amplitude must be at least 1".into()));
            }
            self.train.amplitude = AmplitudeMode::Fixed(nu);
            self.inference.amplitude = AmplitudeMode::Fixed(nu);
        }
        if a.random_reward {
            self.train.random_reward = true;
        }
        if let Some(th) = a.with_stop_threshold {
            self.inference.stop_threshold = Some(th);
        }
        if a.no_penalty {
            self.inference.no_penalty = true;
        }
        if let Some(init) = a.init_boundary {
            self.train.init_boundary = init;
            self.inference.init = init;
        }
        self.inference.max_steps = self.train.max_steps;
        if self.model.feature_dim != self.corpus.feature_dim {
            return Err(Error::Config(format!(
                "model.feature_dim {} differs from corpus.feature_dim {}",
                self.model.feature_dim, self.corpus.feature_dim
            )));
        }
        if self.model.vocab_size < self.corpus.vocab_size {
            return Err(Error::Config(format!(
                "model.vocab_size {} is smaller than corpus.vocab_size {}",
                self.model.vocab_size, self.corpus.vocab_size
            )));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "train_fraction {} must lie in (0, 1)",
                self.train_fraction
            )));
        }
        self.corpus.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.inference.validate()?;
        Ok(self)
    }
}
