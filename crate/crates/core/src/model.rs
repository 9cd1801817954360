use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::evaluator::Evaluator;
use crate::extractor::QueryEncoder;
use crate::planner::Planner;

/// Architecture sizes and switches. `hidden_size` is the query dimension `k`,
/// the filter output width, the state width and the planner GRU width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub hidden_size: usize,
    pub dropout: f64,
    /// Drop the left/right pooled features from the planner state.
    pub no_context: bool,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 12,
            feature_dim: 64,
            embed_dim: 64,
            hidden_size: 64,
            dropout: 0.5,
            no_context: false,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.feature_dim == 0 || self.embed_dim == 0 || self.hidden_size == 0 {
            return Err(Error::Config("model sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} must lie in [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Every learnable component, sharing one parameter store.
#[derive(Debug, Clone)]
pub struct BarModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: QueryEncoder,
    pub evaluator: Evaluator,
    pub planner: Planner,
}

impl BarModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();
        let encoder = QueryEncoder::register(
            &mut store,
            config.vocab_size,
            config.embed_dim,
            config.hidden_size,
            &mut rng,
        )?;
        let evaluator = Evaluator::register(
            &mut store,
            config.feature_dim,
            config.hidden_size,
            config.dropout,
            &mut rng,
        )?;
        let planner = Planner::register(
            &mut store,
            config.feature_dim,
            config.hidden_size,
            config.no_context,
            &mut rng,
        )?;
        Ok(Self {
            config,
            store,
            encoder,
            evaluator,
            planner,
        })
    }

    /// Query encoder parameters.
    pub fn encoder_ids(&self) -> Vec<ParamId> {
        self.encoder.param_ids()
    }

    pub fn evaluator_ids(&self) -> Vec<ParamId> {
        self.evaluator.param_ids()
    }

    pub fn planner_ids(&self) -> Vec<ParamId> {
        self.planner.param_ids()
    }

    /// Everything updated by the ranking loss: encoder plus evaluator.
    pub fn rank_ids(&self) -> Vec<ParamId> {
        let mut ids = self.encoder_ids();
        ids.extend(self.evaluator_ids());
        ids
    }

    /// Marks exactly `ids` as trainable and everything else frozen.
    pub fn set_trainable(&mut self, ids: &[ParamId]) {
        let all: Vec<ParamId> = self.store.ids().collect();
        for id in all {
            self.store.set_frozen(id, true);
        }
        for &id in ids {
            self.store.set_frozen(id, false);
        }
    }

    pub fn unfreeze_all(&mut self) {
        let all: Vec<ParamId> = self.store.ids().collect();
        for id in all {
            self.store.set_frozen(id, false);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_partition_the_store() {
        let model = BarModel::new(ModelConfig {
            feature_dim: 6,
            hidden_size: 5,
            embed_dim: 4,
            ..ModelConfig::default()
        })
        .unwrap();
        let mut ids = model.rank_ids();
        ids.extend(model.planner_ids());
        ids.sort();
        let all: Vec<_> = model.store.ids().collect();
        assert_eq!(ids, all);
    }

    #[test]
    fn same_seed_same_weights() {
        let cfg = ModelConfig {
            feature_dim: 6,
            hidden_size: 5,
            embed_dim: 4,
            ..ModelConfig::default()
        };
        let a = BarModel::new(cfg.clone()).unwrap();
        let b = BarModel::new(cfg).unwrap();
        let ids: Vec<_> = a.store.ids().collect();
        assert_eq!(a.store.digest(&ids), b.store.digest(&ids));
    }
}
