use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A learnable tensor with a dotted path name such as `evaluator.theta.weight`.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Vec<f64>,
    pub frozen: bool,
}

/// Registry of every parameter of a model, in registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        let grad = vec![0.0; value.len()];
        self.params.push(Parameter {
            name: name.clone(),
            value,
            grad,
            frozen: false,
        });
        self.by_name.insert(name, id);
        Ok(id)
    }

    /// Registers a parameter initialized uniformly in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn register_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let len: usize = shape.iter().product();
        let data = (0..len).map(|_| rng.random_range(-bound..=bound)).collect();
        self.register(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.params[id.0].frozen = frozen;
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.params[id.0].frozen
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// SHA-256 over the names, shapes and raw value bytes of the given parameters.
    pub fn digest(&self, ids: &[ParamId]) -> String {
        let mut hasher = Sha256::new();
        for id in ids {
            let p = &self.params[id.0];
            hasher.update(p.name.as_bytes());
            for d in p.value.shape() {
                hasher.update((*d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                hasher.update(v.to_bits().to_le_bytes());
            }
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            parameters: self
                .params
                .iter()
                .map(|p| CheckpointEntry {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    values: p.value.data().to_vec(),
                })
                .collect(),
        }
    }

    /// Overwrites parameter values from a checkpoint. Every registered name must
    /// be present with a matching shape; extra entries are rejected.
    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Validation(format!(
                "unsupported checkpoint format version {}",
                ckpt.format_version
            )));
        }
        if ckpt.parameters.len() != self.params.len() {
            return Err(Error::Validation(format!(
                "checkpoint has {} parameters, model has {}",
                ckpt.parameters.len(),
                self.params.len()
            )));
        }
        for entry in &ckpt.parameters {
            let id = self
                .id(&entry.name)
                .ok_or_else(|| Error::Validation(format!("unknown parameter {}", entry.name)))?;
            let p = &mut self.params[id.0];
            if p.value.shape() != entry.shape.as_slice() {
                return Err(Error::Validation(format!(
                    "parameter {} has shape {:?}, checkpoint says {:?}",
                    entry.name,
                    p.value.shape(),
                    entry.shape
                )));
            }
            p.value = Tensor::new(entry.shape.clone(), entry.values.clone())?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        let ckpt = Checkpoint::load(path)?;
        self.load_checkpoint(&ckpt)
    }
}

/// On-disk parameter container: name, shape and flat values per parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub parameters: Vec<CheckpointEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.register("a.w", Tensor::zeros(&[2])).unwrap();
        assert!(store.register("a.w", Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn uniform_init_respects_fan_in_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let id = store.register_uniform("w", &[16, 8], 16, &mut rng).unwrap();
        assert!(store.get(id).value.data().iter().all(|v| v.abs() <= 0.25));
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        store.register_uniform("x.w", &[3, 5], 3, &mut rng).unwrap();
        store.register_uniform("x.b", &[5], 3, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        store.save(&path).unwrap();

        let mut other = store.clone();
        other.get_mut(ParamId(0)).value.data_mut()[0] = 42.0;
        other.load(&path).unwrap();
        let all: Vec<_> = store.ids().collect();
        assert_eq!(store.digest(&all), other.digest(&all));
    }

    #[test]
    fn checkpoint_shape_mismatch_rejected() {
        let mut store = ParamStore::new();
        store.register("w", Tensor::zeros(&[2, 2])).unwrap();
        let mut ckpt = store.to_checkpoint();
        ckpt.parameters[0].shape = vec![4];
        assert!(store.load_checkpoint(&ckpt).is_err());
    }
}
