use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Mixer, MixerDims, MixerSpec};
use crate::autodiff::{ParamStore, Tensor};
use crate::error::{Error, Result};

/// Serialized mixer: spec, sizes, and every parameter as a flat array.
/// Shapes are implied by the spec and dims.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixerCheckpoint {
    pub spec: MixerSpec,
    pub dims: MixerDims,
    pub params: BTreeMap<String, Vec<f64>>,
}

impl MixerCheckpoint {
    pub fn capture(mixer: &Mixer, store: &ParamStore) -> Self {
        let params = store
            .iter()
            .filter(|(name, _)| name.starts_with("mixer."))
            .map(|(name, t)| (name.to_string(), t.data().to_vec()))
            .collect();
        Self {
            spec: mixer.spec().clone(),
            dims: mixer.dims().clone(),
            params,
        }
    }

    /// Rebuilds the mixer and a store holding exactly its parameters.
    pub fn restore(&self) -> Result<(Mixer, ParamStore)> {
        let mixer = Mixer::new(self.spec.clone(), self.dims.clone())?;
        let template = mixer.init(&mut ChaCha8Rng::seed_from_u64(0));
        let mut store = ParamStore::new();
        for (name, value) in template.iter() {
            let data = self
                .params
                .get(name)
                .ok_or_else(|| Error::Config(format!("checkpoint is missing `{name}`")))?;
            store.insert(name, Tensor::new(value.shape().to_vec(), data.clone())?);
        }
        if let Some(extra) = self.params.keys().find(|k| !template.contains(k)) {
            return Err(Error::UnknownParameter(extra.clone()));
        }
        Ok((mixer, store))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}
