//! JSON checkpoints. Floats are written in shortest round-trip form, so a
//! loaded policy reproduces the saved one bit for bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Normalizer, Policy, PolicyConfig, PolicyError, TrainConfig, Variant};
use crate::nn::Tensor;

const FORMAT: &str = "floornav-policy";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Blob {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    format: String,
    version: u32,
    pub variant: Variant,
    pub policy: PolicyConfig,
    pub train: Option<TrainConfig>,
    pub normalizer: Normalizer,
    pub seed: u64,
    params: Vec<Blob>,
}

impl Checkpoint {
    pub fn from_policy(p: &Policy, train: Option<&TrainConfig>) -> Self {
        Self {
            format: FORMAT.into(),
            version: VERSION,
            variant: p.variant,
            policy: p.config.clone(),
            train: train.cloned(),
            normalizer: p.norm,
            seed: train.map_or(0, |t| t.seed),
            params: p
                .store
                .entries()
                .iter()
                .map(|e| Blob {
                    name: e.name.clone(),
                    rows: e.value.rows,
                    cols: e.value.cols,
                    data: e.value.data.clone(),
                })
                .collect(),
        }
    }

    pub fn into_policy(self) -> Result<Policy, String> {
        if self.format != FORMAT || self.version != VERSION {
            return Err(format!("unsupported format {} v{}", self.format, self.version));
        }
        let mut p = Policy::new(self.variant, self.policy, self.normalizer, 0).map_err(|e| e.to_string())?;
        if p.store.count() != self.params.len() {
            return Err(format!(
                "expected {} parameter tensors, found {}",
                p.store.count(),
                self.params.len()
            ));
        }
        for (i, b) in self.params.into_iter().enumerate() {
            let id = crate::nn::ParamId(i);
            let have = &p.store.entries()[i];
            if have.name != b.name || have.value.shape() != (b.rows, b.cols) || b.data.len() != b.rows * b.cols {
                return Err(format!("parameter {i} ({}) does not match the configuration", b.name));
            }
            *p.store.get_mut(id) = Tensor::from_vec(b.rows, b.cols, b.data);
        }
        Ok(p)
    }
}

pub fn save_checkpoint(p: &Policy, train: Option<&TrainConfig>, path: &Path) -> Result<(), PolicyError> {
    let text = serde_json::to_string(&Checkpoint::from_policy(p, train)).expect("checkpoint serializes");
    fs::write(path, text)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Policy, Option<TrainConfig>), PolicyError> {
    let err = |reason: String| PolicyError::Checkpoint {
        path: path.display().to_string(),
        reason,
    };
    let text = fs::read_to_string(path)?;
    let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
    let train = ck.train.clone();
    let p = ck.into_policy().map_err(err)?;
    Ok((p, train))
}
