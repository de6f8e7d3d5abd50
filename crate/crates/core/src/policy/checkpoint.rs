//! JSON checkpoints: config, vocabulary, named weights and adapters.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{LoraAdapter, Policy, PolicyConfig, PolicyError, Result};
use crate::tensor::Tensor;
use crate::tokenizer::Tokenizer;

pub const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl From<&Tensor> for StoredTensor {
    fn from(t: &Tensor) -> Self {
        Self {
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredLora {
    pub rank: usize,
    pub alpha: f64,
    pub tensors: BTreeMap<String, StoredTensor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: u32,
    pub config: PolicyConfig,
    /// Hex SHA-256 of the serialized config, checked on load.
    pub config_hash: String,
    pub vocab: Vec<String>,
    pub params: BTreeMap<String, StoredTensor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lora: Option<StoredLora>,
}

fn config_hash(config: &PolicyConfig) -> String {
    let json = serde_json::to_string(config).expect("config serializes");
    hex::encode(Sha256::digest(json.as_bytes()))
}

fn restore(name: &str, stored: StoredTensor) -> Result<Tensor> {
    Tensor::new(stored.shape, stored.data).map_err(|e| PolicyError::Checkpoint(format!("{name}: {e}")))
}

impl Checkpoint {
    pub fn from_policy(policy: &Policy) -> Self {
        Self {
            format: CHECKPOINT_FORMAT,
            config: policy.config.clone(),
            config_hash: config_hash(&policy.config),
            vocab: policy.tokenizer.vocab().to_vec(),
            params: policy.params.iter().map(|(k, t)| (k.clone(), t.into())).collect(),
            lora: policy.lora.as_ref().map(|l| StoredLora {
                rank: l.rank(),
                alpha: l.alpha(),
                tensors: l.tensors().iter().map(|(k, t)| (k.clone(), t.into())).collect(),
            }),
        }
    }

    /// Rebuilds the policy, checking format, config hash, vocabulary and
    /// every tensor shape against a freshly initialized policy.
    pub fn into_policy(self) -> Result<Policy> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(PolicyError::Checkpoint(format!(
                "format {} not supported (expected {CHECKPOINT_FORMAT})",
                self.format
            )));
        }
        if config_hash(&self.config) != self.config_hash {
            return Err(PolicyError::Checkpoint("config hash mismatch".into()));
        }
        let tokenizer = Tokenizer::new(self.config.glyphs)?;
        if tokenizer.vocab() != self.vocab.as_slice() {
            return Err(PolicyError::Checkpoint("vocabulary mismatch".into()));
        }
        let mut policy = Policy::new(self.config)?;
        if policy.params.len() != self.params.len() {
            return Err(PolicyError::Checkpoint(format!(
                "expected {} parameters, found {}",
                policy.params.len(),
                self.params.len()
            )));
        }
        for (name, stored) in self.params {
            let Some(slot) = policy.params.get_mut(&name) else {
                return Err(PolicyError::Checkpoint(format!("unknown parameter {name}")));
            };
            if slot.shape() != stored.shape.as_slice() {
                return Err(PolicyError::Checkpoint(format!(
                    "{name}: shape {:?}, expected {:?}",
                    stored.shape,
                    slot.shape()
                )));
            }
            *slot = restore(&name, stored)?;
        }
        if let Some(l) = self.lora {
            let tensors = l
                .tensors
                .into_iter()
                .map(|(k, t)| restore(&k, t).map(|t| (k, t)))
                .collect::<Result<BTreeMap<_, _>>>()?;
            policy.lora = Some(LoraAdapter::from_parts(l.rank, l.alpha, tensors));
        }
        Ok(policy)
    }
}

pub fn save_checkpoint(policy: &Policy, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &Checkpoint::from_policy(policy))
        .map_err(|e| PolicyError::Checkpoint(e.to_string()))?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Policy> {
    let r = BufReader::new(File::open(path)?);
    let ckpt: Checkpoint = serde_json::from_reader(r).map_err(|e| PolicyError::Checkpoint(e.to_string()))?;
    ckpt.into_policy()
}

impl Policy {
    /// SHA-256 of the serialized checkpoint.
    pub fn content_hash(&self) -> String {
        let json = serde_json::to_vec(&Checkpoint::from_policy(self)).expect("checkpoint serializes");
        hex::encode(Sha256::digest(&json))
    }
}
