use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::params::ParameterSet;
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Named tensors with optimizer state, the configuration that produced them
/// and a hash of that configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint<C> {
    pub version: u32,
    pub config_hash: String,
    pub config: C,
    pub step: u64,
    pub params: ParameterSet,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl<C: Serialize + for<'de> Deserialize<'de>> Checkpoint<C> {
    pub fn new(config: C, step: u64, params: ParameterSet) -> Result<Self> {
        let config_hash = sha256_hex(&serde_json::to_vec(&config)?);
        Ok(Self {
            version: CHECKPOINT_VERSION,
            config_hash,
            config,
            step,
            params,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec(self)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let raw: serde_json::Value = serde_json::from_slice(bytes)?;
        match raw.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == CHECKPOINT_VERSION as u64 => {}
            Some(v) => return Err(Error::Format(format!("unsupported checkpoint version {v}"))),
            None => return Err(Error::Format("checkpoint has no version field".into())),
        }
        let ck: Self = serde_json::from_value(raw)?;
        let expected = sha256_hex(&serde_json::to_vec(&ck.config)?);
        if expected != ck.config_hash {
            return Err(Error::Format("checkpoint config hash mismatch".into()));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
