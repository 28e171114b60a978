//! Self-describing JSON checkpoint container.
//!
//! Parameters are stored as base64 of little-endian `f64` values, which is
//! exact for both supported scalar types.

use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{ModelSpec, Network, ParamSet};
use crate::error::{Error, Result};
use crate::features::hex_digest;
use crate::io::{read_json, write_json};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept.
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct StoredParam {
    name: String,
    shape: Vec<usize>,
    data: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    format: u32,
    pub spec: ModelSpec,
    /// Scalar type the network was trained in.
    pub dtype: String,
    params: Vec<StoredParam>,
    pub norm_stats_hash: String,
    pub training_log: TrainingLog,
    pub level: usize,
}

impl Checkpoint {
    pub fn from_network<T: Scalar>(net: &Network<T>, norm_stats_hash: &str, log: TrainingLog, level: usize) -> Self {
        let params = net
            .params()
            .iter()
            .map(|(name, t)| {
                let bytes: Vec<u8> = t
                    .data()
                    .iter()
                    .flat_map(|v| v.to_f64_lossy().to_le_bytes())
                    .collect();
                StoredParam {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    data: STANDARD.encode(bytes),
                }
            })
            .collect();
        Self {
            format: FORMAT_VERSION,
            spec: net.spec().clone(),
            dtype: T::DTYPE.to_string(),
            params,
            norm_stats_hash: norm_stats_hash.to_string(),
            training_log: log,
            level,
        }
    }

    /// Rebuild the network in scalar type `T`.
    pub fn to_network<T: Scalar>(&self) -> Result<Network<T>> {
        self.spec.validate()?;
        let mut params = ParamSet::new();
        for p in &self.params {
            let bytes = STANDARD
                .decode(&p.data)
                .map_err(|e| Error::Format(format!("parameter {}: {e}", p.name)))?;
            if bytes.len() % 8 != 0 {
                return Err(Error::Format(format!("parameter {} has a ragged blob", p.name)));
            }
            let data = bytes
                .chunks_exact(8)
                .map(|c| T::from_f64_lossy(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
                .collect();
            params.push(p.name.clone(), Tensor::from_vec(&p.shape, data)?);
        }
        // reject blobs that do not fit the spec's architecture
        let fresh = Network::<T>::new(self.spec.clone(), 0)?;
        fresh.params().ensure_compatible(&params)?;
        Ok(Network::from_params(self.spec.clone(), params))
    }

    /// SHA-256 over the parameter blobs and spec only.
    pub fn params_hash(&self) -> String {
        let text = serde_json::to_vec(&(&self.spec, &self.params)).expect("serializable");
        hex_digest(&text)
    }

    /// SHA-256 of the full serialized checkpoint.
    pub fn content_hash(&self) -> String {
        hex_digest(&serde_json::to_vec(self).expect("serializable"))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Self = read_json(path)?;
        if ck.format != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "{}: checkpoint format {} is not supported",
                path.display(),
                ck.format
            )));
        }
        Ok(ck)
    }
}
