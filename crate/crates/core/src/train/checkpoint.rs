//! Binary checkpoint: `DGNS`, u32 LE format version, u32 LE header length,
//! JSON header, then every parameter as little-endian `f32` in header order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EpochMetrics, TrainConfig};
use crate::autodiff::{ParamStore, Tensor};
use crate::gnss::NormStats;
use crate::model::DiffGnss;
use crate::{Error, Params, Result};

pub const MAGIC: &[u8; 4] = b"DGNS";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: Params,
    pub norm: NormStats,
    pub config: TrainConfig,
    /// Epoch the parameters were taken from.
    pub epoch: usize,
    pub history: Vec<EpochMetrics>,
    /// Training stopped on a non-finite loss; `params` are the last good ones.
    pub diverged: bool,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    params: Vec<ParamEntry>,
    norm: NormStats,
    config: TrainConfig,
    epoch: usize,
    history: Vec<EpochMetrics>,
    diverged: bool,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            params: self.params.iter().map(|(k, v)| ParamEntry { name: k.clone(), shape: v.shape().to_vec() }).collect(),
            norm: self.norm,
            config: self.config.clone(),
            epoch: self.epoch,
            history: self.history.clone(),
            diverged: self.diverged,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(12 + json.len() + 4 * self.params.numel());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in self.params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let truncated = |what: &str| Error::Checkpoint(format!("truncated checkpoint: {what}"));
        if bytes.len() < 12 {
            return Err(truncated("missing preamble"));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}, expected {FORMAT_VERSION}")));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = &bytes[12..];
        if body.len() < hlen {
            return Err(truncated("header length exceeds file size"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])?;
        let mut payload = &body[hlen..];
        let mut params = ParamStore::new();
        for p in &header.params {
            let n: usize = p.shape.iter().product();
            if payload.len() < 4 * n {
                return Err(truncated(&format!("payload ends inside `{}`", p.name)));
            }
            let data = payload[..4 * n].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            payload = &payload[4 * n..];
            params.insert(p.name.clone(), Tensor::new(p.shape.clone(), data)?);
        }
        if !payload.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes after payload", payload.len())));
        }
        Ok(Self {
            params,
            norm: header.norm,
            config: header.config,
            epoch: header.epoch,
            history: header.history,
            diverged: header.diverged,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::Io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Io(path.display().to_string(), e))?;
        Self::from_bytes(&bytes)
    }

    /// Rebuilds the model from the stored configuration and checks the
    /// parameters against it.
    pub fn model(&self) -> Result<DiffGnss> {
        let model = DiffGnss::new(self.config.model.clone())?;
        check_params(&model, &self.params)?;
        Ok(model)
    }
}

/// Errors unless `params` holds exactly the parameters `model` expects, with
/// matching shapes.
pub fn check_params(model: &DiffGnss, params: &Params) -> Result<()> {
    let expected = model.param_shapes();
    let mut problems = Vec::new();
    for (name, shape) in &expected {
        match params.get(name) {
            Err(_) => problems.push(format!("missing `{name}`")),
            Ok(t) if t.shape() != shape.as_slice() => {
                problems.push(format!("`{name}` has shape {:?}, expected {shape:?}", t.shape()))
            }
            Ok(_) => {}
        }
    }
    for name in params.names() {
        if !expected.iter().any(|(n, _)| n == name) {
            problems.push(format!("unexpected `{name}`"));
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::Checkpoint(format!("parameter shape mismatch: {}", problems.join(", "))))
    }
}
