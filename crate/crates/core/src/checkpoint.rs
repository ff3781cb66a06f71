//! Single-file model snapshots.
//!
//! Layout (little-endian): magic `PFRNNCKP`, `u32` format version, `u32`
//! blob count, then per blob a `u8` kind (0 parameter, 1 buffer), `u32`
//! name length, UTF-8 name, `u32` rank, `u64` dims and `f64` values. A `u64`
//! length and a JSON trailer with the specs, normalizer and history follow.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec};
use crate::nn::Module;
use crate::rng::RngStream;
use crate::train::{EpochMetrics, Normalizer, TrainConfig};

const MAGIC: &[u8; 8] = b"PFRNNCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Blob {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Trailer {
    spec: ModelSpec,
    config: TrainConfig,
    normalizer: Normalizer,
    history: Vec<EpochMetrics>,
    best_epoch: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub config: TrainConfig,
    pub normalizer: Normalizer,
    pub params: Vec<Blob>,
    pub buffers: Vec<Blob>,
    pub history: Vec<EpochMetrics>,
    /// Epoch whose parameters these are (`None` before any training).
    pub best_epoch: Option<usize>,
}

impl Checkpoint {
    pub fn capture(model: &Model, config: &TrainConfig, normalizer: &Normalizer) -> Self {
        let mut params = Vec::new();
        model.visit_params("", &mut |name, t| {
            params.push(Blob {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
        });
        let mut buffers = Vec::new();
        model.visit_buffers("", &mut |name, b| {
            buffers.push(Blob {
                name: name.to_string(),
                shape: vec![b.len()],
                data: b.to_vec(),
            })
        });
        Self {
            spec: model.spec.clone(),
            config: config.clone(),
            normalizer: normalizer.clone(),
            params,
            buffers,
            history: Vec::new(),
            best_epoch: None,
        }
    }

    /// Copy the stored values into `model`, whose spec must match.
    pub fn restore_into(&self, model: &mut Model) -> Result<()> {
        if model.spec != self.spec {
            return Err(Error::Format("checkpoint spec differs from the model".into()));
        }
        let mut missing = Vec::new();
        let mut params = self.params.iter();
        model.visit_params_mut("", &mut |name, t| match params.next() {
            Some(b) if b.name == name && b.shape == t.shape() => {
                t.update_leaf(|d| d.copy_from_slice(&b.data));
            }
            _ => missing.push(name.to_string()),
        });
        let mut buffers = self.buffers.iter();
        model.visit_buffers_mut("", &mut |name, v| match buffers.next() {
            Some(b) if b.name == name && b.data.len() == v.len() => v.copy_from_slice(&b.data),
            _ => missing.push(name.to_string()),
        });
        if !missing.is_empty() || params.next().is_some() || buffers.next().is_some() {
            return Err(Error::Format(format!(
                "checkpoint tensors do not match the model (first mismatch: {:?})",
                missing.first()
            )));
        }
        Ok(())
    }

    pub fn to_model(&self) -> Result<Model> {
        let mut model = Model::new(self.spec.clone(), &mut RngStream::new(0))?;
        self.restore_into(&mut model)?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let count = self.params.len() + self.buffers.len();
        out.extend_from_slice(&(count as u32).to_le_bytes());
        let kinds = self.params.iter().map(|b| (0u8, b)).chain(self.buffers.iter().map(|b| (1u8, b)));
        for (kind, b) in kinds {
            out.push(kind);
            out.extend_from_slice(&(b.name.len() as u32).to_le_bytes());
            out.extend_from_slice(b.name.as_bytes());
            out.extend_from_slice(&(b.shape.len() as u32).to_le_bytes());
            for &d in &b.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &b.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let trailer = serde_json::to_vec(&Trailer {
            spec: self.spec.clone(),
            config: self.config.clone(),
            normalizer: self.normalizer.clone(),
            history: self.history.clone(),
            best_epoch: self.best_epoch,
        })?;
        out.extend_from_slice(&(trailer.len() as u64).to_le_bytes());
        out.extend_from_slice(&trailer);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let count = r.u32()? as usize;
        let (mut params, mut buffers) = (Vec::new(), Vec::new());
        for _ in 0..count {
            let kind = r.take(1)?[0];
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Format("blob name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let blob = Blob { name, shape, data };
            match kind {
                0 => params.push(blob),
                1 => buffers.push(blob),
                k => return Err(Error::Format(format!("unknown blob kind {k}"))),
            }
        }
        let len = r.u64()? as usize;
        let trailer: Trailer = serde_json::from_slice(r.take(len)?)?;
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Self {
            spec: trailer.spec,
            config: trailer.config,
            normalizer: trailer.normalizer,
            params,
            buffers,
            history: trailer.history,
            best_epoch: trailer.best_epoch,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelKind;

    #[test]
    fn bytes_round_trip() {
        let model = Model::new(ModelSpec::new(ModelKind::PfGru, 5), &mut RngStream::new(2)).unwrap();
        let ck = Checkpoint::capture(&model, &TrainConfig::default(), &Normalizer::identity(8, 10.0));
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
        let restored = back.to_model().unwrap();
        assert_eq!(Checkpoint::capture(&restored, &ck.config, &ck.normalizer), ck);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let model = Model::new(ModelSpec::new(ModelKind::Lstm, 3), &mut RngStream::new(2)).unwrap();
        let bytes = Checkpoint::capture(&model, &TrainConfig::default(), &Normalizer::identity(8, 10.0))
            .to_bytes()
            .unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(Checkpoint::from_bytes(b"garbage!").is_err());
        let mut wrong_version = bytes.clone();
        wrong_version[8] = 9;
        assert!(Checkpoint::from_bytes(&wrong_version).is_err());
    }
}
