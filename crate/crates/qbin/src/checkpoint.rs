//! QWCK checkpoints: model layout, normalizer, training state and every
//! parameter and optimizer moment as 64-bit floats, so a resumed run is
//! bit-identical to an uninterrupted one.
//!
//! ```text
//! "QWCK" | u32 meta_len | meta JSON | u32 n_params
//!        | per parameter: u32 name_len | name | u32 ndim | u64 dims.. | f64 values
//!        | per parameter: f64 first moment | per parameter: f64 second moment
//! ```

use std::fs;
use std::path::Path;

use qbin_core::model::{Forecaster, ModelConfig, Normalizer};
use qbin_core::tensor::{ParamStore, Tensor};
use qbin_core::training::{OptimizerState, TrainConfig, TrainerState};
use serde::{Deserialize, Serialize};

use crate::fieldio::{FieldIoError, Result};

pub const MAGIC: &[u8; 4] = b"QWCK";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub n_lat: usize,
    pub n_lon: usize,
    pub normalizer: Normalizer,
    pub train: TrainConfig,
    pub iteration: u64,
    pub seed: u64,
    pub optimizer_step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamStore,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Checkpoint {
    pub fn capture(
        model: &Forecaster,
        normalizer: &Normalizer,
        train: &TrainConfig,
        store: &ParamStore,
        state: &TrainerState,
    ) -> Self {
        let (n_lat, n_lon) = model.grid_dims();
        Self {
            meta: CheckpointMeta {
                model: model.config().clone(),
                n_lat,
                n_lon,
                normalizer: normalizer.clone(),
                train: train.clone(),
                iteration: state.iteration,
                seed: state.seed,
                optimizer_step: state.optimizer.step,
            },
            params: store.clone(),
            m: state.optimizer.m.clone(),
            v: state.optimizer.v.clone(),
        }
    }

    /// Rebuilds the model layout and loads the stored values into it.
    pub fn restore(&self) -> Result<(Forecaster, ParamStore, TrainerState)> {
        // Initial values are overwritten right away; any generator will do.
        let mut rng = qbin_core::rng::stream(0, 0, 0);
        let (model, mut store) = Forecaster::new(
            self.meta.model.clone(),
            self.meta.n_lat,
            self.meta.n_lon,
            &mut rng,
        )?;
        model.load_values(&mut store, &self.params)?;
        let state = TrainerState {
            iteration: self.meta.iteration,
            seed: self.meta.seed,
            optimizer: OptimizerState {
                cfg: self.meta.train.optimizer,
                step: self.meta.optimizer_step,
                m: self.m.clone(),
                v: self.v.clone(),
            },
        };
        Ok((model, store, state))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let meta =
            serde_json::to_vec(&self.meta).map_err(|e| FieldIoError::Config(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in self.params.iter() {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
            for d in p.value.shape() {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            push_values(&mut out, p.value.data());
        }
        if self.m.len() != self.params.len() || self.v.len() != self.params.len() {
            return Err(FieldIoError::BadHeader(
                "optimizer moments do not match the parameters".into(),
            ));
        }
        for t in self.m.iter().chain(&self.v) {
            push_values(&mut out, t.data());
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().expect("four bytes");
        if &magic != MAGIC {
            return Err(FieldIoError::BadMagic(magic));
        }
        let meta_len = r.u32()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| FieldIoError::BadHeader(e.to_string()))?;
        let n = r.u32()? as usize;
        let mut params = ParamStore::new();
        let mut shapes = Vec::with_capacity(n);
        for _ in 0..n {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|e| FieldIoError::BadHeader(format!("parameter name: {e}")))?
                .to_string();
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let values = r.values(shape.iter().product())?;
            params.add(name, Tensor::new(&shape, values)?);
            shapes.push(shape);
        }
        let moments = |r: &mut Reader| -> Result<Vec<Tensor>> {
            shapes
                .iter()
                .map(|s| Ok(Tensor::new(s, r.values(s.iter().product())?)?))
                .collect()
        };
        let m = moments(&mut r)?;
        let v = moments(&mut r)?;
        if r.at != bytes.len() {
            return Err(FieldIoError::BadHeader(format!(
                "{} trailing bytes",
                bytes.len() - r.at
            )));
        }
        Ok(Self { meta, params, m, v })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|source| FieldIoError::Io {
                path: dir.to_path_buf(),
                source,
            })?;
        }
        fs::write(path, self.encode()?).map_err(|source| FieldIoError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|source| FieldIoError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::decode(&bytes)
    }
}

fn push_values(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.at < n {
            return Err(FieldIoError::Truncated(format!(
                "checkpoint needs {n} more bytes at offset {}",
                self.at
            )));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("four bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("eight bytes"),
        ))
    }

    fn values(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| FieldIoError::BadHeader("tensor too large".into()))?,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("eight bytes")))
            .collect())
    }
}
