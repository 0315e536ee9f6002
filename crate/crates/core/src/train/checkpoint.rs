//! Binary checkpoint: magic, little-endian `u32` version, `u64` header
//! length, a JSON header, then every parameter value followed by the Adam
//! first and second moments as little-endian `f64`, in header order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::Adam;
use super::trainer::{EpochRecord, TrainConfig, Trainer};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::InvDriver;
use crate::query::ModelConfig;
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"INVDCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model_config: ModelConfig,
    train_config: TrainConfig,
    epochs_done: usize,
    optimizer_steps: u64,
    history: Vec<EpochRecord>,
    params: Vec<TensorEntry>,
}

fn parse(message: impl Into<String>) -> Error {
    Error::Parse {
        line: 0,
        message: message.into(),
    }
}

impl<T: Scalar> Trainer<T> {
    pub fn save(&self, path: &Path) -> Result<()> {
        let store = &self.model.store;
        let header = Header {
            model_config: self.model.cfg.clone(),
            train_config: self.config.clone(),
            epochs_done: self.epochs_done,
            optimizer_steps: self.optimizer.steps,
            history: self.history.clone(),
            params: store
                .iter()
                .map(|p| TensorEntry {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Input(e.to_string()))?;
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        let mut put = |bytes: &[u8]| out.write_all(bytes).map_err(|e| Error::io(path, e));
        put(CHECKPOINT_MAGIC)?;
        put(&CHECKPOINT_VERSION.to_le_bytes())?;
        put(&(json.len() as u64).to_le_bytes())?;
        put(&json)?;
        let tensors = store
            .iter()
            .map(|p| &p.value)
            .chain(&self.optimizer.m)
            .chain(&self.optimizer.v);
        for t in tensors {
            for &x in t.data() {
                put(&x.as_f64().to_le_bytes())?;
            }
        }
        out.flush().map_err(|e| Error::io(path, e))
    }

    /// Restores model, optimizer and progress written by [`Trainer::save`].
    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut input = BufReader::new(file);
        let mut bytes = Vec::new();
        input
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(parse("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                what: "checkpoint",
                found: version.into(),
                expected: CHECKPOINT_VERSION.into(),
            });
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(20..20 + len)
            .ok_or_else(|| parse("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| parse(e.to_string()))?;
        header.train_config.validate()?;

        let mut model = InvDriver::<T>::new(header.model_config, header.train_config.seed)?;
        let names: Vec<_> = model
            .store
            .iter()
            .map(|p| (p.name.clone(), p.value.shape().to_vec()))
            .collect();
        let stored: Vec<_> = header
            .params
            .iter()
            .map(|e| (e.name.clone(), e.shape.clone()))
            .collect();
        if names != stored {
            return Err(Error::Mismatch(
                "checkpoint parameters do not match the model built from its config".into(),
            ));
        }
        let mut values = bytes[20 + len..].chunks_exact(8);
        if values.len() != 3 * model.store.numel() || !values.remainder().is_empty() {
            return Err(parse("tensor payload has the wrong length"));
        }
        let mut next = |shape: &[usize]| {
            let n = shape.iter().product();
            let data = values
                .by_ref()
                .take(n)
                .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
                .collect();
            Tensor::new(shape.to_vec(), data)
        };
        let ids: Vec<_> = model.store.ids().collect();
        for &id in &ids {
            let shape = model.store.value(id).shape().to_vec();
            *model.store.value_mut(id) = next(&shape)?;
        }
        let mut optimizer = Adam::new(&model.store);
        optimizer.steps = header.optimizer_steps;
        for (m, (_, shape)) in optimizer.m.iter_mut().zip(&stored) {
            *m = next(shape)?;
        }
        for (v, (_, shape)) in optimizer.v.iter_mut().zip(&stored) {
            *v = next(shape)?;
        }
        Ok(Self {
            model,
            optimizer,
            config: header.train_config,
            epochs_done: header.epochs_done,
            history: header.history,
        })
    }
}
