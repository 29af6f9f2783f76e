//! Binary checkpoint container.
//!
//! Layout: `b"LEIG"`, `u32` version, `u64` header length, UTF-8 JSON header,
//! then little-endian tensor payloads in manifest order. Offsets in the
//! manifest are relative to the first payload byte.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::{Adam, AdamConfig};
use super::{Result, TrainError};
use crate::model::{Hyperparams, Model, Normalization};
use crate::tensor::{DType, Real, Tensor};

pub const MAGIC: &[u8; 4] = b"LEIG";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub crc32: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingMeta {
    pub epoch: usize,
    pub step: u64,
    pub best_validation: Option<f64>,
    pub learning_rate: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerHeader {
    pub config: AdamConfig,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub hyperparams: Hyperparams,
    pub normalization: Normalization,
    pub metadata: TrainingMeta,
    pub optimizer: Option<OptimizerHeader>,
    pub tensors: Vec<TensorEntry>,
}

/// Model weights plus everything needed to resume or reproduce training.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T: Real> {
    pub model: Model<T>,
    pub optimizer: Option<Adam<T>>,
    pub meta: TrainingMeta,
}

fn payload<T: Real>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(t.len() * T::DTYPE.size_of());
    for &x in t.data() {
        x.write_le(&mut out);
    }
    out
}

impl<T: Real> Checkpoint<T> {
    pub fn new(model: Model<T>) -> Self {
        Checkpoint {
            model,
            optimizer: None,
            meta: TrainingMeta::default(),
        }
    }

    fn tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let named = self.model.params.named();
        let mut out: Vec<(String, &Tensor<T>)> = named.iter().map(|(n, t)| (n.clone(), *t)).collect();
        if let Some(opt) = &self.optimizer {
            for (k, (n, _)) in named.iter().enumerate() {
                out.push((format!("adam.m.{n}"), &opt.m[k]));
            }
            for (k, (n, _)) in named.iter().enumerate() {
                out.push((format!("adam.v.{n}"), &opt.v[k]));
            }
        }
        out
    }

    pub fn header(&self) -> Header {
        let mut offset = 0u64;
        let tensors = self
            .tensors()
            .into_iter()
            .map(|(name, t)| {
                let bytes = payload(t);
                let e = TensorEntry {
                    name,
                    dtype: T::DTYPE,
                    shape: t.shape().to_vec(),
                    offset,
                    crc32: crc32fast::hash(&bytes),
                };
                offset += bytes.len() as u64;
                e
            })
            .collect();
        Header {
            hyperparams: self.model.hyper,
            normalization: self.model.norm.clone(),
            metadata: self.meta.clone(),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader {
                config: o.config,
                step: o.step,
            }),
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header()).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in self.tensors() {
            out.extend(payload(t));
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| TrainError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    /// Decodes a checkpoint using the hyperparameters stored in it.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, data) = read_header(bytes)?;
        let model = Model::new(header.hyperparams, 0).map_err(TrainError::Model)?;
        Self::fill(model, &header, data)
    }

    /// Decodes a checkpoint into a model built from `expected`; every stored
    /// tensor must have the shape that configuration implies.
    pub fn from_bytes_expecting(bytes: &[u8], expected: &Hyperparams) -> Result<Self> {
        let (header, data) = read_header(bytes)?;
        let model = Model::new(*expected, 0).map_err(TrainError::Model)?;
        Self::fill(model, &header, data)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }

    pub fn load_expecting(path: &Path, expected: &Hyperparams) -> Result<Self> {
        Self::from_bytes_expecting(&read_file(path)?, expected)
    }

    fn fill(mut model: Model<T>, header: &Header, data: &[u8]) -> Result<Self> {
        let mut entries = header.tensors.iter();
        let mut next = |name: &str, want: &[usize]| -> Result<Tensor<T>> {
            let e = entries
                .next()
                .ok_or_else(|| TrainError::Checkpoint(format!("missing tensor {name}")))?;
            if e.name != name {
                return Err(TrainError::Checkpoint(format!("expected tensor {name}, found {}", e.name)));
            }
            if e.shape != want {
                return Err(TrainError::Shape {
                    name: name.to_string(),
                    stored: e.shape.clone(),
                    expected: want.to_vec(),
                });
            }
            decode(e, data)
        };
        let names: Vec<(String, Vec<usize>)> = model
            .params
            .named()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        for (slot, (name, shape)) in model.params.slots_mut().into_iter().zip(&names) {
            *slot = next(name, shape)?;
        }
        let optimizer = match &header.optimizer {
            Some(o) => {
                let mut m = Vec::with_capacity(names.len());
                for (n, s) in &names {
                    m.push(next(&format!("adam.m.{n}"), s)?);
                }
                let mut v = Vec::with_capacity(names.len());
                for (n, s) in &names {
                    v.push(next(&format!("adam.v.{n}"), s)?);
                }
                Some(Adam {
                    config: o.config,
                    step: o.step,
                    m,
                    v,
                })
            }
            None => None,
        };
        if let Some(extra) = entries.next() {
            return Err(TrainError::Checkpoint(format!("unexpected tensor {}", extra.name)));
        }
        model.norm = header.normalization.clone();
        Ok(Checkpoint {
            model,
            optimizer,
            meta: header.metadata.clone(),
        })
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| TrainError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

/// Parses the fixed prefix and JSON header; returns the header and the
/// payload region.
pub fn read_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(TrainError::Version("not a LEIG checkpoint (bad magic bytes)".into()));
    }
    if bytes.len() < 16 {
        return Err(TrainError::Truncated);
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(TrainError::Version(format!("unsupported checkpoint version {version}")));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let end = 16usize.checked_add(len).ok_or(TrainError::Truncated)?;
    if bytes.len() < end {
        return Err(TrainError::Truncated);
    }
    let header: Header =
        serde_json::from_slice(&bytes[16..end]).map_err(|e| TrainError::Checkpoint(format!("header: {e}")))?;
    let data = &bytes[end..];
    let need = header
        .tensors
        .iter()
        .map(|e| e.offset as usize + e.shape.iter().product::<usize>() * e.dtype.size_of())
        .max()
        .unwrap_or(0);
    if data.len() < need {
        return Err(TrainError::Truncated);
    }
    Ok((header, data))
}

fn decode<T: Real>(e: &TensorEntry, data: &[u8]) -> Result<Tensor<T>> {
    let n: usize = e.shape.iter().product();
    let size = e.dtype.size_of();
    let start = e.offset as usize;
    let bytes = data.get(start..start + n * size).ok_or(TrainError::Truncated)?;
    if crc32fast::hash(bytes) != e.crc32 {
        return Err(TrainError::Checksum(e.name.clone()));
    }
    let values: Vec<T> = match e.dtype {
        DType::F32 => bytes
            .chunks_exact(4)
            .map(|b| T::from_f64(f32::read_le(b) as f64))
            .collect(),
        DType::F64 => bytes.chunks_exact(8).map(|b| T::from_f64(f64::read_le(b))).collect(),
    };
    Tensor::new(e.shape.clone(), values).map_err(|err| TrainError::Checkpoint(err.to_string()))
}
