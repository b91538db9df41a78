//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "TSEG"              4 bytes
//! version             u32
//! tensor count        u32
//! per tensor:
//!   name length       u32
//!   name              UTF-8 bytes
//!   ndim              u32
//!   dims              u32 each
//!   data              f32 each, row-major
//! PRNG state          4 x u64
//! ```
//!
//! The training stage that produced the file is stored as the one-element
//! tensor `meta.stage`, always written first.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nets::{names, parameter_manifest, ModelConfig, SegModel};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TSEG";
pub const VERSION: u32 = 1;
pub const STAGE_TENSOR: &str = "meta.stage";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: u8,
    /// Model parameters in insertion order.
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub rng_state: [u64; 4],
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::CorruptCheckpoint(format!("truncated while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    put_u32(out, name.len());
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.shape().len());
    for &d in t.shape() {
        put_u32(out, d);
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(model: &SegModel<T>, stage: u8, rng_state: [u64; 4]) -> Self {
        let tensors = model.params.iter().map(|p| (p.name.clone(), p.tensor.cast::<f32>().with_trainable(false))).collect();
        Self { stage, tensors, rng_state }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_u32(&mut out, self.tensors.len() + 1);
        put_tensor(&mut out, STAGE_TENSOR, &Tensor::scalar(self.stage as f32));
        for (name, t) in &self.tensors {
            put_tensor(&mut out, name, t);
        }
        for w in self.rng_state {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::CorruptCheckpoint("bad magic".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::VersionMismatch { found: version, expected: VERSION });
        }
        let count = r.u32("tensor count")? as usize;
        let mut stage = None;
        let mut tensors: Vec<(String, Tensor<f32>)> = Vec::new();
        for _ in 0..count {
            let len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| Error::CorruptCheckpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let ndim = r.u32("ndim")? as usize;
            let mut dims = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                dims.push(r.u32("dims")? as usize);
            }
            let numel = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n > 0 && ndim > 0)
                .ok_or_else(|| Error::CorruptCheckpoint(format!("tensor `{name}` has dims {dims:?}")))?;
            let raw = r.take(numel.saturating_mul(4), "tensor data")?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            let t = Tensor::from_vec(&dims, data)?;
            if name == STAGE_TENSOR {
                let v = t.data()[0];
                if t.numel() != 1 || !(1.0..=3.0).contains(&v) || v.fract() != 0.0 || stage.is_some() {
                    return Err(Error::CorruptCheckpoint(format!("bad stage record {:?}", t.data())));
                }
                stage = Some(v as u8);
            } else if tensors.iter().any(|(n, _)| *n == name) {
                return Err(Error::CorruptCheckpoint(format!("duplicate tensor `{name}`")));
            } else {
                tensors.push((name, t));
            }
        }
        let mut rng_state = [0u64; 4];
        for w in &mut rng_state {
            *w = r.u64("PRNG state")?;
        }
        if r.pos != bytes.len() {
            return Err(Error::CorruptCheckpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let stage = stage.ok_or_else(|| Error::CorruptCheckpoint("missing stage record".into()))?;
        Ok(Self { stage, tensors, rng_state })
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Model dimensions implied by the stored tensor shapes.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let dim0 = |layer: &str| {
            let name = format!("{layer}.weight");
            self.tensor(&name)
                .map(|t| t.shape()[0])
                .ok_or(Error::CheckpointShape { name, found: vec![], expected: vec![] })
        };
        let defaults = ModelConfig::default();
        let hidden_channels = match self.tensor(&format!("{}.weight", names::INPUT_GATE)) {
            Some(t) => t.shape()[0],
            None => defaults.hidden_channels,
        };
        Ok(ModelConfig {
            feature_channels: dim0(names::STEM2)?,
            hidden_channels,
            num_classes: dim0(names::APPEARANCE_HEAD)?,
        })
    }

    /// Rebuilds the model after checking every tensor against the expected
    /// shape manifest. Appearance parameters are required; memory and gate
    /// groups must each be complete or absent, and gates need memory.
    pub fn to_model<T: Scalar>(&self) -> Result<SegModel<T>> {
        let cfg = self.model_config()?;
        let manifest = parameter_manifest(&cfg);
        for (name, t) in &self.tensors {
            match manifest.iter().find(|(n, _)| n == name) {
                Some((_, shape)) if shape.as_slice() == t.shape() => {}
                Some((_, shape)) => {
                    return Err(Error::CheckpointShape {
                        name: name.clone(),
                        found: t.shape().to_vec(),
                        expected: shape.clone(),
                    })
                }
                None => {
                    return Err(Error::CheckpointShape {
                        name: name.clone(),
                        found: t.shape().to_vec(),
                        expected: vec![],
                    })
                }
            }
        }
        let has_group = |prefix: &str| manifest.iter().any(|(n, _)| n.starts_with(prefix) && self.tensor(n).is_some());
        let memory = has_group(names::MEMORY_PREFIX);
        let gates = has_group(names::GATES_PREFIX);
        let mut params = ParamSet::new();
        for (name, shape) in &manifest {
            let wanted = name.starts_with(names::APPEARANCE_PREFIX)
                || (memory && name.starts_with(names::MEMORY_PREFIX))
                || (gates && name.starts_with(names::GATES_PREFIX));
            if !wanted {
                continue;
            }
            let t = self.tensor(name).ok_or_else(|| Error::CheckpointShape {
                name: name.clone(),
                found: vec![],
                expected: shape.clone(),
            })?;
            params.insert(name.clone(), t.cast::<T>())?;
        }
        if gates && !memory {
            return Err(Error::CheckpointShape {
                name: format!("{}.weight", names::INPUT_GATE),
                found: vec![],
                expected: vec![cfg.hidden_channels],
            });
        }
        Ok(SegModel::from_params(cfg, params))
    }
}

pub fn save_checkpoint<T: Scalar>(model: &SegModel<T>, stage: u8, rng_state: [u64; 4], path: &Path) -> Result<()> {
    fs::write(path, Checkpoint::from_model(model, stage, rng_state).encode())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::decode(&fs::read(path)?)
}
