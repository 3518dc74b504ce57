//! Versioned binary checkpoint.
//!
//! Layout: 8-byte magic, `u32` version, `u64` manifest length, JSON manifest,
//! then every tensor's raw little-endian scalars back to back at the offsets
//! the manifest lists. [`Checkpoint::save`] also writes the manifest alone
//! to a `.json` sidecar for inspection; loading reads only the binary.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::arch::{ArchSpec, Network};
use crate::error::{Error, Result};
use crate::pipeline::Normalization;
use crate::tensor::{DType, Scalar, Shape, Tensor};

use super::features::manifest_path;
use super::sgd::TrainConfig;
use super::Trainer;

pub const MAGIC: &[u8; 8] = b"REGNETCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorKind {
    Param,
    Momentum,
    Buffer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub kind: TensorKind,
    pub shape: Shape,
    pub offset: u64,
    pub bytes: u64,
}

/// Data-order generator position: ChaCha8 seeded with `seed`, stream `epoch`,
/// `batch` batches already consumed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub algorithm: String,
    pub seed: u64,
    pub epoch: usize,
    pub batch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub spec: ArchSpec,
    pub dtype: DType,
    pub config: TrainConfig,
    pub norm: Normalization,
    pub epoch: usize,
    pub global_step: usize,
    pub rng: RngState,
    pub tensors: Vec<TensorEntry>,
}

/// A decoded checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub payload: Vec<u8>,
}

impl Checkpoint {
    pub fn capture<T: Scalar>(t: &Trainer<T>) -> Self {
        let mut tensors = Vec::new();
        let mut payload = Vec::new();
        let mut put = |name: &str, kind: TensorKind, v: &Tensor<T>| {
            let offset = payload.len() as u64;
            for &x in v.data() {
                x.write_le(&mut payload);
            }
            tensors.push(TensorEntry {
                name: name.to_owned(),
                kind,
                shape: v.shape(),
                offset,
                bytes: payload.len() as u64 - offset,
            });
        };
        let store = &t.net.store;
        for p in store.params() {
            put(&p.name, TensorKind::Param, &p.value);
        }
        for p in store.params() {
            put(&p.name, TensorKind::Momentum, &p.momentum);
        }
        for b in store.buffers() {
            put(&b.name, TensorKind::Buffer, &b.value);
        }
        Checkpoint {
            manifest: Manifest {
                version: VERSION,
                spec: t.net.spec.clone(),
                dtype: T::DTYPE,
                config: t.cfg.clone(),
                norm: t.norm,
                epoch: t.epoch,
                global_step: t.global_step,
                rng: RngState {
                    algorithm: "chacha8".into(),
                    seed: t.cfg.seed,
                    epoch: t.epoch,
                    batch: t.batch,
                },
                tensors,
            },
            payload,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let json = serde_json::to_vec_pretty(&self.manifest)
            .map_err(|e| Error::Format(format!("checkpoint manifest: {e}")))?;
        let mut out = Vec::with_capacity(20 + json.len() + self.payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&self.payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {version} unsupported (expected {VERSION})"
            )));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let end = 20usize
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Format("checkpoint manifest truncated".into()))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[20..end])
            .map_err(|e| Error::Format(format!("checkpoint manifest: {e}")))?;
        let payload = bytes[end..].to_vec();
        for t in &manifest.tensors {
            let want = (t.shape.numel() * manifest.dtype.size_of()) as u64;
            if t.bytes != want || t.offset + t.bytes > payload.len() as u64 {
                return Err(Error::Format(format!(
                    "checkpoint tensor {} is truncated or mis-sized",
                    t.name
                )));
            }
        }
        Ok(Checkpoint { manifest, payload })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
        let sidecar = manifest_path(path);
        let json = serde_json::to_string_pretty(&self.manifest)
            .map_err(|e| Error::Format(format!("checkpoint manifest: {e}")))?;
        fs::write(&sidecar, json).map_err(|e| Error::io(&sidecar, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    fn tensor<T: Scalar>(&self, e: &TensorEntry) -> Result<Tensor<T>> {
        let size = T::DTYPE.size_of();
        let raw = &self.payload[e.offset as usize..(e.offset + e.bytes) as usize];
        let data = raw.chunks_exact(size).map(T::read_le).collect();
        Tensor::from_vec(e.shape, data)
    }

    /// Overwrite `t`'s parameters, momenta, buffers and position. Fails
    /// without modifying anything if the spec, dtype or tensor set differ.
    pub fn restore<T: Scalar>(&self, t: &mut Trainer<T>) -> Result<()> {
        let m = &self.manifest;
        if m.spec != t.net.spec {
            return Err(Error::invalid(format!(
                "checkpoint is for {} but the network is {}",
                m.spec, t.net.spec
            )));
        }
        if m.dtype != T::DTYPE {
            return Err(Error::invalid(format!(
                "checkpoint holds {:?} tensors, network uses {:?}",
                m.dtype,
                T::DTYPE
            )));
        }
        let store = &t.net.store;
        let expected = 2 * store.params().len() + store.buffers().len();
        if m.tensors.len() != expected {
            return Err(Error::invalid(
                "checkpoint tensor set does not match the network",
            ));
        }
        let mut staged = store.clone();
        for e in &m.tensors {
            let v = self.tensor::<T>(e)?;
            let mismatch = || {
                Error::invalid(format!(
                    "checkpoint tensor {} does not fit the network",
                    e.name
                ))
            };
            match e.kind {
                TensorKind::Param | TensorKind::Momentum => {
                    let id = staged.find_param(&e.name).ok_or_else(mismatch)?;
                    let p = staged.param_mut(id);
                    if p.value.shape() != v.shape() {
                        return Err(mismatch());
                    }
                    if e.kind == TensorKind::Param {
                        p.value = v;
                    } else {
                        p.momentum = v;
                    }
                }
                TensorKind::Buffer => {
                    let id = staged.find_buffer(&e.name).ok_or_else(mismatch)?;
                    let b = staged.buffer_mut(id);
                    if b.value.shape() != v.shape() {
                        return Err(mismatch());
                    }
                    b.value = v;
                }
            }
        }
        t.net.store = staged;
        t.cfg = m.config.clone();
        t.norm = m.norm;
        t.epoch = m.rng.epoch;
        t.batch = m.rng.batch;
        t.global_step = m.global_step;
        Ok(())
    }

    /// Rebuild a trainer from the checkpoint alone.
    pub fn into_trainer<T: Scalar>(&self) -> Result<Trainer<T>> {
        let net = Network::<T>::build(&self.manifest.spec, 0)?;
        let mut t = Trainer::new(net, self.manifest.config.clone(), self.manifest.norm)?;
        self.restore(&mut t)?;
        Ok(t)
    }
}
