//! Binary checkpoints.
//!
//! ```text
//! b"DFARCKPT"  u32 LE format version  u64 LE header length
//! header       UTF-8 JSON (CheckpointHeader)
//! payload      parameters back to back, little-endian, in header order
//! ```
//!
//! Parameter names follow `module/submodule/layer/{weight,bias}`.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DFARCKPT";
pub const FORMAT_VERSION: u32 = 1;

/// Offset-channel convention of every deformable layer.
pub const OFFSET_LAYOUT: &str =
    "per deform group g and tap k (row-major over the kernel): channel g*2*K*K + 2k = dy, g*2*K*K + 2k + 1 = dx; mask channel g*K*K + k";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// 128-bit word position, decimal.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad rng word position `{}`", self.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub dtype: String,
    pub config: TrainConfig,
    pub iteration: u64,
    pub epoch: usize,
    pub rng: RngState,
    pub offset_layout: String,
    pub params: Vec<ParamEntry>,
}

/// A model together with its training configuration and progress.
pub struct Checkpoint<T> {
    pub config: TrainConfig,
    pub model: Model<T>,
    pub iteration: u64,
    pub epoch: usize,
    pub rng: RngState,
}

pub fn to_bytes<T: Scalar>(
    config: &TrainConfig,
    model: &Model<T>,
    iteration: u64,
    epoch: usize,
    rng: &RngState,
) -> Result<Vec<u8>> {
    let mut params = Vec::with_capacity(model.store.len());
    let mut payload = Vec::with_capacity(model.num_parameters() * T::BYTES);
    for (_, p) in model.store.iter() {
        params.push(ParamEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset: payload.len(),
        });
        for &v in p.value.data() {
            v.write_le(&mut payload);
        }
    }
    let header = CheckpointHeader {
        dtype: T::DTYPE.into(),
        config: config.clone(),
        iteration,
        epoch,
        rng: rng.clone(),
        offset_layout: OFFSET_LAYOUT.into(),
        params,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

fn split(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8])> {
    let bad = |m: &str| Error::Checkpoint(m.into());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let json = bytes.get(20..20 + len).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(json)?;
    Ok((header, &bytes[20 + len..]))
}

pub fn read_header(bytes: &[u8]) -> Result<CheckpointHeader> {
    split(bytes).map(|(h, _)| h)
}

pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let (header, payload) = split(bytes)?;
    if header.dtype != T::DTYPE {
        return Err(Error::Checkpoint(format!("stored as {}, requested {}", header.dtype, T::DTYPE)));
    }
    let cfg = header.config;
    cfg.validate()?;
    let mut model = Model::<T>::new(cfg.frames, &cfg.model, cfg.ablation, &mut ChaCha8Rng::seed_from_u64(0))?;
    if header.params.len() != model.store.len() {
        return Err(Error::Checkpoint(format!(
            "{} parameters stored, model has {}",
            header.params.len(),
            model.store.len()
        )));
    }
    for e in &header.params {
        let id = model
            .store
            .find(&e.name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{}`", e.name)))?;
        if model.store.value(id).shape() != e.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "`{}` has shape {:?}, model expects {:?}",
                e.name,
                e.shape,
                model.store.value(id).shape()
            )));
        }
        let n: usize = e.shape.iter().product();
        let raw = payload
            .get(e.offset..e.offset + n * T::BYTES)
            .ok_or_else(|| Error::Checkpoint(format!("payload truncated at `{}`", e.name)))?;
        let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
        model.store.set(id, Tensor::from_vec(&e.shape, data)?)?;
    }
    Ok(Checkpoint {
        config: cfg,
        model,
        iteration: header.iteration,
        epoch: header.epoch,
        rng: header.rng,
    })
}

pub fn save<T: Scalar>(
    path: &Path,
    config: &TrainConfig,
    model: &Model<T>,
    iteration: u64,
    epoch: usize,
    rng: &RngState,
) -> Result<()> {
    let bytes = to_bytes(config, model, iteration, epoch, rng)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}
