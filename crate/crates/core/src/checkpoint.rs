//! `.cpm` checkpoint files.
//!
//! Layout: magic `CPRUNE01`, `u32` LE header length, JSON header, then every
//! tensor of [`ToyDenoiser::named_params`] as row-major little-endian `f32`
//! in canonical order with no padding. The header lists each tensor's name,
//! shape, byte offset (relative to the payload start) and element count.
//!
//! `fingerprint` identifies the trained model and is carried unchanged
//! through pruning; `provenance` accumulates one record per surgery pass.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::{ModelConfig, ScheduleParams, ToyDataset, ToyDenoiser, TrainReport};
use crate::error::{Error, Result};
use crate::header;
use crate::tensor::{f32_from_le_bytes, f32_to_le_bytes, Matrix};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CPRUNE01";
pub const CHECKPOINT_VERSION: u32 = 1;
const KIND: &str = "checkpoint";

/// Catalog entry for one prunable FFN layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerInfo {
    pub name: String,
    pub d: usize,
    pub d_hidden: usize,
}

/// Audit record of one surgery pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneRecord {
    pub concept: String,
    pub k_percent: f64,
    pub t_hat: usize,
    pub mask_fingerprint: String,
    pub inverted: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    offset: usize,
    len: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    fingerprint: String,
    config: ModelConfig,
    schedule: ScheduleParams,
    dataset: ToyDataset,
    layers: Vec<LayerInfo>,
    tensors: Vec<TensorEntry>,
    provenance: Vec<PruneRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    training: Option<TrainReport>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ToyDenoiser,
    pub dataset: ToyDataset,
    pub fingerprint: String,
    pub provenance: Vec<PruneRecord>,
    pub training: Option<TrainReport>,
}

impl Checkpoint {
    /// Wraps a freshly trained model; the fingerprint is the SHA-256 of its
    /// parameter payload.
    pub fn new(model: ToyDenoiser, dataset: ToyDataset) -> Self {
        let fingerprint = header::sha256_hex(&payload_bytes(&model));
        Self {
            model,
            dataset,
            fingerprint,
            provenance: Vec::new(),
            training: None,
        }
    }

    pub fn with_training(mut self, report: TrainReport) -> Self {
        self.training = Some(report);
        self
    }

    pub fn layer_catalog(&self) -> Vec<LayerInfo> {
        self.model
            .blocks
            .iter()
            .enumerate()
            .map(|(l, b)| LayerInfo {
                name: crate::diffusion::ffn_layer_name(l),
                d: b.d_model(),
                d_hidden: b.d_hidden(),
            })
            .collect()
    }

    /// Second FFN projection of the named layer.
    pub fn w2(&self, layer: &str) -> Result<&Matrix> {
        let idx = self.layer_index(layer)?;
        Ok(&self.model.blocks[idx].w2)
    }

    pub fn layer_index(&self, layer: &str) -> Result<usize> {
        self.model
            .layer_names()
            .iter()
            .position(|n| n == layer)
            .ok_or_else(|| Error::Compatibility(format!("checkpoint has no layer {layer:?}")))
    }

    /// SHA-256 of the current parameter payload.
    pub fn content_hash(&self) -> String {
        header::sha256_hex(&payload_bytes(&self.model))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut offset = 0;
        for (name, m) in self.model.named_params() {
            let len = m.as_slice().len();
            tensors.push(TensorEntry {
                name,
                shape: [m.rows(), m.cols()],
                offset,
                len,
            });
            offset += len * 4;
        }
        let head = CheckpointHeader {
            version: CHECKPOINT_VERSION,
            fingerprint: self.fingerprint.clone(),
            config: self.model.config,
            schedule: self.model.schedule_params,
            dataset: self.dataset.clone(),
            layers: self.layer_catalog(),
            tensors,
            provenance: self.provenance.clone(),
            training: self.training.clone(),
        };
        header::encode(CHECKPOINT_MAGIC, &head, &payload_bytes(&self.model))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (head, payload): (CheckpointHeader, _) =
            header::decode(KIND, CHECKPOINT_MAGIC, bytes)?;
        if head.version != CHECKPOINT_VERSION {
            return Err(Error::format(KIND, format!("unsupported version {}", head.version)));
        }
        head.dataset.validate()?;
        let mut model = ToyDenoiser::zeros(head.config)?.with_schedule(head.schedule)?;
        let expected: Vec<(String, (usize, usize))> = model
            .named_params()
            .into_iter()
            .map(|(n, m)| (n, m.shape()))
            .collect();
        if expected.len() != head.tensors.len() {
            return Err(Error::format(
                KIND,
                format!("{} tensors listed, {} expected", head.tensors.len(), expected.len()),
            ));
        }
        let mut cursor = 0;
        let mut loaded = Vec::with_capacity(expected.len());
        for ((name, shape), entry) in expected.iter().zip(&head.tensors) {
            if &entry.name != name || (entry.shape[0], entry.shape[1]) != *shape {
                return Err(Error::format(
                    KIND,
                    format!(
                        "tensor {} {:?} where {name} {shape:?} expected",
                        entry.name, entry.shape
                    ),
                ));
            }
            if entry.offset != cursor || entry.len != shape.0 * shape.1 {
                return Err(Error::format(KIND, format!("bad offset or length for {name}")));
            }
            let end = cursor + entry.len * 4;
            let bytes = payload
                .get(cursor..end)
                .ok_or_else(|| Error::format(KIND, format!("payload truncated in {name}")))?;
            let data = f32_from_le_bytes(bytes);
            loaded.push(Matrix::new(shape.0, shape.1, data).map_err(|_| {
                Error::format(KIND, format!("non-finite value in {name}"))
            })?);
            cursor = end;
        }
        if cursor != payload.len() {
            return Err(Error::format(
                KIND,
                format!("{} trailing payload bytes", payload.len() - cursor),
            ));
        }
        for (dst, src) in model.params_mut().into_iter().zip(loaded) {
            *dst = src;
        }
        let ckpt = Self {
            model,
            dataset: head.dataset,
            fingerprint: head.fingerprint,
            provenance: head.provenance,
            training: head.training,
        };
        if ckpt.layer_catalog() != head.layers {
            return Err(Error::format(KIND, "layer catalog disagrees with tensors"));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        header::write_atomic(path.as_ref(), &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&header::read_file(path.as_ref())?)
    }
}

fn payload_bytes(model: &ToyDenoiser) -> Vec<u8> {
    let mut out = Vec::with_capacity(model.param_count() * 4);
    for (_, m) in model.named_params() {
        f32_to_le_bytes(m.as_slice(), &mut out);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    fn ckpt() -> Checkpoint {
        let cfg = ModelConfig {
            d_model: 4,
            d_hidden: 8,
            ..ModelConfig::default()
        };
        let model = ToyDenoiser::init(cfg, &mut Rng::new(2)).unwrap();
        Checkpoint::new(model, ToyDataset::default())
    }

    #[test]
    fn round_trip_is_exact() {
        let c = ckpt();
        let bytes = c.to_bytes().unwrap();
        assert_eq!(&bytes[..8], b"CPRUNE01");
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.content_hash(), c.fingerprint);
    }

    #[test]
    fn payload_follows_canonical_order() {
        let c = ckpt();
        let bytes = c.to_bytes().unwrap();
        let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let payload = &bytes[12 + len..];
        let first = f32::from_le_bytes(payload[..4].try_into().unwrap());
        assert_eq!(first, c.model.input_w.get(0, 0));
        let last = f32::from_le_bytes(payload[payload.len() - 4..].try_into().unwrap());
        assert_eq!(last, c.model.output_b.get(0, 1));
    }

    #[test]
    fn rejects_corruption() {
        let c = ckpt();
        let bytes = c.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&magic),
            Err(Error::Format { .. })
        ));
        let mut nan = bytes;
        let n = nan.len();
        nan[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(Checkpoint::from_bytes(&nan).is_err());
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.cpm");
        let c = ckpt();
        c.save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap(), c);
        assert!(matches!(
            Checkpoint::load(dir.path().join("missing.cpm")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn catalog_lists_ffn_layers() {
        let c = ckpt();
        let cat = c.layer_catalog();
        assert_eq!(cat.len(), 2);
        assert_eq!(cat[1], LayerInfo { name: "blocks.1.ffn".into(), d: 4, d_hidden: 8 });
        assert_eq!(c.w2("blocks.0.ffn").unwrap().shape(), (4, 8));
        assert!(c.w2("blocks.9.ffn").is_err());
    }
}
