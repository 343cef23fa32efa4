// SPDX-License-Identifier: MIT OR Apache-2.0

//! Bit-exact checkpoint serialization.
//!
//! Layout: magic `FVL1` | u32 LE version | u64 LE header length | UTF-8 JSON
//! header (config, provenance, ordered tensor directory with name/shape/
//! offset) | raw little-endian f32 payloads in directory order | trailing
//! u64 LE FNV-1a digest of every preceding byte. The header is authoritative:
//! loading never consults caller-side configuration.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FvError, Result};
use crate::math::tensor::Tensor;
use crate::model::{DecoderModel, ModelConfig};
use crate::util::fnv1a64;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FVL1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A deserialized checkpoint: config, provenance tag, named tensors, and the
/// content digest of its serialized form.
pub struct Checkpoint {
    pub config: ModelConfig,
    pub provenance: String,
    pub tensors: Vec<(String, Tensor)>,
    pub digest: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    provenance: String,
    tensors: Vec<DirEntry>,
}

#[derive(Serialize, Deserialize)]
struct DirEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

fn serialize_parts(
    config: &ModelConfig,
    provenance: &str,
    tensors: &[(String, &Tensor)],
) -> Result<Vec<u8>> {
    let mut dir = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, t) in tensors {
        dir.push(DirEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += (t.len() * 4) as u64;
    }
    let header = Header {
        config: config.clone(),
        provenance: provenance.to_string(),
        tensors: dir,
    };
    let header_bytes = serde_json::to_vec(&header)?;

    let mut out = Vec::with_capacity(16 + header_bytes.len() + offset as usize + 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for (_, t) in tensors {
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = fnv1a64(&out);
    out.extend_from_slice(&digest.to_le_bytes());
    Ok(out)
}

/// Serialized checkpoint bytes for a model.
pub(crate) fn model_bytes(model: &DecoderModel) -> Result<Vec<u8>> {
    serialize_parts(model.config(), model.provenance(), &model.named_tensors())
}

/// Content digest a save of this model would carry.
pub(crate) fn digest_of(model: &DecoderModel) -> u64 {
    // Serialization of an in-memory model cannot fail: shapes were validated
    // at construction.
    let bytes = model_bytes(model).expect("serializing a valid model");
    fnv1a64(&bytes[..bytes.len() - 8])
}

/// Write a model to `path`; returns the content digest.
pub fn save_checkpoint(model: &DecoderModel, path: impl AsRef<Path>) -> Result<u64> {
    let bytes = model_bytes(model)?;
    let digest = fnv1a64(&bytes[..bytes.len() - 8]);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(digest)
}

/// Read and verify a checkpoint. Magic, version, directory consistency, and
/// the trailing digest are all checked before any tensor is produced.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path.as_ref())?.read_to_end(&mut bytes)?;
    parse_checkpoint(&bytes)
}

pub(crate) fn parse_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 16 + 8 {
        return Err(FvError::Format("truncated checkpoint".into()));
    }
    if &bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(FvError::Format("bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(FvError::Format(format!(
            "version mismatch: file {version}, supported {CHECKPOINT_VERSION}"
        )));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let payload_start = 16 + header_len;
    if bytes.len() < payload_start + 8 {
        return Err(FvError::Format("truncated checkpoint header".into()));
    }
    let stored_digest = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
    let computed = fnv1a64(&bytes[..bytes.len() - 8]);
    if stored_digest != computed {
        return Err(FvError::Format(format!(
            "digest mismatch: stored {stored_digest:016x}, computed {computed:016x}"
        )));
    }
    let header: Header = serde_json::from_slice(&bytes[16..payload_start])
        .map_err(|e| FvError::Format(format!("malformed header: {e}")))?;
    let payload = &bytes[payload_start..bytes.len() - 8];

    let mut tensors = Vec::with_capacity(header.tensors.len());
    let mut expect_offset = 0u64;
    for entry in &header.tensors {
        if entry.offset != expect_offset {
            return Err(FvError::Format(format!(
                "tensor {} offset {} != expected {expect_offset}",
                entry.name, entry.offset
            )));
        }
        let n: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + n * 4;
        if end > payload.len() {
            return Err(FvError::Format(format!(
                "tensor {} overruns payload",
                entry.name
            )));
        }
        let data: Vec<f32> = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((entry.name.clone(), Tensor::new(entry.shape.clone(), data)?));
        expect_offset = end as u64;
    }
    if expect_offset as usize != payload.len() {
        return Err(FvError::Format("payload longer than directory".into()));
    }

    Ok(Checkpoint {
        config: header.config,
        provenance: header.provenance,
        tensors,
        digest: computed,
    })
}

impl Checkpoint {
    /// Rebuild the model this checkpoint describes.
    pub fn to_model(&self) -> Result<DecoderModel> {
        let map: BTreeMap<String, Tensor> = self
            .tensors
            .iter()
            .map(|(n, t)| (n.clone(), t.clone()))
            .collect();
        DecoderModel::from_named(self.config.clone(), self.provenance.clone(), map)
    }
}

/// Load a checkpoint file straight into a model.
pub fn load_model(path: impl AsRef<Path>) -> Result<(DecoderModel, u64)> {
    let ckpt = load_checkpoint(path)?;
    let model = ckpt.to_model()?;
    Ok((model, ckpt.digest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::DetRng;

    fn tiny_model(seed: u64) -> DecoderModel {
        let config = ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_mlp: 16,
            vocab_size: 13,
            max_seq: 6,
        };
        let mut rng = DetRng::new(seed);
        DecoderModel::init_random(&config, &mut rng).unwrap()
    }

    #[test]
    fn round_trip_bit_identical() {
        let model = tiny_model(1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.fvckpt");
        let digest = save_checkpoint(&model, &path).unwrap();
        let (loaded, loaded_digest) = load_model(&path).unwrap();
        assert_eq!(digest, loaded_digest);
        assert_eq!(digest, model.digest());
        for ((an, at), (bn, bt)) in model
            .named_tensors()
            .iter()
            .zip(loaded.named_tensors().iter())
        {
            assert_eq!(an, bn);
            assert!(at.bit_eq(bt), "tensor {an} differs");
        }
        assert_eq!(loaded.provenance(), "base");
    }

    #[test]
    fn corrupt_payload_byte_fails_digest() {
        let model = tiny_model(2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.fvckpt");
        save_checkpoint(&model, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x01;
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(format!("{err}").contains("digest mismatch"), "{err}");
    }

    #[test]
    fn truncated_file_rejected() {
        let model = tiny_model(3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.fvckpt");
        save_checkpoint(&model, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 20]).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn version_mismatch_rejected() {
        let model = tiny_model(4);
        let bytes = model_bytes(&model).unwrap();
        let mut bad = bytes.clone();
        bad[4] = 9; // bump version field
        assert!(parse_checkpoint(&bad).is_err());
    }

    #[test]
    fn header_config_is_authoritative() {
        let model = tiny_model(5);
        let bytes = model_bytes(&model).unwrap();
        let ckpt = parse_checkpoint(&bytes).unwrap();
        // The parsed config comes from the file header, not from any caller
        // state; rebuildable into an identical model.
        assert_eq!(ckpt.config, *model.config());
        let rebuilt = ckpt.to_model().unwrap();
        assert_eq!(rebuilt.digest(), model.digest());
    }

    #[test]
    fn provenance_tag_changes_digest() {
        let mut model = tiny_model(6);
        let base = model.digest();
        model.set_provenance("finetuned");
        assert_ne!(base, model.digest());
    }
}
