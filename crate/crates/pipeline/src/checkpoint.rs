//! Binary checkpoints.
//!
//! Layout: the 6-byte magic `UWADN1`, the header length as a little-endian
//! `u64`, a JSON header, then the payload. The header carries the model
//! configuration, free-form metadata, a manifest of `(name, shape, dtype,
//! offset, length)` per tensor and the SHA-256 of the payload. The payload is
//! every tensor's values as little-endian `f32`, back to back in manifest
//! order.
//!
//! Serialization is deterministic, so loading and re-saving a checkpoint
//! reproduces its bytes exactly.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use uwadn_core::selector::{SelectorConfig, SelectorModel};
use uwadn_core::tensor::Tensor;
use uwadn_core::wab::{WabConfig, WabModel};
use uwadn_core::Error as CoreError;

use crate::error::{IoContext, PipelineError, Result};

pub const MAGIC: &[u8; 6] = b"UWADN1";
const FORMAT_VERSION: u32 = 1;
const DTYPE: &str = "f32le";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "config", rename_all = "lowercase")]
pub enum ModelConfig {
    Wab(WabConfig),
    Selector(SelectorConfig),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the payload.
    pub offset: u64,
    /// Byte length.
    pub length: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format: u32,
    pub model: ModelConfig,
    /// Run metadata such as the training seed or the sparsity target.
    pub meta: BTreeMap<String, serde_json::Value>,
    pub tensors: Vec<TensorEntry>,
    pub payload_bytes: u64,
    /// Hex SHA-256 of the payload.
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    header: Header,
    payload: Vec<u8>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn build(model: ModelConfig, meta: BTreeMap<String, serde_json::Value>, params: Vec<(String, &Tensor<f32>)>) -> Checkpoint {
    let mut payload = Vec::new();
    let mut tensors = Vec::with_capacity(params.len());
    for (name, t) in params {
        let offset = payload.len() as u64;
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            dtype: DTYPE.into(),
            offset,
            length: payload.len() as u64 - offset,
        });
    }
    Checkpoint {
        header: Header {
            format: FORMAT_VERSION,
            model,
            meta,
            tensors,
            payload_bytes: payload.len() as u64,
            sha256: sha256_hex(&payload),
        },
        payload,
    }
}

fn compare_wab(expected: &WabConfig, found: &WabConfig) -> Vec<String> {
    let mut fields = Vec::new();
    let mut check = |name: &str, same: bool, e: String, f: String| {
        if !same {
            fields.push(format!("{name}: expected {e}, checkpoint has {f}"));
        }
    };
    check("omega", expected.omega == found.omega, expected.omega.to_string(), found.omega.to_string());
    check("ratios", expected.ratios == found.ratios, format!("{:?}", expected.ratios), format!("{:?}", found.ratios));
    check("blocks", expected.blocks == found.blocks, expected.blocks.to_string(), found.blocks.to_string());
    check("c_de", expected.c_de == found.c_de, expected.c_de.to_string(), found.c_de.to_string());
    check("kernel", expected.kernel == found.kernel, expected.kernel.to_string(), found.kernel.to_string());
    check("classes", expected.classes == found.classes, expected.classes.to_string(), found.classes.to_string());
    fields
}

impl Checkpoint {
    pub fn from_wab(model: &WabModel<f32>, meta: BTreeMap<String, serde_json::Value>) -> Self {
        build(ModelConfig::Wab(model.config().clone()), meta, model.named_params())
    }

    pub fn from_selector(model: &SelectorModel<f32>, meta: BTreeMap<String, serde_json::Value>) -> Self {
        build(ModelConfig::Selector(model.config().clone()), meta, model.named_params())
    }

    pub fn header(&self) -> &Header {
        &self.header
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    pub fn checksum(&self) -> &str {
        &self.header.sha256
    }

    pub fn meta(&self, key: &str) -> Option<&serde_json::Value> {
        self.header.meta.get(key)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + header.len() + self.payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&self.payload);
        Ok(out)
    }

    /// Parses and validates: magic, header, manifest bounds, then checksum.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(PipelineError::BadMagic(bytes[..bytes.len().min(MAGIC.len())].to_vec()));
        }
        let rest = &bytes[MAGIC.len()..];
        if rest.len() < 8 {
            return Err(PipelineError::Header("truncated before the header length".into()));
        }
        let header_len = u64::from_le_bytes(rest[..8].try_into().expect("8 bytes"));
        let rest = &rest[8..];
        if header_len > rest.len() as u64 {
            return Err(PipelineError::Header(format!(
                "header length {header_len} exceeds the remaining {} bytes",
                rest.len()
            )));
        }
        let (head, payload) = rest.split_at(header_len as usize);
        let header: Header = serde_json::from_slice(head).map_err(|e| PipelineError::Header(e.to_string()))?;
        if header.format != FORMAT_VERSION {
            return Err(PipelineError::Header(format!("unsupported format version {}", header.format)));
        }
        if header.payload_bytes != payload.len() as u64 {
            return Err(PipelineError::ManifestOverflow(format!(
                "header declares {} payload bytes, file has {}",
                header.payload_bytes,
                payload.len()
            )));
        }
        check_manifest(&header.tensors, payload.len() as u64)?;
        let actual = sha256_hex(payload);
        if actual != header.sha256 {
            return Err(PipelineError::Checksum {
                expected: header.sha256,
                actual,
            });
        }
        Ok(Self {
            header,
            payload: payload.to_vec(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).at(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).at(path)?)
    }

    fn tensors(&self) -> Vec<(String, Tensor<f32>)> {
        self.header
            .tensors
            .iter()
            .map(|e| {
                let bytes = &self.payload[e.offset as usize..(e.offset + e.length) as usize];
                let data = bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect();
                // shape and length were checked against each other at load
                (e.name.clone(), Tensor::new(&e.shape, data).expect("validated manifest"))
            })
            .collect()
    }

    pub fn wab(&self) -> Result<WabModel<f32>> {
        let ModelConfig::Wab(config) = &self.header.model else {
            return Err(PipelineError::Stage("checkpoint holds a selector, not a backbone".into()));
        };
        let mut model = WabModel::new(config.clone(), 0)?;
        model.load_params(self.tensors())?;
        Ok(model)
    }

    /// Loads the backbone, first checking its configuration field by field.
    pub fn wab_expecting(&self, expected: &WabConfig) -> Result<WabModel<f32>> {
        if let ModelConfig::Wab(found) = &self.header.model {
            let fields = compare_wab(expected, found);
            if !fields.is_empty() {
                return Err(CoreError::Compatibility(fields).into());
            }
        }
        self.wab()
    }

    pub fn selector(&self) -> Result<SelectorModel<f32>> {
        let ModelConfig::Selector(config) = &self.header.model else {
            return Err(PipelineError::Stage("checkpoint holds a backbone, not a selector".into()));
        };
        let mut model = SelectorModel::new(config.clone(), 0)?;
        model.load_params(self.tensors())?;
        Ok(model)
    }
}

fn check_manifest(entries: &[TensorEntry], payload_len: u64) -> Result<()> {
    let mut spans: Vec<(u64, u64, &str)> = Vec::with_capacity(entries.len());
    for e in entries {
        if e.dtype != DTYPE {
            return Err(PipelineError::Header(format!("tensor {} has unsupported dtype {}", e.name, e.dtype)));
        }
        let numel: u64 = e.shape.iter().map(|&d| d as u64).product();
        if numel.checked_mul(4) != Some(e.length) {
            return Err(PipelineError::ManifestOverflow(format!(
                "tensor {} of shape {:?} declares {} bytes",
                e.name, e.shape, e.length
            )));
        }
        match e.offset.checked_add(e.length) {
            Some(end) if end <= payload_len => spans.push((e.offset, end, &e.name)),
            _ => {
                return Err(PipelineError::ManifestOverflow(format!(
                    "tensor {} at {}+{} exceeds the {payload_len}-byte payload",
                    e.name, e.offset, e.length
                )))
            }
        }
    }
    spans.sort_unstable();
    for pair in spans.windows(2) {
        if pair[1].0 < pair[0].1 {
            return Err(PipelineError::ManifestOverflow(format!("tensors {} and {} overlap", pair[0].2, pair[1].2)));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> WabConfig {
        WabConfig {
            omega: 10,
            blocks: 1,
            c_de: 4,
            ..WabConfig::desk()
        }
    }

    fn sample() -> Checkpoint {
        let m = WabModel::<f32>::new(tiny(), 3).unwrap();
        Checkpoint::from_wab(&m, BTreeMap::from([("seed".into(), 3.into())]))
    }

    #[test]
    fn bytes_round_trip() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[..6], MAGIC);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn model_round_trip_is_bit_exact() {
        let m = WabModel::<f32>::new(tiny(), 5).unwrap();
        let back = Checkpoint::from_wab(&m, BTreeMap::new()).wab().unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn bad_magic() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(PipelineError::BadMagic(_))));
        assert!(matches!(Checkpoint::from_bytes(b"UW"), Err(PipelineError::BadMagic(_))));
    }

    #[test]
    fn overlapping_or_oversized_manifest() {
        let mut ck = sample();
        ck.header.tensors[1].offset = 0;
        let bytes = ck.to_bytes().unwrap();
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(PipelineError::ManifestOverflow(_))));

        let mut ck = sample();
        let last = ck.header.tensors.len() - 1;
        ck.header.tensors[last].offset += 4;
        let bytes = ck.to_bytes().unwrap();
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(PipelineError::ManifestOverflow(_))));
    }

    #[test]
    fn wrong_kind_is_a_stage_error() {
        assert!(matches!(sample().selector(), Err(PipelineError::Stage(_))));
    }
}
