//! Checkpoints and their binary file format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "CFTL" | u32 version | u32 len + JSON {config, vocab, provenance}
//! | u32 tensor count | per tensor: u32 len + name, u32 rank, u64 dims.., u64 byte offset
//! | f32 payload | u32 CRC32 of everything before it
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use super::params::{Layout, ParamSet};
use super::tensor::Real;
use super::EngineError;
use crate::corpus::Vocab;

pub const MAGIC: &[u8; 4] = b"CFTL";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn bits_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Provenance {
    pub phase_tag: String,
    pub parent_checkpoint_id: Option<String>,
    pub dataset_id: Option<String>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub tensors: BTreeMap<String, Tensor>,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab: Vocab,
    provenance: Provenance,
}

impl Checkpoint {
    /// Freshly initialised base model sized to `vocab`.
    pub fn init(config: &ModelConfig, vocab: &Vocab, seed: u64) -> Result<Self, EngineError> {
        let config = ModelConfig {
            vocab_size: config.vocab_size.max(vocab.len()),
            ..config.clone()
        };
        config.validate()?;
        let layout = Arc::new(Layout::new(&config));
        let params = ParamSet::<f32>::init(layout, seed);
        Ok(Self::from_params(
            &params,
            vocab.clone(),
            Provenance {
                phase_tag: "base".into(),
                parent_checkpoint_id: None,
                dataset_id: None,
                seed,
            },
        ))
    }

    /// All tensors zero (layer-norm gains included).
    pub fn zeros(config: &ModelConfig, vocab: &Vocab) -> Result<Self, EngineError> {
        let config = ModelConfig {
            vocab_size: config.vocab_size.max(vocab.len()),
            ..config.clone()
        };
        config.validate()?;
        let layout = Arc::new(Layout::new(&config));
        Ok(Self::from_params(
            &ParamSet::<f32>::zeros(layout),
            vocab.clone(),
            Provenance::default(),
        ))
    }

    pub fn from_params<F: Real>(params: &ParamSet<F>, vocab: Vocab, provenance: Provenance) -> Self {
        let tensors = params
            .layout
            .specs()
            .iter()
            .zip(&params.data)
            .map(|(spec, data)| {
                (
                    spec.name.clone(),
                    Tensor {
                        shape: spec.shape.clone(),
                        data: data.iter().map(|v| v.f64() as f32).collect(),
                    },
                )
            })
            .collect();
        Self {
            config: params.layout.config.clone(),
            vocab,
            tensors,
            provenance,
        }
    }

    pub fn layout(&self) -> Layout {
        Layout::new(&self.config)
    }

    /// Tensors in compute precision, validated against the architecture.
    pub fn params<F: Real>(&self) -> Result<ParamSet<F>, EngineError> {
        self.config.validate()?;
        let layout = Arc::new(self.layout());
        self.check_tensors(&layout)?;
        let data = layout
            .specs()
            .iter()
            .map(|s| super::tensor::convert::<f32, F>(&self.tensors[&s.name].data))
            .collect();
        Ok(ParamSet { layout, data })
    }

    fn check_tensors(&self, layout: &Layout) -> Result<(), EngineError> {
        for spec in layout.specs() {
            let t = self
                .tensors
                .get(&spec.name)
                .ok_or_else(|| EngineError::MissingTensor(spec.name.clone()))?;
            if t.shape != spec.shape || t.data.len() != spec.numel() {
                return Err(EngineError::ShapeMismatch {
                    tensor: spec.name.clone(),
                    expected: spec.shape.clone(),
                    found: t.shape.clone(),
                });
            }
        }
        if let Some(extra) = self.tensors.keys().find(|k| layout.index_of(k).is_none()) {
            return Err(EngineError::UnexpectedTensor(extra.clone()));
        }
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    /// Content hash over config, vocabulary and tensor bits.
    pub fn id(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serialises"));
        h.update(serde_json::to_vec(&self.vocab).expect("vocab serialises"));
        for (name, t) in &self.tensors {
            h.update(name.as_bytes());
            for d in &t.shape {
                h.update((*d as u64).to_le_bytes());
            }
            for v in &t.data {
                h.update(v.to_le_bytes());
            }
        }
        let digest = h.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Tensor names whose presence or shape differs between the two.
    pub fn architecture_diff(&self, other: &Checkpoint) -> Vec<String> {
        let mut out = Vec::new();
        for (name, t) in &self.tensors {
            match other.tensors.get(name) {
                Some(u) if u.shape == t.shape => {}
                _ => out.push(name.clone()),
            }
        }
        out.extend(other.tensors.keys().filter(|k| !self.tensors.contains_key(*k)).cloned());
        out
    }

    /// Same architecture, same tensor bits (provenance ignored).
    pub fn tensors_bit_equal(&self, other: &Checkpoint) -> bool {
        self.config == other.config
            && self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((n1, t1), (n2, t2))| n1 == n2 && t1.bits_eq(t2))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let header = serde_json::to_vec(&Header {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            provenance: self.provenance.clone(),
        })
        .expect("header serialises");
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for d in &t.shape {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += 4 * t.data.len() as u64;
        }
        for t in self.tensors.values() {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EngineError> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(4, "magic")?;
        if magic != MAGIC {
            return Err(EngineError::BadMagic);
        }
        let version = cur.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(EngineError::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let hlen = cur.u32("config length")? as usize;
        let header: Header = serde_json::from_slice(cur.take(hlen, "config block")?)
            .map_err(|e| EngineError::Format(format!("config block: {e}")))?;
        let count = cur.u32("tensor count")? as usize;
        let mut table = Vec::with_capacity(count.min(1 << 16));
        for i in 0..count {
            let what = format!("tensor table entry {i}");
            let nlen = cur.u32(&what)? as usize;
            let name = String::from_utf8(cur.take(nlen, &what)?.to_vec())
                .map_err(|_| EngineError::Format(format!("{what}: name is not UTF-8")))?;
            let rank = cur.u32(&name)? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(cur.u64(&name)? as usize);
            }
            let offset = cur.u64(&name)? as usize;
            table.push((name, shape, offset));
        }
        let payload_start = cur.pos;
        let payload_len = bytes.len().saturating_sub(payload_start + 4);
        let mut tensors = BTreeMap::new();
        for (name, shape, offset) in table {
            let numel: usize = shape.iter().product();
            let need = numel * 4;
            if offset.checked_add(need).is_none_or(|end| end > payload_len) {
                return Err(EngineError::ByteCount {
                    tensor: name,
                    expected: need,
                    available: payload_len.saturating_sub(offset),
                });
            }
            let raw = &bytes[payload_start + offset..payload_start + offset + need];
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.insert(name, Tensor { shape, data });
        }
        if bytes.len() < payload_start + 4 {
            return Err(EngineError::Truncated("crc".into()));
        }
        let body = &bytes[..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
        let actual = crc32fast::hash(body);
        if stored != actual {
            return Err(EngineError::CrcMismatch { stored, actual });
        }
        let ckpt = Self {
            config: header.config,
            vocab: header.vocab,
            tensors,
            provenance: header.provenance,
        };
        ckpt.config.validate()?;
        ckpt.check_tensors(&ckpt.layout())?;
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), EngineError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EngineError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<(), EngineError> {
    ckpt.save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, EngineError> {
    Checkpoint::load(path)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], EngineError> {
        if self.pos + n > self.bytes.len() {
            return Err(EngineError::Truncated(what.to_string()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, EngineError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64, EngineError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Checkpoint {
        let vocab = Vocab::build(["a b c d"]);
        let cfg = ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_ff: 16,
            vocab_size: 0,
            max_seq_len: 16,
        };
        let mut c = Checkpoint::init(&cfg, &vocab, 0).unwrap();
        c.provenance.dataset_id = Some("phase1_A".into());
        c
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = small();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert!(c.tensors_bit_equal(&back));
        assert_eq!(c.provenance, back.provenance);
        assert_eq!(c.vocab, back.vocab);
        assert_eq!(c.to_bytes(), back.to_bytes());
    }

    #[test]
    fn truncated_file_names_tensor() {
        let bytes = small().to_bytes();
        let cut = &bytes[..bytes.len() - 40];
        match Checkpoint::from_bytes(cut) {
            Err(EngineError::ByteCount { tensor, .. }) => assert_eq!(tensor, "layer1.ln2"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..10]),
            Err(EngineError::Truncated(_))
        ));
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = small().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(EngineError::BadMagic)));
        let mut bytes = small().to_bytes();
        bytes[4] = 2;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(EngineError::VersionMismatch { found: 2, .. })
        ));
    }

    #[test]
    fn corrupted_payload_fails_crc() {
        let mut bytes = small().to_bytes();
        let n = bytes.len();
        bytes[n - 10] ^= 0x55;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(EngineError::CrcMismatch { .. })
        ));
    }

    #[test]
    fn shape_mismatch_names_tensor() {
        let mut c = small();
        c.tensors.get_mut("layer0.O").unwrap().shape = vec![4, 16];
        match Checkpoint::from_bytes(&c.to_bytes()) {
            Err(EngineError::ShapeMismatch { tensor, .. }) => assert_eq!(tensor, "layer0.O"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn id_tracks_content() {
        let a = small();
        let mut b = a.clone();
        assert_eq!(a.id(), b.id());
        b.tensors.get_mut("embed").unwrap().data[0] += 1.0;
        assert_ne!(a.id(), b.id());
    }
}
