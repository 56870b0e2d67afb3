//! `GLMCKPT1` container: 8-byte magic, little-endian u64 header length, JSON
//! header, then little-endian `f32` tensor data.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, Params, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GLMCKPT1";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the data section.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct OptimizerHeader {
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    #[serde(default)]
    weight_decay: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    kind: String,
    config: serde_json::Value,
    vocab_fingerprint: Option<String>,
    tensors: Vec<TensorEntry>,
    optimizer: Option<OptimizerHeader>,
    #[serde(default)]
    metadata: serde_json::Value,
}

/// A model-agnostic checkpoint: a kind tag, a config blob and named tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config: serde_json::Value,
    pub vocab_fingerprint: Option<String>,
    pub params: Params,
    pub optimizer: Option<Adam>,
    pub metadata: serde_json::Value,
}

const M_PREFIX: &str = "optimizer.m.";
const V_PREFIX: &str = "optimizer.v.";

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::new();
        let mut data: Vec<u8> = Vec::new();
        let mut push = |name: String, t: &Tensor, entries: &mut Vec<TensorEntry>| {
            entries.push(TensorEntry {
                name,
                shape: t.shape.clone(),
                offset: data.len() as u64,
            });
            for &v in &t.data {
                data.extend_from_slice(&(v as f32).to_le_bytes());
            }
        };
        for (name, t) in self.params.iter() {
            push(name.to_string(), t, &mut entries);
        }
        if let Some(opt) = &self.optimizer {
            for (name, t) in self.params.names().iter().zip(&opt.m) {
                push(format!("{M_PREFIX}{name}"), t, &mut entries);
            }
            for (name, t) in self.params.names().iter().zip(&opt.v) {
                push(format!("{V_PREFIX}{name}"), t, &mut entries);
            }
        }
        let header = Header {
            format_version: CHECKPOINT_FORMAT_VERSION,
            kind: self.kind.clone(),
            config: self.config.clone(),
            vocab_fingerprint: self.vocab_fingerprint.clone(),
            tensors: entries,
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader {
                step: o.step,
                beta1: o.beta1,
                beta2: o.beta2,
                eps: o.eps,
                weight_decay: o.weight_decay,
            }),
            metadata: self.metadata.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + data.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&data);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a GLMCKPT1 checkpoint".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let json = bytes
            .get(16..16 + hlen)
            .ok_or_else(|| Error::Format("truncated checkpoint header".into()))?;
        let header: Header = serde_json::from_slice(json)?;
        if header.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {}", header.format_version)));
        }
        let data = &bytes[16 + hlen..];
        let read = |e: &TensorEntry| -> Result<Tensor> {
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let raw = data
                .get(start..start + 4 * n)
                .ok_or_else(|| Error::Format(format!("tensor `{}` exceeds data section", e.name)))?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            Ok(Tensor::new(e.shape.clone(), values))
        };
        let mut params = Params::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for e in &header.tensors {
            let t = read(e)?;
            if e.name.starts_with(M_PREFIX) {
                m.push(t);
            } else if e.name.starts_with(V_PREFIX) {
                v.push(t);
            } else {
                params.insert(e.name.clone(), t);
            }
        }
        let optimizer = match header.optimizer {
            Some(h) => {
                if m.len() != params.len() || v.len() != params.len() {
                    return Err(Error::Format("optimizer moments do not match parameters".into()));
                }
                Some(Adam {
                    beta1: h.beta1,
                    beta2: h.beta2,
                    eps: h.eps,
                    weight_decay: h.weight_decay,
                    step: h.step,
                    m,
                    v,
                })
            }
            None => None,
        };
        Ok(Checkpoint {
            kind: header.kind,
            config: header.config,
            vocab_fingerprint: header.vocab_fingerprint,
            params,
            optimizer,
            metadata: header.metadata,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_bytes(&bytes)
    }

    /// Ensures the stored tensors have exactly the expected names and shapes.
    pub fn check_layout(&self, expected: &Params) -> Result<()> {
        if self.params.names() != expected.names() {
            return Err(Error::Format(format!("checkpoint `{}` has an unexpected tensor directory", self.kind)));
        }
        for ((name, a), b) in self.params.iter().zip(expected.tensors()) {
            if a.shape != b.shape {
                return Err(Error::Format(format!("tensor `{name}` has shape {:?}, expected {:?}", a.shape, b.shape)));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_with_optimizer() {
        let mut p = Params::new();
        p.insert("w", Tensor::new(vec![2, 2], vec![0.5, -1.25, 3.0, 1e-3f32 as f64]));
        p.insert("b", Tensor::new(vec![2], vec![0.0, 2.0]));
        let mut opt = Adam::new(&p);
        opt.update(&mut p, &[Some(Tensor::filled(&[2, 2], 0.5)), None], 0.01).unwrap();
        opt.m.iter_mut().chain(opt.v.iter_mut()).for_each(Tensor::round_to_f32);
        let ck = Checkpoint {
            kind: "test".into(),
            config: serde_json::json!({"a": 1}),
            vocab_fingerprint: Some("abc".into()),
            params: p,
            optimizer: Some(opt),
            metadata: serde_json::Value::Null,
        };
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(Checkpoint::from_bytes(b"NOTACKPT00000000").is_err());
        let ck = Checkpoint {
            kind: "t".into(),
            config: serde_json::Value::Null,
            vocab_fingerprint: None,
            params: {
                let mut p = Params::new();
                p.insert("x", Tensor::zeros(&[4]));
                p
            },
            optimizer: None,
            metadata: serde_json::Value::Null,
        };
        let bytes = ck.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
