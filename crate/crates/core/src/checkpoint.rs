//! Self-describing parameter container.
//!
//! Layout: the magic line `pulsekit-ckpt-1\n`, a little-endian `u64` header
//! length, a JSON header (architectures, free-form metadata, tensor table),
//! then the raw little-endian `f64` payload.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::denoiser::{DenoiserArch, Mlp, ParamSpec};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: &str = "pulsekit-ckpt-1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, in elements.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    version: String,
    networks: BTreeMap<String, DenoiserArch>,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
    payload_len: usize,
}

/// Named networks plus metadata, as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub networks: BTreeMap<String, Mlp>,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value) -> Self {
        Self {
            networks: BTreeMap::new(),
            meta,
        }
    }

    pub fn with_network(mut self, name: &str, net: Mlp) -> Self {
        self.networks.insert(name.to_string(), net);
        self
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut payload: Vec<f64> = Vec::new();
        let mut networks = BTreeMap::new();
        for (net_name, net) in &self.networks {
            networks.insert(net_name.clone(), *net.arch());
            for ParamSpec { name, shape, offset } in net.specs() {
                let len: usize = shape.iter().product();
                tensors.push(TensorEntry {
                    name: format!("{net_name}.{name}"),
                    dtype: "f64le".into(),
                    shape: shape.clone(),
                    offset: payload.len(),
                });
                payload.extend_from_slice(&net.params()[*offset..*offset + len]);
            }
        }
        let header = Header {
            version: FORMAT_VERSION.into(),
            networks,
            meta: self.meta.clone(),
            tensors,
            payload_len: payload.len(),
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(FORMAT_VERSION.len() + 9 + header.len() + 8 * payload.len());
        out.extend_from_slice(FORMAT_VERSION.as_bytes());
        out.push(b'\n');
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for v in payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let newline = bytes
            .iter()
            .take(64)
            .position(|b| *b == b'\n')
            .ok_or_else(|| Error::Checkpoint("missing format line".into()))?;
        let found = String::from_utf8_lossy(&bytes[..newline]).into_owned();
        if found != FORMAT_VERSION {
            return Err(Error::CheckpointVersion {
                expected: FORMAT_VERSION.into(),
                found,
            });
        }
        let mut pos = newline + 1;
        let len_bytes: [u8; 8] = bytes
            .get(pos..pos + 8)
            .ok_or_else(|| Error::Checkpoint("truncated before header length".into()))?
            .try_into()
            .expect("slice of 8");
        let header_len = u64::from_le_bytes(len_bytes) as usize;
        pos += 8;
        let header_bytes = bytes
            .get(pos..pos.saturating_add(header_len))
            .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
        let header: Header =
            serde_json::from_slice(header_bytes).map_err(|e| Error::Checkpoint(format!("unreadable header: {e}")))?;
        pos += header_len;
        let payload = &bytes[pos..];
        if payload.len() != 8 * header.payload_len {
            return Err(Error::Checkpoint(format!(
                "payload holds {} bytes, header declares {} values",
                payload.len(),
                header.payload_len
            )));
        }
        let values: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let table: BTreeMap<&str, &TensorEntry> = header.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        let mut networks = BTreeMap::new();
        for (net_name, arch) in &header.networks {
            let mut params = Vec::with_capacity(arch.param_count());
            let template = Mlp::from_params(*arch, vec![0.0; arch.param_count()])?;
            for spec in template.specs() {
                let key = format!("{net_name}.{}", spec.name);
                let entry = table
                    .get(key.as_str())
                    .ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))?;
                if entry.dtype != "f64le" {
                    return Err(Error::Checkpoint(format!("tensor {key} has dtype {}", entry.dtype)));
                }
                if entry.shape != spec.shape {
                    return Err(Error::Checkpoint(format!(
                        "tensor {key} has shape {:?}, architecture needs {:?}",
                        entry.shape, spec.shape
                    )));
                }
                let slice = values
                    .get(entry.offset..entry.offset + spec.len())
                    .ok_or_else(|| Error::Checkpoint(format!("tensor {key} runs past the payload")))?;
                params.extend_from_slice(slice);
            }
            networks.insert(net_name.clone(), Mlp::from_params(*arch, params)?);
        }
        Ok(Self {
            networks,
            meta: header.meta,
        })
    }

    /// Writes through a temporary file in the same directory, then renames.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::Activation;

    fn sample() -> Checkpoint {
        let r = Mlp::init(
            DenoiserArch {
                io_dim: 6,
                hidden_dim: 4,
                depth: 3,
                activation: Activation::Tanh,
                complex: true,
                injection: true,
            },
            11,
            true,
        )
        .unwrap();
        let q = Mlp::init(
            DenoiserArch {
                io_dim: 5,
                hidden_dim: 4,
                depth: 2,
                activation: Activation::Tanh,
                complex: false,
                injection: false,
            },
            12,
            false,
        )
        .unwrap();
        Checkpoint::new(serde_json::json!({"algorithm": "udeq"}))
            .with_network("r", r)
            .with_network("q", q)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
        for (name, net) in &ck.networks {
            let other = &back.networks[name];
            assert!(net
                .params()
                .iter()
                .zip(other.params())
                .all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn truncation_is_detected() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [3, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err(), "cut {cut}");
        }
    }

    #[test]
    fn wrong_version_is_named() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[14] = b'9';
        match Checkpoint::from_bytes(&bytes) {
            Err(Error::CheckpointVersion { found, .. }) => assert_eq!(found, "pulsekit-ckpt-9"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn save_and_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ck = sample();
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }
}
