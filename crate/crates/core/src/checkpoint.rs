//! Binary checkpoints.
//!
//! Layout: magic `UJCK`, `u32` format version (LE), `u64` header length (LE),
//! a JSON header, then every parameter tensor as little-endian `f64` in the
//! order listed by the header.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nets::{Net, NetSpec};
use crate::schemes::EpochRecord;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"UJCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub net: NetSpec,
    pub tensors: Vec<TensorEntry>,
    /// Effective training configuration, echoed verbatim.
    pub config: serde_json::Value,
    pub seed: u64,
    /// Digest of the seed that every random stream is derived from.
    pub rng_digest: String,
    pub history: Vec<EpochRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: Vec<Tensor>,
}

/// Hex SHA-256 of the seed bytes; random streams are pure functions of it.
pub fn rng_digest(seed: u64) -> String {
    Sha256::digest(seed.to_le_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

impl Checkpoint {
    pub fn from_net(net: &Net, config: serde_json::Value, seed: u64, history: Vec<EpochRecord>) -> Self {
        let tensors = net
            .names()
            .iter()
            .zip(net.params())
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect();
        Self {
            header: CheckpointHeader {
                net: net.spec().clone(),
                tensors,
                config,
                seed,
                rng_digest: rng_digest(seed),
                history,
            },
            params: net.params().to_vec(),
        }
    }

    /// Rebuilds the network described by the header and loads the weights.
    pub fn to_net(&self) -> Result<Net> {
        let mut net = Net::build(&self.header.net, self.header.seed)?;
        net.set_params(self.params.clone())?;
        Ok(net)
    }

    /// Loads the weights into an existing network, checking names and shapes.
    pub fn load_into(&self, net: &mut Net) -> Result<()> {
        if net.names().len() != self.header.tensors.len() {
            let first = net
                .names()
                .iter()
                .zip(&self.header.tensors)
                .find(|(a, b)| **a != b.name)
                .map(|(a, _)| a.clone())
                .or_else(|| {
                    let k = net.names().len().min(self.header.tensors.len());
                    net.names()
                        .get(k)
                        .cloned()
                        .or_else(|| self.header.tensors.get(k).map(|t| t.name.clone()))
                })
                .unwrap_or_default();
            return Err(Error::ArchitectureMismatch {
                tensor: first,
                reason: format!(
                    "checkpoint has {} tensors, network has {}",
                    self.header.tensors.len(),
                    net.names().len()
                ),
            });
        }
        for (name, entry) in net.names().iter().zip(&self.header.tensors) {
            if *name != entry.name {
                return Err(Error::ArchitectureMismatch {
                    tensor: name.clone(),
                    reason: format!("checkpoint stores `{}` in this position", entry.name),
                });
            }
        }
        net.set_params(self.params.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let numel: usize = self.params.iter().map(Tensor::numel).sum();
        let mut out = Vec::with_capacity(16 + header.len() + 8 * numel);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.params {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::CorruptPayload(m.to_string());
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(corrupt("missing checkpoint magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[16..];
        if body.len() < hlen {
            return Err(corrupt("header truncated"));
        }
        let header: CheckpointHeader =
            serde_json::from_slice(&body[..hlen]).map_err(|e| Error::CorruptPayload(e.to_string()))?;
        let payload = &body[hlen..];
        let numel: usize = header
            .tensors
            .iter()
            .map(|t| t.shape.iter().product::<usize>())
            .sum();
        if payload.len() != 8 * numel {
            return Err(Error::CorruptPayload(format!(
                "payload has {} bytes, header describes {}",
                payload.len(),
                8 * numel
            )));
        }
        let mut values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let params = header
            .tensors
            .iter()
            .map(|t| {
                let n = t.shape.iter().product();
                Tensor::new(t.shape.clone(), values.by_ref().take(n).collect())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { header, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{Activation, Architecture};

    fn net(widths: Vec<usize>, seed: u64) -> Net {
        Net::build(
            &NetSpec::new(Architecture::Mlp {
                widths,
                activation: Activation::Tanh,
            }),
            seed,
        )
        .unwrap()
    }

    #[test]
    fn bytes_round_trip() {
        let n = net(vec![2, 8, 2], 3);
        let c = Checkpoint::from_net(&n, serde_json::json!({"a": 1}), 3, vec![]);
        let b = c.to_bytes().unwrap();
        let c2 = Checkpoint::from_bytes(&b).unwrap();
        assert_eq!(c, c2);
        assert_eq!(c2.to_bytes().unwrap(), b);
        assert_eq!(c2.to_net().unwrap().params(), n.params());
    }

    #[test]
    fn header_floats_round_trip_exactly() {
        let history: Vec<EpochRecord> = (0..200)
            .map(|i| EpochRecord {
                epoch: i,
                mean_loss: (0.1 + i as f64 * 1e-3).ln_1p() / 3.0,
                wall_seconds: 1.0 / (i as f64 + 7.0),
            })
            .collect();
        let c = Checkpoint::from_net(&net(vec![2, 4, 2], 1), serde_json::json!({"eta": 0.1 / 3.0}), 1, history);
        let b = c.to_bytes().unwrap();
        assert_eq!(Checkpoint::from_bytes(&b).unwrap(), c);
    }

    #[test]
    fn truncation_detected() {
        let c = Checkpoint::from_net(&net(vec![2, 8, 2], 0), serde_json::Value::Null, 0, vec![]);
        let b = c.to_bytes().unwrap();
        for cut in [3, 15, 40, b.len() - 1] {
            assert_eq!(Checkpoint::from_bytes(&b[..cut]).unwrap_err().kind(), "corrupt_payload");
        }
    }

    #[test]
    fn version_checked() {
        let c = Checkpoint::from_net(&net(vec![2, 8, 2], 0), serde_json::Value::Null, 0, vec![]);
        let mut b = c.to_bytes().unwrap();
        b[4] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&b),
            Err(Error::CheckpointVersion { found: 9, expected: 1 })
        ));
    }

    #[test]
    fn mismatched_architecture_named() {
        let c = Checkpoint::from_net(&net(vec![2, 8, 2], 0), serde_json::Value::Null, 0, vec![]);
        let mut other = net(vec![2, 16, 2], 0);
        match c.load_into(&mut other) {
            Err(Error::ArchitectureMismatch { tensor, .. }) => assert_eq!(tensor, "layer0.weight"),
            other => panic!("{other:?}"),
        }
        let mut deeper = net(vec![2, 8, 8, 2], 0);
        assert_eq!(c.load_into(&mut deeper).unwrap_err().kind(), "architecture_mismatch");
    }
}
