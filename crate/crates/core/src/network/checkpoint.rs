//! Versioned checkpoint files shared by teacher and student networks.
//!
//! Layout: 8-byte magic `DGSTCKPT`, little-endian `u32` format version,
//! little-endian `u64` header length, a JSON header (network config, tensor
//! table, free-form metadata), then every tensor's `f32` values in
//! little-endian order, in table order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use digest_nn::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use super::{Network, NetworkConfig};
use crate::error::{DigestError, Result};

pub const MAGIC: &[u8; 8] = b"DGSTCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    config: NetworkConfig,
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
}

/// A network plus whatever run metadata was stored next to it.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub network: Network,
    pub metadata: BTreeMap<String, String>,
}

pub fn encode(net: &Network, metadata: &BTreeMap<String, String>) -> Result<Vec<u8>> {
    let header = Header {
        config: net.config().clone(),
        tensors: net
            .params()
            .iter()
            .map(|(n, t)| TensorEntry {
                name: n.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        metadata: metadata.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| DigestError::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(json.len() + 20 + 4 * net.params().num_elements());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in net.params().iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let err = |m: &str| DigestError::Checkpoint(m.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(err("not a checkpoint file (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(DigestError::Checkpoint(format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(20..20 + hlen).ok_or_else(|| err("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| DigestError::Checkpoint(e.to_string()))?;
    let mut offset = 20 + hlen;
    let mut params = ParamStore::new();
    for entry in header.tensors {
        let n: usize = entry.shape.iter().product();
        let raw = bytes
            .get(offset..offset + 4 * n)
            .ok_or_else(|| DigestError::Checkpoint(format!("truncated tensor `{}`", entry.name)))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        params.insert(entry.name, Tensor::from_vec(&entry.shape, data)?);
        offset += 4 * n;
    }
    if offset != bytes.len() {
        return Err(err("trailing bytes after tensor data"));
    }
    Ok(Checkpoint {
        network: Network::from_parts(header.config, params)?,
        metadata: header.metadata,
    })
}

pub fn save(path: &Path, net: &Network, metadata: &BTreeMap<String, String>) -> Result<()> {
    let bytes = encode(net, metadata)?;
    fs::write(path, bytes).map_err(|e| DigestError::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| DigestError::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn net() -> Network {
        Network::new(NetworkConfig {
            base_width: 2,
            depth: 2,
            use_cbam: true,
            cbam_kernel: 3,
            seed: 11,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn encode_decode_is_exact() {
        let n = net();
        let mut meta = BTreeMap::new();
        meta.insert("phase".into(), "student".into());
        let ck = decode(&encode(&n, &meta).unwrap()).unwrap();
        assert_eq!(ck.network, n);
        assert_eq!(ck.metadata, meta);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = encode(&net(), &BTreeMap::new()).unwrap();
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut v2 = bytes;
        v2[8] = 2;
        assert!(decode(&v2).unwrap_err().to_string().contains("version"));
    }
}
