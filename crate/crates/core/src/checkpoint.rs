//! Named parameter sets and their on-disk format.
//!
//! Layout: the line `EDACKPT v1 <manifest bytes>\n`, a JSON manifest listing
//! `{name, shape, dtype}` for every tensor, then the tensors as little-endian
//! `f64` in manifest order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Mat;

const MAGIC: &str = "EDACKPT";
const VERSION: &str = "v1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: BTreeMap<String, Mat>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    name: String,
    shape: [usize; 2],
    dtype: String,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.params.get_mut(name)
    }

    /// Like [`get`](Self::get) but missing names are an error.
    pub fn require(&self, name: &str) -> Result<&Mat> {
        self.get(name).ok_or_else(|| Error::arg(format!("missing parameter `{name}`")))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Mat)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|m| m.data().len()).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest: Vec<ManifestEntry> = self
            .params
            .iter()
            .map(|(name, m)| ManifestEntry { name: name.clone(), shape: [m.rows(), m.cols()], dtype: "f64".into() })
            .collect();
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = format!("{MAGIC} {VERSION} {}\n", json.len()).into_bytes();
        out.extend_from_slice(&json);
        for m in self.params.values() {
            for v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let nl = bytes.iter().position(|&b| b == b'\n').ok_or("missing header line")?;
        let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| "header is not UTF-8")?;
        let parts: Vec<&str> = header.split(' ').collect();
        if parts.len() != 3 || parts[0] != MAGIC {
            return Err(format!("not a checkpoint (header {header:?})"));
        }
        if parts[1] != VERSION {
            return Err(format!("unsupported checkpoint version {}", parts[1]));
        }
        let mlen: usize = parts[2].parse().map_err(|_| format!("bad manifest length {:?}", parts[2]))?;
        let body = &bytes[nl + 1..];
        if body.len() < mlen {
            return Err("truncated manifest".into());
        }
        let manifest: Vec<ManifestEntry> =
            serde_json::from_slice(&body[..mlen]).map_err(|e| format!("bad manifest: {e}"))?;
        let mut payload = &body[mlen..];
        let mut params = BTreeMap::new();
        for e in manifest {
            if e.dtype != "f64" {
                return Err(format!("tensor `{}` has unsupported dtype {}", e.name, e.dtype));
            }
            let n = e.shape[0] * e.shape[1];
            if payload.len() < n * 8 {
                return Err(format!("payload truncated in tensor `{}`", e.name));
            }
            let data: Vec<f64> = payload[..n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            payload = &payload[n * 8..];
            if params.insert(e.name.clone(), Mat::from_vec(e.shape[0], e.shape[1], data)).is_some() {
                return Err(format!("duplicate tensor `{}`", e.name));
            }
        }
        if !payload.is_empty() {
            return Err(format!("{} trailing bytes after the last tensor", payload.len()));
        }
        Ok(ParamSet { params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|reason| Error::Checkpoint { path: path.to_path_buf(), reason })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("a.w", Mat::from_rows(&[vec![1.0, -2.5], vec![3.0, 1e-300]]));
        p.insert("b", Mat::from_vec(1, 3, vec![0.0, f64::MAX, -0.0]));
        p
    }

    #[test]
    fn round_trip_is_bitwise() {
        let p = sample();
        let q = ParamSet::from_bytes(&p.to_bytes()).unwrap();
        assert_eq!(p, q);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        p.save(&path).unwrap();
        assert_eq!(ParamSet::load(&path).unwrap(), p);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().to_bytes();
        assert!(ParamSet::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(ParamSet::from_bytes(&extra).is_err());
        let mut wrong = bytes.clone();
        wrong[9] = b'9';
        assert!(ParamSet::from_bytes(&wrong).is_err());
        assert!(ParamSet::from_bytes(b"hello\n").is_err());
    }
}
