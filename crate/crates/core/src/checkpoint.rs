//! Named-tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    4 bytes  "LMTE"
//! version  u32      FORMAT_VERSION
//! hlen     u64      length of the JSON header in bytes
//! header   hlen     {"format_version", "dtype", "partition", "config", "tensors": [{name, shape, partition}]}
//! data              every tensor's elements in header order, dtype-sized
//! ```
//!
//! Values are written in their native dtype, so a save/load round trip at
//! the same dtype is bit-exact.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Float, ParamSet, Partition, Tensor};

pub const MAGIC: &[u8; 4] = b"LMTE";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub partition: Partition,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub dtype: String,
    /// Partition stored in this file, or `None` for a mixed file.
    pub partition: Option<Partition>,
    pub config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

fn ck_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Checkpoint { path: PathBuf::from(path), msg: msg.into() }
}

/// Writes the parameters of `partition` (all when `None`).
pub fn save<T: Float>(
    path: &Path,
    params: &ParamSet<T>,
    partition: Option<Partition>,
    config: serde_json::Value,
) -> Result<()> {
    let chosen: Vec<_> =
        params.iter().filter(|(_, p)| partition.is_none_or(|q| p.partition == q)).map(|(_, p)| p).collect();
    let header = Header {
        format_version: FORMAT_VERSION,
        dtype: T::DTYPE.into(),
        partition,
        config,
        tensors: chosen
            .iter()
            .map(|p| TensorEntry { name: p.name.clone(), shape: p.value.shape().to_vec(), partition: p.partition })
            .collect(),
    };
    let hjson = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(16 + hjson.len() + params.num_elements(partition) * T::BYTES);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(hjson.len() as u64).to_le_bytes());
    buf.extend_from_slice(&hjson);
    for p in chosen {
        for &v in p.value.data() {
            v.write_le(&mut buf);
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, buf)?;
    Ok(())
}

/// A loaded container; tensors are kept at their stored dtype as raw bytes
/// until copied into a parameter store.
pub struct Checkpoint {
    pub header: Header,
    path: PathBuf,
    data: Vec<u8>,
    offsets: Vec<usize>,
}

impl Checkpoint {
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(ck_err(path, "not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(ck_err(path, format!("unsupported format version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let hend =
            16usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| ck_err(path, "truncated header"))?;
        let header: Header =
            serde_json::from_slice(&bytes[16..hend]).map_err(|e| ck_err(path, format!("bad header: {e}")))?;
        let width = match header.dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            other => return Err(ck_err(path, format!("unknown dtype {other}"))),
        };
        let mut offsets = Vec::with_capacity(header.tensors.len());
        let mut off = 0;
        for t in &header.tensors {
            offsets.push(off);
            off += t.shape.iter().product::<usize>() * width;
        }
        let data = bytes[hend..].to_vec();
        if data.len() != off {
            return Err(ck_err(path, format!("expected {off} data bytes, found {}", data.len())));
        }
        Ok(Checkpoint { header, path: path.to_path_buf(), data, offsets })
    }

    fn tensor_at<T: Float>(&self, i: usize) -> Tensor<T> {
        let e = &self.header.tensors[i];
        let n: usize = e.shape.iter().product();
        let start = self.offsets[i];
        let values: Vec<T> = match self.header.dtype.as_str() {
            "f32" => (0..n).map(|j| T::of(f32::read_le(&self.data[start + 4 * j..start + 4 * j + 4]) as f64)).collect(),
            _ => (0..n).map(|j| T::of(f64::read_le(&self.data[start + 8 * j..start + 8 * j + 8]))).collect(),
        };
        Tensor::new(e.shape.clone(), values).expect("checkpoint shape")
    }

    pub fn tensor<T: Float>(&self, name: &str) -> Option<Tensor<T>> {
        self.header.tensors.iter().position(|t| t.name == name).map(|i| self.tensor_at(i))
    }

    /// Copies every stored tensor into `params` by name. Names missing from
    /// `params`, partition or shape disagreements are errors.
    pub fn load_into<T: Float>(&self, params: &mut ParamSet<T>) -> Result<usize> {
        for (i, e) in self.header.tensors.iter().enumerate() {
            let id = params.id(&e.name).ok_or_else(|| ck_err(&self.path, format!("unknown tensor {}", e.name)))?;
            if params.get(id).partition != e.partition {
                return Err(ck_err(&self.path, format!("tensor {} stored under another partition", e.name)));
            }
            params.set_value(&e.name, self.tensor_at(i)).map_err(|err| ck_err(&self.path, err.to_string()))?;
        }
        Ok(self.header.tensors.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamSet<f32> {
        let mut ps = ParamSet::new();
        ps.add("a", Partition::Theta, Tensor::from_f64(&[2, 2], &[0.1, -2.5, 3e-8, 7.0]).unwrap());
        ps.add("b", Partition::Phi, Tensor::from_f64(&[3], &[1.0 / 3.0, f64::MIN_POSITIVE, -0.0]).unwrap());
        ps.add("c", Partition::Omega, Tensor::from_f64(&[1], &[42.0]).unwrap());
        ps
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ps = store();
        let cfg = serde_json::json!({"dim": 2});
        for part in [None, Some(Partition::Theta), Some(Partition::Phi)] {
            let f = dir.path().join("x.ckpt");
            save(&f, &ps, part, cfg.clone()).unwrap();
            let ck = Checkpoint::read(&f).unwrap();
            assert_eq!(ck.header.config, cfg);
            assert_eq!(ck.header.partition, part);
            let mut other = store();
            for (_, p) in other.iter().map(|(i, p)| (i, p.name.clone())).collect::<Vec<_>>() {
                let shape = other.value(other.id(&p).unwrap()).shape().to_vec();
                other.set_value(&p, Tensor::zeros(&shape)).unwrap();
            }
            ck.load_into(&mut other).unwrap();
            for q in [Partition::Theta, Partition::Phi, Partition::Omega] {
                if part.is_none_or(|p| p == q) {
                    assert_eq!(other.hash(q), ps.hash(q));
                }
            }
        }
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("x.ckpt");
        save(&f, &store(), None, serde_json::Value::Null).unwrap();
        let mut bytes = std::fs::read(&f).unwrap();
        bytes.pop();
        std::fs::write(&f, &bytes).unwrap();
        assert!(matches!(Checkpoint::read(&f), Err(Error::Checkpoint { .. })));
        std::fs::write(&f, b"nope").unwrap();
        assert!(matches!(Checkpoint::read(&f), Err(Error::Checkpoint { .. })));
    }
}
