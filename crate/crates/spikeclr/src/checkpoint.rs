//! Binary model checkpoints. Layout:
//!
//! ```text
//! "SPKC1\n"
//! u32 LE  topology JSON length, then that many JSON bytes
//! u32 LE  tensor count
//! per tensor:
//!   u16 LE key length, key bytes
//!   u8 ndim, then ndim u32 LE dims
//!   numel f64 LE values
//! ```
//!
//! The topology block records what the weights belong to; loading against a
//! different topology is refused so a checkpoint can never be silently
//! applied to the wrong architecture.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::snn::{BackboneKind, LifConfig, SnnModel};

const MAGIC: &[u8; 6] = b"SPKC1\n";
const MAX_JSON: u32 = 1 << 20;
const MAX_NDIM: u8 = 8;

/// Architecture fingerprint stored alongside the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub backbone: BackboneKind,
    pub height: usize,
    pub width: usize,
    pub t_bins: usize,
    pub proj_dim: usize,
    pub lif: LifConfig,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub topology: Topology,
    pub tensors: Vec<(String, Tensor)>,
}

/// Flatten named model sections into prefixed checkpoint keys
/// ("backbone.l0.w", "head.l1.b", ...), preserving parameter order.
pub fn collect_params(sections: &[(&str, &SnnModel)]) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    for (prefix, model) in sections {
        for p in &model.params {
            out.push((format!("{prefix}.{}", p.name), p.value.clone()));
        }
    }
    out
}

/// Copy checkpoint tensors under `prefix` back into the model. Every model
/// parameter must be present with a matching shape.
pub fn restore_params(model: &mut SnnModel, prefix: &str, tensors: &[(String, Tensor)]) -> Result<()> {
    for p in &mut model.params {
        let key = format!("{prefix}.{}", p.name);
        let found = tensors
            .iter()
            .find(|(k, _)| *k == key)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{key}'")))?;
        if found.1.shape() != p.value.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor '{key}' has shape {:?}, model expects {:?}",
                found.1.shape(),
                p.value.shape()
            )));
        }
        p.value = found.1.clone();
    }
    Ok(())
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    let json = serde_json::to_vec(&ckpt.topology)
        .map_err(|e| Error::Checkpoint(format!("topology serialization failed: {e}")))?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    w.write_all(&(ckpt.tensors.len() as u32).to_le_bytes())?;
    for (key, tensor) in &ckpt.tensors {
        let key_bytes = key.as_bytes();
        if key_bytes.len() > u16::MAX as usize {
            return Err(Error::Checkpoint(format!("tensor key '{key}' too long")));
        }
        if tensor.shape().len() > MAX_NDIM as usize {
            return Err(Error::Checkpoint(format!("tensor '{key}' has too many dims")));
        }
        w.write_all(&(key_bytes.len() as u16).to_le_bytes())?;
        w.write_all(key_bytes)?;
        w.write_all(&[tensor.shape().len() as u8])?;
        for &d in tensor.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Checkpoint(format!("truncated while reading {what}: {e}")))
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path)
        .map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 6];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let json_len = read_u32(&mut r, "topology length")?;
    if json_len > MAX_JSON {
        return Err(Error::Checkpoint("topology block implausibly large".into()));
    }
    let mut json = vec![0u8; json_len as usize];
    read_exact(&mut r, &mut json, "topology")?;
    let topology: Topology = serde_json::from_slice(&json)
        .map_err(|e| Error::Checkpoint(format!("topology parse failed: {e}")))?;

    let count = read_u32(&mut r, "tensor count")?;
    let mut tensors = Vec::with_capacity(count as usize);
    for i in 0..count {
        let mut len_b = [0u8; 2];
        read_exact(&mut r, &mut len_b, "key length")?;
        let mut key = vec![0u8; u16::from_le_bytes(len_b) as usize];
        read_exact(&mut r, &mut key, "key")?;
        let key = String::from_utf8(key)
            .map_err(|_| Error::Checkpoint(format!("tensor {i} key is not utf-8")))?;
        let mut ndim = [0u8; 1];
        read_exact(&mut r, &mut ndim, "ndim")?;
        if ndim[0] > MAX_NDIM {
            return Err(Error::Checkpoint(format!("tensor '{key}' has {} dims", ndim[0])));
        }
        let mut shape = Vec::with_capacity(ndim[0] as usize);
        for _ in 0..ndim[0] {
            shape.push(read_u32(&mut r, "dim")? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut vb = [0u8; 8];
        for _ in 0..numel {
            read_exact(&mut r, &mut vb, "tensor values")?;
            data.push(f64::from_le_bytes(vb));
        }
        tensors.push((
            key,
            Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?,
        ));
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }
    Ok(Checkpoint { topology, tensors })
}

/// Load and verify the stored topology matches `want`.
pub fn load_checkpoint_expecting(path: &Path, want: &Topology) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    if &ckpt.topology != want {
        return Err(Error::Checkpoint(format!(
            "topology mismatch: checkpoint holds {:?}, expected {:?}",
            ckpt.topology, want
        )));
    }
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::snn::{build_mini_sew, build_projection_head};

    fn sample_topology() -> Topology {
        Topology {
            backbone: BackboneKind::MiniSew,
            height: 16,
            width: 16,
            t_bins: 8,
            proj_dim: 16,
            lif: LifConfig::default(),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.spkc");
        let backbone = build_mini_sew(16, 16, LifConfig::default(), 3).unwrap();
        let head = build_projection_head(32, 16, LifConfig::default(), 4).unwrap();
        let ckpt = Checkpoint {
            topology: sample_topology(),
            tensors: collect_params(&[("backbone", &backbone), ("head", &head)]),
        };
        save_checkpoint(&path, &ckpt).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.topology, ckpt.topology);
        assert_eq!(loaded.tensors.len(), ckpt.tensors.len());
        for ((ka, ta), (kb, tb)) in ckpt.tensors.iter().zip(&loaded.tensors) {
            assert_eq!(ka, kb);
            assert_eq!(ta, tb);
        }
    }

    #[test]
    fn restore_applies_values_and_reports_missing_keys() {
        let src = build_mini_sew(16, 16, LifConfig::default(), 5).unwrap();
        let mut dst = build_mini_sew(16, 16, LifConfig::default(), 99).unwrap();
        assert!(src.params[0].value != dst.params[0].value);
        let tensors = collect_params(&[("backbone", &src)]);
        restore_params(&mut dst, "backbone", &tensors).unwrap();
        for (a, b) in src.params.iter().zip(&dst.params) {
            assert_eq!(a.value, b.value);
        }
        let mut other = build_projection_head(32, 16, LifConfig::default(), 1).unwrap();
        assert!(matches!(
            restore_params(&mut other, "head", &tensors),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn bad_magic_and_truncation_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let junk = dir.path().join("junk.spkc");
        std::fs::write(&junk, b"not a checkpoint at all").unwrap();
        assert!(matches!(load_checkpoint(&junk), Err(Error::Checkpoint(_))));

        let path = dir.path().join("model.spkc");
        let backbone = build_mini_sew(16, 16, LifConfig::default(), 3).unwrap();
        let ckpt = Checkpoint {
            topology: sample_topology(),
            tensors: collect_params(&[("backbone", &backbone)]),
        };
        save_checkpoint(&path, &ckpt).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = dir.path().join("cut.spkc");
        std::fs::write(&cut, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(load_checkpoint(&cut), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn topology_mismatch_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.spkc");
        let backbone = build_mini_sew(16, 16, LifConfig::default(), 3).unwrap();
        let ckpt = Checkpoint {
            topology: sample_topology(),
            tensors: collect_params(&[("backbone", &backbone)]),
        };
        save_checkpoint(&path, &ckpt).unwrap();
        let mut other = sample_topology();
        other.t_bins = 4;
        assert!(matches!(
            load_checkpoint_expecting(&path, &other),
            Err(Error::Checkpoint(_))
        ));
        assert!(load_checkpoint_expecting(&path, &sample_topology()).is_ok());
    }
}
