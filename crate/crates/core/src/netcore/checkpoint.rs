//! Checkpoint files.
//!
//! Layout: 8-byte magic, `u32` version, `u32` header length, a JSON header
//! (config hash, config, tags, named-shape table, payload digest), then the
//! arrays as little-endian `f32` in table order.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::config::RunConfig;
use crate::domain::hex;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"OPGFCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub trainable: bool,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config_hash: String,
    pub config: RunConfig,
    pub tags: BTreeMap<String, String>,
    pub arrays: Vec<ArrayEntry>,
    pub payload_sha256: String,
}

pub fn save_checkpoint(
    path: &Path,
    params: &ParamStore<f32>,
    config: &RunConfig,
    tags: BTreeMap<String, String>,
) -> Result<()> {
    let named = params.named_arrays();
    let mut payload = Vec::with_capacity(named.iter().map(|(_, _, t)| t.len() * 4).sum());
    for (_, _, t) in &named {
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let meta = CheckpointMeta {
        config_hash: config.compat_hash(),
        config: config.clone(),
        tags,
        arrays: named
            .iter()
            .map(|(name, trainable, t)| ArrayEntry {
                name: name.clone(),
                trainable: *trainable,
                shape: t.shape().to_vec(),
            })
            .collect(),
        payload_sha256: hex(&Sha256::digest(&payload)),
    };
    let header = serde_json::to_vec(&meta).map_err(|e| Error::json(path, e))?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("ckpt.tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let write = |f: &mut std::fs::File| -> std::io::Result<()> {
        f.write_all(MAGIC)?;
        f.write_all(&VERSION.to_le_bytes())?;
        f.write_all(&(header.len() as u32).to_le_bytes())?;
        f.write_all(&header)?;
        f.write_all(&payload)?;
        f.sync_all()
    };
    write(&mut f).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Read only the header; cheap compatibility probing.
pub fn read_meta(path: &Path) -> Result<CheckpointMeta> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse(path, &bytes).map(|(m, _)| m)
}

/// Load a checkpoint. When `expected` is given, its architecture hash must
/// match the stored one unless `allow_mismatch` is set.
pub fn load_checkpoint(
    path: &Path,
    expected: Option<&RunConfig>,
    allow_mismatch: bool,
) -> Result<(ParamStore<f32>, CheckpointMeta)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (meta, payload) = parse(path, &bytes)?;
    if let Some(cfg) = expected {
        let want = cfg.compat_hash();
        if want != meta.config_hash && !allow_mismatch {
            let mut diffs = Vec::new();
            if cfg.patch_size != meta.config.patch_size {
                diffs.push(format!(
                    "patch_size {} vs {}",
                    meta.config.patch_size, cfg.patch_size
                ));
            }
            if cfg.noise_dim != meta.config.noise_dim {
                diffs.push(format!("noise_dim {} vs {}", meta.config.noise_dim, cfg.noise_dim));
            }
            return Err(Error::Incompatible {
                path: path.to_path_buf(),
                reason: format!(
                    "config hash {} does not match expected {}{}{}",
                    meta.config_hash,
                    want,
                    if diffs.is_empty() { "" } else { ": " },
                    diffs.join(", ")
                ),
            });
        }
    }
    let mut store = ParamStore::new();
    let mut off = 0usize;
    for a in &meta.arrays {
        let n: usize = a.shape.iter().product();
        let chunk = payload.get(off..off + n * 4).ok_or_else(|| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: "payload shorter than shape table".into(),
        })?;
        let data = chunk
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let t = Tensor::from_vec(&a.shape, data);
        if a.trainable {
            store.insert_param(a.name.clone(), t);
        } else {
            store.insert_buffer(a.name.clone(), t);
        }
        off += n * 4;
    }
    if off != payload.len() {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            reason: "trailing bytes after payload".into(),
        });
    }
    Ok((store, meta))
}

fn parse<'a>(path: &Path, bytes: &'a [u8]) -> Result<(CheckpointMeta, &'a [u8])> {
    let corrupt = |reason: &str| Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(corrupt(&format!("unsupported version {version}")));
    }
    let hlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let header = bytes.get(16..16 + hlen).ok_or_else(|| corrupt("truncated header"))?;
    let meta: CheckpointMeta =
        serde_json::from_slice(header).map_err(|_| corrupt("unreadable header"))?;
    let payload = &bytes[16 + hlen..];
    if hex(&Sha256::digest(payload)) != meta.payload_sha256 {
        return Err(corrupt("payload digest mismatch"));
    }
    Ok((meta, payload))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;

    fn sample_store() -> ParamStore<f32> {
        let mut rng = seeded_rng(3);
        let mut s = ParamStore::new();
        s.insert_param("a.w".into(), Tensor::randn(&[3, 4], 1.0, &mut rng));
        s.insert_param("b.b".into(), Tensor::randn(&[5], 1.0, &mut rng));
        s.insert_buffer("c.running_var".into(), Tensor::randn(&[2], 1.0, &mut rng));
        s
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let store = sample_store();
        let cfg = RunConfig::default();
        let mut tags = BTreeMap::new();
        tags.insert("section".into(), "3".into());
        save_checkpoint(&path, &store, &cfg, tags.clone()).unwrap();
        let (loaded, meta) = load_checkpoint(&path, Some(&cfg), false).unwrap();
        assert_eq!(loaded, store);
        assert_eq!(meta.tags, tags);
        assert_eq!(meta.config_hash, cfg.compat_hash());
    }

    #[test]
    fn mismatched_patch_size_is_refused_unless_overridden() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &sample_store(), &RunConfig::default(), BTreeMap::new()).unwrap();
        let other = RunConfig {
            patch_size: 32,
            ..Default::default()
        };
        let err = load_checkpoint(&path, Some(&other), false).unwrap_err();
        assert!(matches!(err, Error::Incompatible { .. }));
        assert!(err.to_string().contains("patch_size"));
        assert!(load_checkpoint(&path, Some(&other), true).is_ok());
    }

    #[test]
    fn corruption_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &sample_store(), &RunConfig::default(), BTreeMap::new()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x40;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path, None, false),
            Err(Error::Checkpoint { .. })
        ));
        std::fs::write(&path, b"garbage").unwrap();
        assert!(matches!(
            load_checkpoint(&path, None, false),
            Err(Error::Checkpoint { .. })
        ));
    }
}
