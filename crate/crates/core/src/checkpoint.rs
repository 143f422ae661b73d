//! Single-file checkpoint container.
//!
//! Layout: magic, format version, a JSON metadata block (kind, architecture,
//! schedule betas, vocabulary, base hash, injection sites), then the named
//! parameter arrays as little-endian f64 bits. `load(save(m))` is bit-exact.

use crate::condition::{hypernetwork_skeleton, HyperNetwork};
use crate::diffusion::model::{ArchConfig, DenoiserModel};
use crate::diffusion::schedule::NoiseSchedule;
use crate::error::{CoreError, Result};
use crate::nn::store::ParamStore;
use crate::text::Vocabulary;
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"CFK1";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Meta {
    kind: String,
    arch: ArchConfig,
    schedule: Option<NoiseSchedule>,
    vocab: Option<Vocabulary>,
    base_hash: Option<String>,
    injection_sites: Option<Vec<usize>>,
}

fn write_store(w: &mut impl Write, store: &ParamStore) -> Result<()> {
    w.write_all(&(store.len() as u64).to_le_bytes())?;
    for (name, value) in store.iter() {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(value.ndim() as u64).to_le_bytes())?;
        for d in value.shape() {
            w.write_all(&(*d as u64).to_le_bytes())?;
        }
        for v in value.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_store(r: &mut impl Read) -> Result<Vec<(String, ArrayD<f64>)>> {
    let count = read_u64(r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u64(r)? as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| CoreError::Checkpoint("non-UTF8 parameter name".to_string()))?;
        let ndim = read_u64(r)? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(read_u64(r)? as usize);
        }
        let n: usize = dims.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut buf = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        out.push((
            name,
            ArrayD::from_shape_vec(IxDyn(&dims), data)
                .map_err(|e| CoreError::Checkpoint(format!("bad shape: {e}")))?,
        ));
    }
    Ok(out)
}

fn write_container(path: &Path, meta: &Meta, store: &ParamStore) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    let meta_json = serde_json::to_vec(meta)?;
    w.write_all(&(meta_json.len() as u64).to_le_bytes())?;
    w.write_all(&meta_json)?;
    write_store(&mut w, store)?;
    w.flush()?;
    Ok(())
}

fn read_container(path: &Path) -> Result<(Meta, Vec<(String, ArrayD<f64>)>)> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CoreError::Checkpoint(format!("bad magic in {}", path.display())));
    }
    let mut ver = [0u8; 4];
    r.read_exact(&mut ver)?;
    let version = u32::from_le_bytes(ver);
    if version != FORMAT_VERSION {
        return Err(CoreError::Checkpoint(format!("unsupported format version {version}")));
    }
    let meta_len = read_u64(&mut r)? as usize;
    let mut meta_buf = vec![0u8; meta_len];
    r.read_exact(&mut meta_buf)?;
    let meta: Meta = serde_json::from_slice(&meta_buf)?;
    let params = read_store(&mut r)?;
    Ok((meta, params))
}

/// Overwrites `store` with the checkpointed values; the name sets must match
/// exactly in both directions.
fn fill_store(store: &mut ParamStore, params: Vec<(String, ArrayD<f64>)>, what: &str) -> Result<()> {
    if params.len() != store.len() {
        return Err(CoreError::Checkpoint(format!(
            "{what}: checkpoint has {} parameters, model expects {}",
            params.len(),
            store.len()
        )));
    }
    for (name, value) in params {
        let Some(id) = store.id_of(&name) else {
            return Err(CoreError::Checkpoint(format!("{what}: unexpected parameter {name}")));
        };
        if store.get(id).shape() != value.shape() {
            return Err(CoreError::Checkpoint(format!(
                "{what}: {name} has shape {:?}, expected {:?}",
                value.shape(),
                store.get(id).shape()
            )));
        }
        *store.get_mut(id) = value;
    }
    Ok(())
}

pub fn save_denoiser(
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
    vocab: &Vocabulary,
    path: &Path,
) -> Result<()> {
    let meta = Meta {
        kind: "denoiser".to_string(),
        arch: model.arch.clone(),
        schedule: Some(schedule.clone()),
        vocab: Some(vocab.clone()),
        base_hash: None,
        injection_sites: None,
    };
    write_container(path, &meta, &model.store)
}

pub fn load_denoiser(path: &Path) -> Result<(DenoiserModel, NoiseSchedule, Vocabulary)> {
    let (meta, params) = read_container(path)?;
    if meta.kind != "denoiser" {
        return Err(CoreError::Checkpoint(format!("expected a denoiser checkpoint, found {}", meta.kind)));
    }
    let schedule = meta
        .schedule
        .ok_or_else(|| CoreError::Checkpoint("denoiser checkpoint lacks a schedule".to_string()))?;
    schedule.validate()?;
    let vocab = meta
        .vocab
        .ok_or_else(|| CoreError::Checkpoint("denoiser checkpoint lacks a vocabulary".to_string()))?;
    vocab.validate()?;
    let mut model = DenoiserModel::new(&meta.arch, 0)?;
    fill_store(&mut model.store, params, "denoiser")?;
    Ok((model, schedule, vocab))
}

/// Hypernetwork checkpoints are tagged with the base hash they were trained
/// against; loading verifies the provided base matches.
pub fn save_hypernetwork(hyper: &HyperNetwork, path: &Path) -> Result<()> {
    let meta = Meta {
        kind: "hypernetwork".to_string(),
        arch: hyper.arch.clone(),
        schedule: None,
        vocab: None,
        base_hash: Some(hyper.base_hash.clone()),
        injection_sites: Some(hyper.injection_sites.clone()),
    };
    write_container(path, &meta, &hyper.store)
}

pub fn load_hypernetwork(path: &Path, base: &DenoiserModel) -> Result<HyperNetwork> {
    let (meta, params) = read_container(path)?;
    if meta.kind != "hypernetwork" {
        return Err(CoreError::Checkpoint(format!("expected a hypernetwork checkpoint, found {}", meta.kind)));
    }
    let base_hash = meta
        .base_hash
        .ok_or_else(|| CoreError::Checkpoint("hypernetwork checkpoint lacks a base hash".to_string()))?;
    if base.content_hash() != base_hash {
        return Err(CoreError::Prerequisite(format!(
            "hypernetwork was trained against base {}, but the provided base hashes to {}",
            &base_hash[..12],
            &base.content_hash()[..12]
        )));
    }
    let sites = meta.injection_sites.unwrap_or_else(|| (0..meta.arch.levels).collect());
    let mut hyper = hypernetwork_skeleton(&meta.arch, sites, base_hash, 0);
    fill_store(&mut hyper.store, params, "hypernetwork")?;
    Ok(hyper)
}

/// Content hash of any store-backed artifact as stored on disk.
pub fn file_hash(path: &Path) -> Result<String> {
    Ok(crate::hash::hash_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::condition::init_hypernetwork;

    fn model() -> (DenoiserModel, NoiseSchedule, Vocabulary) {
        let vocab = Vocabulary::default_toy(8);
        let arch = ArchConfig {
            in_channels: 3,
            out_channels: 3,
            base_channels: 2,
            levels: 2,
            time_dim: 4,
            cond_dim: 8,
            vocab_size: vocab.len(),
        };
        (DenoiserModel::new(&arch, 5).unwrap(), NoiseSchedule::fast(), vocab)
    }

    #[test]
    fn denoiser_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let (m, s, v) = model();
        save_denoiser(&m, &s, &v, &path).unwrap();
        let (m2, s2, v2) = load_denoiser(&path).unwrap();
        assert_eq!(m.content_hash(), m2.content_hash());
        assert_eq!(s, s2);
        assert_eq!(v, v2);
        // Save again: identical bytes.
        let path2 = dir.path().join("model2.ckpt");
        save_denoiser(&m2, &s2, &v2, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn hypernetwork_round_trip_and_base_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hyper.ckpt");
        let (m, _, _) = model();
        let h = init_hypernetwork(&m, 3);
        save_hypernetwork(&h, &path).unwrap();
        let h2 = load_hypernetwork(&path, &m).unwrap();
        assert_eq!(h.content_hash(), h2.content_hash());
        assert_eq!(h2.injection_sites, h.injection_sites);
        // Mismatched base is a prerequisite error.
        let other = DenoiserModel::new(&m.arch, 99).unwrap();
        assert!(matches!(load_hypernetwork(&path, &other), Err(CoreError::Prerequisite(_))));
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"NOPE123456").unwrap();
        assert!(matches!(load_denoiser(&path), Err(CoreError::Checkpoint(_))));
    }
}
