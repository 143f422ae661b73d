//! Canonical hashing of numeric artifacts.
//!
//! Floats are hashed as little-endian IEEE-754 bit patterns so hashes are
//! reproducible across runs and platforms. Artifact hashes chain the stage
//! manifests together and back the frozen-base immutability checks.

use ndarray::ArrayViewD;
use sha2::{Digest, Sha256};

pub struct Hasher(Sha256);

impl Hasher {
    pub fn new() -> Self {
        Hasher(Sha256::new())
    }

    pub fn update_bytes(&mut self, bytes: &[u8]) {
        self.0.update(bytes);
    }

    pub fn update_str(&mut self, s: &str) {
        self.0.update((s.len() as u64).to_le_bytes());
        self.0.update(s.as_bytes());
    }

    pub fn update_u64(&mut self, v: u64) {
        self.0.update(v.to_le_bytes());
    }

    pub fn update_f64_slice(&mut self, vals: &[f64]) {
        for v in vals {
            self.0.update(v.to_le_bytes());
        }
    }

    pub fn update_array(&mut self, a: &ArrayViewD<'_, f64>) {
        self.update_u64(a.ndim() as u64);
        for d in a.shape() {
            self.update_u64(*d as u64);
        }
        // Iteration order is logical (row-major) regardless of memory layout.
        for v in a.iter() {
            self.0.update(v.to_le_bytes());
        }
    }

    pub fn finish_hex(self) -> String {
        let digest = self.0.finalize();
        let mut out = String::with_capacity(64);
        for b in digest {
            out.push_str(&format!("{b:02x}"));
        }
        out
    }
}

impl Default for Hasher {
    fn default() -> Self {
        Self::new()
    }
}

pub fn hash_bytes(bytes: &[u8]) -> String {
    let mut h = Hasher::new();
    h.update_bytes(bytes);
    h.finish_hex()
}

pub fn hash_file(path: &std::path::Path) -> std::io::Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(hash_bytes(&bytes))
}
