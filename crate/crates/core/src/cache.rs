//! Content-addressed stores for generated profile texts and embeddings.
//!
//! Entries live at `<dir>/<first two hex digits>/<digest>.<ext>`. A finished
//! entry is never rewritten; writers go through a temp file and a rename so
//! readers never see a partial entry.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, RwLock};

use sha2::{Digest as _, Sha256};

use crate::error::{Result, TupError};

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Digest32(pub [u8; 32]);

impl Digest32 {
    /// SHA-256 over length-prefixed parts, so ("ab","c") and ("a","bc") differ.
    pub fn of_parts(parts: &[&[u8]]) -> Self {
        let mut h = Sha256::new();
        for part in parts {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part);
        }
        let out = h.finalize();
        let mut bytes = [0u8; 32];
        bytes.copy_from_slice(&out);
        Digest32(bytes)
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self> {
        let raw = hex::decode(s).map_err(|e| TupError::Format(format!("bad digest `{s}`: {e}")))?;
        let bytes: [u8; 32] = raw
            .try_into()
            .map_err(|_| TupError::Format(format!("digest `{s}` is not 32 bytes")))?;
        Ok(Digest32(bytes))
    }
}

impl fmt::Display for Digest32 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl serde::Serialize for Digest32 {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> serde::Deserialize<'de> for Digest32 {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Digest32::from_hex(&s).map_err(serde::de::Error::custom)
    }
}

impl fmt::Debug for Digest32 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest32({})", self.to_hex())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CacheStats {
    pub hits: usize,
    pub misses: usize,
}

impl CacheStats {
    pub fn hit_rate(&self) -> f64 {
        let total = self.hits + self.misses;
        if total == 0 {
            1.0
        } else {
            self.hits as f64 / total as f64
        }
    }
}

/// Byte-blob store keyed by digest, optionally persisted to disk. Memory
/// entries front the disk entries.
#[derive(Debug)]
pub struct BlobStore {
    dir: Option<PathBuf>,
    ext: &'static str,
    memory: RwLock<HashMap<Digest32, Vec<u8>>>,
    write_lock: Mutex<()>,
    hits: AtomicUsize,
    misses: AtomicUsize,
}

impl BlobStore {
    pub fn in_memory(ext: &'static str) -> Self {
        BlobStore {
            dir: None,
            ext,
            memory: RwLock::new(HashMap::new()),
            write_lock: Mutex::new(()),
            hits: AtomicUsize::new(0),
            misses: AtomicUsize::new(0),
        }
    }

    pub fn on_disk(dir: impl Into<PathBuf>, ext: &'static str) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| TupError::io(&dir, e))?;
        Ok(BlobStore {
            dir: Some(dir),
            ..Self::in_memory(ext)
        })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn entry_path(&self, digest: &Digest32) -> Option<PathBuf> {
        let hex = digest.to_hex();
        self.dir
            .as_ref()
            .map(|d| d.join(&hex[..2]).join(format!("{hex}.{}", self.ext)))
    }

    pub fn get(&self, digest: &Digest32) -> Result<Option<Vec<u8>>> {
        if let Some(v) = self.memory.read().expect("cache lock poisoned").get(digest) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(Some(v.clone()));
        }
        if let Some(path) = self.entry_path(digest) {
            match fs::read(&path) {
                Ok(bytes) => {
                    self.memory
                        .write()
                        .expect("cache lock poisoned")
                        .insert(*digest, bytes.clone());
                    self.hits.fetch_add(1, Ordering::Relaxed);
                    return Ok(Some(bytes));
                }
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
                Err(e) => return Err(TupError::io(path, e)),
            }
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        Ok(None)
    }

    /// Stores an entry. Returns false when the digest was already present.
    pub fn put(&self, digest: &Digest32, bytes: &[u8]) -> Result<bool> {
        let _guard = self.write_lock.lock().expect("cache lock poisoned");
        if self
            .memory
            .read()
            .expect("cache lock poisoned")
            .contains_key(digest)
        {
            return Ok(false);
        }
        let mut fresh = true;
        if let Some(path) = self.entry_path(digest) {
            if path.exists() {
                fresh = false;
            } else {
                let parent = path.parent().expect("entry path has a parent");
                fs::create_dir_all(parent).map_err(|e| TupError::io(parent, e))?;
                let tmp = path.with_extension(format!("{}.tmp{}", self.ext, std::process::id()));
                fs::write(&tmp, bytes).map_err(|e| TupError::io(&tmp, e))?;
                fs::rename(&tmp, &path).map_err(|e| TupError::io(&path, e))?;
            }
        }
        self.memory
            .write()
            .expect("cache lock poisoned")
            .insert(*digest, bytes.to_vec());
        Ok(fresh)
    }

    /// Appends one row to `index.csv` next to the entries (disk stores only).
    pub fn append_index(&self, header: &[&str], row: &[&str]) -> Result<()> {
        let Some(dir) = &self.dir else { return Ok(()) };
        let _guard = self.write_lock.lock().expect("cache lock poisoned");
        let path = dir.join("index.csv");
        let new_file = !path.exists();
        let file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| TupError::io(&path, e))?;
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        if new_file {
            w.write_record(header)?;
        }
        w.write_record(row)?;
        w.flush().map_err(|e| TupError::io(&path, e))?;
        Ok(())
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
        }
    }
}

/// Binary embedding entry: `dim=<d>\n` followed by `d` little-endian f32.
pub fn encode_vector(values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * values.len());
    writeln!(out, "dim={}", values.len()).expect("writing to a Vec cannot fail");
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_vector(bytes: &[u8]) -> Result<Vec<f32>> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| TupError::Format("embedding entry has no header line".into()))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|e| TupError::Format(e.to_string()))?;
    let dim: usize = header
        .strip_prefix("dim=")
        .and_then(|d| d.parse().ok())
        .ok_or_else(|| TupError::Format(format!("bad embedding header `{header}`")))?;
    let body = &bytes[nl + 1..];
    if body.len() != dim * 4 {
        return Err(TupError::Format(format!(
            "embedding entry declares dim {dim} but holds {} bytes",
            body.len()
        )));
    }
    Ok(body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}
