//! Simulated cloud object store with per-tenant buckets.
//!
//! On-disk layout under the store root:
//!
//! ```text
//! <bucket>/bucket.json          {"name":..,"tenant":..,"credential":..}
//! <bucket>/objects/<escaped>    u64 LE version | object bytes
//! <bucket>/tmp/<n>              in-flight writes, deleted on restart
//! ```
//!
//! Object keys are escaped byte-wise: `[A-Za-z0-9_-]` is kept, every other
//! byte becomes `%XX` (uppercase hex), so `logs/a.txt` is stored as
//! `logs%2Fa%2Etxt`. Writes go to `tmp/` first and are renamed into place,
//! so readers see either the previous complete object or the new one.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ObjectError {
    #[error("ACCESS_DENIED: {0}")]
    AccessDenied(String),
    #[error("NOT_FOUND: {0}")]
    NotFound(String),
    #[error("bucket already exists: {0}")]
    BucketExists(String),
    #[error("invalid name {0:?}")]
    InvalidName(String),
    #[error("STORE_UNAVAILABLE")]
    Unavailable,
    #[error("object store io: {0}")]
    Io(String),
}

fn io_err(e: std::io::Error) -> ObjectError {
    ObjectError::Io(e.to_string())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bucket {
    pub name: String,
    pub tenant: String,
    pub credential: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoredObject {
    pub key: String,
    pub bytes: Vec<u8>,
    pub version: u64,
}

/// Simulated network cost of reading from a bucket.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ReadThrottle {
    pub latency: Duration,
    pub bytes_per_sec: Option<u64>,
}

impl ReadThrottle {
    pub fn cost(&self, len: usize) -> Duration {
        let transfer = match self.bytes_per_sec {
            Some(bps) if bps > 0 => Duration::from_millis(len as u64 * 1000 / bps),
            _ => Duration::ZERO,
        };
        self.latency + transfer
    }
}

pub fn escape_key(key: &str) -> String {
    let mut out = String::with_capacity(key.len());
    for b in key.bytes() {
        if b.is_ascii_alphanumeric() || b == b'_' || b == b'-' {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    out
}

pub fn unescape_key(name: &str) -> Option<String> {
    let bytes = name.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'%' {
            let hex = std::str::from_utf8(bytes.get(i + 1..i + 3)?).ok()?;
            out.push(u8::from_str_radix(hex, 16).ok()?);
            i += 3;
        } else {
            out.push(bytes[i]);
            i += 1;
        }
    }
    String::from_utf8(out).ok()
}

fn valid_bucket_name(name: &str) -> bool {
    !name.is_empty()
        && name.len() <= 63
        && name.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'-')
}

struct Live {
    buckets: BTreeMap<String, Bucket>,
    versions: BTreeMap<String, BTreeMap<String, u64>>,
    throttles: BTreeMap<String, ReadThrottle>,
    tmp_seq: u64,
}

pub struct ObjectStore {
    root: PathBuf,
    sync: bool,
    live: Mutex<Option<Live>>,
}

impl ObjectStore {
    pub fn open(root: impl AsRef<Path>, sync: bool) -> Result<Self, ObjectError> {
        let store = ObjectStore { root: root.as_ref().to_path_buf(), sync, live: Mutex::new(None) };
        fs::create_dir_all(&store.root).map_err(io_err)?;
        store.restart()?;
        Ok(store)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn crash(&self) {
        *self.live.lock() = None;
    }

    pub fn is_up(&self) -> bool {
        self.live.lock().is_some()
    }

    /// Rebuilds the index from disk, discarding in-flight temporary files.
    pub fn restart(&self) -> Result<(), ObjectError> {
        let mut guard = self.live.lock();
        if guard.is_some() {
            return Ok(());
        }
        let mut live = Live {
            buckets: BTreeMap::new(),
            versions: BTreeMap::new(),
            throttles: BTreeMap::new(),
            tmp_seq: 0,
        };
        for dir in fs::read_dir(&self.root).map_err(io_err)? {
            let dir = dir.map_err(io_err)?.path();
            let meta_path = dir.join("bucket.json");
            let Ok(meta) = fs::read(&meta_path) else { continue };
            let bucket: Bucket =
                serde_json::from_slice(&meta).map_err(|e| ObjectError::Io(e.to_string()))?;
            let tmp = dir.join("tmp");
            if tmp.exists() {
                fs::remove_dir_all(&tmp).map_err(io_err)?;
            }
            fs::create_dir_all(&tmp).map_err(io_err)?;
            let mut versions = BTreeMap::new();
            for obj in fs::read_dir(dir.join("objects")).map_err(io_err)? {
                let obj = obj.map_err(io_err)?;
                let Some(key) = obj.file_name().to_str().and_then(unescape_key) else { continue };
                let bytes = fs::read(obj.path()).map_err(io_err)?;
                if bytes.len() >= 8 {
                    versions.insert(key, u64::from_le_bytes(bytes[..8].try_into().unwrap()));
                }
            }
            live.versions.insert(bucket.name.clone(), versions);
            live.buckets.insert(bucket.name.clone(), bucket);
        }
        *guard = Some(live);
        Ok(())
    }

    fn with_live<T>(
        &self,
        f: impl FnOnce(&mut Live) -> Result<T, ObjectError>,
    ) -> Result<T, ObjectError> {
        let mut guard = self.live.lock();
        let live = guard.as_mut().ok_or(ObjectError::Unavailable)?;
        f(live)
    }

    fn bucket_dir(&self, bucket: &str) -> PathBuf {
        self.root.join(bucket)
    }

    pub fn create_bucket(&self, name: &str, tenant: &str, credential: &str) -> Result<(), ObjectError> {
        if !valid_bucket_name(name) {
            return Err(ObjectError::InvalidName(name.to_string()));
        }
        self.with_live(|live| {
            if live.buckets.contains_key(name) {
                return Err(ObjectError::BucketExists(name.to_string()));
            }
            let dir = self.bucket_dir(name);
            fs::create_dir_all(dir.join("objects")).map_err(io_err)?;
            fs::create_dir_all(dir.join("tmp")).map_err(io_err)?;
            let bucket = Bucket {
                name: name.to_string(),
                tenant: tenant.to_string(),
                credential: credential.to_string(),
            };
            let meta = serde_json::to_vec(&bucket).expect("bucket serializes");
            atomic_write(&dir.join("tmp").join("bucket.json"), &dir.join("bucket.json"), &meta, self.sync)?;
            live.versions.insert(name.to_string(), BTreeMap::new());
            live.buckets.insert(name.to_string(), bucket);
            Ok(())
        })
    }

    /// Owning tenant of `bucket`, if it exists.
    pub fn bucket_tenant(&self, bucket: &str) -> Result<Option<String>, ObjectError> {
        self.with_live(|live| Ok(live.buckets.get(bucket).map(|b| b.tenant.clone())))
    }

    /// Verifies `credential` opens `bucket`.
    pub fn authorize(&self, bucket: &str, credential: &str) -> Result<Bucket, ObjectError> {
        self.with_live(|live| authorize(live, bucket, credential).cloned())
    }

    pub fn set_read_throttle(&self, bucket: &str, throttle: ReadThrottle) -> Result<(), ObjectError> {
        self.with_live(|live| {
            live.throttles.insert(bucket.to_string(), throttle);
            Ok(())
        })
    }

    pub fn read_cost(&self, bucket: &str, len: usize) -> Duration {
        self.with_live(|live| Ok(live.throttles.get(bucket).map(|t| t.cost(len)).unwrap_or_default()))
            .unwrap_or_default()
    }

    /// Stores `bytes` under `key`, replacing any previous version atomically.
    pub fn put_object(
        &self,
        bucket: &str,
        credential: &str,
        key: &str,
        bytes: &[u8],
    ) -> Result<u64, ObjectError> {
        if key.is_empty() {
            return Err(ObjectError::InvalidName(key.to_string()));
        }
        self.with_live(|live| {
            authorize(live, bucket, credential)?;
            let version = live.versions[bucket].get(key).copied().unwrap_or(0) + 1;
            live.tmp_seq += 1;
            let dir = self.bucket_dir(bucket);
            let tmp = dir.join("tmp").join(live.tmp_seq.to_string());
            let mut content = Vec::with_capacity(8 + bytes.len());
            content.extend_from_slice(&version.to_le_bytes());
            content.extend_from_slice(bytes);
            atomic_write(&tmp, &dir.join("objects").join(escape_key(key)), &content, self.sync)?;
            live.versions.get_mut(bucket).unwrap().insert(key.to_string(), version);
            Ok(version)
        })
    }

    /// Fault hook: a writer that dies after writing `written` bytes of the new
    /// object to its temporary file, before the rename.
    pub fn put_object_torn(
        &self,
        bucket: &str,
        credential: &str,
        _key: &str,
        bytes: &[u8],
        written: usize,
    ) -> Result<(), ObjectError> {
        self.with_live(|live| {
            authorize(live, bucket, credential)?;
            live.tmp_seq += 1;
            let tmp = self.bucket_dir(bucket).join("tmp").join(live.tmp_seq.to_string());
            fs::write(tmp, &bytes[..written.min(bytes.len())]).map_err(io_err)
        })
    }

    pub fn get_object(&self, bucket: &str, credential: &str, key: &str) -> Result<Vec<u8>, ObjectError> {
        self.get_versioned(bucket, credential, key).map(|o| o.bytes)
    }

    pub fn get_versioned(
        &self,
        bucket: &str,
        credential: &str,
        key: &str,
    ) -> Result<StoredObject, ObjectError> {
        self.with_live(|live| {
            authorize(live, bucket, credential)?;
            if !live.versions[bucket].contains_key(key) {
                return Err(ObjectError::NotFound(format!("{bucket}/{key}")));
            }
            let raw = fs::read(self.bucket_dir(bucket).join("objects").join(escape_key(key)))
                .map_err(io_err)?;
            let version = u64::from_le_bytes(raw[..8].try_into().unwrap());
            Ok(StoredObject { key: key.to_string(), bytes: raw[8..].to_vec(), version })
        })
    }

    /// Keys under `prefix`, in lexicographic order.
    pub fn list_objects(
        &self,
        bucket: &str,
        credential: &str,
        prefix: &str,
    ) -> Result<Vec<String>, ObjectError> {
        self.with_live(|live| {
            authorize(live, bucket, credential)?;
            Ok(live.versions[bucket]
                .range(prefix.to_string()..)
                .take_while(|(k, _)| k.starts_with(prefix))
                .map(|(k, _)| k.clone())
                .collect())
        })
    }
}

fn authorize<'a>(live: &'a Live, bucket: &str, credential: &str) -> Result<&'a Bucket, ObjectError> {
    let b = live
        .buckets
        .get(bucket)
        .ok_or_else(|| ObjectError::NotFound(bucket.to_string()))?;
    if b.credential != credential {
        return Err(ObjectError::AccessDenied(bucket.to_string()));
    }
    Ok(b)
}

fn atomic_write(tmp: &Path, dest: &Path, bytes: &[u8], sync: bool) -> Result<(), ObjectError> {
    let mut f = fs::File::create(tmp).map_err(io_err)?;
    f.write_all(bytes).map_err(io_err)?;
    if sync {
        f.sync_all().map_err(io_err)?;
    }
    drop(f);
    fs::rename(tmp, dest).map_err(io_err)
}
