//! The three durable stores bundled together, as the cluster and the control
//! plane see them.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::kv::{CoordKv, KvError};
use crate::metadata::{MetadataError, MetadataStore};
use crate::objects::{ObjectError, ObjectStore};

#[derive(Debug, Error)]
pub enum OpenError {
    #[error(transparent)]
    Metadata(#[from] MetadataError),
    #[error(transparent)]
    Kv(#[from] KvError),
    #[error(transparent)]
    Object(#[from] ObjectError),
}

#[derive(Debug, Clone, Copy, Default)]
pub struct StoreOptions {
    /// fsync every write; off in simulation where a crash never loses the page cache.
    pub sync: bool,
    /// KV revisions retained for watches; `None` keeps all.
    pub kv_retain: Option<u64>,
}

pub struct Stores {
    pub metadata: MetadataStore,
    pub kv: CoordKv,
    pub objects: ObjectStore,
}

impl Stores {
    /// Opens all stores under `dir` (`metadata/`, `kv/`, `objects/`).
    pub fn open(dir: impl AsRef<Path>, opts: StoreOptions) -> Result<Self, OpenError> {
        let dir = dir.as_ref();
        Ok(Stores {
            metadata: MetadataStore::open(dir.join("metadata"), opts.sync)?,
            kv: CoordKv::open(dir.join("kv"), opts.sync, opts.kv_retain)?,
            objects: ObjectStore::open(dir.join("objects"), opts.sync)?,
        })
    }

    pub fn crash(&self, which: StoreKind) {
        match which {
            StoreKind::Metadata => self.metadata.crash(),
            StoreKind::Kv => self.kv.crash(),
            StoreKind::Object => self.objects.crash(),
        }
    }

    pub fn restart(&self, which: StoreKind) -> Result<(), OpenError> {
        match which {
            StoreKind::Metadata => self.metadata.restart()?,
            StoreKind::Kv => self.kv.restart()?,
            StoreKind::Object => self.objects.restart()?,
        }
        Ok(())
    }

    pub fn is_up(&self, which: StoreKind) -> bool {
        match which {
            StoreKind::Metadata => self.metadata.is_up(),
            StoreKind::Kv => self.kv.is_up(),
            StoreKind::Object => self.objects.is_up(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum StoreKind {
    Metadata,
    Kv,
    Object,
}

impl StoreKind {
    pub const ALL: [StoreKind; 3] = [StoreKind::Metadata, StoreKind::Kv, StoreKind::Object];
}

impl fmt::Display for StoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StoreKind::Metadata => "metadata",
            StoreKind::Kv => "kv",
            StoreKind::Object => "object",
        })
    }
}

impl FromStr for StoreKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "metadata" => Ok(StoreKind::Metadata),
            "kv" => Ok(StoreKind::Kv),
            "object" => Ok(StoreKind::Object),
            other => Err(format!("unknown store {other:?}")),
        }
    }
}
