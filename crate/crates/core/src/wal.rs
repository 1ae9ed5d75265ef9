//! Append-only record log with per-record checksums.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! header:  b"TPWL" | tag: [u8; 4] | version: u32
//! record:  len: u32 | crc32(payload): u32 | payload: [u8; len]
//! ```
//!
//! On open every record is replayed in order. The first record that is short
//! or fails its checksum marks a torn tail: the file is truncated there and the
//! remaining bytes are discarded.

use std::fs::{File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

const MAGIC: &[u8; 4] = b"TPWL";
pub const LOG_VERSION: u32 = 1;
const HEADER_LEN: u64 = 12;
const MAX_RECORD: u32 = 64 << 20;

#[derive(Debug)]
pub struct Wal {
    path: PathBuf,
    file: File,
    len: u64,
    sync: bool,
}

/// Result of replaying a log on open.
#[derive(Debug)]
pub struct Replay {
    pub records: Vec<Vec<u8>>,
    /// Bytes dropped from a torn tail, zero for a clean log.
    pub truncated_bytes: u64,
}

impl Wal {
    /// Opens (or creates) the log at `path`, replaying existing records.
    pub fn open(path: impl AsRef<Path>, tag: [u8; 4], sync: bool) -> io::Result<(Wal, Replay)> {
        let path = path.as_ref().to_path_buf();
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(false)
            .open(&path)?;
        let file_len = file.metadata()?.len();

        if file_len < HEADER_LEN {
            // Fresh log, or a crash while writing the header.
            file.set_len(0)?;
            let mut header = Vec::with_capacity(HEADER_LEN as usize);
            header.extend_from_slice(MAGIC);
            header.extend_from_slice(&tag);
            header.extend_from_slice(&LOG_VERSION.to_le_bytes());
            file.write_all(&header)?;
            file.sync_all()?;
            let wal = Wal { path, file, len: HEADER_LEN, sync };
            return Ok((wal, Replay { records: Vec::new(), truncated_bytes: 0 }));
        }

        let mut bytes = Vec::with_capacity(file_len as usize);
        file.seek(SeekFrom::Start(0))?;
        file.read_to_end(&mut bytes)?;
        if &bytes[0..4] != MAGIC || bytes[4..8] != tag {
            return Err(io::Error::new(io::ErrorKind::InvalidData, "not a log of this kind"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != LOG_VERSION {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                format!("unsupported log version {version}"),
            ));
        }

        let mut records = Vec::new();
        let mut pos = HEADER_LEN as usize;
        while let Some((payload, next)) = read_record(&bytes, pos) {
            records.push(payload.to_vec());
            pos = next;
        }
        let truncated_bytes = bytes.len() as u64 - pos as u64;
        if truncated_bytes > 0 {
            file.set_len(pos as u64)?;
            file.sync_all()?;
        }
        file.seek(SeekFrom::Start(pos as u64))?;
        let wal = Wal { path, file, len: pos as u64, sync };
        Ok((wal, Replay { records, truncated_bytes }))
    }

    /// Appends one record. Returns once the bytes are handed to the OS (and
    /// fsynced when the log was opened with `sync`).
    pub fn append(&mut self, payload: &[u8]) -> io::Result<()> {
        let mut buf = Vec::with_capacity(8 + payload.len());
        buf.extend_from_slice(&(payload.len() as u32).to_le_bytes());
        buf.extend_from_slice(&crc32fast::hash(payload).to_le_bytes());
        buf.extend_from_slice(payload);
        self.file.write_all(&buf)?;
        if self.sync {
            self.file.sync_data()?;
        }
        self.len += buf.len() as u64;
        Ok(())
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> u64 {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == HEADER_LEN
    }
}

fn read_record(bytes: &[u8], pos: usize) -> Option<(&[u8], usize)> {
    let header = bytes.get(pos..pos + 8)?;
    let len = u32::from_le_bytes(header[0..4].try_into().unwrap());
    let crc = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if len > MAX_RECORD {
        return None;
    }
    let end = pos + 8 + len as usize;
    let payload = bytes.get(pos + 8..end)?;
    (crc32fast::hash(payload) == crc).then_some((payload, end))
}
