//! Durable on-site cache of pending transfers and messages.
//!
//! Each entry is a pair of files: `<seq>.data` holds the payload and
//! `<seq>.meta` the JSON header. The header is written last (via rename), so
//! an entry exists once its `.meta` does; deleting the `.meta` is the commit
//! of removal. A `.data` without a `.meta` is debris and is swept on open.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{JobId, Timestamp};

#[derive(Debug, Error)]
pub enum OutboxError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("corrupt outbox entry {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EntryKind {
    Dataset,
    Log,
    Metadata,
}

impl EntryKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EntryKind::Dataset => "dataset",
            EntryKind::Log => "log",
            EntryKind::Metadata => "metadata",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    /// Not yet at the destination.
    Pending,
    /// Copied and checksum-verified; the replica is not registered yet.
    Transferred { url: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutboxEntry {
    pub seq: u64,
    pub kind: EntryKind,
    /// Site-local path of the file to ship; empty for metadata.
    pub local_path: String,
    /// Storage element for files, service name for metadata.
    pub destination: String,
    pub lfn: Option<String>,
    pub job_id: Option<JobId>,
    pub checksum: Option<u32>,
    pub size_bytes: u64,
    pub attempts: u32,
    pub created_at: Timestamp,
    pub stage: Stage,
}

/// Fields of a new entry; the outbox assigns `seq`, `attempts` and `stage`.
#[derive(Clone, Debug)]
pub struct NewEntry {
    pub kind: EntryKind,
    pub local_path: String,
    pub destination: String,
    pub lfn: Option<String>,
    pub job_id: Option<JobId>,
    pub checksum: Option<u32>,
    pub size_bytes: u64,
    pub created_at: Timestamp,
}

pub struct Outbox {
    dir: PathBuf,
    entries: BTreeMap<u64, OutboxEntry>,
    next_seq: u64,
}

impl Outbox {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, OutboxError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        let mut entries = BTreeMap::new();
        let mut data_files = Vec::new();
        for item in fs::read_dir(&dir)? {
            let path = item?.path();
            match path.extension().and_then(|e| e.to_str()) {
                Some("meta") => {
                    let bytes = fs::read(&path)?;
                    let e: OutboxEntry = serde_json::from_slice(&bytes).map_err(|err| OutboxError::Corrupt {
                        path: path.clone(),
                        reason: err.to_string(),
                    })?;
                    entries.insert(e.seq, e);
                }
                Some("data") => data_files.push(path),
                Some("tmp") => fs::remove_file(&path)?,
                _ => {}
            }
        }
        for path in data_files {
            let seq = path
                .file_stem()
                .and_then(|s| s.to_str())
                .and_then(|s| s.parse::<u64>().ok());
            if seq.is_none_or(|s| !entries.contains_key(&s)) {
                fs::remove_file(&path)?;
            }
        }
        let next_seq = entries.keys().next_back().map_or(1, |s| s + 1);
        Ok(Outbox { dir, entries, next_seq })
    }

    fn meta_path(&self, seq: u64) -> PathBuf {
        self.dir.join(format!("{seq:012}.meta"))
    }

    fn data_path(&self, seq: u64) -> PathBuf {
        self.dir.join(format!("{seq:012}.data"))
    }

    fn write_meta(&self, e: &OutboxEntry) -> Result<(), OutboxError> {
        let tmp = self.dir.join(format!("{:012}.tmp", e.seq));
        fs::write(&tmp, serde_json::to_vec(e).expect("entry serializes"))?;
        fs::rename(&tmp, self.meta_path(e.seq))?;
        Ok(())
    }

    pub fn push(&mut self, new: NewEntry, data: &[u8]) -> Result<u64, OutboxError> {
        let seq = self.next_seq;
        let e = OutboxEntry {
            seq,
            kind: new.kind,
            local_path: new.local_path,
            destination: new.destination,
            lfn: new.lfn,
            job_id: new.job_id,
            checksum: new.checksum,
            size_bytes: new.size_bytes,
            attempts: 0,
            created_at: new.created_at,
            stage: Stage::Pending,
        };
        fs::write(self.data_path(seq), data)?;
        self.write_meta(&e)?;
        self.next_seq += 1;
        self.entries.insert(seq, e);
        Ok(seq)
    }

    pub fn update(&mut self, e: &OutboxEntry) -> Result<(), OutboxError> {
        self.write_meta(e)?;
        self.entries.insert(e.seq, e.clone());
        Ok(())
    }

    pub fn remove(&mut self, seq: u64) -> Result<(), OutboxError> {
        match fs::remove_file(self.meta_path(seq)) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::NotFound => {}
            Err(e) => return Err(e.into()),
        }
        self.entries.remove(&seq);
        let _ = fs::remove_file(self.data_path(seq));
        Ok(())
    }

    pub fn data(&self, seq: u64) -> Result<Vec<u8>, OutboxError> {
        Ok(fs::read(self.data_path(seq))?)
    }

    pub fn get(&self, seq: u64) -> Option<&OutboxEntry> {
        self.entries.get(&seq)
    }

    /// Entries oldest first.
    pub fn entries(&self) -> impl Iterator<Item = &OutboxEntry> {
        self.entries.values()
    }

    pub fn seqs(&self) -> Vec<u64> {
        self.entries.keys().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn has_destination(&self, destination: &str) -> bool {
        self.entries.values().any(|e| e.destination == destination)
    }
}
