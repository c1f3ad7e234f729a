//! The production database: an embeddable, file-backed record store.
//!
//! State is a set of ordered key/value tables held in memory. Every committed
//! transaction is appended to a journal (and synced) before `transact`
//! returns; `compact` folds the journal into a snapshot. Transactions run one
//! at a time under a single lock, so any interleaving of concurrent callers
//! is equivalent to some serial order.

mod journal;

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use fs2::FileExt;
use parking_lot::Mutex;
use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use journal::Scan;

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum Table {
    Workflows = 0,
    Runs = 1,
    Jobs = 2,
    JobHistory = 3,
    DatasetsPending = 4,
    DatasetsCatalog = 5,
    Replicas = 6,
    Packages = 7,
    Descriptors = 8,
    Waiting = 9,
    Meta = 10,
    StatusDedup = 11,
}

impl Table {
    pub const ALL: [Table; 12] = [
        Table::Workflows,
        Table::Runs,
        Table::Jobs,
        Table::JobHistory,
        Table::DatasetsPending,
        Table::DatasetsCatalog,
        Table::Replicas,
        Table::Packages,
        Table::Descriptors,
        Table::Waiting,
        Table::Meta,
        Table::StatusDedup,
    ];

    fn from_code(code: u8) -> Option<Table> {
        Table::ALL.get(code as usize).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Mutation {
    Put { table: Table, key: String, value: Vec<u8> },
    Delete { table: Table, key: String },
}

/// One step of an operation-list transaction (see [`Store::apply`]).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Op {
    Get { table: Table, key: String },
    Put { table: Table, key: String, value: Vec<u8> },
    Delete { table: Table, key: String },
    /// Aborts the transaction with [`StoreError::Conflict`] unless the key
    /// currently holds exactly `value` (`None` meaning absent).
    Expect { table: Table, key: String, value: Option<Vec<u8>> },
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("conflict on {table:?}/{key}; retry the transaction")]
    Conflict { table: Table, key: String },
    #[error("journal is corrupt at byte offset {offset}")]
    CorruptJournal { offset: u64 },
    #[error("snapshot is corrupt: {0}")]
    CorruptSnapshot(String),
    #[error("store directory is locked by another process")]
    Locked,
    #[error("I/O failure: {0}")]
    IoFailure(#[from] io::Error),
    #[error("record encoding: {0}")]
    Codec(String),
}

impl StoreError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, StoreError::Conflict { .. })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StoreOptions {
    /// Sync the journal before a commit returns.
    pub sync: bool,
}

impl Default for StoreOptions {
    fn default() -> Self {
        StoreOptions { sync: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CompactStats {
    pub records: usize,
    pub journal_bytes_before: u64,
    pub snapshot_bytes: u64,
}

struct Disk {
    root: PathBuf,
    journal: File,
    journal_len: u64,
    sync: bool,
    _lock: File,
}

struct Inner {
    tables: Vec<BTreeMap<String, Vec<u8>>>,
    disk: Option<Disk>,
}

pub struct Store {
    inner: Mutex<Inner>,
}

const SNAPSHOT: &str = "snapshot";
const SNAPSHOT_TMP: &str = "snapshot.tmp";
const JOURNAL: &str = "journal";
const LOCK: &str = "LOCK";
const SNAPSHOT_BATCH: usize = 1024;

fn empty_tables() -> Vec<BTreeMap<String, Vec<u8>>> {
    Table::ALL.iter().map(|_| BTreeMap::new()).collect()
}

fn apply_mutation(tables: &mut [BTreeMap<String, Vec<u8>>], m: Mutation) {
    match m {
        Mutation::Put { table, key, value } => {
            tables[table as usize].insert(key, value);
        }
        Mutation::Delete { table, key } => {
            tables[table as usize].remove(&key);
        }
    }
}

impl Store {
    /// A store with no backing files. Used by simulations and tests.
    pub fn in_memory() -> Self {
        Store {
            inner: Mutex::new(Inner {
                tables: empty_tables(),
                disk: None,
            }),
        }
    }

    pub fn open(root: impl AsRef<Path>) -> Result<Self, StoreError> {
        Self::open_with(root, StoreOptions::default())
    }

    pub fn open_with(root: impl AsRef<Path>, options: StoreOptions) -> Result<Self, StoreError> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(&root)?;
        let lock = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(root.join(LOCK))?;
        lock.try_lock_exclusive().map_err(|_| StoreError::Locked)?;

        let mut tables = empty_tables();
        match fs::read(root.join(SNAPSHOT)) {
            Ok(data) => load_snapshot(&data, &mut tables)?,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {}
            Err(e) => return Err(e.into()),
        }

        let mut journal = OpenOptions::new()
            .create(true)
            .truncate(false)
            .read(true)
            .write(true)
            .open(root.join(JOURNAL))?;
        let mut data = Vec::new();
        journal.read_to_end(&mut data)?;
        let valid_len = match journal::scan(&data) {
            Scan::Corrupt { offset } => return Err(StoreError::CorruptJournal { offset }),
            Scan::Ok { batches, valid_len } => {
                for batch in batches {
                    for m in batch {
                        apply_mutation(&mut tables, m);
                    }
                }
                valid_len
            }
        };
        if valid_len != data.len() as u64 {
            // Drop the torn tail so later appends start on a record boundary.
            journal.set_len(valid_len)?;
            journal.sync_all()?;
        }
        drop(journal);
        let journal = OpenOptions::new().append(true).open(root.join(JOURNAL))?;

        Ok(Store {
            inner: Mutex::new(Inner {
                tables,
                disk: Some(Disk {
                    root,
                    journal,
                    journal_len: valid_len,
                    sync: options.sync,
                    _lock: lock,
                }),
            }),
        })
    }

    /// Runs `f` as one serializable transaction. Writes become visible to
    /// other transactions, and durable, only if `f` returns `Ok` and the
    /// journal append succeeds.
    pub fn transact<T, E, F>(&self, f: F) -> Result<T, E>
    where
        E: From<StoreError>,
        F: FnOnce(&mut Txn<'_>) -> Result<T, E>,
    {
        let mut inner = self.inner.lock();
        let mut txn = Txn {
            inner: &mut inner,
            undo: Vec::new(),
            writes: Vec::new(),
            committed: false,
        };
        let out = f(&mut txn)?;
        txn.commit()?;
        Ok(out)
    }

    /// Executes an operation list atomically. Returns one slot per op; `Get`
    /// slots hold the value read, every other slot is `None`.
    pub fn apply(&self, ops: Vec<Op>) -> Result<Vec<Option<Vec<u8>>>, StoreError> {
        self.transact(|txn| {
            let mut out = Vec::with_capacity(ops.len());
            for op in ops {
                match op {
                    Op::Get { table, key } => out.push(txn.get(table, &key).map(<[u8]>::to_vec)),
                    Op::Put { table, key, value } => {
                        txn.put(table, &key, value);
                        out.push(None);
                    }
                    Op::Delete { table, key } => {
                        txn.delete(table, &key);
                        out.push(None);
                    }
                    Op::Expect { table, key, value } => {
                        if txn.get(table, &key) != value.as_deref() {
                            return Err(StoreError::Conflict { table, key });
                        }
                        out.push(None);
                    }
                }
            }
            Ok(out)
        })
    }

    /// Rewrites the snapshot from the current state and empties the journal.
    pub fn compact(&self) -> Result<CompactStats, StoreError> {
        let mut inner = self.inner.lock();
        let Inner { tables, disk } = &mut *inner;
        let records = tables.iter().map(BTreeMap::len).sum();
        let Some(disk) = disk else {
            return Ok(CompactStats {
                records,
                ..CompactStats::default()
            });
        };
        let journal_bytes_before = disk.journal_len;

        let mut data = Vec::new();
        let mut batch = Vec::with_capacity(SNAPSHOT_BATCH);
        for table in Table::ALL {
            for (key, value) in &tables[table as usize] {
                batch.push(Mutation::Put {
                    table,
                    key: key.clone(),
                    value: value.clone(),
                });
                if batch.len() == SNAPSHOT_BATCH {
                    data.extend(journal::frame(&journal::encode_batch(&batch)));
                    batch.clear();
                }
            }
        }
        if !batch.is_empty() {
            data.extend(journal::frame(&journal::encode_batch(&batch)));
        }
        // An empty batch terminates a complete snapshot.
        data.extend(journal::frame(&journal::encode_batch(&[])));

        let tmp = disk.root.join(SNAPSHOT_TMP);
        {
            let mut f = File::create(&tmp)?;
            f.write_all(&data)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, disk.root.join(SNAPSHOT))?;
        sync_dir(&disk.root)?;
        // Replaying an old journal over the new snapshot is harmless, so a
        // crash between the rename and this truncation loses nothing.
        disk.journal.set_len(0)?;
        disk.journal.sync_all()?;
        disk.journal_len = 0;
        Ok(CompactStats {
            records,
            journal_bytes_before,
            snapshot_bytes: data.len() as u64,
        })
    }

    /// Checksum over every table entry, in order.
    pub fn state_digest(&self) -> u32 {
        let inner = self.inner.lock();
        let mut h = crc32fast::Hasher::new();
        for (i, table) in inner.tables.iter().enumerate() {
            for (k, v) in table {
                h.update(&[i as u8]);
                h.update(&(k.len() as u32).to_le_bytes());
                h.update(k.as_bytes());
                h.update(&(v.len() as u32).to_le_bytes());
                h.update(v);
            }
        }
        h.finalize()
    }

    pub fn len(&self, table: Table) -> usize {
        self.inner.lock().tables[table as usize].len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.lock().tables.iter().all(BTreeMap::is_empty)
    }

    /// A copy of one table, for tests and diagnostics.
    pub fn dump(&self, table: Table) -> BTreeMap<String, Vec<u8>> {
        self.inner.lock().tables[table as usize].clone()
    }

    pub fn journal_path(&self) -> Option<PathBuf> {
        self.inner.lock().disk.as_ref().map(|d| d.root.join(JOURNAL))
    }
}

fn load_snapshot(data: &[u8], tables: &mut [BTreeMap<String, Vec<u8>>]) -> Result<(), StoreError> {
    match journal::scan(data) {
        Scan::Corrupt { offset } => Err(StoreError::CorruptSnapshot(format!("bad record at {offset}"))),
        Scan::Ok { batches, valid_len } => {
            let terminated = batches.last().is_some_and(Vec::is_empty);
            if valid_len != data.len() as u64 || !terminated {
                return Err(StoreError::CorruptSnapshot("truncated".into()));
            }
            for batch in batches {
                for m in batch {
                    apply_mutation(tables, m);
                }
            }
            Ok(())
        }
    }
}

fn sync_dir(dir: &Path) -> io::Result<()> {
    File::open(dir)?.sync_all()
}

/// An open transaction. Reads observe the transaction's own writes.
pub struct Txn<'a> {
    inner: &'a mut Inner,
    undo: Vec<(Table, String, Option<Vec<u8>>)>,
    writes: Vec<Mutation>,
    committed: bool,
}

impl<'a> Txn<'a> {
    pub fn get(&self, table: Table, key: &str) -> Option<&[u8]> {
        self.inner.tables[table as usize].get(key).map(Vec::as_slice)
    }

    pub fn contains(&self, table: Table, key: &str) -> bool {
        self.inner.tables[table as usize].contains_key(key)
    }

    pub fn put(&mut self, table: Table, key: &str, value: Vec<u8>) {
        let prev = self.inner.tables[table as usize].insert(key.to_string(), value.clone());
        self.undo.push((table, key.to_string(), prev));
        self.writes.push(Mutation::Put {
            table,
            key: key.to_string(),
            value,
        });
    }

    pub fn delete(&mut self, table: Table, key: &str) -> bool {
        let prev = self.inner.tables[table as usize].remove(key);
        let existed = prev.is_some();
        if existed {
            self.undo.push((table, key.to_string(), prev));
            self.writes.push(Mutation::Delete {
                table,
                key: key.to_string(),
            });
        }
        existed
    }

    pub fn get_json<T: DeserializeOwned>(&self, table: Table, key: &str) -> Result<Option<T>, StoreError> {
        self.get(table, key)
            .map(|b| serde_json::from_slice(b).map_err(|e| StoreError::Codec(format!("{table:?}/{key}: {e}"))))
            .transpose()
    }

    pub fn put_json<T: Serialize>(&mut self, table: Table, key: &str, value: &T) -> Result<(), StoreError> {
        let bytes = serde_json::to_vec(value).map_err(|e| StoreError::Codec(e.to_string()))?;
        self.put(table, key, bytes);
        Ok(())
    }

    /// Entries whose key starts with `prefix`, in key order.
    pub fn scan<'t>(&'t self, table: Table, prefix: &'t str) -> impl Iterator<Item = (&'t str, &'t [u8])> + 't {
        self.inner.tables[table as usize]
            .range::<str, _>((std::ops::Bound::Included(prefix), std::ops::Bound::Unbounded))
            .take_while(move |(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn scan_json<T: DeserializeOwned>(&self, table: Table, prefix: &str) -> Result<Vec<(String, T)>, StoreError> {
        self.scan(table, prefix)
            .map(|(k, v)| {
                serde_json::from_slice(v)
                    .map(|t| (k.to_string(), t))
                    .map_err(|e| StoreError::Codec(format!("{table:?}/{k}: {e}")))
            })
            .collect()
    }

    pub fn len(&self, table: Table) -> usize {
        self.inner.tables[table as usize].len()
    }

    /// Next value of a named counter, starting at 1.
    pub fn next_id(&mut self, counter: &str) -> Result<u64, StoreError> {
        let key = format!("counter/{counter}");
        let next = self.get_json::<u64>(Table::Meta, &key)?.unwrap_or(0) + 1;
        self.put_json(Table::Meta, &key, &next)?;
        Ok(next)
    }

    fn commit(mut self) -> Result<(), StoreError> {
        if !self.writes.is_empty() {
            if let Some(disk) = self.inner.disk.as_mut() {
                let record = journal::frame(&journal::encode_batch(&self.writes));
                let written = disk.journal.write_all(&record).and_then(|_| {
                    if disk.sync {
                        disk.journal.sync_data()
                    } else {
                        Ok(())
                    }
                });
                if let Err(e) = written {
                    // Best effort: cut off whatever part of the record landed.
                    let _ = disk.journal.set_len(disk.journal_len);
                    return Err(e.into());
                }
                disk.journal_len += record.len() as u64;
            }
        }
        self.committed = true;
        Ok(())
    }
}

impl Drop for Txn<'_> {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        while let Some((table, key, prev)) = self.undo.pop() {
            let t = &mut self.inner.tables[table as usize];
            match prev {
                Some(v) => {
                    t.insert(key, v);
                }
                None => {
                    t.remove(&key);
                }
            }
        }
    }
}
