use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Clock;
use crate::model::{DatasetDescription, DatasetStatus, Replica, RunId};
use crate::protocol::{dataset_from_xml, ProtocolError};
use crate::store::{Store, StoreError, Table, Txn};

#[derive(Debug, Error)]
pub enum BookError {
    #[error(transparent)]
    MalformedDocument(#[from] ProtocolError),
    #[error("lfn {0} is registered with different content")]
    LfnConflict(String),
    #[error("unknown lfn {0}")]
    UnknownLfn(String),
    #[error("lfn {0} is not pending")]
    NotPending(String),
    #[error("replica checksum does not match dataset {0}")]
    ChecksumMismatch(String),
    #[error("dataset {0} was rejected")]
    RejectedDataset(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Clone, Debug, Default)]
pub struct BookkeepingConfig {
    /// Approve registrations immediately, for unattended simulations.
    pub auto_approve: bool,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum RegisterOutcome {
    Registered,
    AlreadyRegistered,
}

/// Conjunctive filter; `None` fields match everything.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetQuery {
    pub run_id: Option<RunId>,
    pub data_type: Option<String>,
    pub status: Option<DatasetStatus>,
    pub min_events: Option<u64>,
}

impl DatasetQuery {
    fn matches(&self, d: &DatasetDescription) -> bool {
        self.run_id.as_ref().is_none_or(|r| *r == d.run_id)
            && self.data_type.as_ref().is_none_or(|t| *t == d.data_type)
            && self.status.is_none_or(|s| s == d.status)
            && self.min_events.is_none_or(|m| d.events >= m)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogCounts {
    pub pending: u64,
    pub approved: u64,
    pub rejected: u64,
    pub replicas: u64,
}

/// Entry of the pending table: Pending, or Rejected with its reason.
#[derive(Serialize, Deserialize)]
struct PendingEntry {
    dataset: DatasetDescription,
    reason: Option<String>,
}

pub struct BookkeepingService {
    store: Arc<Store>,
    clock: Arc<dyn Clock>,
    config: BookkeepingConfig,
}

fn replica_key(lfn: &str, se: &str) -> String {
    format!("{lfn}\0{se}")
}

enum Found {
    Pending(DatasetDescription),
    Rejected(DatasetDescription),
    Approved(DatasetDescription),
}

fn find(txn: &Txn<'_>, lfn: &str) -> Result<Option<Found>, StoreError> {
    if let Some(d) = txn.get_json::<DatasetDescription>(Table::DatasetsCatalog, lfn)? {
        return Ok(Some(Found::Approved(d)));
    }
    Ok(txn.get_json::<PendingEntry>(Table::DatasetsPending, lfn)?.map(|e| {
        if e.dataset.status == DatasetStatus::Rejected {
            Found::Rejected(e.dataset)
        } else {
            Found::Pending(e.dataset)
        }
    }))
}

impl BookkeepingService {
    pub fn new(store: Arc<Store>, clock: Arc<dyn Clock>, config: BookkeepingConfig) -> Self {
        BookkeepingService { store, clock, config }
    }

    pub fn register_dataset_xml(&self, xml: &[u8]) -> Result<RegisterOutcome, BookError> {
        self.register_dataset(dataset_from_xml(xml)?)
    }

    /// Idempotent on lfn: identical content acks, different content conflicts.
    pub fn register_dataset(&self, mut d: DatasetDescription) -> Result<RegisterOutcome, BookError> {
        d.status = DatasetStatus::Pending;
        self.store.transact(|txn| {
            if let Some(found) = find(txn, &d.lfn)? {
                let existing = match &found {
                    Found::Pending(e) | Found::Rejected(e) | Found::Approved(e) => e,
                };
                return if existing.same_content(&d) {
                    Ok(RegisterOutcome::AlreadyRegistered)
                } else {
                    Err(BookError::LfnConflict(d.lfn.clone()))
                };
            }
            if self.config.auto_approve {
                d.status = DatasetStatus::Approved;
                txn.put_json(Table::DatasetsCatalog, &d.lfn, &d)?;
            } else {
                txn.put_json(Table::DatasetsPending, &d.lfn, &PendingEntry { dataset: d.clone(), reason: None })?;
            }
            Ok(RegisterOutcome::Registered)
        })
    }

    /// Moves Pending entries to the catalog. One result per input lfn.
    pub fn approve(&self, lfns: &[String]) -> Result<Vec<Result<(), BookError>>, BookError> {
        self.store.transact(|txn| {
            let mut out = Vec::with_capacity(lfns.len());
            for lfn in lfns {
                out.push(match find(txn, lfn)? {
                    Some(Found::Pending(mut d)) => {
                        txn.delete(Table::DatasetsPending, lfn);
                        d.status = DatasetStatus::Approved;
                        txn.put_json(Table::DatasetsCatalog, lfn, &d)?;
                        Ok(())
                    }
                    Some(_) => Err(BookError::NotPending(lfn.clone())),
                    None => Err(BookError::UnknownLfn(lfn.clone())),
                });
            }
            Ok(out)
        })
    }

    pub fn reject(&self, lfns: &[String], reason: &str) -> Result<Vec<Result<(), BookError>>, BookError> {
        self.store.transact(|txn| {
            let mut out = Vec::with_capacity(lfns.len());
            for lfn in lfns {
                out.push(match find(txn, lfn)? {
                    Some(Found::Pending(mut d)) => {
                        d.status = DatasetStatus::Rejected;
                        txn.put_json(
                            Table::DatasetsPending,
                            lfn,
                            &PendingEntry {
                                dataset: d,
                                reason: Some(reason.to_string()),
                            },
                        )?;
                        Ok(())
                    }
                    Some(_) => Err(BookError::NotPending(lfn.clone())),
                    None => Err(BookError::UnknownLfn(lfn.clone())),
                });
            }
            Ok(out)
        })
    }

    pub fn rejection_reason(&self, lfn: &str) -> Result<Option<String>, BookError> {
        self.store.transact(|txn| {
            Ok(txn
                .get_json::<PendingEntry>(Table::DatasetsPending, lfn)?
                .and_then(|e| e.reason))
        })
    }

    /// Registers a physical copy. Repeating a (lfn, storage element) pair is
    /// a no-op that keeps the first registration.
    pub fn add_replica(&self, mut r: Replica) -> Result<(), BookError> {
        if r.registered_at.millis() == 0 {
            r.registered_at = self.clock.now();
        }
        self.store.transact(|txn| {
            let d = match find(txn, &r.lfn)? {
                Some(Found::Pending(d)) | Some(Found::Approved(d)) => d,
                Some(Found::Rejected(_)) => return Err(BookError::RejectedDataset(r.lfn.clone())),
                None => return Err(BookError::UnknownLfn(r.lfn.clone())),
            };
            if d.checksum != r.checksum {
                return Err(BookError::ChecksumMismatch(r.lfn.clone()));
            }
            let key = replica_key(&r.lfn, &r.storage_element);
            if !txn.contains(Table::Replicas, &key) {
                txn.put_json(Table::Replicas, &key, &r)?;
            }
            Ok(())
        })
    }

    pub fn replicas(&self, lfn: &str) -> Result<Vec<Replica>, BookError> {
        self.store.transact(|txn| replicas_of(txn, lfn))
    }

    /// Matching datasets ordered by lfn, each with its replicas.
    pub fn query_datasets(&self, q: &DatasetQuery) -> Result<Vec<(DatasetDescription, Vec<Replica>)>, BookError> {
        self.store.transact(|txn| {
            let mut found: Vec<DatasetDescription> = Vec::new();
            if q.status.is_none_or(|s| s == DatasetStatus::Approved) {
                found.extend(
                    txn.scan_json::<DatasetDescription>(Table::DatasetsCatalog, "")?
                        .into_iter()
                        .map(|(_, d)| d)
                        .filter(|d| q.matches(d)),
                );
            }
            if q.status != Some(DatasetStatus::Approved) {
                found.extend(
                    txn.scan_json::<PendingEntry>(Table::DatasetsPending, "")?
                        .into_iter()
                        .map(|(_, e)| e.dataset)
                        .filter(|d| q.matches(d)),
                );
            }
            found.sort_by(|a, b| a.lfn.cmp(&b.lfn));
            found
                .into_iter()
                .map(|d| {
                    let reps = replicas_of(txn, &d.lfn)?;
                    Ok((d, reps))
                })
                .collect()
        })
    }

    pub fn counts(&self) -> Result<CatalogCounts, BookError> {
        self.store.transact(|txn| {
            let mut c = CatalogCounts {
                approved: txn.len(Table::DatasetsCatalog) as u64,
                replicas: txn.len(Table::Replicas) as u64,
                ..Default::default()
            };
            for (_, e) in txn.scan_json::<PendingEntry>(Table::DatasetsPending, "")? {
                if e.dataset.status == DatasetStatus::Rejected {
                    c.rejected += 1;
                } else {
                    c.pending += 1;
                }
            }
            Ok(c)
        })
    }
}

fn replicas_of(txn: &Txn<'_>, lfn: &str) -> Result<Vec<Replica>, BookError> {
    Ok(txn
        .scan_json::<Replica>(Table::Replicas, &format!("{lfn}\0"))?
        .into_iter()
        .map(|(_, r)| r)
        .collect())
}
