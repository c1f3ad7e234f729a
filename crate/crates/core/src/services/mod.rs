//! The central services: production, monitoring, bookkeeping and the
//! software repository, all sharing one store.

mod bookkeeping;
mod dispatch;
pub mod http;
mod jobs;
mod monitoring;
mod production;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use crate::model::Timestamp;
use crate::store::Store;
use crate::swrepo::Repository;

pub use bookkeeping::{BookError, BookkeepingConfig, BookkeepingService, CatalogCounts, DatasetQuery, RegisterOutcome};
pub use jobs::{EventSource, JobEvent};
pub use monitoring::{MonError, MonitoringService, ReportOutcome, SiteSummary, StatusMessage, MAX_NOTE_CHARS};
pub use production::{CreateRun, ProdError, ProductionConfig, ProductionService, RunSummary};

/// Failure reasons agents pass to `rescheduleJob` and report in notes.
pub mod reasons {
    pub const BATCH_SUBMISSION: &str = "batch_submission_failed";
    pub const SITE_FAILURE: &str = "site_failure";
    pub const APP_FAILURE: &str = "app_failure";
    pub const TRANSFER_FAILURE: &str = "transfer_failure";
    pub const SOFTWARE_UNAVAILABLE: &str = "software_unavailable";

    /// Reasons that blame the site rather than the job.
    pub fn is_site_fault(reason: &str) -> bool {
        let head = reason.split(':').next().unwrap_or("").trim();
        head == BATCH_SUBMISSION || head == SITE_FAILURE
    }
}

/// Fault codes carried in XML-RPC fault replies.
pub mod faults {
    pub const BAD_REQUEST: i32 = 1;
    pub const UNKNOWN_METHOD: i32 = 2;
    pub const UNKNOWN_WORKFLOW: i32 = 10;
    pub const UNKNOWN_RUN: i32 = 11;
    pub const UNKNOWN_JOB: i32 = 12;
    pub const ILLEGAL_STATE: i32 = 13;
    pub const INVALID_PIPELINE: i32 = 14;
    pub const DUPLICATE_ID: i32 = 15;
    pub const INVALID_PARAMETERS: i32 = 16;
    pub const LFN_CONFLICT: i32 = 20;
    pub const UNKNOWN_LFN: i32 = 21;
    pub const NOT_PENDING: i32 = 22;
    pub const CHECKSUM_MISMATCH: i32 = 23;
    pub const REJECTED_DATASET: i32 = 24;
    pub const MALFORMED_DOCUMENT: i32 = 25;
    pub const UNKNOWN_PACKAGE: i32 = 30;
    pub const MISSING_DEPENDENCY: i32 = 31;
    pub const DUPLICATE_VERSION: i32 = 32;
    pub const CYCLIC_DEPENDENCY: i32 = 33;
    pub const INTERNAL: i32 = 99;

    /// Symbolic name of a fault code, as printed by the CLI.
    pub fn name(code: i32) -> &'static str {
        match code {
            BAD_REQUEST => "BadRequest",
            UNKNOWN_METHOD => "UnknownMethod",
            UNKNOWN_WORKFLOW => "UnknownWorkflow",
            UNKNOWN_RUN => "UnknownRun",
            UNKNOWN_JOB => "UnknownJob",
            ILLEGAL_STATE => "IllegalState",
            INVALID_PIPELINE => "InvalidPipeline",
            DUPLICATE_ID => "DuplicateId",
            INVALID_PARAMETERS => "InvalidParameters",
            LFN_CONFLICT => "LfnConflict",
            UNKNOWN_LFN => "UnknownLfn",
            NOT_PENDING => "NotPending",
            CHECKSUM_MISMATCH => "ChecksumMismatch",
            REJECTED_DATASET => "RejectedDataset",
            MALFORMED_DOCUMENT => "MalformedDocument",
            UNKNOWN_PACKAGE => "UnknownPackage",
            MISSING_DEPENDENCY => "MissingDependency",
            DUPLICATE_VERSION => "DuplicateVersion",
            CYCLIC_DEPENDENCY => "CyclicDependency",
            _ => "Internal",
        }
    }
}

pub trait Clock: Send + Sync {
    fn now(&self) -> Timestamp;
}

/// Wall-clock milliseconds since the Unix epoch.
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> Timestamp {
        let d = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default();
        Timestamp(d.as_millis() as u64)
    }
}

/// A clock moved by hand; the simulator sets it to virtual time.
#[derive(Clone, Default)]
pub struct ManualClock(Arc<AtomicU64>);

impl ManualClock {
    pub fn new(start: Timestamp) -> Self {
        ManualClock(Arc::new(AtomicU64::new(start.0)))
    }

    pub fn set(&self, t: Timestamp) {
        self.0.store(t.0, Ordering::SeqCst);
    }

    pub fn advance(&self, ms: u64) {
        self.0.fetch_add(ms, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now(&self) -> Timestamp {
        Timestamp(self.0.load(Ordering::SeqCst))
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ServiceKind {
    Production,
    Monitoring,
    Bookkeeping,
    Software,
}

impl ServiceKind {
    pub const ALL: [ServiceKind; 4] = [
        ServiceKind::Production,
        ServiceKind::Monitoring,
        ServiceKind::Bookkeeping,
        ServiceKind::Software,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ServiceKind::Production => "production",
            ServiceKind::Monitoring => "monitoring",
            ServiceKind::Bookkeeping => "bookkeeping",
            ServiceKind::Software => "software",
        }
    }

    /// HTTP path the service is mounted at.
    pub fn path(self) -> &'static str {
        match self {
            ServiceKind::Production => "/production",
            ServiceKind::Monitoring => "/monitoring",
            ServiceKind::Bookkeeping => "/bookkeeping",
            ServiceKind::Software => "/software",
        }
    }

    pub fn from_path(path: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.path() == path)
    }
}

#[derive(Clone, Debug, Default)]
pub struct ServicesConfig {
    pub production: ProductionConfig,
    pub bookkeeping: BookkeepingConfig,
}

pub struct Services {
    pub production: ProductionService,
    pub monitoring: MonitoringService,
    pub bookkeeping: BookkeepingService,
    pub software: Repository,
    store: Arc<Store>,
    clock: Arc<dyn Clock>,
}

impl Services {
    pub fn new(store: Arc<Store>, clock: Arc<dyn Clock>, config: ServicesConfig) -> Self {
        Services {
            production: ProductionService::new(store.clone(), clock.clone(), config.production),
            monitoring: MonitoringService::new(store.clone()),
            bookkeeping: BookkeepingService::new(store.clone(), clock.clone(), config.bookkeeping),
            software: Repository::new(store.clone()),
            store,
            clock,
        }
    }

    pub fn store(&self) -> &Arc<Store> {
        &self.store
    }

    pub fn now(&self) -> Timestamp {
        self.clock.now()
    }
}
