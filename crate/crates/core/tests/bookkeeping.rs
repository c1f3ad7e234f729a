mod common;

use std::time::Instant;

use common::Central;
use proptest::prelude::*;
use pullgrid::model::{DatasetDescription, DatasetStatus, JobId, Replica, RunId, Timestamp};
use pullgrid::services::{BookError, DatasetQuery, RegisterOutcome};

fn ds(lfn: &str, run: &str, checksum: u32) -> DatasetDescription {
    DatasetDescription {
        lfn: lfn.into(),
        data_type: "SIM".into(),
        job_id: JobId::new(format!("{run}-00000001")),
        run_id: RunId::new(run),
        events: 500,
        size_bytes: 1 << 20,
        checksum,
        status: DatasetStatus::Pending,
    }
}

fn replica(lfn: &str, se: &str, checksum: u32) -> Replica {
    Replica {
        lfn: lfn.into(),
        storage_element: se.into(),
        url: format!("sim://{se}{lfn}"),
        registered_at: Timestamp::from_secs(5),
        checksum,
    }
}

#[test]
fn registration_is_idempotent_and_conflicts_are_typed() {
    let c = Central::new();
    let b = &c.services.bookkeeping;
    assert_eq!(b.register_dataset(ds("/a", "r1", 1)).unwrap(), RegisterOutcome::Registered);
    assert_eq!(b.register_dataset(ds("/a", "r1", 1)).unwrap(), RegisterOutcome::AlreadyRegistered);
    assert!(matches!(b.register_dataset(ds("/a", "r1", 2)), Err(BookError::LfnConflict(_))));
    let pending = b
        .query_datasets(&DatasetQuery {
            status: Some(DatasetStatus::Pending),
            ..DatasetQuery::default()
        })
        .unwrap();
    assert_eq!(pending.len(), 1);
}

#[test]
fn approval_and_replicas() {
    let c = Central::new();
    let b = &c.services.bookkeeping;
    assert!(b.query_datasets(&DatasetQuery::default()).unwrap().is_empty());
    for l in ["/a", "/b", "/c"] {
        b.register_dataset(ds(l, "r1", 7)).unwrap();
    }
    let res = b.approve(&["/a".into(), "/b".into(), "/c".into()]).unwrap();
    assert!(res.iter().all(Result::is_ok));
    let counts = b.counts().unwrap();
    assert_eq!((counts.pending, counts.approved), (0, 3));
    assert!(matches!(b.approve(&["/a".into()]).unwrap()[0], Err(BookError::NotPending(_))));

    b.add_replica(replica("/a", "CERN", 7)).unwrap();
    b.add_replica(replica("/a", "RAL", 7)).unwrap();
    assert!(matches!(b.add_replica(replica("/a", "CNAF", 8)), Err(BookError::ChecksumMismatch(_))));
    assert!(matches!(b.add_replica(replica("/zz", "CNAF", 8)), Err(BookError::UnknownLfn(_))));
    let listed = b.query_datasets(&DatasetQuery::default()).unwrap();
    let ses: Vec<&str> = listed
        .iter()
        .find(|(d, _)| d.lfn == "/a")
        .unwrap()
        .1
        .iter()
        .map(|r| r.storage_element.as_str())
        .collect();
    assert_eq!(ses, ["CERN", "RAL"]);
}

#[test]
fn rejected_datasets_take_no_replicas() {
    let c = Central::new();
    let b = &c.services.bookkeeping;
    b.register_dataset(ds("/x", "r1", 3)).unwrap();
    b.reject(&["/x".into()], "bad physics").unwrap();
    assert!(matches!(b.add_replica(replica("/x", "CERN", 3)), Err(BookError::RejectedDataset(_))));
    assert_eq!(b.rejection_reason("/x").unwrap().as_deref(), Some("bad physics"));
    assert!(matches!(b.register_dataset(ds("/x", "r1", 4)), Err(BookError::LfnConflict(_))));
}

#[test]
fn queries_filter_conjunctively() {
    let c = Central::new();
    let b = &c.services.bookkeeping;
    for i in 0..10 {
        let mut d = ds(&format!("/r{}/{i}", i % 2), &format!("r{}", i % 2), i);
        d.events = i as u64 * 100;
        d.data_type = if i < 5 { "SIM".into() } else { "DST".into() };
        b.register_dataset(d).unwrap();
    }
    b.approve(&["/r0/0".into(), "/r0/2".into()]).unwrap();
    let q = |q: DatasetQuery| b.query_datasets(&q).unwrap().len();
    assert_eq!(q(DatasetQuery { run_id: Some(RunId::new("r0")), ..Default::default() }), 5);
    assert_eq!(
        q(DatasetQuery {
            run_id: Some(RunId::new("r1")),
            data_type: Some("DST".into()),
            ..Default::default()
        }),
        3
    );
    assert_eq!(q(DatasetQuery { min_events: Some(500), ..Default::default() }), 5);
    assert_eq!(
        q(DatasetQuery {
            status: Some(DatasetStatus::Approved),
            ..Default::default()
        }),
        2
    );
    assert_eq!(
        q(DatasetQuery {
            status: Some(DatasetStatus::Pending),
            ..Default::default()
        }),
        8
    );
}

#[test]
fn quarter_million_approvals() {
    const N: usize = 250_000;
    let c = Central::new();
    let b = &c.services.bookkeeping;
    let started = Instant::now();
    let lfns: Vec<String> = (0..N).map(|i| format!("/grid/dc04/{:06}/{:06}.sim", i / 1000, i)).collect();
    for l in &lfns {
        b.register_dataset(ds(l, "r1", 1)).unwrap();
    }
    for chunk in lfns.chunks(10_000) {
        assert!(b.approve(chunk).unwrap().iter().all(Result::is_ok));
    }
    let counts = b.counts().unwrap();
    assert_eq!(counts.approved, N as u64);
    assert_eq!(counts.pending, 0);
    eprintln!("250000 registrations and approvals in {:?}", started.elapsed());
}

#[derive(Clone, Debug)]
enum Op {
    Register(u8, u8),
    Approve(u8),
    Reject(u8),
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn counts_are_conserved(ops in proptest::collection::vec(prop_oneof![
        (0u8..20, 0u8..2).prop_map(|(l, c)| Op::Register(l, c)),
        (0u8..20).prop_map(Op::Approve),
        (0u8..20).prop_map(Op::Reject),
    ], 1..100)) {
        let c = Central::new();
        let b = &c.services.bookkeeping;
        let mut registered = std::collections::BTreeSet::new();
        for op in ops {
            match op {
                Op::Register(l, sum) => {
                    if b.register_dataset(ds(&format!("/{l}"), "r", sum as u32)).is_ok() {
                        registered.insert(l);
                    }
                }
                Op::Approve(l) => {
                    b.approve(&[format!("/{l}")]).unwrap();
                }
                Op::Reject(l) => {
                    b.reject(&[format!("/{l}")], "no").unwrap();
                }
            }
            let n = b.counts().unwrap();
            prop_assert_eq!(n.pending + n.approved + n.rejected, registered.len() as u64);
        }
    }
}
