use proptest::prelude::*;
use pullgrid::model::{
    DatasetDescription, DatasetStatus, JobDescriptor, JobId, JobRequirements, RunId, SiteId, SoftwareRef,
    StepDefinition,
};
use pullgrid::protocol::{dataset_to_xml, encode_call, encode_reply, job_to_xml, RpcCall, RpcReply, RpcValue};

pub fn xml_char() -> impl Strategy<Value = char> {
    prop_oneof![
        8 => proptest::char::range(' ', '~'),
        1 => prop::sample::select(vec!['\t', '\n', '\r', '&', '<', '>', '"', '\'']),
        1 => proptest::char::range('\u{a0}', '\u{d7ff}'),
        1 => proptest::char::range('\u{10000}', '\u{10ffff}'),
    ]
}

pub fn text() -> impl Strategy<Value = String> {
    proptest::collection::vec(xml_char(), 0..12).prop_map(|v| v.into_iter().collect())
}

pub fn name() -> impl Strategy<Value = String> {
    "[A-Za-z][A-Za-z0-9_.-]{0,10}"
}

pub fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![
        any::<f64>().prop_filter("finite", |d| d.is_finite()),
        -1e6f64..1e6,
        Just(0.0),
        Just(-0.0),
    ]
}

pub fn value() -> impl Strategy<Value = RpcValue> {
    let leaf = prop_oneof![
        any::<i32>().prop_map(RpcValue::Int),
        finite().prop_map(RpcValue::Double),
        text().prop_map(RpcValue::Str),
        any::<bool>().prop_map(RpcValue::Bool),
    ];
    leaf.prop_recursive(4, 48, 6, |inner| {
        prop_oneof![
            proptest::collection::vec(inner.clone(), 0..6).prop_map(RpcValue::Array),
            proptest::collection::btree_map(text(), inner, 0..6).prop_map(RpcValue::Struct),
        ]
    })
}

pub fn call() -> impl Strategy<Value = RpcCall> {
    ("[A-Za-z][A-Za-z0-9_.:/]{0,15}", proptest::collection::vec(value(), 0..5))
        .prop_map(|(method, params)| RpcCall::new(method, params))
}

pub fn reply() -> impl Strategy<Value = RpcReply> {
    prop_oneof![
        value().prop_map(RpcReply::Value),
        (any::<i32>(), text()).prop_map(|(code, message)| RpcReply::Fault { code, message }),
    ]
}

pub fn step() -> impl Strategy<Value = StepDefinition> {
    (
        name(),
        name(),
        proptest::collection::vec((name(), text()), 0..5),
        proptest::collection::btree_set(name(), 0..3),
        proptest::collection::btree_set(name(), 1..3),
    )
        .prop_map(|(application, app_version, options, input_types, output_types)| StepDefinition {
            application,
            app_version,
            options,
            input_types,
            output_types,
        })
}

pub fn job() -> impl Strategy<Value = JobDescriptor> {
    (
        name(),
        any::<u32>(),
        1u64..u64::MAX / 2,
        0u64..u64::MAX / 2,
        proptest::collection::vec(step(), 1..4),
        proptest::option::of(name()),
        0.0f64..100.0,
        any::<u64>(),
    )
        .prop_map(|(run, seq, events, offset, steps, dest, cpu, disk)| {
            let run = RunId::new(run);
            let mut software: Vec<SoftwareRef> = Vec::new();
            for s in &steps {
                if !software.contains(&s.software()) {
                    software.push(s.software());
                }
            }
            JobDescriptor {
                job_id: JobId::for_run(&run, seq),
                run_id: run,
                sequence_index: seq,
                events,
                first_event_offset: offset,
                requirements: JobRequirements {
                    destination_site: dest.map(SiteId::new),
                    min_cpu_power: cpu,
                    min_disk_mb: disk,
                    software,
                },
                resolved_steps: steps,
            }
        })
}

pub fn dataset() -> impl Strategy<Value = DatasetDescription> {
    (name(), name(), name(), name(), any::<u64>(), any::<u64>(), any::<u32>()).prop_map(
        |(lfn, data_type, job, run, events, size_bytes, checksum)| DatasetDescription {
            lfn: format!("/{lfn}"),
            data_type,
            job_id: JobId::new(job),
            run_id: RunId::new(run),
            events,
            size_bytes,
            checksum,
            status: DatasetStatus::Pending,
        },
    )
}

/// Doubles compare by bit pattern so -0.0 and 0.0 stay distinct.
pub fn same(a: &RpcValue, b: &RpcValue) -> bool {
    match (a, b) {
        (RpcValue::Double(x), RpcValue::Double(y)) => x.to_bits() == y.to_bits(),
        (RpcValue::Array(x), RpcValue::Array(y)) => x.len() == y.len() && x.iter().zip(y).all(|(a, b)| same(a, b)),
        (RpcValue::Struct(x), RpcValue::Struct(y)) => {
            x.len() == y.len() && x.iter().zip(y).all(|((ka, a), (kb, b))| ka == kb && same(a, b))
        }
        _ => a == b,
    }
}

/// Valid documents with bytes flipped, cut, or spliced.
pub fn mutated() -> impl Strategy<Value = Vec<u8>> {
    let seed = prop_oneof![
        call().prop_map(|c| encode_call(&c).unwrap()),
        reply().prop_map(|r| encode_reply(&r).unwrap()),
        job().prop_map(|j| job_to_xml(&j).unwrap()),
        dataset().prop_map(|d| dataset_to_xml(&d).unwrap()),
    ];
    (seed, proptest::collection::vec((any::<prop::sample::Index>(), any::<u8>(), 0u8..3), 1..8)).prop_map(
        |(mut doc, edits)| {
            for (at, byte, op) in edits {
                if doc.is_empty() {
                    break;
                }
                let i = at.index(doc.len());
                match op {
                    0 => doc[i] = byte,
                    1 => doc.truncate(i),
                    _ => {
                        let chunk: Vec<u8> = doc[i..].iter().take(16).copied().collect();
                        doc.splice(i..i, chunk);
                    }
                }
            }
            doc
        },
    )
}
