//! Job, dataset and workflow documents. One element per field, named after
//! the field; repeated items are repeated child elements.

use std::collections::BTreeSet;
use std::str::FromStr;

use super::xml::{self, DocWriter, Element};
use super::ProtocolError;
use crate::model::{
    DatasetDescription, DatasetStatus, JobDescriptor, JobId, JobRequirements, RunId, SiteId,
    SoftwareRef, StepDefinition, Timestamp, WorkflowDefinition, WorkflowId,
};

pub fn job_to_xml(job: &JobDescriptor) -> Result<Vec<u8>, ProtocolError> {
    let mut w = DocWriter::new();
    w.open("job");
    w.leaf("job_id", job.job_id.as_str())?;
    w.leaf("run_id", job.run_id.as_str())?;
    w.leaf("sequence_index", &job.sequence_index.to_string())?;
    w.leaf("events", &job.events.to_string())?;
    w.leaf("first_event_offset", &job.first_event_offset.to_string())?;
    write_steps(&mut w, "resolved_steps", &job.resolved_steps)?;
    let req = &job.requirements;
    w.open("requirements");
    if let Some(dest) = &req.destination_site {
        w.leaf("destination_site", dest.as_str())?;
    }
    w.leaf("min_cpu_power", &format_f64(req.min_cpu_power)?)?;
    w.leaf("min_disk_mb", &req.min_disk_mb.to_string())?;
    w.open("software");
    for sw in &req.software {
        w.open("package");
        w.leaf("application", &sw.application)?;
        w.leaf("app_version", &sw.app_version)?;
        w.close("package");
    }
    w.close("software");
    w.close("requirements");
    w.close("job");
    Ok(w.finish())
}

pub fn job_from_xml(bytes: &[u8]) -> Result<JobDescriptor, ProtocolError> {
    let root = xml::parse(bytes)?;
    root.expect_name("job")?;
    let req_el = root.require("requirements")?;
    let software = req_el
        .require("software")?
        .children
        .iter()
        .map(|p| {
            p.expect_name("package")?;
            Ok(SoftwareRef::new(text(p, "application")?, text(p, "app_version")?))
        })
        .collect::<Result<Vec<_>, ProtocolError>>()?;
    let requirements = JobRequirements {
        destination_site: match req_el.child("destination_site") {
            Some(d) => Some(SiteId::new(d.leaf_text()?)),
            None => None,
        },
        min_cpu_power: parse_f64(req_el, "min_cpu_power")?,
        min_disk_mb: parse(req_el, "min_disk_mb")?,
        software,
    };
    Ok(JobDescriptor {
        job_id: JobId::new(text(&root, "job_id")?),
        run_id: RunId::new(text(&root, "run_id")?),
        sequence_index: parse(&root, "sequence_index")?,
        events: parse(&root, "events")?,
        first_event_offset: parse(&root, "first_event_offset")?,
        resolved_steps: read_steps(root.require("resolved_steps")?)?,
        requirements,
    })
}

/// The wire form carries no status; parsed descriptions are always Pending.
pub fn dataset_to_xml(d: &DatasetDescription) -> Result<Vec<u8>, ProtocolError> {
    let mut w = DocWriter::new();
    w.open("dataset");
    w.leaf("lfn", &d.lfn)?;
    w.leaf("data_type", &d.data_type)?;
    w.leaf("job_id", d.job_id.as_str())?;
    w.leaf("run_id", d.run_id.as_str())?;
    w.leaf("events", &d.events.to_string())?;
    w.leaf("size_bytes", &d.size_bytes.to_string())?;
    w.leaf("checksum", &format_checksum(d.checksum))?;
    w.close("dataset");
    Ok(w.finish())
}

pub fn dataset_from_xml(bytes: &[u8]) -> Result<DatasetDescription, ProtocolError> {
    let root = xml::parse(bytes)?;
    root.expect_name("dataset")?;
    Ok(DatasetDescription {
        lfn: text(&root, "lfn")?,
        data_type: text(&root, "data_type")?,
        job_id: JobId::new(text(&root, "job_id")?),
        run_id: RunId::new(text(&root, "run_id")?),
        events: parse(&root, "events")?,
        size_bytes: parse(&root, "size_bytes")?,
        checksum: parse_checksum(&text(&root, "checksum")?)?,
        status: DatasetStatus::Pending,
    })
}

/// Workflow documents may omit the service-assigned id, version and time.
pub fn workflow_to_xml(wf: &WorkflowDefinition) -> Result<Vec<u8>, ProtocolError> {
    let mut w = DocWriter::new();
    w.open("workflow");
    if !wf.workflow_id.as_str().is_empty() {
        w.leaf("workflow_id", wf.workflow_id.as_str())?;
    }
    w.leaf("name", &wf.name)?;
    w.leaf("version", &wf.version.to_string())?;
    w.leaf("created_at", &wf.created_at.millis().to_string())?;
    write_steps(&mut w, "steps", &wf.steps)?;
    w.close("workflow");
    Ok(w.finish())
}

pub fn workflow_from_xml(bytes: &[u8]) -> Result<WorkflowDefinition, ProtocolError> {
    let root = xml::parse(bytes)?;
    root.expect_name("workflow")?;
    Ok(WorkflowDefinition {
        workflow_id: WorkflowId::new(match root.child("workflow_id") {
            Some(e) => e.leaf_text()?.to_string(),
            None => String::new(),
        }),
        name: text(&root, "name")?,
        version: match root.child("version") {
            Some(_) => parse(&root, "version")?,
            None => 0,
        },
        created_at: match root.child("created_at") {
            Some(_) => Timestamp(parse(&root, "created_at")?),
            None => Timestamp::ZERO,
        },
        steps: read_steps(root.require("steps")?)?,
    })
}

pub fn format_checksum(c: u32) -> String {
    format!("{c:08x}")
}

pub fn parse_checksum(s: &str) -> Result<u32, ProtocolError> {
    let s = s.trim();
    if s.len() != 8 {
        return Err(ProtocolError::MalformedDocument(format!("bad checksum {s:?}")));
    }
    u32::from_str_radix(s, 16).map_err(|_| ProtocolError::MalformedDocument(format!("bad checksum {s:?}")))
}

fn write_steps(w: &mut DocWriter, name: &str, steps: &[StepDefinition]) -> Result<(), ProtocolError> {
    w.open(name);
    for step in steps {
        w.open("step");
        w.leaf("application", &step.application)?;
        w.leaf("app_version", &step.app_version)?;
        w.open("options");
        for (k, v) in &step.options {
            w.open("option");
            w.leaf("key", k)?;
            w.leaf("value", v)?;
            w.close("option");
        }
        w.close("options");
        write_types(w, "input_types", &step.input_types)?;
        write_types(w, "output_types", &step.output_types)?;
        w.close("step");
    }
    w.close(name);
    Ok(())
}

fn write_types(w: &mut DocWriter, name: &str, types: &BTreeSet<String>) -> Result<(), ProtocolError> {
    w.open(name);
    for t in types {
        w.leaf("type", t)?;
    }
    w.close(name);
    Ok(())
}

fn read_steps(el: &Element) -> Result<Vec<StepDefinition>, ProtocolError> {
    el.children
        .iter()
        .map(|s| {
            s.expect_name("step")?;
            let options = s
                .require("options")?
                .children
                .iter()
                .map(|o| {
                    o.expect_name("option")?;
                    Ok((text(o, "key")?, text(o, "value")?))
                })
                .collect::<Result<Vec<_>, ProtocolError>>()?;
            Ok(StepDefinition {
                application: text(s, "application")?,
                app_version: text(s, "app_version")?,
                options,
                input_types: read_types(s.require("input_types")?)?,
                output_types: read_types(s.require("output_types")?)?,
            })
        })
        .collect()
}

fn read_types(el: &Element) -> Result<BTreeSet<String>, ProtocolError> {
    el.children
        .iter()
        .map(|t| {
            t.expect_name("type")?;
            Ok(t.leaf_text()?.to_string())
        })
        .collect()
}

fn text(parent: &Element, name: &str) -> Result<String, ProtocolError> {
    Ok(parent.require(name)?.leaf_text()?.to_string())
}

fn parse<T: FromStr>(parent: &Element, name: &str) -> Result<T, ProtocolError> {
    let raw = parent.require(name)?.leaf_text()?.trim();
    raw.parse()
        .map_err(|_| ProtocolError::MalformedDocument(format!("bad <{name}> value {raw:?}")))
}

fn parse_f64(parent: &Element, name: &str) -> Result<f64, ProtocolError> {
    let v: f64 = parse(parent, name)?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(ProtocolError::MalformedDocument(format!("bad <{name}>")))
    }
}

fn format_f64(v: f64) -> Result<String, ProtocolError> {
    if v.is_finite() {
        Ok(format!("{v}"))
    } else {
        Err(ProtocolError::UnsupportedType("non-finite number".into()))
    }
}
