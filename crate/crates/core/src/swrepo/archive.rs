//! Deterministic tar archives: entries sorted by path, mtime 0, uid/gid 0.
//! Packing the same files always yields the same bytes and checksum.

use std::collections::BTreeMap;
use std::io::{self, Read};
use std::path::{Component, Path};

pub const MODE_FILE: u32 = 0o644;
pub const MODE_EXEC: u32 = 0o755;

/// Files keyed by relative path with their mode and contents.
pub type FileSet = BTreeMap<String, (u32, Vec<u8>)>;

pub fn pack(files: &FileSet) -> io::Result<Vec<u8>> {
    let mut builder = tar::Builder::new(Vec::new());
    for (path, (mode, data)) in files {
        check_path(path)?;
        let mut header = tar::Header::new_ustar();
        header.set_size(data.len() as u64);
        header.set_mode(*mode);
        header.set_mtime(0);
        header.set_uid(0);
        header.set_gid(0);
        header.set_entry_type(tar::EntryType::Regular);
        builder.append_data(&mut header, path, data.as_slice())?;
    }
    builder.into_inner()
}

pub fn unpack(archive: &[u8]) -> io::Result<FileSet> {
    let mut out = FileSet::new();
    let mut ar = tar::Archive::new(archive);
    for entry in ar.entries()? {
        let mut entry = entry?;
        if entry.header().entry_type() != tar::EntryType::Regular {
            return Err(invalid("archive contains a non-regular entry"));
        }
        let path = entry.path()?.to_string_lossy().into_owned();
        check_path(&path)?;
        let mode = if entry.header().mode()? & 0o111 != 0 {
            MODE_EXEC
        } else {
            MODE_FILE
        };
        let mut data = Vec::new();
        entry.read_to_end(&mut data)?;
        out.insert(path, (mode, data));
    }
    Ok(out)
}

fn check_path(path: &str) -> io::Result<()> {
    let p = Path::new(path);
    let ok = !path.is_empty()
        && p.components().all(|c| matches!(c, Component::Normal(_)))
        && !path.starts_with('.');
    if ok {
        Ok(())
    } else {
        Err(invalid(&format!("unsafe archive path {path:?}")))
    }
}

fn invalid(msg: &str) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.to_string())
}
