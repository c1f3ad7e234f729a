use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};

use fs2::FileExt;
use thiserror::Error;

use super::archive::{self, FileSet};
use super::{PackageSource, SourceError, BOOTSTRAP_NAME};
use crate::model::{SoftwareRef, Timestamp};
use crate::protocol::{format_checksum, parse_checksum};

const MANIFEST: &str = "registry.txt";
const LOCK: &str = ".lock";
const META_DIR: &str = ".pullgrid";

#[derive(Debug, Error)]
pub enum InstallError {
    #[error("unknown package {0}")]
    UnknownPackage(SoftwareRef),
    #[error("checksum mismatch for {0}")]
    ChecksumMismatch(SoftwareRef),
    #[error("insufficient disk: need {needed} bytes, {available} available")]
    InsufficientDisk { needed: u64, available: u64 },
    #[error("{0} is not installed")]
    NotInstalled(SoftwareRef),
    #[error("still needed by {0:?}")]
    DependedUpon(Vec<SoftwareRef>),
    #[error("software repository unavailable: {0}")]
    SourceUnavailable(String),
    #[error("install area is locked by another process")]
    Locked,
    #[error("corrupt install registry: {0}")]
    CorruptRegistry(String),
    #[error("bad package archive: {0}")]
    BadArchive(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl From<SourceError> for InstallError {
    fn from(e: SourceError) -> Self {
        match e {
            SourceError::Unknown(sw) => InstallError::UnknownPackage(sw),
            SourceError::Unavailable(m) => InstallError::SourceUnavailable(m),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstallRecord {
    pub path: PathBuf,
    pub checksum: u32,
    pub installed_at: Timestamp,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum InstallOutcome {
    Installed,
    Cached,
}

/// Per package of the closure, in install order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct InstallReport {
    pub steps: Vec<(SoftwareRef, InstallOutcome)>,
}

impl InstallReport {
    pub fn all_cached(&self) -> bool {
        self.steps.iter().all(|(_, o)| *o == InstallOutcome::Cached)
    }

    pub fn installed(&self) -> usize {
        self.steps.iter().filter(|(_, o)| *o == InstallOutcome::Installed).count()
    }
}

/// A directory of unpacked packages with a text registry. Single writer,
/// enforced by an exclusive lock held for the lifetime of the value.
pub struct InstallArea {
    root: PathBuf,
    quota_bytes: Option<u64>,
    registry: BTreeMap<SoftwareRef, InstallRecord>,
    _lock: File,
}

impl InstallArea {
    pub fn open(root: impl AsRef<Path>, quota_bytes: Option<u64>) -> Result<Self, InstallError> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(&root)?;
        let lock = OpenOptions::new().create(true).truncate(false).write(true).open(root.join(LOCK))?;
        lock.try_lock_exclusive().map_err(|_| InstallError::Locked)?;
        let registry = match fs::read_to_string(root.join(MANIFEST)) {
            Ok(text) => parse_manifest(&text)?,
            Err(e) if e.kind() == io::ErrorKind::NotFound => BTreeMap::new(),
            Err(e) => return Err(e.into()),
        };
        // Leftovers from an install that died before its rename.
        for entry in fs::read_dir(&root)? {
            let entry = entry?;
            if entry.file_name().to_string_lossy().starts_with(".staging-") {
                fs::remove_dir_all(entry.path())?;
            }
        }
        Ok(InstallArea {
            root,
            quota_bytes,
            registry,
            _lock: lock,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn is_installed(&self, sw: &SoftwareRef) -> bool {
        self.registry.contains_key(sw)
    }

    pub fn list_installed(&self) -> Vec<(SoftwareRef, InstallRecord)> {
        self.registry.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    /// Bytes of package payload currently installed.
    pub fn used_bytes(&self) -> Result<u64, InstallError> {
        let mut total = 0;
        for rec in self.registry.values() {
            total += read_files_list(&rec.path)?
                .iter()
                .map(|(_, p)| fs::metadata(rec.path.join(p)).map(|m| m.len()).unwrap_or(0))
                .sum::<u64>();
        }
        Ok(total)
    }

    pub fn free_bytes(&self) -> Result<Option<u64>, InstallError> {
        Ok(self.quota_bytes.map(|q| q.saturating_sub(self.used_bytes().unwrap_or(q))))
    }

    /// Installs `sw` and its dependency closure. Packages already present are
    /// reported as cached. A failure leaves earlier, fully verified packages of
    /// the closure registered and nothing of the failing one.
    pub fn install(
        &mut self,
        source: &dyn PackageSource,
        sw: &SoftwareRef,
        now: Timestamp,
    ) -> Result<InstallReport, InstallError> {
        let mut report = InstallReport::default();
        if self.is_installed(sw) {
            report.steps.push((sw.clone(), InstallOutcome::Cached));
            return Ok(report);
        }
        for item in source.resolve(sw)? {
            if self.is_installed(&item) {
                report.steps.push((item, InstallOutcome::Cached));
                continue;
            }
            let pkg = source.fetch(&item)?;
            if pkg.software() != item || !pkg.payload_intact() {
                return Err(InstallError::ChecksumMismatch(item));
            }
            let files = archive::unpack(&pkg.payload).map_err(|e| InstallError::BadArchive(e.to_string()))?;
            let needed: u64 = files.values().map(|(_, d)| d.len() as u64).sum();
            if let Some(quota) = self.quota_bytes {
                let available = quota.saturating_sub(self.used_bytes()?);
                if needed > available {
                    return Err(InstallError::InsufficientDisk { needed, available });
                }
            }
            let path = self.place(&item, &files, &pkg.bootstrap, &pkg.dependencies)?;
            self.registry.insert(
                item.clone(),
                InstallRecord {
                    path,
                    checksum: pkg.checksum,
                    installed_at: now,
                },
            );
            if let Err(e) = self.write_manifest() {
                self.registry.remove(&item);
                return Err(e);
            }
            report.steps.push((item, InstallOutcome::Installed));
        }
        Ok(report)
    }

    fn place(
        &self,
        sw: &SoftwareRef,
        files: &FileSet,
        bootstrap: &str,
        deps: &[SoftwareRef],
    ) -> Result<PathBuf, InstallError> {
        let staging = self.root.join(format!(".staging-{}-{}", sw.application, sw.app_version));
        if staging.exists() {
            fs::remove_dir_all(&staging)?;
        }
        fs::create_dir_all(staging.join(META_DIR))?;
        let mut listing = String::new();
        for (rel, (mode, data)) in files {
            let dest = staging.join(rel);
            if let Some(parent) = dest.parent() {
                fs::create_dir_all(parent)?;
            }
            fs::write(&dest, data)?;
            fs::set_permissions(&dest, fs::Permissions::from_mode(*mode))?;
            listing.push_str(&format!("{mode:o} {rel}\n"));
        }
        let script = staging.join(BOOTSTRAP_NAME);
        fs::write(&script, bootstrap)?;
        fs::set_permissions(&script, fs::Permissions::from_mode(archive::MODE_EXEC))?;
        fs::write(staging.join(META_DIR).join("files"), listing)?;
        let dep_lines: String = deps.iter().map(|d| format!("{}|{}\n", d.application, d.app_version)).collect();
        fs::write(staging.join(META_DIR).join("deps"), dep_lines)?;

        let final_dir = self.root.join(&sw.application).join(&sw.app_version);
        if final_dir.exists() {
            fs::remove_dir_all(&final_dir)?;
        }
        fs::create_dir_all(self.root.join(&sw.application))?;
        fs::rename(&staging, &final_dir)?;
        Ok(final_dir)
    }

    pub fn uninstall(&mut self, sw: &SoftwareRef) -> Result<(), InstallError> {
        let rec = self.registry.get(sw).cloned().ok_or_else(|| InstallError::NotInstalled(sw.clone()))?;
        let mut dependents = Vec::new();
        for (other, orec) in &self.registry {
            if other != sw && read_deps(&orec.path)?.contains(sw) {
                dependents.push(other.clone());
            }
        }
        if !dependents.is_empty() {
            return Err(InstallError::DependedUpon(dependents));
        }
        self.registry.remove(sw);
        if let Err(e) = self.write_manifest() {
            self.registry.insert(sw.clone(), rec);
            return Err(e);
        }
        if rec.path.exists() {
            fs::remove_dir_all(&rec.path)?;
        }
        let app_dir = self.root.join(&sw.application);
        if fs::read_dir(&app_dir).map(|mut d| d.next().is_none()).unwrap_or(false) {
            fs::remove_dir(&app_dir)?;
        }
        Ok(())
    }

    /// Re-packs each installed package from disk and compares checksums.
    /// Returns the packages whose content no longer matches.
    pub fn verify(&self) -> Result<Vec<SoftwareRef>, InstallError> {
        let mut bad = Vec::new();
        for (sw, rec) in &self.registry {
            let mut files = FileSet::new();
            let mut ok = true;
            for (mode, rel) in read_files_list(&rec.path)? {
                match fs::read(rec.path.join(&rel)) {
                    Ok(data) => {
                        files.insert(rel, (mode, data));
                    }
                    Err(_) => ok = false,
                }
            }
            let sum = archive::pack(&files).map(|b| crc32fast::hash(&b));
            if !ok || sum.ok() != Some(rec.checksum) {
                bad.push(sw.clone());
            }
        }
        Ok(bad)
    }

    fn write_manifest(&self) -> Result<(), InstallError> {
        let mut text = String::new();
        for (sw, rec) in &self.registry {
            text.push_str(&format!(
                "{}|{}|{}|{}|{}\n",
                sw.application,
                sw.app_version,
                rec.path.display(),
                format_checksum(rec.checksum),
                rec.installed_at.millis()
            ));
        }
        let tmp = self.root.join(format!("{MANIFEST}.tmp"));
        let mut f = File::create(&tmp)?;
        f.write_all(text.as_bytes())?;
        f.sync_all()?;
        fs::rename(&tmp, self.root.join(MANIFEST))?;
        Ok(())
    }
}

fn parse_manifest(text: &str) -> Result<BTreeMap<SoftwareRef, InstallRecord>, InstallError> {
    let mut out = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let parts: Vec<&str> = line.split('|').collect();
        let [app, ver, path, sum, ts] = parts[..] else {
            return Err(InstallError::CorruptRegistry(line.to_string()));
        };
        let checksum = parse_checksum(sum).map_err(|_| InstallError::CorruptRegistry(line.to_string()))?;
        let ts: u64 = ts.parse().map_err(|_| InstallError::CorruptRegistry(line.to_string()))?;
        out.insert(
            SoftwareRef::new(app, ver),
            InstallRecord {
                path: PathBuf::from(path),
                checksum,
                installed_at: Timestamp(ts),
            },
        );
    }
    Ok(out)
}

fn read_files_list(dir: &Path) -> Result<Vec<(u32, String)>, InstallError> {
    let text = fs::read_to_string(dir.join(META_DIR).join("files"))?;
    text.lines()
        .map(|l| {
            let (mode, rel) = l.split_once(' ').ok_or_else(|| InstallError::CorruptRegistry(l.to_string()))?;
            let mode = u32::from_str_radix(mode, 8).map_err(|_| InstallError::CorruptRegistry(l.to_string()))?;
            Ok((mode, rel.to_string()))
        })
        .collect()
}

fn read_deps(dir: &Path) -> Result<Vec<SoftwareRef>, InstallError> {
    let text = match fs::read_to_string(dir.join(META_DIR).join("deps")) {
        Ok(t) => t,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    Ok(text
        .lines()
        .filter_map(|l| l.split_once('|').map(|(a, v)| SoftwareRef::new(a, v)))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::Store;
    use crate::swrepo::{Package, PackageBuilder, Repository};
    use std::cell::Cell;
    use std::sync::Arc;

    fn sw(a: &str) -> SoftwareRef {
        SoftwareRef::new(a, "1.0")
    }

    fn repo_with(pkgs: &[(&str, &[&str])]) -> Repository {
        let r = Repository::new(Arc::new(Store::in_memory()));
        for (app, deps) in pkgs {
            let mut b = PackageBuilder::new(*app, "1.0")
                .file("lib/data.bin", vec![7u8; 100])
                .executable(format!("bin/{app}-tool"), "#!/bin/sh\necho tool\n");
            for d in *deps {
                b = b.depends_on(sw(d));
            }
            r.publish(&b.build().unwrap()).unwrap();
        }
        r
    }

    /// Counts fetches and optionally corrupts one package in transit.
    struct Wire<'a> {
        repo: &'a Repository,
        corrupt: Option<SoftwareRef>,
        fetches: Cell<usize>,
    }

    impl PackageSource for Wire<'_> {
        fn resolve(&self, sw: &SoftwareRef) -> Result<Vec<SoftwareRef>, SourceError> {
            self.repo.resolve(sw)
        }
        fn fetch(&self, sw: &SoftwareRef) -> Result<Package, SourceError> {
            self.fetches.set(self.fetches.get() + 1);
            let mut p = PackageSource::fetch(self.repo, sw)?;
            if self.corrupt.as_ref() == Some(sw) {
                let mid = p.payload.len() / 2;
                p.payload[mid] ^= 0x01;
            }
            Ok(p)
        }
    }

    #[test]
    fn install_twice_is_cached() {
        let repo = repo_with(&[("A", &[])]);
        let dir = tempfile::tempdir().unwrap();
        let mut area = InstallArea::open(dir.path(), None).unwrap();
        let wire = Wire { repo: &repo, corrupt: None, fetches: Cell::new(0) };
        let first = area.install(&wire, &sw("A"), Timestamp(5)).unwrap();
        assert_eq!(first.steps, vec![(sw("A"), InstallOutcome::Installed)]);
        let second = area.install(&wire, &sw("A"), Timestamp(6)).unwrap();
        assert!(second.all_cached());
        assert_eq!(wire.fetches.get(), 1);
        assert!(area.verify().unwrap().is_empty());
    }

    #[test]
    fn dependencies_first_and_uninstall_rules() {
        let repo = repo_with(&[("A", &[]), ("B", &["A"])]);
        let dir = tempfile::tempdir().unwrap();
        let mut area = InstallArea::open(dir.path(), None).unwrap();
        let rep = area.install(&repo, &sw("B"), Timestamp(1)).unwrap();
        assert_eq!(
            rep.steps,
            vec![(sw("A"), InstallOutcome::Installed), (sw("B"), InstallOutcome::Installed)]
        );
        match area.uninstall(&sw("A")) {
            Err(InstallError::DependedUpon(v)) => assert_eq!(v, vec![sw("B")]),
            other => panic!("{other:?}"),
        }
        area.uninstall(&sw("B")).unwrap();
        area.uninstall(&sw("A")).unwrap();
        assert!(area.list_installed().is_empty());
        assert!(matches!(area.uninstall(&sw("A")), Err(InstallError::NotInstalled(_))));
    }

    #[test]
    fn corrupted_payload_leaves_registry_unchanged() {
        let repo = repo_with(&[("A", &[]), ("B", &["A"])]);
        let dir = tempfile::tempdir().unwrap();
        let mut area = InstallArea::open(dir.path(), None).unwrap();
        let wire = Wire { repo: &repo, corrupt: Some(sw("B")), fetches: Cell::new(0) };
        assert!(matches!(
            area.install(&wire, &sw("B"), Timestamp(1)),
            Err(InstallError::ChecksumMismatch(s)) if s == sw("B")
        ));
        let listed: Vec<_> = area.list_installed().into_iter().map(|(s, _)| s).collect();
        assert_eq!(listed, vec![sw("A")]);
        assert!(!dir.path().join("B").exists());
        assert!(area.verify().unwrap().is_empty());
    }

    #[test]
    fn quota_and_lock_and_reopen() {
        let repo = repo_with(&[("A", &[])]);
        let dir = tempfile::tempdir().unwrap();
        {
            let mut small = InstallArea::open(dir.path(), Some(50)).unwrap();
            assert!(matches!(
                small.install(&repo, &sw("A"), Timestamp(1)),
                Err(InstallError::InsufficientDisk { .. })
            ));
            assert!(matches!(InstallArea::open(dir.path(), None), Err(InstallError::Locked)));
        }
        {
            let mut area = InstallArea::open(dir.path(), Some(10_000)).unwrap();
            area.install(&repo, &sw("A"), Timestamp(9)).unwrap();
        }
        let area = InstallArea::open(dir.path(), None).unwrap();
        let listed = area.list_installed();
        assert_eq!(listed.len(), 1);
        assert_eq!(listed[0].1.installed_at, Timestamp(9));
        let manifest = fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
        assert_eq!(manifest.lines().next().unwrap().split('|').count(), 5);
    }

    #[test]
    fn verify_detects_tampering() {
        let repo = repo_with(&[("A", &[])]);
        let dir = tempfile::tempdir().unwrap();
        let mut area = InstallArea::open(dir.path(), None).unwrap();
        area.install(&repo, &sw("A"), Timestamp(1)).unwrap();
        fs::write(dir.path().join("A/1.0/lib/data.bin"), b"changed").unwrap();
        assert_eq!(area.verify().unwrap(), vec![sw("A")]);
    }

    #[test]
    fn bootstrap_produces_runnable_entry_point() {
        let repo = repo_with(&[("Gauss", &[])]);
        let dir = tempfile::tempdir().unwrap();
        let mut area = InstallArea::open(dir.path(), None).unwrap();
        area.install(&repo, &sw("Gauss"), Timestamp(1)).unwrap();
        let pkg_dir = dir.path().join("Gauss/1.0");
        let status = std::process::Command::new("sh").arg(pkg_dir.join(BOOTSTRAP_NAME)).status().unwrap();
        assert!(status.success());
        let out = std::process::Command::new(pkg_dir.join("run/Gauss")).arg("500").output().unwrap();
        assert!(out.status.success());
        assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "Gauss 1.0 processed 500 events");
    }
}
