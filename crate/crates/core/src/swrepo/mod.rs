//! Software release area: self-contained packages with generated bootstrap
//! scripts, the central repository, and per-site install areas.

pub mod archive;
mod install;
mod repository;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::SoftwareRef;

pub use archive::FileSet;
pub use install::{InstallArea, InstallError, InstallOutcome, InstallRecord, InstallReport};
pub use repository::{PackageInfo, RepoError, Repository};

/// File name of the bootstrap script inside an install directory.
pub const BOOTSTRAP_NAME: &str = "setup.sh";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Package {
    pub application: String,
    pub app_version: String,
    #[serde(with = "hex_bytes")]
    pub payload: Vec<u8>,
    pub bootstrap: String,
    pub dependencies: Vec<SoftwareRef>,
    pub checksum: u32,
}

impl Package {
    pub fn software(&self) -> SoftwareRef {
        SoftwareRef::new(&self.application, &self.app_version)
    }

    pub fn payload_intact(&self) -> bool {
        crc32fast::hash(&self.payload) == self.checksum
    }

    /// Same identity, payload, bootstrap and dependencies.
    pub fn same_content(&self, other: &Package) -> bool {
        self == other
    }
}

/// Where an install area gets packages from: the central repository directly,
/// or a client talking to it over the wire.
pub trait PackageSource {
    /// Transitive closure of `sw`, dependencies first, `sw` last.
    fn resolve(&self, sw: &SoftwareRef) -> Result<Vec<SoftwareRef>, SourceError>;
    fn fetch(&self, sw: &SoftwareRef) -> Result<Package, SourceError>;
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SourceError {
    #[error("unknown package {0}")]
    Unknown(SoftwareRef),
    #[error("software repository unavailable: {0}")]
    Unavailable(String),
}

pub fn valid_name(s: &str) -> bool {
    !s.is_empty()
        && s.len() <= 128
        && !s.starts_with('.')
        && s.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-' | '+'))
}

/// Assembles a package from files, generating its archive, checksum and
/// bootstrap script.
pub struct PackageBuilder {
    sw: SoftwareRef,
    files: FileSet,
    dependencies: Vec<SoftwareRef>,
}

impl PackageBuilder {
    pub fn new(application: impl Into<String>, app_version: impl Into<String>) -> Self {
        PackageBuilder {
            sw: SoftwareRef::new(application, app_version),
            files: FileSet::new(),
            dependencies: Vec::new(),
        }
    }

    pub fn file(mut self, path: impl Into<String>, data: impl Into<Vec<u8>>) -> Self {
        self.files.insert(path.into(), (archive::MODE_FILE, data.into()));
        self
    }

    pub fn executable(mut self, path: impl Into<String>, data: impl Into<Vec<u8>>) -> Self {
        self.files.insert(path.into(), (archive::MODE_EXEC, data.into()));
        self
    }

    pub fn depends_on(mut self, dep: SoftwareRef) -> Self {
        self.dependencies.push(dep);
        self
    }

    pub fn build(self) -> std::io::Result<Package> {
        let payload = archive::pack(&self.files)?;
        Ok(Package {
            checksum: crc32fast::hash(&payload),
            bootstrap: bootstrap_script(&self.sw, &self.dependencies),
            application: self.sw.application,
            app_version: self.sw.app_version,
            payload,
            dependencies: self.dependencies,
        })
    }
}

/// Generated setup script. Run from the install directory, it writes the
/// entry point `run/<application>`, which execs `bin/<application>` when the
/// payload ships one and otherwise runs a synthetic workload.
pub fn bootstrap_script(sw: &SoftwareRef, deps: &[SoftwareRef]) -> String {
    let app = &sw.application;
    let ver = &sw.app_version;
    let var = env_var_name(app);
    let mut s = String::new();
    s.push_str("#!/bin/sh\n");
    s.push_str(&format!("# bootstrap for {app} {ver}, generated by pullgrid\n"));
    s.push_str("set -e\n");
    s.push_str("ROOT=$(cd \"$(dirname \"$0\")\" && pwd)\n");
    for d in deps {
        s.push_str(&format!("# requires {} {}\n", d.application, d.app_version));
    }
    s.push_str("mkdir -p \"$ROOT/run\"\n");
    s.push_str(&format!("cat > \"$ROOT/run/{app}\" <<EOF\n"));
    s.push_str("#!/bin/sh\n");
    s.push_str(&format!("export {var}_ROOT=\"$ROOT\"\n"));
    s.push_str("export PATH=\"$ROOT/bin:\\$PATH\"\n");
    s.push_str("export LD_LIBRARY_PATH=\"$ROOT/lib:\\${LD_LIBRARY_PATH:-}\"\n");
    s.push_str(&format!("if [ -x \"$ROOT/bin/{app}\" ]; then exec \"$ROOT/bin/{app}\" \"\\$@\"; fi\n"));
    s.push_str(&format!("echo \"{app} {ver} processed \\${{1:-0}} events\"\n"));
    s.push_str("EOF\n");
    s.push_str(&format!("chmod 755 \"$ROOT/run/{app}\"\n"));
    s
}

fn env_var_name(app: &str) -> String {
    app.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_uppercase() } else { '_' })
        .collect()
}

mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let text = String::deserialize(d)?;
        hex::decode(text).map_err(serde::de::Error::custom)
    }
}
