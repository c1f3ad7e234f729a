use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{valid_name, Package, PackageSource, SourceError};
use crate::model::SoftwareRef;
use crate::store::{Store, StoreError, Table, Txn};

#[derive(Debug, Error)]
pub enum RepoError {
    #[error("unknown package {0}")]
    UnknownPackage(SoftwareRef),
    #[error("{package} depends on unpublished {missing}")]
    MissingDependency { package: SoftwareRef, missing: SoftwareRef },
    #[error("{0} is already published with different content")]
    DuplicateVersion(SoftwareRef),
    #[error("publishing {0} would create a dependency cycle")]
    CyclicDependency(SoftwareRef),
    #[error("payload checksum of {0} does not match")]
    ChecksumMismatch(SoftwareRef),
    #[error("invalid package name {0:?}")]
    InvalidName(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Summary of a published package, without its payload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PackageInfo {
    pub software: SoftwareRef,
    pub dependencies: Vec<SoftwareRef>,
    pub checksum: u32,
    pub size_bytes: u64,
}

/// The central release area. Packages are immutable once published.
pub struct Repository {
    store: Arc<Store>,
}

fn key(sw: &SoftwareRef) -> String {
    format!("{}/{}", sw.application, sw.app_version)
}

impl Repository {
    pub fn new(store: Arc<Store>) -> Self {
        Repository { store }
    }

    /// Publishing identical content twice is accepted as a no-op.
    pub fn publish(&self, p: &Package) -> Result<(), RepoError> {
        let sw = p.software();
        for name in [&p.application, &p.app_version] {
            if !valid_name(name) {
                return Err(RepoError::InvalidName(name.clone()));
            }
        }
        if !p.payload_intact() {
            return Err(RepoError::ChecksumMismatch(sw));
        }
        self.store.transact(|txn| {
            if let Some(existing) = txn.get_json::<Package>(Table::Packages, &key(&sw))? {
                return if existing.same_content(p) {
                    Ok(())
                } else {
                    Err(RepoError::DuplicateVersion(sw))
                };
            }
            for dep in &p.dependencies {
                if *dep == sw {
                    return Err(RepoError::CyclicDependency(sw));
                }
                if !txn.contains(Table::Packages, &key(dep)) {
                    return Err(RepoError::MissingDependency {
                        package: sw.clone(),
                        missing: dep.clone(),
                    });
                }
            }
            // Dependencies are all published and immutable, so a cycle would
            // have to pass back through `sw`.
            let closure = closure(txn, &p.dependencies)?;
            if closure.contains_key(&sw) {
                return Err(RepoError::CyclicDependency(sw));
            }
            txn.put_json(Table::Packages, &key(&sw), p)?;
            Ok(())
        })
    }

    pub fn fetch(&self, sw: &SoftwareRef) -> Result<Package, RepoError> {
        self.store.transact(|txn| {
            txn.get_json::<Package>(Table::Packages, &key(sw))?
                .ok_or_else(|| RepoError::UnknownPackage(sw.clone()))
        })
    }

    pub fn query_available(&self) -> Result<Vec<PackageInfo>, RepoError> {
        self.store.transact(|txn| {
            let all = txn.scan_json::<Package>(Table::Packages, "")?;
            let mut out: Vec<PackageInfo> = all
                .into_iter()
                .map(|(_, p)| PackageInfo {
                    software: p.software(),
                    dependencies: p.dependencies.clone(),
                    checksum: p.checksum,
                    size_bytes: p.payload.len() as u64,
                })
                .collect();
            out.sort_by(|a, b| a.software.cmp(&b.software));
            Ok(out)
        })
    }

    /// Transitive closure of `sw` in topological order, dependencies first,
    /// ties broken by (application, version).
    pub fn resolve_deps(&self, sw: &SoftwareRef) -> Result<Vec<SoftwareRef>, RepoError> {
        self.store.transact(|txn| {
            if !txn.contains(Table::Packages, &key(sw)) {
                return Err(RepoError::UnknownPackage(sw.clone()));
            }
            let graph = closure(txn, std::slice::from_ref(sw))?;
            topo_order(&graph).ok_or_else(|| RepoError::CyclicDependency(sw.clone()))
        })
    }
}

/// Packages reachable from `roots` mapped to their direct dependencies.
fn closure(
    txn: &Txn<'_>,
    roots: &[SoftwareRef],
) -> Result<BTreeMap<SoftwareRef, Vec<SoftwareRef>>, RepoError> {
    let mut graph = BTreeMap::new();
    let mut todo: Vec<SoftwareRef> = roots.to_vec();
    while let Some(sw) = todo.pop() {
        if graph.contains_key(&sw) {
            continue;
        }
        let p = txn
            .get_json::<Package>(Table::Packages, &key(&sw))?
            .ok_or_else(|| RepoError::UnknownPackage(sw.clone()))?;
        todo.extend(p.dependencies.iter().cloned());
        graph.insert(sw, p.dependencies);
    }
    Ok(graph)
}

/// Kahn's algorithm over a dependency map; `None` on a cycle.
pub(crate) fn topo_order(graph: &BTreeMap<SoftwareRef, Vec<SoftwareRef>>) -> Option<Vec<SoftwareRef>> {
    let mut pending: BTreeMap<&SoftwareRef, usize> = BTreeMap::new();
    let mut dependents: BTreeMap<&SoftwareRef, Vec<&SoftwareRef>> = BTreeMap::new();
    for (node, deps) in graph {
        let distinct: BTreeSet<&SoftwareRef> = deps.iter().collect();
        pending.insert(node, distinct.len());
        for d in distinct {
            dependents.entry(d).or_default().push(node);
        }
    }
    let mut ready: BTreeSet<&SoftwareRef> = pending
        .iter()
        .filter(|(_, n)| **n == 0)
        .map(|(k, _)| *k)
        .collect();
    let mut out = Vec::with_capacity(graph.len());
    while let Some(next) = ready.pop_first() {
        out.push(next.clone());
        for dep in dependents.get(next).into_iter().flatten() {
            let n = pending.get_mut(dep)?;
            *n -= 1;
            if *n == 0 {
                ready.insert(dep);
            }
        }
    }
    (out.len() == graph.len()).then_some(out)
}

impl PackageSource for Repository {
    fn resolve(&self, sw: &SoftwareRef) -> Result<Vec<SoftwareRef>, SourceError> {
        self.resolve_deps(sw).map_err(to_source)
    }

    fn fetch(&self, sw: &SoftwareRef) -> Result<Package, SourceError> {
        Repository::fetch(self, sw).map_err(to_source)
    }
}

fn to_source(e: RepoError) -> SourceError {
    match e {
        RepoError::UnknownPackage(sw) => SourceError::Unknown(sw),
        other => SourceError::Unavailable(other.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::swrepo::PackageBuilder;
    use proptest::prelude::*;

    fn sw(a: &str) -> SoftwareRef {
        SoftwareRef::new(a, "1.0")
    }

    fn pkg(app: &str, deps: &[&str]) -> Package {
        let mut b = PackageBuilder::new(app, "1.0").file("lib/data", app.as_bytes().to_vec());
        for d in deps {
            b = b.depends_on(sw(d));
        }
        b.build().unwrap()
    }

    fn repo() -> Repository {
        Repository::new(Arc::new(Store::in_memory()))
    }

    #[test]
    fn publish_rules() {
        let r = repo();
        r.publish(&pkg("A", &[])).unwrap();
        assert!(matches!(r.publish(&pkg("B", &["C"])), Err(RepoError::MissingDependency { .. })));
        let mut changed = pkg("A", &[]);
        changed.payload = archive_of("other");
        changed.checksum = crc32fast::hash(&changed.payload);
        assert!(matches!(r.publish(&changed), Err(RepoError::DuplicateVersion(_))));
        r.publish(&pkg("A", &[])).unwrap();
        assert!(matches!(r.publish(&pkg("S", &["S"])), Err(RepoError::CyclicDependency(_))));
        let mut corrupt = pkg("Z", &[]);
        corrupt.payload[0] ^= 1;
        assert!(matches!(r.publish(&corrupt), Err(RepoError::ChecksumMismatch(_))));
    }

    fn archive_of(s: &str) -> Vec<u8> {
        let mut f = super::super::FileSet::new();
        f.insert("x".into(), (0o644, s.as_bytes().to_vec()));
        super::super::archive::pack(&f).unwrap()
    }

    #[test]
    fn resolve_examples() {
        let r = repo();
        r.publish(&pkg("D", &[])).unwrap();
        assert_eq!(r.resolve_deps(&sw("D")).unwrap(), vec![sw("D")]);
        r.publish(&pkg("C", &["D"])).unwrap();
        r.publish(&pkg("B", &["D"])).unwrap();
        r.publish(&pkg("A", &["B", "C"])).unwrap();
        assert_eq!(r.resolve_deps(&sw("A")).unwrap(), vec![sw("D"), sw("B"), sw("C"), sw("A")]);
        assert!(matches!(r.resolve_deps(&sw("Q")), Err(RepoError::UnknownPackage(_))));
        assert_eq!(r.query_available().unwrap().len(), 4);
    }

    #[test]
    fn topo_detects_cycle() {
        let mut g = BTreeMap::new();
        g.insert(sw("A"), vec![sw("B")]);
        g.insert(sw("B"), vec![sw("A")]);
        assert_eq!(topo_order(&g), None);
    }

    proptest! {
        #[test]
        fn random_dags_resolve_in_dependency_order(edges in proptest::collection::vec((0usize..12, 0usize..12), 0..40)) {
            let r = repo();
            let names: Vec<String> = (0..12).map(|i| format!("p{i:02}")).collect();
            // Edges only point to lower indices, so publishing in index order is valid.
            for i in 0..12 {
                let mut deps: Vec<&str> = edges
                    .iter()
                    .filter(|(a, b)| *a == i && *b < i)
                    .map(|(_, b)| names[*b].as_str())
                    .collect();
                deps.sort();
                deps.dedup();
                r.publish(&pkg(&names[i], &deps)).unwrap();
            }
            for name in &names {
                let order = r.resolve_deps(&sw(name)).unwrap();
                prop_assert_eq!(order.last().unwrap(), &sw(name));
                let pos: BTreeMap<_, _> = order.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
                for s in &order {
                    for d in r.fetch(s).unwrap().dependencies {
                        prop_assert!(pos[&d] < pos[s]);
                    }
                }
                prop_assert_eq!(r.resolve_deps(&sw(name)).unwrap(), order);
            }
        }
    }
}
