//! Versioned Configuration-as-Data store.
//!
//! Blueprint repositories hold parameterised ("dry") packages; deployment
//! repositories hold hydrated packages and are each watched by exactly one
//! edge reconciler. Revisions are numbered `v1, v2, ...` per package and
//! become immutable once published.

mod disk;
pub mod manifest;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::intent::{
    is_identifier, parse_revision_label, CpuQuantity, Endpoint, EndpointCatalog, MemoryUnit, PackageDescriptor,
    PackageRequirement,
};
pub use manifest::{
    parse_manifest, serialize_manifest, FieldPath, ManifestDocument, ManifestError, Scalar, ScalarValue, Value,
};

/// Label on hydrated revisions naming the blueprint they came from.
pub const ORIGIN_LABEL: &str = "origin";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StoreError {
    #[error("repository {0} already exists")]
    DuplicateId(String),
    #[error("deployment repository {0} needs an owner edge")]
    MissingOwnerEdge(String),
    #[error("blueprint repository {0} cannot have an owner edge")]
    UnexpectedOwnerEdge(String),
    #[error("edge {edge} already owns deployment repository {repo}")]
    EdgeAlreadyBound { edge: String, repo: String },
    #[error("invalid name {0:?}")]
    InvalidName(String),
    #[error("unknown repository {0}")]
    UnknownRepository(String),
    #[error("unknown package {repo}/{package}")]
    UnknownPackage { repo: String, package: String },
    #[error("unknown revision {0}")]
    UnknownRevision(String),
    #[error("revision label {got} does not match the next revision {expected}")]
    RevisionLabelMismatch { expected: String, got: String },
    #[error("immutability violation: {0}")]
    ImmutabilityViolation(String),
    #[error("repository {repo} is a {actual} repository")]
    WrongRepositoryKind { repo: String, actual: RepositoryKind },
    #[error("blueprint revision {0} is not published")]
    NotPublished(String),
    #[error("unresolved setter {0:?}")]
    UnresolvedSetter(String),
    #[error("binding for unknown parameter {0:?}")]
    UnknownParameter(String),
    #[error("descriptor {package} has no requirement for revision {revision}")]
    NoRequirement { package: String, revision: String },
    #[error("repository {0} is not empty")]
    NotEmpty(String),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error("storage failure: {0}")]
    Storage(String),
    #[error("corrupt store: {0}")]
    Corrupt(String),
}

impl From<std::io::Error> for StoreError {
    fn from(e: std::io::Error) -> Self {
        StoreError::Storage(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RepositoryKind {
    Blueprint,
    Deployment,
}

impl fmt::Display for RepositoryKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RepositoryKind::Blueprint => "blueprint",
            RepositoryKind::Deployment => "deployment",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RevisionState {
    Draft,
    Proposed,
    Published,
}

/// A `v<n>` revision number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Revision(pub u32);

impl fmt::Display for Revision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "v{}", self.0)
    }
}

impl std::str::FromStr for Revision {
    type Err = StoreError;
    fn from_str(s: &str) -> Result<Self, StoreError> {
        parse_revision_label(s).map(Revision).ok_or_else(|| StoreError::UnknownRevision(s.to_string()))
    }
}

impl Serialize for Revision {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Revision {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RevisionRef {
    pub repo: String,
    pub package: String,
    pub revision: Revision,
}

impl RevisionRef {
    pub fn new(repo: impl Into<String>, package: impl Into<String>, revision: Revision) -> Self {
        Self { repo: repo.into(), package: package.into(), revision }
    }
}

impl fmt::Display for RevisionRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.repo, self.package, self.revision)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackageRevision {
    pub name: String,
    pub revision: Revision,
    pub manifests: Vec<ManifestDocument>,
    pub state: RevisionState,
    pub labels: BTreeMap<String, String>,
    digest: String,
}

impl PackageRevision {
    fn new(
        name: String,
        revision: Revision,
        manifests: Vec<ManifestDocument>,
        labels: BTreeMap<String, String>,
    ) -> Self {
        let digest = content_digest(&name, revision, &manifests, &labels);
        Self { name, revision, manifests, state: RevisionState::Draft, labels, digest }
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn verify_digest(&self) -> bool {
        content_digest(&self.name, self.revision, &self.manifests, &self.labels) == self.digest
    }

    /// Parameter name to `(document index, path)` of each annotated scalar.
    pub fn setters(&self) -> BTreeMap<String, Vec<(usize, FieldPath)>> {
        let mut out: BTreeMap<String, Vec<(usize, FieldPath)>> = BTreeMap::new();
        for (i, doc) in self.manifests.iter().enumerate() {
            for (param, path) in doc.setters() {
                out.entry(param).or_default().push((i, path));
            }
        }
        out
    }

    pub fn serialized_manifests(&self) -> Vec<String> {
        self.manifests.iter().map(serialize_manifest).collect()
    }

    pub fn label(&self, key: &str) -> Option<&str> {
        self.labels.get(key).map(String::as_str)
    }

    /// Endpoints declared by `kind: Service` manifests.
    pub fn endpoints(&self) -> Vec<Endpoint> {
        let mut out = Vec::new();
        for doc in self.manifests.iter().filter(|d| d.kind() == Some("Service")) {
            let Some(host) = doc
                .get("metadata")
                .and_then(|m| m.get("name"))
                .and_then(Value::as_scalar)
                .and_then(ScalarValue::as_str)
            else {
                continue;
            };
            let ports = doc.get("spec").and_then(|s| s.get("ports")).and_then(Value::as_list).unwrap_or_default();
            for port in ports {
                let number = port.get("port").and_then(Value::as_scalar).and_then(ScalarValue::as_int);
                let protocol = port
                    .get("protocol")
                    .and_then(Value::as_scalar)
                    .and_then(ScalarValue::as_str)
                    .and_then(|p| p.parse().ok());
                if let (Some(n), Some(protocol)) = (number, protocol) {
                    if let Ok(port) = u16::try_from(n) {
                        if port > 0 {
                            out.push(Endpoint { host: host.to_string(), port, protocol });
                        }
                    }
                }
            }
        }
        out
    }
}

fn content_digest(
    name: &str,
    revision: Revision,
    manifests: &[ManifestDocument],
    labels: &BTreeMap<String, String>,
) -> String {
    let canonical = serde_json::json!({
        "name": name,
        "revision": revision.to_string(),
        "labels": labels,
        "manifests": manifests.iter().map(ManifestDocument::canonical_json).collect::<Vec<_>>(),
    });
    hex::encode(Sha256::digest(canonical.to_string().as_bytes()))
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Package {
    next_revision: u32,
    revisions: BTreeMap<u32, PackageRevision>,
}

impl Package {
    pub fn revisions(&self) -> impl DoubleEndedIterator<Item = &PackageRevision> {
        self.revisions.values()
    }

    pub fn next_revision(&self) -> Revision {
        Revision(self.next_revision.max(1))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Repository {
    pub id: String,
    pub kind: RepositoryKind,
    pub owner_edge: Option<String>,
    packages: BTreeMap<String, Package>,
}

impl Repository {
    pub fn packages(&self) -> &BTreeMap<String, Package> {
        &self.packages
    }

    pub fn revision(&self, package: &str, revision: Revision) -> Option<&PackageRevision> {
        self.packages.get(package)?.revisions.get(&revision.0)
    }

    pub fn revisions(&self) -> impl Iterator<Item = (&str, &PackageRevision)> {
        self.packages.iter().flat_map(|(name, p)| p.revisions.values().map(move |r| (name.as_str(), r)))
    }

    pub fn published(&self) -> impl Iterator<Item = (&str, &PackageRevision)> {
        self.revisions().filter(|(_, r)| r.state == RevisionState::Published)
    }

    pub fn latest_published(&self, package: &str) -> Option<&PackageRevision> {
        self.packages
            .get(package)?
            .revisions
            .values()
            .rev()
            .find(|r| r.state == RevisionState::Published)
    }

    /// Digest over the published content only; what a reconciler observes.
    pub fn published_digest(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, rev) in self.published() {
            hasher.update(format!("{name}\0{}\0{}\n", rev.revision, rev.digest).as_bytes());
        }
        hex::encode(hasher.finalize())
    }

    pub fn is_empty(&self) -> bool {
        self.packages.values().all(|p| p.revisions.is_empty())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub repository: String,
    pub package: String,
    pub revisions: Vec<String>,
    pub requirements: Vec<PackageRequirement>,
    pub endpoints: Vec<Endpoint>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlueprintRef {
    pub repo: String,
    pub package: String,
    pub revision: Revision,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HydrationRequest {
    pub blueprint: BlueprintRef,
    /// Requirements keyed by blueprint revision; optional for packages
    /// without resource parameters (e.g. network objects).
    pub descriptor: Option<PackageDescriptor>,
    pub qos: Option<String>,
    /// Context values applied only where the blueprint asks for them.
    pub defaults: BTreeMap<String, ScalarValue>,
    pub extra_bindings: BTreeMap<String, ScalarValue>,
    pub target: String,
    /// Package name inside the target repository.
    pub target_package: String,
    pub labels: BTreeMap<String, String>,
}

/// Parameter bindings derived from one descriptor entry.
pub fn requirement_bindings(req: &PackageRequirement) -> BTreeMap<String, ScalarValue> {
    let res = &req.package_resources;
    let cpu = match res.cpu {
        CpuQuantity::Cores(n) => ScalarValue::Int(n as i64),
        CpuQuantity::Millis(_) => ScalarValue::Str(res.cpu.to_string()),
    };
    let memory = match res.memory.unit() {
        MemoryUnit::Bytes => ScalarValue::Int(res.memory.value() as i64),
        _ => ScalarValue::Str(res.memory.to_string()),
    };
    BTreeMap::from([
        ("qos".to_string(), ScalarValue::Str(req.qos.clone())),
        ("cpu".to_string(), cpu),
        ("memory".to_string(), memory),
        ("container".to_string(), ScalarValue::Str(res.container.clone())),
    ])
}

/// Replaces every annotated scalar with its binding and drops the
/// annotation. `lenient` bindings may go unused; `strict` ones may not.
pub fn render_manifests(
    manifests: &[ManifestDocument],
    lenient: &BTreeMap<String, ScalarValue>,
    strict: &BTreeMap<String, ScalarValue>,
) -> Result<Vec<ManifestDocument>, StoreError> {
    let declared: BTreeSet<String> = manifests.iter().flat_map(|d| d.setters()).map(|(p, _)| p).collect();
    if let Some(unknown) = strict.keys().find(|k| !declared.contains(*k)) {
        return Err(StoreError::UnknownParameter(unknown.clone()));
    }
    let mut out = manifests.to_vec();
    for doc in &mut out {
        for (param, path) in doc.setters() {
            let value = strict
                .get(&param)
                .or_else(|| lenient.get(&param))
                .ok_or_else(|| StoreError::UnresolvedSetter(param.clone()))?;
            if let Some(Value::Scalar(scalar)) = doc.lookup_mut(&path) {
                *scalar = Scalar { value: value.clone(), setter: None };
            }
        }
    }
    Ok(out)
}

type PublishFault = Box<dyn FnMut(&RevisionRef) -> bool + Send + Sync>;

#[derive(Default)]
pub struct PackageStore {
    root: Option<PathBuf>,
    repos: BTreeMap<String, Repository>,
    descriptors: BTreeMap<String, PackageDescriptor>,
    publish_fault: Option<PublishFault>,
}

impl fmt::Debug for PackageStore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PackageStore")
            .field("root", &self.root)
            .field("repos", &self.repos.keys().collect::<Vec<_>>())
            .finish()
    }
}

impl PackageStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (or creates) a store persisted under `root`.
    pub fn open(root: impl AsRef<Path>) -> Result<Self, StoreError> {
        let root = root.as_ref().to_path_buf();
        std::fs::create_dir_all(&root)?;
        let (repos, descriptors) = disk::load(&root)?;
        Ok(Self { root: Some(root), repos, descriptors, publish_fault: None })
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    /// Makes `publish` fail whenever the hook returns `true`.
    pub fn set_publish_fault(&mut self, hook: Option<PublishFault>) {
        self.publish_fault = hook;
    }

    pub fn register_repository(
        &mut self,
        id: &str,
        kind: RepositoryKind,
        owner_edge: Option<&str>,
    ) -> Result<&Repository, StoreError> {
        if !is_identifier(id) {
            return Err(StoreError::InvalidName(id.to_string()));
        }
        if self.repos.contains_key(id) {
            return Err(StoreError::DuplicateId(id.to_string()));
        }
        match (kind, owner_edge) {
            (RepositoryKind::Deployment, None) => return Err(StoreError::MissingOwnerEdge(id.to_string())),
            (RepositoryKind::Blueprint, Some(_)) => return Err(StoreError::UnexpectedOwnerEdge(id.to_string())),
            (RepositoryKind::Deployment, Some(edge)) => {
                if let Some(existing) = self.deployment_repo_for(edge) {
                    return Err(StoreError::EdgeAlreadyBound { edge: edge.to_string(), repo: existing.id.clone() });
                }
            }
            _ => {}
        }
        let repo = Repository {
            id: id.to_string(),
            kind,
            owner_edge: owner_edge.map(str::to_string),
            packages: BTreeMap::new(),
        };
        if let Some(root) = &self.root {
            disk::write_repository(root, &repo)?;
        }
        Ok(self.repos.entry(id.to_string()).or_insert(repo))
    }

    pub fn unregister_repository(&mut self, id: &str) -> Result<(), StoreError> {
        let repo = self.repos.get(id).ok_or_else(|| StoreError::UnknownRepository(id.to_string()))?;
        if !repo.is_empty() {
            return Err(StoreError::NotEmpty(id.to_string()));
        }
        if let Some(root) = &self.root {
            disk::remove_repository(root, id)?;
        }
        self.repos.remove(id);
        Ok(())
    }

    pub fn repository(&self, id: &str) -> Option<&Repository> {
        self.repos.get(id)
    }

    pub fn repositories(&self) -> impl Iterator<Item = &Repository> {
        self.repos.values()
    }

    pub fn deployment_repo_for(&self, edge: &str) -> Option<&Repository> {
        self.repos
            .values()
            .find(|r| r.kind == RepositoryKind::Deployment && r.owner_edge.as_deref() == Some(edge))
    }

    pub fn revision(&self, r: &RevisionRef) -> Option<&PackageRevision> {
        self.repos.get(&r.repo)?.revision(&r.package, r.revision)
    }

    fn repo_mut(&mut self, id: &str) -> Result<&mut Repository, StoreError> {
        self.repos.get_mut(id).ok_or_else(|| StoreError::UnknownRepository(id.to_string()))
    }

    fn revision_mut(&mut self, r: &RevisionRef) -> Result<&mut PackageRevision, StoreError> {
        self.repo_mut(&r.repo)?
            .packages
            .get_mut(&r.package)
            .and_then(|p| p.revisions.get_mut(&r.revision.0))
            .ok_or_else(|| StoreError::UnknownRevision(r.to_string()))
    }

    /// Adds a Draft revision. A client-supplied label must equal the next
    /// revision number of the package.
    pub fn create_revision(
        &mut self,
        repo: &str,
        package: &str,
        label: Option<&str>,
        manifests: Vec<ManifestDocument>,
        labels: BTreeMap<String, String>,
    ) -> Result<RevisionRef, StoreError> {
        if !is_package_key(package) {
            return Err(StoreError::InvalidName(package.to_string()));
        }
        let root = self.root.clone();
        let repository = self.repo_mut(repo)?;
        let entry = repository.packages.entry(package.to_string()).or_default();
        let next = entry.next_revision();
        if let Some(label) = label {
            if label != next.to_string() {
                return Err(StoreError::RevisionLabelMismatch { expected: next.to_string(), got: label.to_string() });
            }
        }
        let rev = PackageRevision::new(package.to_string(), next, manifests, labels);
        if let Some(root) = &root {
            disk::write_revision(root, repo, &rev)?;
            disk::write_package_meta(root, repo, package, next.0 + 1)?;
        }
        entry.revisions.insert(next.0, rev);
        entry.next_revision = next.0 + 1;
        Ok(RevisionRef::new(repo, package, next))
    }

    /// Replaces the content of a Draft or Proposed revision.
    pub fn update_revision(&mut self, r: &RevisionRef, manifests: Vec<ManifestDocument>) -> Result<(), StoreError> {
        let root = self.root.clone();
        let rev = self.revision_mut(r)?;
        if rev.state == RevisionState::Published {
            return Err(StoreError::ImmutabilityViolation(format!("{r} is published")));
        }
        rev.manifests = manifests;
        rev.digest = content_digest(&rev.name, rev.revision, &rev.manifests, &rev.labels);
        if let Some(root) = &root {
            disk::write_revision(root, &r.repo, rev)?;
        }
        Ok(())
    }

    pub fn propose(&mut self, r: &RevisionRef) -> Result<(), StoreError> {
        self.transition(r, RevisionState::Proposed)
    }

    pub fn publish(&mut self, r: &RevisionRef) -> Result<&PackageRevision, StoreError> {
        if let Some(hook) = self.publish_fault.as_mut() {
            if hook(r) {
                return Err(StoreError::Storage(format!("injected publication failure for {r}")));
            }
        }
        self.transition(r, RevisionState::Published)?;
        Ok(self.revision(r).expect("revision exists after transition"))
    }

    fn transition(&mut self, r: &RevisionRef, to: RevisionState) -> Result<(), StoreError> {
        let root = self.root.clone();
        let rev = self.revision_mut(r)?;
        match (rev.state, to) {
            (RevisionState::Published, _) => {
                return Err(StoreError::ImmutabilityViolation(format!("{r} is already published")))
            }
            (RevisionState::Proposed, RevisionState::Proposed) | (_, RevisionState::Draft) => {
                return Err(StoreError::Storage(format!("{r}: invalid transition to {to:?}")))
            }
            _ => {}
        }
        rev.state = to;
        if let Some(root) = &root {
            disk::write_revision_meta(root, &r.repo, rev)?;
        }
        Ok(())
    }

    pub fn delete_revision(&mut self, r: &RevisionRef) -> Result<(), StoreError> {
        let rev = self.revision(r).ok_or_else(|| StoreError::UnknownRevision(r.to_string()))?;
        let repo_kind = self.repos[&r.repo].kind;
        if repo_kind == RepositoryKind::Blueprint && rev.state == RevisionState::Published {
            let origin = r.to_string();
            let referenced = self
                .repos
                .values()
                .filter(|repo| repo.kind == RepositoryKind::Deployment)
                .flat_map(|repo| repo.revisions())
                .any(|(_, d)| d.label(ORIGIN_LABEL) == Some(origin.as_str()));
            if referenced {
                return Err(StoreError::ImmutabilityViolation(format!("{origin} is referenced by a deployment")));
            }
        }
        if let Some(root) = &self.root {
            disk::remove_revision(root, r)?;
        }
        let repo = self.repo_mut(&r.repo)?;
        let package = repo.packages.get_mut(&r.package).expect("package exists");
        package.revisions.remove(&r.revision.0);
        Ok(())
    }

    pub fn register_descriptor(&mut self, descriptor: PackageDescriptor) -> Result<(), StoreError> {
        if let Some(root) = &self.root {
            disk::write_descriptor(root, &descriptor)?;
        }
        self.descriptors.insert(descriptor.name.clone(), descriptor);
        Ok(())
    }

    pub fn descriptor(&self, name: &str) -> Option<&PackageDescriptor> {
        self.descriptors.get(name)
    }

    pub fn descriptors(&self) -> &BTreeMap<String, PackageDescriptor> {
        &self.descriptors
    }

    fn published_blueprint(&self, bp: &BlueprintRef) -> Result<&PackageRevision, StoreError> {
        let repo = self.repos.get(&bp.repo).ok_or_else(|| StoreError::UnknownRepository(bp.repo.clone()))?;
        if repo.kind != RepositoryKind::Blueprint {
            return Err(StoreError::WrongRepositoryKind { repo: bp.repo.clone(), actual: repo.kind });
        }
        if !repo.packages.contains_key(&bp.package) {
            return Err(StoreError::UnknownPackage { repo: bp.repo.clone(), package: bp.package.clone() });
        }
        let rev = repo
            .revision(&bp.package, bp.revision)
            .ok_or_else(|| StoreError::UnknownRevision(format!("{}/{}/{}", bp.repo, bp.package, bp.revision)))?;
        if rev.state != RevisionState::Published {
            return Err(StoreError::NotPublished(format!("{}/{}/{}", bp.repo, bp.package, bp.revision)));
        }
        Ok(rev)
    }

    /// Renders a published blueprint without storing anything.
    pub fn render(
        &self,
        bp: &BlueprintRef,
        lenient: &BTreeMap<String, ScalarValue>,
        strict: &BTreeMap<String, ScalarValue>,
    ) -> Result<Vec<ManifestDocument>, StoreError> {
        render_manifests(&self.published_blueprint(bp)?.manifests, lenient, strict)
    }

    fn check_deployment_target(&self, target: &str) -> Result<(), StoreError> {
        let repo = self.repos.get(target).ok_or_else(|| StoreError::UnknownRepository(target.to_string()))?;
        if repo.kind != RepositoryKind::Deployment {
            return Err(StoreError::WrongRepositoryKind { repo: target.to_string(), actual: repo.kind });
        }
        Ok(())
    }

    /// Binds a blueprint into a new Draft revision of the target deployment
    /// repository. All-or-nothing: on error nothing is written.
    pub fn hydrate(&mut self, req: &HydrationRequest) -> Result<RevisionRef, StoreError> {
        self.check_deployment_target(&req.target)?;
        let mut lenient = req.defaults.clone();
        if let Some(d) = &req.descriptor {
            let entry = d.requirement_for(&req.blueprint.revision.to_string(), req.qos.as_deref()).ok_or_else(|| {
                StoreError::NoRequirement { package: d.name.clone(), revision: req.blueprint.revision.to_string() }
            })?;
            lenient.extend(requirement_bindings(entry));
        }
        let manifests = self.render(&req.blueprint, &lenient, &req.extra_bindings)?;
        let mut labels = req.labels.clone();
        labels.insert(
            ORIGIN_LABEL.to_string(),
            format!("{}/{}/{}", req.blueprint.repo, req.blueprint.package, req.blueprint.revision),
        );
        self.create_revision(&req.target, &req.target_package, None, manifests, labels)
    }

    /// Stores several rendered parts as one Draft package.
    pub fn store_rendered(
        &mut self,
        target: &str,
        package: &str,
        manifests: Vec<ManifestDocument>,
        labels: BTreeMap<String, String>,
    ) -> Result<RevisionRef, StoreError> {
        self.check_deployment_target(target)?;
        self.create_revision(target, package, None, manifests, labels)
    }

    /// Published blueprint packages, by package name then repository.
    pub fn catalog(&self) -> Vec<CatalogEntry> {
        let mut out = Vec::new();
        for repo in self.repos.values().filter(|r| r.kind == RepositoryKind::Blueprint) {
            for (name, package) in &repo.packages {
                let published: Vec<&PackageRevision> =
                    package.revisions.values().filter(|r| r.state == RevisionState::Published).collect();
                let Some(latest) = published.last() else { continue };
                out.push(CatalogEntry {
                    repository: repo.id.clone(),
                    package: name.clone(),
                    revisions: published.iter().map(|r| r.revision.to_string()).collect(),
                    requirements: self
                        .descriptors
                        .get(name)
                        .map(|d| d.package_requirements.clone())
                        .unwrap_or_default(),
                    endpoints: latest.endpoints(),
                });
            }
        }
        out.sort_by(|a, b| a.package.cmp(&b.package).then_with(|| a.repository.cmp(&b.repository)));
        out
    }

    pub fn endpoint_catalog(&self) -> EndpointCatalog {
        let mut out = EndpointCatalog::new();
        for entry in self.catalog() {
            out.entry(entry.package).or_insert(entry.endpoints);
        }
        out
    }

    /// Digest over every repository, revision state and content digest.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for repo in self.repos.values() {
            hasher.update(format!("{}\0{}\0{:?}\n", repo.id, repo.kind, repo.owner_edge).as_bytes());
            for (name, rev) in repo.revisions() {
                hasher.update(format!("{name}\0{}\0{:?}\0{}\n", rev.revision, rev.state, rev.digest).as_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    /// Loads a blueprint directory laid out as
    /// `<package>/v<n>/*.cmf` (plus optional `<package>/iesd.json`),
    /// publishing every revision in order.
    pub fn import_blueprints(&mut self, repo: &str, dir: impl AsRef<Path>) -> Result<Vec<RevisionRef>, StoreError> {
        disk::import_blueprints(self, repo, dir.as_ref())
    }
}

/// Package keys are identifiers, optionally `<package>@<deployment>`.
pub fn is_package_key(key: &str) -> bool {
    let mut parts = key.split('@');
    let first = parts.next().unwrap_or_default();
    let rest: Vec<&str> = parts.collect();
    is_identifier(first) && rest.len() <= 1 && rest.iter().all(|p| is_identifier(p))
}

/// Key under which a deployment's package lives in a deployment repository.
pub fn deployment_package_key(package: &str, deployment_id: &str) -> String {
    format!("{package}@{deployment_id}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::intent::parse_package_descriptor;

    const LISTING2: &str = include_str!("../../../../fixtures/intents/listing2.json");

    fn doc(text: &str) -> ManifestDocument {
        parse_manifest(text).unwrap()
    }

    const ANNOTATED: &str = "\
kind: Deployment
metadata:
  name: example
  labels:
    qos: best-effort # set: qos
spec:
  containers:
    - name: placeholder # set: container
      resources:
        cpu: 1 # set: cpu
        memory: 1Mi # set: memory
";

    fn store_with_blueprint(text: &str) -> (PackageStore, BlueprintRef) {
        let mut store = PackageStore::in_memory();
        store.register_repository("blueprints", RepositoryKind::Blueprint, None).unwrap();
        store.register_repository("edge1-deploy", RepositoryKind::Deployment, Some("Edge1")).unwrap();
        let mut last = None;
        for _ in 0..5 {
            let r = store.create_revision("blueprints", "example_package", None, vec![doc(text)], BTreeMap::new()).unwrap();
            store.publish(&r).unwrap();
            last = Some(r);
        }
        let last = last.unwrap();
        (store, BlueprintRef { repo: last.repo, package: last.package, revision: last.revision })
    }

    fn request(bp: BlueprintRef, descriptor: Option<PackageDescriptor>) -> HydrationRequest {
        HydrationRequest {
            blueprint: bp,
            descriptor,
            qos: None,
            defaults: BTreeMap::new(),
            extra_bindings: BTreeMap::new(),
            target: "edge1-deploy".into(),
            target_package: "example_package@d1".into(),
            labels: BTreeMap::new(),
        }
    }

    #[test]
    fn register_repository_rules() {
        let mut store = PackageStore::in_memory();
        assert!(store.register_repository("blueprints", RepositoryKind::Blueprint, None).unwrap().is_empty());
        assert_eq!(
            store.register_repository("blueprints", RepositoryKind::Blueprint, None).unwrap_err(),
            StoreError::DuplicateId("blueprints".into())
        );
        assert_eq!(
            store.register_repository("d", RepositoryKind::Deployment, None).unwrap_err(),
            StoreError::MissingOwnerEdge("d".into())
        );
        let repo = store.register_repository("edge1-deploy", RepositoryKind::Deployment, Some("Edge1")).unwrap();
        assert_eq!(repo.owner_edge.as_deref(), Some("Edge1"));
        assert_eq!(store.deployment_repo_for("Edge1").unwrap().id, "edge1-deploy");
    }

    #[test]
    fn listing2_hydration() {
        let (mut store, bp) = store_with_blueprint(ANNOTATED);
        let before = store.revision(&RevisionRef::new("blueprints", "example_package", bp.revision)).unwrap().digest().to_string();
        let descriptor = parse_package_descriptor(LISTING2).unwrap();
        let r = store.hydrate(&request(bp.clone(), Some(descriptor))).unwrap();
        let hydrated = store.revision(&r).unwrap();
        assert_eq!(hydrated.state, RevisionState::Draft);
        let m = &hydrated.manifests[0];
        let at = |p: &str| m.lookup(&p.parse().unwrap()).and_then(Value::as_scalar).cloned();
        assert_eq!(at("spec.containers[0].resources.cpu"), Some(ScalarValue::Int(8)));
        assert_eq!(at("spec.containers[0].resources.memory"), Some(ScalarValue::Str("1000000Ki".into())));
        assert_eq!(at("spec.containers[0].name"), Some(ScalarValue::Str("example_container".into())));
        assert!(hydrated.setters().is_empty());
        assert!(!hydrated.serialized_manifests().concat().contains("# set:"));
        let after = store.revision(&RevisionRef::new("blueprints", "example_package", bp.revision)).unwrap().digest();
        assert_eq!(before, after);
    }

    #[test]
    fn identity_hydration_is_byte_identical() {
        let plain = "kind: ConfigMap\nmetadata:\n  name: plain\ndata:\n  k: v\n";
        let (mut store, bp) = store_with_blueprint(plain);
        let r = store.hydrate(&request(bp.clone(), None)).unwrap();
        let blueprint = store.revision(&RevisionRef::new("blueprints", "example_package", bp.revision)).unwrap();
        let hydrated = store.revision(&r).unwrap();
        assert_eq!(hydrated.serialized_manifests(), blueprint.serialized_manifests());
        assert_eq!(hydrated.state, RevisionState::Draft);
    }

    #[test]
    fn hydration_errors_are_atomic() {
        let text = "kind: ConfigMap\nmetadata:\n  namespace: x # set: namespace\n";
        let (mut store, bp) = store_with_blueprint(text);
        let before = store.fingerprint();
        assert_eq!(
            store.hydrate(&request(bp.clone(), None)).unwrap_err(),
            StoreError::UnresolvedSetter("namespace".into())
        );
        let mut req = request(bp.clone(), None);
        req.extra_bindings.insert("namespace".into(), "ns".into());
        req.extra_bindings.insert("colour".into(), "blue".into());
        assert_eq!(store.hydrate(&req).unwrap_err(), StoreError::UnknownParameter("colour".into()));
        assert_eq!(store.fingerprint(), before);

        let mut wrong_target = request(bp, None);
        wrong_target.target = "blueprints".into();
        assert!(matches!(store.hydrate(&wrong_target), Err(StoreError::WrongRepositoryKind { .. })));
    }

    #[test]
    fn publish_and_delete_rules() {
        let (mut store, bp) = store_with_blueprint(ANNOTATED);
        let descriptor = parse_package_descriptor(LISTING2).unwrap();
        let r = store.hydrate(&request(bp.clone(), Some(descriptor))).unwrap();
        let digest = store.revision(&r).unwrap().digest().to_string();
        store.publish(&r).unwrap();
        assert_eq!(store.revision(&r).unwrap().state, RevisionState::Published);
        assert_eq!(store.revision(&r).unwrap().digest(), digest);
        assert!(matches!(store.publish(&r), Err(StoreError::ImmutabilityViolation(_))));
        assert!(matches!(store.update_revision(&r, vec![]), Err(StoreError::ImmutabilityViolation(_))));

        let blueprint = RevisionRef::new(bp.repo.clone(), bp.package.clone(), bp.revision);
        assert!(matches!(store.delete_revision(&blueprint), Err(StoreError::ImmutabilityViolation(_))));
        store.delete_revision(&r).unwrap();
        assert!(store.revision(&r).is_none());
        store.delete_revision(&blueprint).unwrap();
        assert!(matches!(store.delete_revision(&blueprint), Err(StoreError::UnknownRevision(_))));
    }

    #[test]
    fn revision_labels_are_monotonic() {
        let mut store = PackageStore::in_memory();
        store.register_repository("bp", RepositoryKind::Blueprint, None).unwrap();
        let r1 = store.create_revision("bp", "p", Some("v1"), vec![], BTreeMap::new()).unwrap();
        assert!(matches!(
            store.create_revision("bp", "p", Some("v1"), vec![], BTreeMap::new()),
            Err(StoreError::RevisionLabelMismatch { .. })
        ));
        store.delete_revision(&r1).unwrap();
        let r2 = store.create_revision("bp", "p", None, vec![], BTreeMap::new()).unwrap();
        assert_eq!(r2.revision, Revision(2));
    }

    #[test]
    fn catalog_listing() {
        let mut store = PackageStore::in_memory();
        assert!(store.catalog().is_empty());
        store.register_repository("bp", RepositoryKind::Blueprint, None).unwrap();
        for (pkg, n) in [("CNF-2", 3), ("CNF-1", 1)] {
            for _ in 0..n {
                let r = store.create_revision("bp", pkg, None, vec![], BTreeMap::new()).unwrap();
                store.publish(&r).unwrap();
            }
        }
        store.create_revision("bp", "draft-only", None, vec![], BTreeMap::new()).unwrap();
        let catalog = store.catalog();
        assert_eq!(catalog.len(), 2);
        assert_eq!(catalog[0].package, "CNF-1");
        assert_eq!(catalog[1].package, "CNF-2");
        assert_eq!(catalog[1].revisions, vec!["v1", "v2", "v3"]);
    }

    #[test]
    fn service_manifests_provide_endpoints() {
        let svc = "kind: Service\nmetadata:\n  name: svc1\nspec:\n  ports:\n    - port: 80\n      protocol: HTTP\n";
        let (store, _) = store_with_blueprint(svc);
        let endpoints = store.endpoint_catalog();
        assert_eq!(endpoints["example_package"][0].host, "svc1");
        assert_eq!(endpoints["example_package"][0].port, 80);
    }

    #[test]
    fn injected_publish_fault() {
        let (mut store, bp) = store_with_blueprint(ANNOTATED);
        let r = store.hydrate(&request(bp, Some(parse_package_descriptor(LISTING2).unwrap()))).unwrap();
        store.set_publish_fault(Some(Box::new(|_| true)));
        assert!(matches!(store.publish(&r), Err(StoreError::Storage(_))));
        assert_eq!(store.revision(&r).unwrap().state, RevisionState::Draft);
    }

    #[test]
    fn package_keys() {
        assert!(is_package_key("CNF-1"));
        assert!(is_package_key("CNF-1@338d10a2-2669-46e1"));
        assert!(!is_package_key("a@b@c"));
        assert!(!is_package_key("@x"));
    }
}
