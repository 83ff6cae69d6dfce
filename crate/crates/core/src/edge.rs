//! Discrete-tick simulation of edge clusters.
//!
//! Each edge owns a clock, a seeded random stream, a resource ledger and a
//! pull-based reconciler that converges its workloads to the Published
//! revisions of its deployment repository.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::intent::{CpuQuantity, MemoryQuantity, ResourceRequest};
use crate::store::{ManifestDocument, PackageRevision, PackageStore, Repository, ScalarValue, Value};

pub const DEFAULT_RECONCILE_INTERVAL: u64 = 5;
pub const DEFAULT_MAX_START_DELAY: u64 = 5;

pub const LABEL_DEPLOYMENT: &str = "deployment-id";
pub const LABEL_PACKAGE: &str = "package";
pub const LABEL_NAMESPACE: &str = "namespace";
pub const LABEL_MESH_PROXY: &str = "mesh-proxy";

/// Namespace holding every workload of one deployment.
pub fn namespace_for(deployment_id: &str) -> String {
    format!("camino-{}", deployment_id.to_ascii_lowercase())
}

pub mod capability {
    pub const INGRESS_CONTROLLER: &str = "ingress-controller";
    pub const LOAD_BALANCER: &str = "load-balancer";
    pub const SERVICE_MESH: &str = "service-mesh";
}

/// Manifest kinds the simulated edges understand, with the capability each
/// one needs.
pub fn kind_requirement(kind: &str) -> Option<Option<&'static str>> {
    match kind {
        "Deployment" | "Service" | "ConfigMap" | "NetworkPolicy" => Some(None),
        "IngressRule" => Some(Some(capability::INGRESS_CONTROLLER)),
        "LoadBalancer" => Some(Some(capability::LOAD_BALANCER)),
        "MeshRoute" | "MeshRemoteEntry" | "MeshGateway" => Some(Some(capability::SERVICE_MESH)),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TopologyError {
    #[error("topology: {0}")]
    Parse(String),
    #[error("duplicate edge id {0}")]
    DuplicateEdge(String),
    #[error("edge {0}: reconcile interval and max start delay must be positive")]
    InvalidTiming(String),
    #[error("topology io: {0}")]
    Io(String),
}

fn default_interval() -> u64 {
    DEFAULT_RECONCILE_INTERVAL
}

fn default_max_delay() -> u64 {
    DEFAULT_MAX_START_DELAY
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeSpec {
    pub id: String,
    pub cpu: CpuQuantity,
    pub memory: MemoryQuantity,
    #[serde(default)]
    pub capabilities: BTreeSet<String>,
    #[serde(default = "default_interval")]
    pub reconcile_interval: u64,
    #[serde(default = "default_max_delay")]
    pub max_start_delay: u64,
    #[serde(default)]
    pub seed: u64,
}

impl EdgeSpec {
    pub fn capacity(&self) -> ResourceRequest {
        ResourceRequest::new(self.cpu.millis(), self.memory.bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Topology {
    pub edges: Vec<EdgeSpec>,
}

impl Topology {
    pub fn parse(text: &str) -> Result<Self, TopologyError> {
        let topology: Topology = serde_json::from_str(text).map_err(|e| TopologyError::Parse(e.to_string()))?;
        let mut seen = BTreeSet::new();
        for edge in &topology.edges {
            if !crate::intent::is_identifier(&edge.id) {
                return Err(TopologyError::Parse(format!("invalid edge id {:?}", edge.id)));
            }
            if !seen.insert(edge.id.as_str()) {
                return Err(TopologyError::DuplicateEdge(edge.id.clone()));
            }
            if edge.reconcile_interval == 0 || edge.max_start_delay == 0 {
                return Err(TopologyError::InvalidTiming(edge.id.clone()));
            }
        }
        Ok(topology)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TopologyError> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| TopologyError::Io(e.to_string()))?;
        Self::parse(&text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum WorkloadState {
    Pending,
    Starting,
    Running,
    Terminating,
    Removed,
}

impl Workload {
    /// Package key and revision number of the revision this workload runs.
    pub fn source(&self) -> (&str, u32) {
        (&self.key.0, self.key.1)
    }
}

impl WorkloadState {
    /// Moves only forward along Pending, Starting, Running, Terminating,
    /// Removed; skipping ahead (e.g. Pending to Terminating) is allowed.
    pub fn can_transition_to(self, next: WorkloadState) -> bool {
        next > self
    }
}

impl fmt::Display for WorkloadState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Workload {
    pub id: String,
    pub deployment_id: String,
    pub package: String,
    pub revision: String,
    pub namespace: String,
    pub request: ResourceRequest,
    pub state: WorkloadState,
    pub start_delay: u64,
    pub mesh_proxy: bool,
    pub usage: ResourceRequest,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub condition: Option<String>,
    #[serde(skip)]
    committed: bool,
    #[serde(skip)]
    key: (String, u32),
}

/// Non-workload objects (services, config, mesh objects) applied as-is.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppliedConfig {
    pub deployment_id: String,
    pub package: String,
    pub revision: String,
    pub namespace: String,
    pub kinds: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "change", rename_all = "snake_case")]
pub enum StateChange {
    Create { workload: String },
    Transition { workload: String, from: WorkloadState, to: WorkloadState },
    Apply { package: String, revision: String },
    Withdraw { package: String, revision: String },
    CapacityBreach { workload: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum DryRunReason {
    MissingCapability(String),
    UnknownKind(String),
    Schema(String),
}

impl fmt::Display for DryRunReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DryRunReason::MissingCapability(c) => write!(f, "missing capability {c}"),
            DryRunReason::UnknownKind(k) => write!(f, "unknown kind {k}"),
            DryRunReason::Schema(s) => write!(f, "schema: {s}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DryRunVerdict {
    Accept,
    Reject(DryRunReason),
}

fn scalar_request(value: &ScalarValue, cpu: bool) -> Result<u64, String> {
    match (value, cpu) {
        (ScalarValue::Int(n), true) if *n > 0 => CpuQuantity::from_cores(*n as u64).map(|q| q.millis()).map_err(|e| e.0),
        (ScalarValue::Int(n), false) if *n > 0 => Ok(*n as u64),
        (ScalarValue::Str(s), true) => s.parse::<CpuQuantity>().map(|q| q.millis()).map_err(|e| e.0),
        (ScalarValue::Str(s), false) => s.parse::<MemoryQuantity>().map(|q| q.bytes()).map_err(|e| e.0),
        (other, _) => Err(format!("invalid resource quantity {}", other.render())),
    }
}

/// Sum of container requests over the Deployment manifests of a revision.
/// `None` means the revision carries no workload.
pub fn workload_request(manifests: &[ManifestDocument]) -> Result<Option<ResourceRequest>, String> {
    let mut total: Option<ResourceRequest> = None;
    for doc in manifests.iter().filter(|d| d.kind() == Some("Deployment")) {
        let containers = doc
            .get("spec")
            .and_then(|s| s.get("containers"))
            .and_then(Value::as_list)
            .ok_or("Deployment without spec.containers")?;
        let mut sum = ResourceRequest::ZERO;
        for c in containers {
            let resources = c.get("resources").ok_or("container without resources")?;
            let field = |name: &str| {
                resources
                    .get(name)
                    .and_then(Value::as_scalar)
                    .ok_or_else(|| format!("container without resources.{name}"))
            };
            sum = sum
                + ResourceRequest::new(scalar_request(field("cpu")?, true)?, scalar_request(field("memory")?, false)?);
        }
        total = Some(total.unwrap_or_default() + sum);
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ReconcilerStatus {
    pub interval: u64,
    pub last_synced: Option<String>,
    pub last_run_tick: Option<u64>,
    pub suspended: bool,
}

#[derive(Debug, Clone)]
pub struct EdgeClusterState {
    pub edge_id: String,
    pub capacity: ResourceRequest,
    pub capabilities: BTreeSet<String>,
    max_start_delay: u64,
    clock: u64,
    committed: ResourceRequest,
    workloads: BTreeMap<String, Workload>,
    configs: BTreeMap<(String, u32), AppliedConfig>,
    reconciler: ReconcilerStatus,
    rng: ChaCha8Rng,
    trace: Vec<(u64, StateChange)>,
    trace_enabled: bool,
}

impl EdgeClusterState {
    pub fn new(spec: &EdgeSpec) -> Self {
        Self::with_capacity(
            &spec.id,
            spec.capacity(),
            spec.capabilities.clone(),
            spec.reconcile_interval,
            spec.max_start_delay,
            spec.seed,
        )
    }

    pub fn with_capacity(
        edge_id: &str,
        capacity: ResourceRequest,
        capabilities: BTreeSet<String>,
        interval: u64,
        max_start_delay: u64,
        seed: u64,
    ) -> Self {
        Self {
            edge_id: edge_id.to_string(),
            capacity,
            capabilities,
            max_start_delay: max_start_delay.max(1),
            clock: 0,
            committed: ResourceRequest::ZERO,
            workloads: BTreeMap::new(),
            configs: BTreeMap::new(),
            reconciler: ReconcilerStatus { interval: interval.max(1), last_synced: None, last_run_tick: None, suspended: false },
            rng: ChaCha8Rng::seed_from_u64(seed),
            trace: Vec::new(),
            trace_enabled: false,
        }
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    pub fn committed(&self) -> ResourceRequest {
        self.committed
    }

    pub fn free(&self) -> ResourceRequest {
        self.capacity.saturating_sub(self.committed)
    }

    pub fn max_start_delay(&self) -> u64 {
        self.max_start_delay
    }

    pub fn reconciler(&self) -> &ReconcilerStatus {
        &self.reconciler
    }

    pub fn workloads(&self) -> impl Iterator<Item = &Workload> {
        self.workloads.values()
    }

    pub fn workload(&self, id: &str) -> Option<&Workload> {
        self.workloads.get(id)
    }

    pub fn configs(&self) -> impl Iterator<Item = &AppliedConfig> {
        self.configs.values()
    }

    /// Namespace to the ids of the workloads it holds.
    pub fn namespaces(&self) -> BTreeMap<String, BTreeSet<String>> {
        let mut out: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for w in self.workloads.values() {
            out.entry(w.namespace.clone()).or_default().insert(w.id.clone());
        }
        out
    }

    /// Starts recording every change with its tick.
    pub fn enable_trace(&mut self) {
        self.trace_enabled = true;
    }

    pub fn trace(&self) -> &[(u64, StateChange)] {
        &self.trace
    }

    pub fn set_suspended(&mut self, suspended: bool) {
        self.reconciler.suspended = suspended;
    }

    fn record(&mut self, change: &StateChange) {
        if self.trace_enabled {
            self.trace.push((self.clock, change.clone()));
        }
    }

    fn transition(&mut self, id: &str, to: WorkloadState, changes: &mut Vec<StateChange>) {
        let w = self.workloads.get_mut(id).expect("workload exists");
        let from = w.state;
        assert!(from.can_transition_to(to), "illegal transition {from} -> {to} for {id}");
        w.state = to;
        let change = StateChange::Transition { workload: id.to_string(), from, to };
        self.record(&change);
        changes.push(change);
    }

    /// Validates manifest kinds and shapes against this edge. Never mutates.
    pub fn dry_run(&self, revision: &PackageRevision) -> DryRunVerdict {
        for doc in &revision.manifests {
            let Some(kind) = doc.kind() else {
                return DryRunVerdict::Reject(DryRunReason::Schema("manifest without kind".into()));
            };
            match kind_requirement(kind) {
                None => return DryRunVerdict::Reject(DryRunReason::UnknownKind(kind.to_string())),
                Some(Some(cap)) if !self.capabilities.contains(cap) => {
                    return DryRunVerdict::Reject(DryRunReason::MissingCapability(cap.to_string()))
                }
                _ => {}
            }
            let named = doc.get("metadata").and_then(|m| m.get("name")).and_then(Value::as_scalar).is_some();
            if !named {
                return DryRunVerdict::Reject(DryRunReason::Schema(format!("{kind} without metadata.name")));
            }
        }
        if let Err(e) = workload_request(&revision.manifests) {
            return DryRunVerdict::Reject(DryRunReason::Schema(e));
        }
        DryRunVerdict::Accept
    }

    /// Diffs Published revisions against live objects.
    pub fn reconcile(&mut self, repo: &Repository) -> Vec<StateChange> {
        let mut changes = Vec::new();
        let mut desired: BTreeMap<(String, u32), &PackageRevision> = BTreeMap::new();
        for (name, rev) in repo.published() {
            desired.insert((name.to_string(), rev.revision.0), rev);
        }

        let live: BTreeSet<(String, u32)> = self.workloads.values().map(|w| w.key.clone()).collect();
        let stale: Vec<String> = self
            .workloads
            .values()
            .filter(|w| w.state < WorkloadState::Terminating && !desired.contains_key(&w.key))
            .map(|w| w.id.clone())
            .collect();
        for id in stale {
            self.transition(&id, WorkloadState::Terminating, &mut changes);
        }
        let withdrawn: Vec<(String, u32)> = self.configs.keys().filter(|k| !desired.contains_key(*k)).cloned().collect();
        for key in withdrawn {
            let c = self.configs.remove(&key).expect("config exists");
            let change = StateChange::Withdraw { package: key.0, revision: c.revision };
            self.record(&change);
            changes.push(change);
        }

        for (key, rev) in desired {
            if live.contains(&key) || self.configs.contains_key(&key) {
                continue;
            }
            let deployment_id = rev.label(LABEL_DEPLOYMENT).unwrap_or(&key.0).to_string();
            let package = rev
                .label(LABEL_PACKAGE)
                .map(str::to_string)
                .unwrap_or_else(|| key.0.split('@').next().unwrap_or_default().to_string());
            let namespace = rev
                .label(LABEL_NAMESPACE)
                .map(str::to_string)
                .unwrap_or_else(|| namespace_for(&deployment_id));
            match workload_request(&rev.manifests) {
                Ok(Some(request)) => {
                    let id = format!("{deployment_id}/{package}/{}", rev.revision);
                    self.workloads.insert(
                        id.clone(),
                        Workload {
                            id: id.clone(),
                            deployment_id,
                            package,
                            revision: rev.revision.to_string(),
                            namespace,
                            request,
                            state: WorkloadState::Pending,
                            start_delay: 0,
                            mesh_proxy: rev.label(LABEL_MESH_PROXY) == Some("true"),
                            usage: ResourceRequest::ZERO,
                            condition: None,
                            committed: false,
                            key,
                        },
                    );
                    let change = StateChange::Create { workload: id };
                    self.record(&change);
                    changes.push(change);
                }
                // malformed revisions are rejected by admission; the
                // reconciler only applies their non-workload objects
                Ok(None) | Err(_) => {
                    let kinds = rev.manifests.iter().filter_map(|d| d.kind().map(str::to_string)).collect();
                    let change = StateChange::Apply { package: key.0.clone(), revision: rev.revision.to_string() };
                    self.configs.insert(
                        key,
                        AppliedConfig { deployment_id, package, revision: rev.revision.to_string(), namespace, kinds },
                    );
                    self.record(&change);
                    changes.push(change);
                }
            }
        }
        self.reconciler.last_synced = Some(repo.published_digest());
        self.reconciler.last_run_tick = Some(self.clock);
        changes
    }

    fn promote_pending(&mut self, changes: &mut Vec<StateChange>) {
        let pending: Vec<String> =
            self.workloads.values().filter(|w| w.state == WorkloadState::Pending).map(|w| w.id.clone()).collect();
        for id in pending {
            let request = self.workloads[&id].request;
            if (self.committed + request).fits_within(&self.capacity) {
                let delay = self.rng.random_range(1..=self.max_start_delay);
                self.committed = self.committed + request;
                let w = self.workloads.get_mut(&id).expect("workload exists");
                w.committed = true;
                w.start_delay = delay;
                w.condition = None;
                self.transition(&id, WorkloadState::Starting, changes);
            } else if self.workloads[&id].condition.is_none() {
                self.workloads.get_mut(&id).expect("workload exists").condition = Some("CapacityBreach".into());
                let change = StateChange::CapacityBreach { workload: id };
                self.record(&change);
                changes.push(change);
            }
        }
    }

    fn sample_usage(&mut self) {
        for w in self.workloads.values_mut() {
            w.usage = match w.state {
                WorkloadState::Starting | WorkloadState::Running => {
                    let cpu: f64 = self.rng.random_range(0.5..1.25);
                    let mem: f64 = self.rng.random_range(0.5..1.25);
                    ResourceRequest::new(
                        (w.request.cpu_millis as f64 * cpu).round() as u64,
                        (w.request.memory_bytes as f64 * mem).round() as u64,
                    )
                }
                _ => ResourceRequest::ZERO,
            };
        }
    }

    /// One simulation tick against the edge's deployment repository.
    pub fn step(&mut self, repo: Option<&Repository>) -> Vec<StateChange> {
        let mut changes = Vec::new();
        self.clock += 1;

        let terminating: Vec<String> =
            self.workloads.values().filter(|w| w.state == WorkloadState::Terminating).map(|w| w.id.clone()).collect();
        for id in terminating {
            self.transition(&id, WorkloadState::Removed, &mut changes);
            let w = self.workloads.remove(&id).expect("workload exists");
            if w.committed {
                self.committed = self.committed.saturating_sub(w.request);
            }
        }

        let starting: Vec<String> =
            self.workloads.values().filter(|w| w.state == WorkloadState::Starting).map(|w| w.id.clone()).collect();
        for id in starting {
            let w = self.workloads.get_mut(&id).expect("workload exists");
            w.start_delay = w.start_delay.saturating_sub(1);
            if w.start_delay == 0 {
                self.transition(&id, WorkloadState::Running, &mut changes);
            }
        }

        if self.clock.is_multiple_of(self.reconciler.interval) && !self.reconciler.suspended {
            if let Some(repo) = repo {
                changes.extend(self.reconcile(repo));
            }
        }

        self.promote_pending(&mut changes);
        self.sample_usage();
        debug_assert!(self.committed.fits_within(&self.capacity));
        changes
    }

    pub fn advance(&mut self, repo: Option<&Repository>, ticks: u64) -> Vec<StateChange> {
        let mut changes = Vec::new();
        for _ in 0..ticks {
            changes.extend(self.step(repo));
        }
        changes
    }

    /// True when every Published revision has a Running workload (or an
    /// applied config) and nothing else is live.
    pub fn converged_with(&self, repo: &Repository) -> bool {
        let desired: BTreeSet<(String, u32)> =
            repo.published().map(|(n, r)| (n.to_string(), r.revision.0)).collect();
        let mut actual: BTreeSet<(String, u32)> = self.configs.keys().cloned().collect();
        for w in self.workloads.values() {
            if w.state != WorkloadState::Running {
                return false;
            }
            actual.insert(w.key.clone());
        }
        desired == actual
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecMode {
    #[default]
    Parallel,
    Sequential,
}

/// All edges of a domain, advanced in lock-step.
#[derive(Debug, Clone)]
pub struct Cluster {
    edges: Vec<EdgeClusterState>,
    pub mode: ExecMode,
}

impl Cluster {
    pub fn new(topology: &Topology) -> Self {
        Self::from_edges(topology.edges.iter().map(EdgeClusterState::new).collect())
    }

    pub fn from_edges(mut edges: Vec<EdgeClusterState>) -> Self {
        edges.sort_by(|a, b| a.edge_id.cmp(&b.edge_id));
        Self { edges, mode: ExecMode::default() }
    }

    pub fn edges(&self) -> &[EdgeClusterState] {
        &self.edges
    }

    pub fn edges_mut(&mut self) -> &mut [EdgeClusterState] {
        &mut self.edges
    }

    pub fn edge(&self, id: &str) -> Option<&EdgeClusterState> {
        self.edges.iter().find(|e| e.edge_id == id)
    }

    pub fn edge_mut(&mut self, id: &str) -> Option<&mut EdgeClusterState> {
        self.edges.iter_mut().find(|e| e.edge_id == id)
    }

    /// Advances every edge by `ticks`, each against its own deployment
    /// repository. Edges share no state, so the result does not depend on
    /// the execution mode.
    pub fn advance(&mut self, store: &PackageStore, ticks: u64) -> BTreeMap<String, Vec<StateChange>> {
        let run = |edge: &mut EdgeClusterState| {
            let repo = store.deployment_repo_for(&edge.edge_id);
            (edge.edge_id.clone(), edge.advance(repo, ticks))
        };
        match self.mode {
            #[cfg(feature = "parallel")]
            ExecMode::Parallel => {
                use rayon::prelude::*;
                self.edges.par_iter_mut().map(run).collect()
            }
            _ => self.edges.iter_mut().map(run).collect(),
        }
    }

    pub fn converged(&self, store: &PackageStore) -> bool {
        self.edges.iter().all(|e| match store.deployment_repo_for(&e.edge_id) {
            Some(repo) => e.converged_with(repo),
            None => e.workloads.is_empty() && e.configs.is_empty(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::{parse_manifest, RepositoryKind, RevisionRef};

    fn deployment(cpu: u64, mem: &str) -> ManifestDocument {
        parse_manifest(&format!(
            "kind: Deployment\nmetadata:\n  name: w\nspec:\n  containers:\n    - name: c\n      resources:\n        cpu: {cpu}\n        memory: {mem}\n"
        ))
        .unwrap()
    }

    fn labels(dep: &str, pkg: &str) -> BTreeMap<String, String> {
        BTreeMap::from([
            (LABEL_DEPLOYMENT.to_string(), dep.to_string()),
            (LABEL_PACKAGE.to_string(), pkg.to_string()),
        ])
    }

    fn setup(cpu_cores: u64) -> (PackageStore, EdgeClusterState) {
        let mut store = PackageStore::in_memory();
        store.register_repository("edge1-deploy", RepositoryKind::Deployment, Some("Edge1")).unwrap();
        let edge = EdgeClusterState::with_capacity(
            "Edge1",
            ResourceRequest::new(cpu_cores * 1000, 8 << 30),
            BTreeSet::new(),
            5,
            5,
            7,
        );
        (store, edge)
    }

    fn publish(store: &mut PackageStore, pkg: &str, cpu: u64) -> RevisionRef {
        let r = store
            .create_revision("edge1-deploy", &format!("{pkg}@d1"), None, vec![deployment(cpu, "1Gi")], labels("d1", pkg))
            .unwrap();
        store.publish(&r).unwrap();
        r
    }

    #[test]
    fn reconcile_creates_then_is_idempotent() {
        let (mut store, mut edge) = setup(8);
        publish(&mut store, "CNF-1", 2);
        let repo = store.repository("edge1-deploy").unwrap();
        let changes = edge.reconcile(repo);
        assert_eq!(changes, vec![StateChange::Create { workload: "d1/CNF-1/v1".into() }]);
        assert!(edge.reconcile(repo).is_empty());
        let w = edge.workload("d1/CNF-1/v1").unwrap();
        assert_eq!(w.state, WorkloadState::Pending);
        assert_eq!(w.namespace, "camino-d1");
    }

    #[test]
    fn start_delay_counts_down_to_running() {
        let (mut store, mut edge) = setup(8);
        publish(&mut store, "CNF-1", 2);
        edge.reconcile(store.repository("edge1-deploy").unwrap());
        edge.step(None);
        let w = edge.workload("d1/CNF-1/v1").unwrap();
        assert_eq!(w.state, WorkloadState::Starting);
        assert_eq!(edge.committed().cpu_millis, 2000);
        let delay = w.start_delay;
        assert!((1..=5).contains(&delay));
        edge.advance(None, delay - 1);
        assert_eq!(edge.workload("d1/CNF-1/v1").unwrap().state, WorkloadState::Starting);
        edge.step(None);
        assert_eq!(edge.workload("d1/CNF-1/v1").unwrap().state, WorkloadState::Running);
    }

    #[test]
    fn deletion_terminates_and_releases() {
        let (mut store, mut edge) = setup(8);
        let r = publish(&mut store, "CNF-1", 2);
        edge.advance(store.repository("edge1-deploy"), 15);
        assert!(edge.converged_with(store.repository("edge1-deploy").unwrap()));
        store.delete_revision(&r).unwrap();
        let changes = edge.reconcile(store.repository("edge1-deploy").unwrap());
        assert_eq!(
            changes,
            vec![StateChange::Transition {
                workload: "d1/CNF-1/v1".into(),
                from: WorkloadState::Running,
                to: WorkloadState::Terminating
            }]
        );
        let free_before = edge.free();
        edge.step(None);
        assert!(edge.workload("d1/CNF-1/v1").is_none());
        assert_eq!(edge.free().cpu_millis, free_before.cpu_millis + 2000);
        assert_eq!(edge.free(), edge.capacity);
    }

    #[test]
    fn capacity_breach_holds_pending() {
        let (mut store, mut edge) = setup(4);
        publish(&mut store, "big", 3);
        publish(&mut store, "bigger", 3);
        edge.advance(store.repository("edge1-deploy"), 20);
        let states: Vec<_> = edge.workloads().map(|w| (w.package.clone(), w.state, w.condition.clone())).collect();
        assert_eq!(
            states,
            vec![
                ("big".into(), WorkloadState::Running, None),
                ("bigger".into(), WorkloadState::Pending, Some("CapacityBreach".into())),
            ]
        );
        assert!(edge.committed().fits_within(&edge.capacity));
    }

    #[test]
    fn dry_run_verdicts() {
        let edge = EdgeClusterState::with_capacity("E", ResourceRequest::ZERO, BTreeSet::new(), 5, 5, 0);
        let rev = |text: &str| {
            let mut store = PackageStore::in_memory();
            store.register_repository("bp", RepositoryKind::Blueprint, None).unwrap();
            let r = store.create_revision("bp", "p", None, vec![parse_manifest(text).unwrap()], BTreeMap::new()).unwrap();
            store.revision(&r).unwrap().clone()
        };
        assert_eq!(edge.dry_run(&rev("kind: Service\nmetadata:\n  name: s\n")), DryRunVerdict::Accept);
        assert_eq!(
            edge.dry_run(&rev("kind: IngressRule\nmetadata:\n  name: s\n")),
            DryRunVerdict::Reject(DryRunReason::MissingCapability("ingress-controller".into()))
        );
        assert_eq!(
            edge.dry_run(&rev("kind: Gizmo\nmetadata:\n  name: s\n")),
            DryRunVerdict::Reject(DryRunReason::UnknownKind("Gizmo".into()))
        );
        let mut with_ingress = edge.clone();
        with_ingress.capabilities.insert("ingress-controller".into());
        assert_eq!(with_ingress.dry_run(&rev("kind: IngressRule\nmetadata:\n  name: s\n")), DryRunVerdict::Accept);
    }

    #[test]
    fn workload_request_sums_containers() {
        let doc = parse_manifest(
            "kind: Deployment\nmetadata:\n  name: w\nspec:\n  containers:\n    - name: a\n      resources:\n        cpu: 500m\n        memory: 1000000Ki\n    - name: b\n      resources:\n        cpu: 2\n        memory: 1024\n",
        )
        .unwrap();
        assert_eq!(workload_request(&[doc]).unwrap(), Some(ResourceRequest::new(2500, 1_024_000_000 + 1024)));
        assert_eq!(workload_request(&[parse_manifest("kind: Service\n").unwrap()]).unwrap(), None);
    }

    #[test]
    fn topology_parsing() {
        let t = Topology::parse(
            r#"{"edges":[{"id":"Edge1","cpu":12,"memory":"16Gi","capabilities":["service-mesh"],"seed":1}]}"#,
        )
        .unwrap();
        assert_eq!(t.edges[0].capacity(), ResourceRequest::new(12_000, 16 << 30));
        assert_eq!(t.edges[0].reconcile_interval, 5);
        assert!(Topology::parse(r#"{"edges":[{"id":"E","cpu":1,"memory":1},{"id":"E","cpu":1,"memory":1}]}"#).is_err());
    }

    #[test]
    fn transitions_only_move_forward() {
        use WorkloadState::*;
        assert!(Pending.can_transition_to(Starting));
        assert!(Running.can_transition_to(Terminating));
        assert!(!Running.can_transition_to(Starting));
        assert!(!Removed.can_transition_to(Removed));
    }

    #[test]
    fn execution_modes_agree() {
        let mut store = PackageStore::in_memory();
        let mut edges = Vec::new();
        for i in 0..6u64 {
            let id = format!("E{i}");
            let repo = format!("e{i}-deploy");
            store.register_repository(&repo, RepositoryKind::Deployment, Some(&id)).unwrap();
            for p in 0..3 {
                let r = store
                    .create_revision(&repo, &format!("p{p}@d"), None, vec![deployment(1 + p, "1Gi")], labels("d", &format!("p{p}")))
                    .unwrap();
                store.publish(&r).unwrap();
            }
            edges.push(EdgeClusterState::with_capacity(&id, ResourceRequest::new(8_000, 8 << 30), BTreeSet::new(), 2, 4, i));
        }
        let mut seq = Cluster::from_edges(edges);
        seq.mode = ExecMode::Sequential;
        let mut par = seq.clone();
        par.mode = ExecMode::Parallel;
        for _ in 0..12 {
            assert_eq!(seq.advance(&store, 1), par.advance(&store, 1));
        }
        for (a, b) in seq.edges().iter().zip(par.edges()) {
            assert_eq!(a.workloads().collect::<Vec<_>>(), b.workloads().collect::<Vec<_>>());
            assert_eq!(a.committed(), b.committed());
        }
        assert!(seq.converged(&store));
    }
}
