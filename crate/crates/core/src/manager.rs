//! Domain manager engine: the deployment pipeline, the deployment registry,
//! the simulation clock and the read-side views (catalog, metrics, health,
//! domain resolution). The HTTP layer and the scenario runner both drive it.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::admission::{
    admit, authorize_termination, withdraw, ActiveDeployment, AdmissionDecision, AdmissionError, AdmissionInput,
    AdmissionReason, PendingPackage, PublicationMode, ReasonCode, Verdict,
};
use crate::edge::{
    namespace_for, workload_request, Cluster, EdgeClusterState, ExecMode, Topology, WorkloadState, LABEL_DEPLOYMENT,
    LABEL_MESH_PROXY, LABEL_NAMESPACE, LABEL_PACKAGE,
};
use crate::intent::{
    derive_network_intent, parse_deployment_intent_with, DeploymentIntent, IntentError, LinkType, NetworkIntent,
    PlacementMap, ResourceRequest, RESERVED_NETWORK_PACKAGE,
};
use crate::mesh::{hydrate_network_packages, plan_mesh, proxy_injections, MeshConfig, MeshError, MeshSettings,
    TrustedDomainTable};
use crate::monitoring::{
    collect, parse_expression, Alert, AlertRule, DataLake, MetricQuery, MonitoringError, QueryResult, Scope,
    DEFAULT_RETENTION,
};
use crate::planner::{build_graph, order_services, place_services, CycleError, EdgeInventory, PlacementError};
use crate::store::{
    deployment_package_key, BlueprintRef, CatalogEntry, HydrationRequest, PackageStore, RepositoryKind, Revision,
    RevisionRef, RevisionState, ScalarValue, StoreError,
};

pub const DEFAULT_BLUEPRINT_REPO: &str = "blueprints";
const REGISTRY_FILE: &str = "registry.json";

/// Deployment repository owned by an edge.
pub fn deployment_repo_name(edge: &str) -> String {
    format!("{}-deploy", edge.to_ascii_lowercase())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Phase {
    Accepted,
    Deploying,
    Running,
    Terminating,
    Terminated,
    Rejected,
    Failed,
}

impl Phase {
    pub fn is_active(self) -> bool {
        matches!(self, Phase::Accepted | Phase::Deploying | Phase::Running | Phase::Terminating)
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, Phase::Terminated | Phase::Rejected | Phase::Failed)
    }

    pub fn can_transition_to(self, next: Phase) -> bool {
        match next {
            Phase::Rejected | Phase::Failed => matches!(self, Phase::Accepted | Phase::Deploying),
            _ => !self.is_terminal() && next > self,
        }
    }
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        std::fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseChange {
    pub tick: u64,
    pub phase: Phase,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceStatus {
    pub edge: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub revision: Option<RevisionRef>,
    pub published: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub state: Option<WorkloadState>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeploymentRecord {
    pub deployment_id: String,
    pub intent: DeploymentIntent,
    pub order: Vec<String>,
    pub placement: PlacementMap,
    pub phase: Phase,
    pub services: BTreeMap<String, ServiceStatus>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decision: Option<AdmissionDecision>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub network: Option<NetworkIntent>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub mesh: BTreeMap<String, MeshConfig>,
    #[serde(default)]
    pub packages: Vec<PendingPackage>,
    #[serde(default)]
    pub network_packages: Vec<PendingPackage>,
    pub history: Vec<PhaseChange>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl DeploymentRecord {
    fn new(intent: DeploymentIntent, tick: u64) -> Self {
        Self {
            deployment_id: intent.deployment_id.clone(),
            intent,
            order: Vec::new(),
            placement: PlacementMap::new(),
            phase: Phase::Accepted,
            services: BTreeMap::new(),
            decision: None,
            network: None,
            mesh: BTreeMap::new(),
            packages: Vec::new(),
            network_packages: Vec::new(),
            history: vec![PhaseChange { tick, phase: Phase::Accepted }],
            error: None,
        }
    }

    fn set_phase(&mut self, phase: Phase, tick: u64) {
        if self.phase == phase {
            return;
        }
        assert!(self.phase.can_transition_to(phase), "illegal phase change {} -> {}", self.phase, phase);
        self.phase = phase;
        self.history.push(PhaseChange { tick, phase });
    }

    /// Number of links of each type in the derived network intent.
    pub fn link_counts(&self) -> BTreeMap<LinkType, usize> {
        let mut counts = BTreeMap::new();
        if let Some(net) = &self.network {
            for (_, link) in net.links() {
                *counts.entry(link.kind).or_insert(0) += 1;
            }
        }
        counts
    }

    /// Mesh objects planned per edge.
    pub fn mesh_object_counts(&self) -> BTreeMap<String, usize> {
        self.mesh.iter().map(|(edge, c)| (edge.clone(), c.object_count())).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EngineError {
    #[error(transparent)]
    Intent(#[from] IntentError),
    #[error("deployment {0} is already active")]
    Duplicate(String),
    #[error(transparent)]
    Cycle(#[from] CycleError),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Capacity(PlacementError),
    #[error("deployment {} rejected", .0.deployment_id)]
    Rejected(Box<DeploymentRecord>),
    #[error("storage failure: {0}")]
    Storage(String),
    #[error("unknown deployment {0}")]
    UnknownDeployment(String),
    #[error("termination conflicts with dependent deployments {0:?}")]
    Conflict(Vec<String>),
    #[error(transparent)]
    Monitoring(#[from] MonitoringError),
    #[error("unresolvable domain {0}")]
    UnresolvableDomain(String),
    #[error("setup: {0}")]
    Setup(String),
}

impl EngineError {
    /// HTTP status code the API reports for this error.
    pub fn status(&self) -> u16 {
        match self {
            EngineError::Intent(_) | EngineError::Cycle(_) | EngineError::Invalid(_) => 400,
            EngineError::Duplicate(_) | EngineError::Conflict(_) => 409,
            EngineError::Capacity(_) => 507,
            EngineError::Rejected(_) => 422,
            EngineError::UnknownDeployment(_) | EngineError::UnresolvableDomain(_) => 404,
            EngineError::Monitoring(MonitoringError::PolicyViolation(_)) => 403,
            EngineError::Monitoring(_) => 400,
            EngineError::Storage(_) | EngineError::Setup(_) => 500,
        }
    }
}

impl From<StoreError> for EngineError {
    fn from(e: StoreError) -> Self {
        EngineError::Storage(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Admin,
    External,
}

#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub domain_name: String,
    pub topology: Topology,
    pub trusted_domains: TrustedDomainTable,
    /// External address of this domain's east-west gateway.
    pub gateway_address: String,
    pub blueprint_repo: String,
    /// Hold dependents back until their local predecessors run.
    pub readiness_sequencing: bool,
    pub retention: usize,
    pub alert_rules: Vec<AlertRule>,
    pub exec_mode: ExecMode,
}

impl EngineConfig {
    pub fn new(domain_name: &str, topology: Topology) -> Self {
        Self {
            domain_name: domain_name.to_string(),
            topology,
            trusted_domains: TrustedDomainTable::new(),
            gateway_address: String::new(),
            blueprint_repo: DEFAULT_BLUEPRINT_REPO.to_string(),
            readiness_sequencing: false,
            retention: DEFAULT_RETENTION,
            alert_rules: Vec::new(),
            exec_mode: ExecMode::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeLedger {
    pub capacity: ResourceRequest,
    pub committed: ResourceRequest,
    pub free: ResourceRequest,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogView {
    pub domain: String,
    pub packages: Vec<CatalogEntry>,
    pub reserved: ResourceRequest,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub edges: Option<BTreeMap<String, EdgeLedger>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub tick: u64,
    pub store: String,
    pub monitoring: String,
    pub edges: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct Registry {
    records: Vec<DeploymentRecord>,
}

pub struct Engine {
    config: EngineConfig,
    store: PackageStore,
    cluster: Cluster,
    lake: DataLake,
    records: BTreeMap<String, DeploymentRecord>,
    tick: u64,
}

impl Engine {
    /// Wraps an existing store, creating the blueprint repository and one
    /// deployment repository per edge when missing, and reloading the
    /// deployment registry saved next to an on-disk store.
    pub fn new(config: EngineConfig, mut store: PackageStore) -> Result<Self, EngineError> {
        if store.repository(&config.blueprint_repo).is_none() {
            store.register_repository(&config.blueprint_repo, RepositoryKind::Blueprint, None)?;
        }
        for edge in &config.topology.edges {
            if store.deployment_repo_for(&edge.id).is_none() {
                store.register_repository(&deployment_repo_name(&edge.id), RepositoryKind::Deployment, Some(&edge.id))?;
            }
        }
        let mut records = BTreeMap::new();
        if let Some(path) = store.root().map(|r| r.join(REGISTRY_FILE)) {
            if path.exists() {
                let text = fs::read_to_string(&path).map_err(|e| EngineError::Setup(e.to_string()))?;
                let registry: Registry =
                    serde_json::from_str(&text).map_err(|e| EngineError::Setup(format!("registry: {e}")))?;
                records = registry.records.into_iter().map(|r| (r.deployment_id.clone(), r)).collect();
            }
        }
        let mut cluster = Cluster::new(&config.topology);
        cluster.mode = config.exec_mode;
        let mut lake = DataLake::new(config.retention);
        for edge in cluster.edges() {
            lake.ingest(collect(edge));
        }
        Ok(Self { config, store, cluster, lake, records, tick: 0 })
    }

    /// In-memory store seeded from a blueprint fixture directory.
    pub fn with_blueprints(config: EngineConfig, blueprints: impl AsRef<Path>) -> Result<Self, EngineError> {
        let mut store = PackageStore::in_memory();
        store.register_repository(&config.blueprint_repo, RepositoryKind::Blueprint, None)?;
        store.import_blueprints(&config.blueprint_repo, blueprints)?;
        Self::new(config, store)
    }

    /// On-disk store under `root`; blueprints are imported only when the
    /// blueprint repository is new.
    pub fn open(config: EngineConfig, root: impl AsRef<Path>, blueprints: Option<&Path>) -> Result<Self, EngineError> {
        let mut store = PackageStore::open(root)?;
        if store.repository(&config.blueprint_repo).is_none() {
            store.register_repository(&config.blueprint_repo, RepositoryKind::Blueprint, None)?;
            if let Some(dir) = blueprints {
                store.import_blueprints(&config.blueprint_repo, dir)?;
            }
        }
        Self::new(config, store)
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn store(&self) -> &PackageStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut PackageStore {
        &mut self.store
    }

    pub fn cluster(&self) -> &Cluster {
        &self.cluster
    }

    pub fn cluster_mut(&mut self) -> &mut Cluster {
        &mut self.cluster
    }

    pub fn lake(&self) -> &DataLake {
        &self.lake
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    pub fn record(&self, id: &str) -> Option<&DeploymentRecord> {
        self.records.get(id)
    }

    pub fn records(&self) -> impl Iterator<Item = &DeploymentRecord> {
        self.records.values()
    }

    pub fn ledgers(&self) -> BTreeMap<String, EdgeLedger> {
        self.cluster
            .edges()
            .iter()
            .map(|e| {
                (e.edge_id.clone(), EdgeLedger { capacity: e.capacity, committed: e.committed(), free: e.free() })
            })
            .collect()
    }

    fn active_intents(&self) -> impl Iterator<Item = &DeploymentIntent> {
        self.records.values().filter(|r| r.phase.is_active()).map(|r| &r.intent)
    }

    /// Requests held on an edge by its deployment repository (anything
    /// proposed or published) and by workloads not yet removed.
    fn booked(&self, edge: &EdgeClusterState) -> ResourceRequest {
        let mut held: BTreeMap<(String, u32), ResourceRequest> = BTreeMap::new();
        if let Some(repo) = self.store.deployment_repo_for(&edge.edge_id) {
            for (package, rev) in repo.revisions() {
                if rev.state == RevisionState::Draft {
                    continue;
                }
                if let Ok(Some(req)) = workload_request(&rev.manifests) {
                    held.insert((package.to_string(), rev.revision.0), req);
                }
            }
        }
        for w in edge.workloads().filter(|w| w.state != WorkloadState::Removed) {
            let (key, rev) = w.source();
            held.insert((key.to_string(), rev), w.request);
        }
        held.into_values().sum()
    }

    fn available(&self) -> BTreeMap<String, ResourceRequest> {
        self.cluster
            .edges()
            .iter()
            .map(|e| (e.edge_id.clone(), e.capacity.saturating_sub(self.booked(e))))
            .collect()
    }

    /// Free resources per edge as last reported to the monitoring plane.
    fn inventory(&self) -> Vec<EdgeInventory> {
        let mut latest: BTreeMap<(&str, &str), (u64, f64)> = BTreeMap::new();
        for s in self.lake.samples().filter(|s| s.metric == "free_cpu" || s.metric == "free_memory") {
            let Some(edge) = s.labels.get(crate::monitoring::LABEL_EDGE) else { continue };
            let slot = latest.entry((edge.as_str(), s.metric.as_str())).or_insert((s.tick, s.value));
            if s.tick >= slot.0 {
                *slot = (s.tick, s.value);
            }
        }
        self.cluster
            .edges()
            .iter()
            .map(|e| {
                let cpu = latest.get(&(e.edge_id.as_str(), "free_cpu")).map(|v| v.1 as u64);
                let mem = latest.get(&(e.edge_id.as_str(), "free_memory")).map(|v| v.1 as u64);
                let free = ResourceRequest::new(
                    cpu.unwrap_or(e.free().cpu_millis),
                    mem.unwrap_or(e.free().memory_bytes),
                );
                EdgeInventory { edge_id: e.edge_id.clone(), free }
            })
            .collect()
    }

    /// Runs the pipeline for one intent document. Approved deployments come
    /// back in phase Deploying; rejections are recorded and returned as
    /// [`EngineError::Rejected`].
    pub fn submit(&mut self, document: &str) -> Result<DeploymentRecord, EngineError> {
        let shared: BTreeSet<String> = self
            .active_intents()
            .flat_map(|i| i.services.iter().map(|s| s.package_name.clone()))
            .collect();
        let intent = parse_deployment_intent_with(document, &shared)?;
        if intent.domain_name != self.config.domain_name {
            return Err(EngineError::Invalid(format!(
                "intent targets domain {}, this manager serves {}",
                intent.domain_name, self.config.domain_name
            )));
        }
        if self.records.get(&intent.deployment_id).is_some_and(|r| r.phase.is_active()) {
            return Err(EngineError::Duplicate(intent.deployment_id.clone()));
        }
        let order = order_services(&build_graph(&intent))?;

        let mut requirements = BTreeMap::new();
        for svc in &intent.services {
            let descriptor = self
                .store
                .descriptor(&svc.package_name)
                .ok_or_else(|| EngineError::Invalid(format!("no descriptor for package {}", svc.package_name)))?;
            let entry = descriptor.requirement_for(&svc.version, Some(&svc.qos_level)).ok_or_else(|| {
                EngineError::Invalid(format!(
                    "descriptor of {} has no requirement for {} qos {}",
                    svc.package_name, svc.version, svc.qos_level
                ))
            })?;
            requirements.insert(svc.package_name.clone(), entry.package_resources.request());
            let published = svc
                .version
                .parse::<Revision>()
                .ok()
                .map(|rev| RevisionRef::new(&self.config.blueprint_repo, &svc.package_name, rev))
                .and_then(|r| self.store.revision(&r))
                .is_some_and(|r| r.state == RevisionState::Published);
            if !published {
                return Err(EngineError::Invalid(format!(
                    "blueprint {}/{} is not published",
                    svc.package_name, svc.version
                )));
            }
        }

        let placement =
            place_services(&intent, &requirements, &self.inventory()).map_err(|e| match e {
                PlacementError::MissingRequirement(s) => EngineError::Invalid(format!("no requirement for {s}")),
                other => EngineError::Capacity(other),
            })?;
        let network = derive_network_intent(&intent, &placement, &self.store.endpoint_catalog())?;
        let namespace = namespace_for(&intent.deployment_id);
        let settings = MeshSettings::new(&namespace, &self.config.gateway_address);
        let mesh = plan_mesh(&network, &placement, &self.config.trusted_domains, &settings).map_err(|e| match e {
            MeshError::UnresolvableDomain(d) => EngineError::Invalid(format!("unresolvable domain {d}")),
            other => EngineError::Invalid(other.to_string()),
        })?;

        let mut record = DeploymentRecord::new(intent.clone(), self.tick);
        record.order = order.0.clone();
        record.placement = placement.clone();
        record.network = Some(network.clone());
        record.mesh = mesh.clone();
        for svc in &intent.services {
            record.services.insert(
                svc.package_name.clone(),
                ServiceStatus { edge: placement[&svc.package_name].clone(), revision: None, published: false, state: None },
            );
        }

        let (services, network_packages) = match self.hydrate_all(&intent, &placement, &network, &mesh, &namespace) {
            Ok(v) => v,
            Err(reason) => {
                record.decision = Some(AdmissionDecision {
                    deployment_id: intent.deployment_id.clone(),
                    verdict: Verdict::Rejected,
                    reasons: vec![reason],
                    resource_plan: crate::admission::resource_plan(&placement, &requirements),
                    published: Vec::new(),
                    deferred: Vec::new(),
                });
                record.set_phase(Phase::Rejected, self.tick);
                return Err(self.finish_rejected(record));
            }
        };

        let mode = if self.config.readiness_sequencing {
            let ready = intent
                .services
                .iter()
                .filter(|s| s.dependencies.iter().all(|d| !intent.is_local(d) || intent.service(&d.after).is_none()))
                .map(|s| s.package_name.clone())
                .collect();
            PublicationMode::Deferred { ready }
        } else {
            PublicationMode::Immediate
        };
        let available = self.available();
        let edges: Vec<&EdgeClusterState> = self.cluster.edges().iter().collect();
        let input = AdmissionInput {
            intent: &intent,
            order: &order,
            plan: &placement,
            requirements: &requirements,
            services: &services,
            network: &network_packages,
            available: &available,
            edges: &edges,
        };
        let outcome = admit(input, &mut self.store, &mode);
        record.packages = services;
        record.network_packages = network_packages;
        match outcome {
            Ok(decision) if decision.verdict == Verdict::Rejected => {
                record.decision = Some(decision);
                record.set_phase(Phase::Rejected, self.tick);
                Err(self.finish_rejected(record))
            }
            Ok(decision) => {
                record.decision = Some(decision);
                record.set_phase(Phase::Deploying, self.tick);
                self.refresh_record(&mut record);
                let id = record.deployment_id.clone();
                self.records.insert(id, record.clone());
                self.persist()?;
                Ok(record)
            }
            Err(e) => {
                record.error = Some(e.to_string());
                record.set_phase(Phase::Failed, self.tick);
                self.records.insert(record.deployment_id.clone(), record);
                self.persist()?;
                Err(EngineError::Storage(e.to_string()))
            }
        }
    }

    fn finish_rejected(&mut self, record: DeploymentRecord) -> EngineError {
        self.records.insert(record.deployment_id.clone(), record.clone());
        if let Err(e) = self.persist() {
            return e;
        }
        EngineError::Rejected(Box::new(record))
    }

    /// Hydrates every service package and the per-edge network packages as
    /// Drafts. On failure nothing of this deployment is left in the store.
    fn hydrate_all(
        &mut self,
        intent: &DeploymentIntent,
        placement: &PlacementMap,
        network: &NetworkIntent,
        mesh: &BTreeMap<String, MeshConfig>,
        namespace: &str,
    ) -> Result<(Vec<PendingPackage>, Vec<PendingPackage>), AdmissionReason> {
        let proxied: BTreeSet<String> = proxy_injections(network).into_iter().filter(|p| p.enabled).map(|p| p.workload).collect();
        let mut created: Vec<PendingPackage> = Vec::new();
        let rollback = |store: &mut PackageStore, created: &[PendingPackage]| {
            for p in created {
                let _ = store.delete_revision(&p.revision);
            }
        };
        for svc in &intent.services {
            let edge = &placement[&svc.package_name];
            let repo = self.store.deployment_repo_for(edge).map(|r| r.id.clone());
            let revision = svc.version.parse::<Revision>().ok();
            let (Some(repo), Some(revision)) = (repo, revision) else {
                rollback(&mut self.store, &created);
                return Err(reason(&svc.package_name, ReasonCode::UnknownEdge, format!("no deployment repository for {edge}")));
            };
            let labels = BTreeMap::from([
                (LABEL_DEPLOYMENT.to_string(), intent.deployment_id.clone()),
                (LABEL_PACKAGE.to_string(), svc.package_name.clone()),
                (LABEL_NAMESPACE.to_string(), namespace.to_string()),
                (LABEL_MESH_PROXY.to_string(), proxied.contains(&svc.package_name).to_string()),
            ]);
            let request = HydrationRequest {
                blueprint: BlueprintRef {
                    repo: self.config.blueprint_repo.clone(),
                    package: svc.package_name.clone(),
                    revision,
                },
                descriptor: self.store.descriptor(&svc.package_name).cloned(),
                qos: Some(svc.qos_level.clone()),
                defaults: BTreeMap::from([
                    ("namespace".to_string(), ScalarValue::Str(namespace.to_string())),
                    ("deployment-id".to_string(), ScalarValue::Str(intent.deployment_id.clone())),
                ]),
                extra_bindings: BTreeMap::new(),
                target: repo,
                target_package: deployment_package_key(&svc.package_name, &intent.deployment_id),
                labels,
            };
            match self.store.hydrate(&request) {
                Ok(r) => created.push(PendingPackage { subject: svc.package_name.clone(), edge: edge.clone(), revision: r }),
                Err(e) => {
                    rollback(&mut self.store, &created);
                    return Err(reason(&svc.package_name, store_reason(&e), e.to_string()));
                }
            }
        }
        let labels = BTreeMap::from([
            (LABEL_DEPLOYMENT.to_string(), intent.deployment_id.clone()),
            (LABEL_PACKAGE.to_string(), RESERVED_NETWORK_PACKAGE.to_string()),
            (LABEL_NAMESPACE.to_string(), namespace.to_string()),
        ]);
        let key = deployment_package_key(RESERVED_NETWORK_PACKAGE, &intent.deployment_id);
        match hydrate_network_packages(mesh, &mut self.store, &self.config.blueprint_repo, &key, &labels) {
            Ok(refs) => {
                let network = refs
                    .into_iter()
                    .map(|r| {
                        let edge = self
                            .store
                            .repository(&r.repo)
                            .and_then(|repo| repo.owner_edge.clone())
                            .unwrap_or_default();
                        PendingPackage { subject: key.clone(), edge, revision: r }
                    })
                    .collect();
                Ok((created, network))
            }
            Err(e) => {
                rollback(&mut self.store, &created);
                let code = match &e {
                    MeshError::Store(s) => store_reason(s),
                    _ => ReasonCode::Schema,
                };
                Err(reason(&key, code, e.to_string()))
            }
        }
    }

    /// Withdraws an active deployment. Terminal records are returned as-is.
    pub fn terminate(&mut self, deployment_id: &str) -> Result<DeploymentRecord, EngineError> {
        let record = self
            .records
            .get(deployment_id)
            .ok_or_else(|| EngineError::UnknownDeployment(deployment_id.to_string()))?;
        if record.phase.is_terminal() || record.phase == Phase::Terminating {
            return Ok(record.clone());
        }
        let active: Vec<ActiveDeployment<'_>> = self
            .records
            .values()
            .filter(|r| r.phase.is_active() && r.phase != Phase::Terminating)
            .map(|r| ActiveDeployment { intent: &r.intent })
            .collect();
        authorize_termination(deployment_id, &active).map_err(|e| match e {
            AdmissionError::Conflict(ids) => EngineError::Conflict(ids),
            AdmissionError::UnknownDeployment(id) => EngineError::UnknownDeployment(id),
            AdmissionError::Storage(s) => EngineError::Storage(s.to_string()),
        })?;
        let mut record = self.records.remove(deployment_id).expect("record exists");
        let order = crate::planner::DeploymentOrder(record.order.clone());
        let result = withdraw(&mut self.store, &order, &record.packages, &record.network_packages);
        if let Err(e) = result {
            self.records.insert(record.deployment_id.clone(), record);
            return Err(e.into());
        }
        record.set_phase(Phase::Terminating, self.tick);
        self.refresh_record(&mut record);
        self.records.insert(record.deployment_id.clone(), record.clone());
        self.persist()?;
        Ok(record)
    }

    /// Advances every edge by one tick, feeds the monitoring plane and
    /// updates deployment phases.
    pub fn step(&mut self) {
        self.tick += 1;
        self.cluster.advance(&self.store, 1);
        for edge in self.cluster.edges() {
            self.lake.ingest(collect(edge));
        }
        let ids: Vec<String> =
            self.records.iter().filter(|(_, r)| r.phase.is_active()).map(|(id, _)| id.clone()).collect();
        let mut changed = false;
        for id in ids {
            let mut record = self.records.remove(&id).expect("record exists");
            let before = record.clone();
            self.release_deferred(&mut record);
            self.refresh_record(&mut record);
            changed |= record != before;
            self.records.insert(id, record);
        }
        if changed {
            let _ = self.persist();
        }
    }

    pub fn advance(&mut self, ticks: u64) {
        for _ in 0..ticks {
            self.step();
        }
    }

    /// Steps until `done` holds or `limit` ticks have elapsed; returns
    /// whether it held.
    pub fn run_until(&mut self, limit: u64, mut done: impl FnMut(&Engine) -> bool) -> bool {
        for _ in 0..limit {
            if done(self) {
                return true;
            }
            self.step();
        }
        done(self)
    }

    fn workload_state(&self, edge: &str, r: &RevisionRef) -> Option<WorkloadState> {
        self.cluster
            .edge(edge)?
            .workloads()
            .find(|w| w.source() == (r.package.as_str(), r.revision.0))
            .map(|w| w.state)
    }

    fn release_deferred(&mut self, record: &mut DeploymentRecord) {
        if record.phase != Phase::Deploying {
            return;
        }
        let Some(decision) = record.decision.as_mut() else { return };
        if decision.deferred.is_empty() {
            return;
        }
        let running = |svc: &str| {
            record
                .packages
                .iter()
                .find(|p| p.subject == svc)
                .and_then(|p| self.workload_state(&p.edge, &p.revision))
                == Some(WorkloadState::Running)
        };
        let mut release = Vec::new();
        for r in &decision.deferred {
            let Some(p) = record.packages.iter().find(|p| &p.revision == r) else { continue };
            let Some(svc) = record.intent.service(&p.subject) else { continue };
            let ready = svc
                .dependencies
                .iter()
                .filter(|d| record.intent.is_local(d) && record.intent.service(&d.after).is_some())
                .all(|d| running(&d.after));
            if ready {
                release.push(r.clone());
            }
        }
        for r in release {
            match self.store.publish(&r) {
                Ok(_) => {
                    decision.deferred.retain(|d| d != &r);
                    decision.published.push(r);
                }
                Err(e) => {
                    record.error = Some(e.to_string());
                    let order = crate::planner::DeploymentOrder(record.order.clone());
                    let _ = withdraw(&mut self.store, &order, &record.packages, &record.network_packages);
                    record.set_phase(Phase::Failed, self.tick);
                    return;
                }
            }
        }
    }

    fn refresh_record(&self, record: &mut DeploymentRecord) {
        for p in &record.packages {
            let state = self.workload_state(&p.edge, &p.revision);
            let published = self.store.revision(&p.revision).is_some_and(|r| r.state == RevisionState::Published);
            if let Some(status) = record.services.get_mut(&p.subject) {
                status.revision = Some(p.revision.clone());
                status.published = published;
                status.state = state;
            }
        }
        match record.phase {
            Phase::Deploying => {
                let all_running = !record.services.is_empty()
                    && record.services.values().all(|s| s.state == Some(WorkloadState::Running));
                if all_running {
                    record.set_phase(Phase::Running, self.tick);
                }
            }
            Phase::Terminating => {
                let id = record.deployment_id.as_str();
                let lingering = self.cluster.edges().iter().any(|e| {
                    e.workloads().any(|w| w.deployment_id == id) || e.configs().any(|c| c.deployment_id == id)
                });
                let stored = record
                    .packages
                    .iter()
                    .chain(&record.network_packages)
                    .any(|p| self.store.revision(&p.revision).is_some());
                if !lingering && !stored {
                    record.set_phase(Phase::Terminated, self.tick);
                }
            }
            _ => {}
        }
    }

    fn persist(&self) -> Result<(), EngineError> {
        let Some(root) = self.store.root() else { return Ok(()) };
        let registry = Registry { records: self.records.values().cloned().collect() };
        let bytes = serde_json::to_vec_pretty(&registry).expect("registry serializes");
        let path: PathBuf = root.join(REGISTRY_FILE);
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).and_then(|_| fs::rename(&tmp, &path)).map_err(|e| EngineError::Storage(e.to_string()))
    }

    /// Blueprint catalog plus resources committed across the domain. Only
    /// administrators see the per-edge breakdown.
    pub fn catalog(&self, role: Role) -> CatalogView {
        let ledgers = self.ledgers();
        let reserved = ledgers.values().map(|l| l.committed).sum();
        let packages = self
            .store
            .catalog()
            .into_iter()
            .filter(|c| c.repository == self.config.blueprint_repo)
            .collect();
        CatalogView {
            domain: self.config.domain_name.clone(),
            packages,
            reserved,
            edges: (role == Role::Admin).then_some(ledgers),
        }
    }

    /// Evaluates a query expression such as `sum(free_cpu{edge="Edge1"}) by (edge)`.
    /// The range defaults to the latest tick.
    pub fn metrics(
        &self,
        expression: &str,
        from: Option<u64>,
        to: Option<u64>,
        role: Role,
    ) -> Result<Vec<QueryResult>, EngineError> {
        let latest = self.lake.latest_tick().unwrap_or(0);
        let to = to.unwrap_or(latest);
        let from = from.unwrap_or(to);
        let mut query: MetricQuery = parse_expression(expression, from, to)?;
        if role == Role::External {
            query.scope = Scope::External;
        }
        Ok(self.lake.query(&query)?)
    }

    pub fn alerts(&self) -> Vec<Alert> {
        self.lake.alerts(&self.config.alert_rules)
    }

    /// Reconcilers are stale when suspended or when more than two intervals
    /// have passed since their last run.
    pub fn health(&self) -> Health {
        let mut edges = BTreeMap::new();
        for e in self.cluster.edges() {
            let r = e.reconciler();
            let since = e.clock() - r.last_run_tick.unwrap_or(0);
            let ok = !r.suspended && since <= 2 * r.interval;
            edges.insert(e.edge_id.clone(), if ok { "ok" } else { "stale" }.to_string());
        }
        let store_ok = self.store.root().is_none_or(Path::exists);
        let monitoring_ok = self.lake.latest_tick().unwrap_or(0) == self.tick;
        let all_ok = store_ok && monitoring_ok && edges.values().all(|s| s == "ok");
        let word = |ok: bool| if ok { "ok" } else { "degraded" }.to_string();
        Health {
            status: word(all_ok),
            tick: self.tick,
            store: word(store_ok),
            monitoring: word(monitoring_ok),
            edges,
        }
    }

    pub fn resolve(&self, domain: &str) -> Result<String, EngineError> {
        self.config
            .trusted_domains
            .get(domain)
            .cloned()
            .ok_or_else(|| EngineError::UnresolvableDomain(domain.to_string()))
    }
}

fn reason(subject: &str, code: ReasonCode, detail: String) -> AdmissionReason {
    AdmissionReason { subject: subject.to_string(), code, detail }
}

fn store_reason(e: &StoreError) -> ReasonCode {
    match e {
        StoreError::UnresolvedSetter(..) | StoreError::UnknownParameter(..) => ReasonCode::UnresolvedSetter,
        StoreError::Manifest(_) => ReasonCode::Dialect,
        _ => ReasonCode::Schema,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phases_are_monotone() {
        use Phase::*;
        assert!(Accepted.can_transition_to(Deploying));
        assert!(Deploying.can_transition_to(Running));
        assert!(Running.can_transition_to(Terminating));
        assert!(Deploying.can_transition_to(Terminating));
        assert!(Terminating.can_transition_to(Terminated));
        assert!(!Running.can_transition_to(Deploying));
        assert!(!Terminated.can_transition_to(Running));
        assert!(Accepted.can_transition_to(Rejected));
        assert!(Deploying.can_transition_to(Failed));
        assert!(!Running.can_transition_to(Failed));
        assert!(!Rejected.can_transition_to(Deploying));
    }

    #[test]
    fn status_mapping() {
        assert_eq!(EngineError::Duplicate("d".into()).status(), 409);
        assert_eq!(EngineError::UnknownDeployment("d".into()).status(), 404);
        assert_eq!(EngineError::Monitoring(MonitoringError::PolicyViolation("edge".into())).status(), 403);
        assert_eq!(EngineError::Monitoring(MonitoringError::UnknownMetric("x".into())).status(), 400);
        assert_eq!(
            EngineError::Capacity(PlacementError::InsufficientCapacity { service: "a".into(), shortfalls: vec![] })
                .status(),
            507
        );
    }

    #[test]
    fn repo_names() {
        assert_eq!(deployment_repo_name("Edge1"), "edge1-deploy");
    }
}
