//! Admission control: dry-run validation, resource re-verification and
//! all-or-nothing publication of a deployment's packages.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::edge::{DryRunReason, DryRunVerdict, EdgeClusterState};
use crate::intent::{DeploymentIntent, PlacementMap, ResourceRequest};
use crate::planner::DeploymentOrder;
use crate::store::{parse_manifest, serialize_manifest, PackageStore, RevisionRef, RevisionState, StoreError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReasonCode {
    Dialect,
    UnresolvedSetter,
    MissingCapability,
    UnknownKind,
    Schema,
    NotDraft,
    UnknownEdge,
    Shortfall,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AdmissionReason {
    pub subject: String,
    pub code: ReasonCode,
    pub detail: String,
}

impl AdmissionReason {
    fn new(subject: &str, code: ReasonCode, detail: impl Into<String>) -> Self {
        Self { subject: subject.to_string(), code, detail: detail.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Resource {
    Cpu,
    Memory,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shortfall {
    pub edge: String,
    pub resource: Resource,
    /// Milli-cores or bytes.
    pub amount: u64,
}

impl fmt::Display for Shortfall {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.resource {
            Resource::Cpu => write!(f, "Shortfall({}, cpu, {}m)", self.edge, self.amount),
            Resource::Memory => write!(f, "Shortfall({}, memory, {})", self.edge, self.amount),
        }
    }
}

/// A hydrated Draft revision bound for one edge.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PendingPackage {
    /// Service name, or the network package key for mesh objects.
    pub subject: String,
    pub edge: String,
    pub revision: RevisionRef,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Approved,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdmissionDecision {
    pub deployment_id: String,
    pub verdict: Verdict,
    pub reasons: Vec<AdmissionReason>,
    /// Per-edge sum of admitted requests.
    pub resource_plan: BTreeMap<String, ResourceRequest>,
    /// Revisions published by this decision, in publication order.
    pub published: Vec<RevisionRef>,
    /// Revisions approved but held back for readiness sequencing.
    pub deferred: Vec<RevisionRef>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AdmissionError {
    #[error("storage failure during publication (rolled back): {0}")]
    Storage(StoreError),
    #[error("unknown deployment {0}")]
    UnknownDeployment(String),
    #[error("termination conflicts with dependent deployments {0:?}")]
    Conflict(Vec<String>),
}

/// Dialect round trip, unresolved-setter scan and a dry run on the target
/// edge for every package.
pub fn validate_packages(
    store: &PackageStore,
    packages: &[PendingPackage],
    edges: &[&EdgeClusterState],
) -> Vec<AdmissionReason> {
    let mut findings = Vec::new();
    for p in packages {
        let subject = p.subject.as_str();
        let Some(rev) = store.revision(&p.revision) else {
            findings.push(AdmissionReason::new(subject, ReasonCode::Schema, format!("{} does not exist", p.revision)));
            continue;
        };
        if rev.state != RevisionState::Draft {
            findings.push(AdmissionReason::new(subject, ReasonCode::NotDraft, format!("{} is {:?}", p.revision, rev.state)));
        }
        for (i, doc) in rev.manifests.iter().enumerate() {
            let text = serialize_manifest(doc);
            match parse_manifest(&text) {
                Ok(back) if &back == doc => {}
                Ok(_) => findings.push(AdmissionReason::new(subject, ReasonCode::Dialect, format!("manifest {i} does not round-trip"))),
                Err(e) => findings.push(AdmissionReason::new(subject, ReasonCode::Dialect, format!("manifest {i}: {e}"))),
            }
        }
        let setters = rev.setters();
        if let Some(param) = setters.keys().next() {
            findings.push(AdmissionReason::new(subject, ReasonCode::UnresolvedSetter, param.clone()));
        }
        match edges.iter().find(|e| e.edge_id == p.edge) {
            None => findings.push(AdmissionReason::new(subject, ReasonCode::UnknownEdge, p.edge.clone())),
            Some(edge) => match edge.dry_run(rev) {
                DryRunVerdict::Accept => {}
                DryRunVerdict::Reject(reason) => {
                    let code = match &reason {
                        DryRunReason::MissingCapability(_) => ReasonCode::MissingCapability,
                        DryRunReason::UnknownKind(_) => ReasonCode::UnknownKind,
                        DryRunReason::Schema(_) => ReasonCode::Schema,
                    };
                    let detail = match reason {
                        DryRunReason::MissingCapability(c) | DryRunReason::UnknownKind(c) | DryRunReason::Schema(c) => c,
                    };
                    findings.push(AdmissionReason::new(subject, code, detail));
                }
            },
        }
    }
    findings
}

/// Per-edge request totals of a placement.
pub fn resource_plan(plan: &PlacementMap, requirements: &BTreeMap<String, ResourceRequest>) -> BTreeMap<String, ResourceRequest> {
    let mut out: BTreeMap<String, ResourceRequest> = BTreeMap::new();
    for (service, edge) in plan {
        let req = requirements.get(service).copied().unwrap_or_default();
        *out.entry(edge.clone()).or_default() = out.get(edge).copied().unwrap_or_default() + req;
    }
    out
}

/// Re-checks a placement against the live free resources of each edge.
pub fn check_resources(
    plan: &PlacementMap,
    requirements: &BTreeMap<String, ResourceRequest>,
    available: &BTreeMap<String, ResourceRequest>,
) -> Vec<Shortfall> {
    let mut out = Vec::new();
    for (edge, need) in resource_plan(plan, requirements) {
        let free = available.get(&edge).copied().unwrap_or_default();
        if need.cpu_millis > free.cpu_millis {
            out.push(Shortfall { edge: edge.clone(), resource: Resource::Cpu, amount: need.cpu_millis - free.cpu_millis });
        }
        if need.memory_bytes > free.memory_bytes {
            out.push(Shortfall { edge, resource: Resource::Memory, amount: need.memory_bytes - free.memory_bytes });
        }
    }
    out
}

/// Whether dependents are published together with their predecessors or
/// held back until the manager releases them.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum PublicationMode {
    #[default]
    Immediate,
    /// Only these services (plus network packages) are published now.
    Deferred { ready: BTreeSet<String> },
}

pub struct AdmissionInput<'a> {
    pub intent: &'a DeploymentIntent,
    pub order: &'a DeploymentOrder,
    pub plan: &'a PlacementMap,
    pub requirements: &'a BTreeMap<String, ResourceRequest>,
    pub services: &'a [PendingPackage],
    pub network: &'a [PendingPackage],
    pub available: &'a BTreeMap<String, ResourceRequest>,
    pub edges: &'a [&'a EdgeClusterState],
}

fn discard(store: &mut PackageStore, refs: impl IntoIterator<Item = RevisionRef>) {
    for r in refs {
        if store.revision(&r).is_some() {
            let _ = store.delete_revision(&r);
        }
    }
}

/// Approves iff validation and resource checks are clean; then publishes
/// service packages in deployment order followed by network packages.
/// Rejection and storage failures leave no revision of the deployment.
pub fn admit(
    input: AdmissionInput<'_>,
    store: &mut PackageStore,
    mode: &PublicationMode,
) -> Result<AdmissionDecision, AdmissionError> {
    let all: Vec<&PendingPackage> = input.services.iter().chain(input.network).collect();
    let all_refs = || all.iter().map(|p| p.revision.clone()).collect::<Vec<_>>();
    let owned: Vec<PendingPackage> = all.iter().map(|p| (*p).clone()).collect();

    let mut reasons = validate_packages(store, &owned, input.edges);
    for s in check_resources(input.plan, input.requirements, input.available) {
        let detail = s.to_string();
        reasons.push(AdmissionReason::new(&s.edge, ReasonCode::Shortfall, detail));
    }
    let plan = resource_plan(input.plan, input.requirements);
    if !reasons.is_empty() {
        discard(store, all_refs());
        return Ok(AdmissionDecision {
            deployment_id: input.intent.deployment_id.clone(),
            verdict: Verdict::Rejected,
            reasons,
            resource_plan: plan,
            published: Vec::new(),
            deferred: Vec::new(),
        });
    }

    for p in &all {
        if let Err(e) = store.propose(&p.revision) {
            discard(store, all_refs());
            return Err(AdmissionError::Storage(e));
        }
    }

    let mut ordered: Vec<&PendingPackage> = input.services.iter().collect();
    ordered.sort_by_key(|p| (input.order.position(&p.subject).unwrap_or(usize::MAX), p.subject.clone()));
    let mut network: Vec<&PendingPackage> = input.network.iter().collect();
    network.sort_by(|a, b| a.edge.cmp(&b.edge));

    let mut published = Vec::new();
    let mut deferred = Vec::new();
    for p in ordered.into_iter().chain(network) {
        let now = match mode {
            PublicationMode::Immediate => true,
            PublicationMode::Deferred { ready } => {
                ready.contains(&p.subject) || !input.services.iter().any(|s| s.subject == p.subject)
            }
        };
        if !now {
            deferred.push(p.revision.clone());
            continue;
        }
        if let Err(e) = store.publish(&p.revision) {
            discard(store, all_refs());
            return Err(AdmissionError::Storage(e));
        }
        published.push(p.revision.clone());
    }

    Ok(AdmissionDecision {
        deployment_id: input.intent.deployment_id.clone(),
        verdict: Verdict::Approved,
        reasons: Vec::new(),
        resource_plan: plan,
        published,
        deferred,
    })
}

/// A deployment as seen by termination checks.
#[derive(Debug, Clone)]
pub struct ActiveDeployment<'a> {
    pub intent: &'a DeploymentIntent,
}

/// Fails with the ids of active deployments that depend on any service of
/// `deployment_id`.
pub fn authorize_termination(deployment_id: &str, active: &[ActiveDeployment<'_>]) -> Result<(), AdmissionError> {
    let target = active
        .iter()
        .find(|a| a.intent.deployment_id == deployment_id)
        .ok_or_else(|| AdmissionError::UnknownDeployment(deployment_id.to_string()))?;
    let provided = target.intent.service_names();
    let mut dependents: Vec<String> = active
        .iter()
        .filter(|a| a.intent.deployment_id != deployment_id && a.intent.domain_name == target.intent.domain_name)
        .filter(|a| {
            let own = a.intent.service_names();
            a.intent.services.iter().flat_map(|s| &s.dependencies).any(|d| {
                a.intent.is_local(d) && !own.contains(d.after.as_str()) && provided.contains(d.after.as_str())
            })
        })
        .map(|a| a.intent.deployment_id.clone())
        .collect();
    dependents.sort();
    if dependents.is_empty() {
        Ok(())
    } else {
        Err(AdmissionError::Conflict(dependents))
    }
}

/// Deletes network packages first, then service packages in reverse
/// deployment order. Missing revisions are skipped.
pub fn withdraw(
    store: &mut PackageStore,
    order: &DeploymentOrder,
    services: &[PendingPackage],
    network: &[PendingPackage],
) -> Result<Vec<RevisionRef>, StoreError> {
    let mut ordered: Vec<&PendingPackage> = services.iter().collect();
    ordered.sort_by_key(|p| std::cmp::Reverse(order.position(&p.subject).unwrap_or(0)));
    let mut removed = Vec::new();
    for p in network.iter().chain(ordered) {
        if store.revision(&p.revision).is_some() {
            store.delete_revision(&p.revision)?;
            removed.push(p.revision.clone());
        }
    }
    Ok(removed)
}
