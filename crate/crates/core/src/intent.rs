//! Deployment intents, package descriptors and network intents.
//!
//! All documents are strict JSON: unknown fields are rejected and every
//! parsed value is validated before it is handed out.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crate::quantity::{CpuQuantity, MemoryQuantity, MemoryUnit, QuantityError};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IntentError {
    #[error("syntax error: {0}")]
    Syntax(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("semantic error: {0}")]
    Semantic(String),
    #[error("quantity error: {0}")]
    Quantity(#[from] QuantityError),
    #[error("service {0} has no endpoint metadata in the catalog")]
    MissingEndpointMetadata(String),
    #[error("service {0} is not placed on any edge")]
    UnplacedService(String),
}

impl IntentError {
    fn from_json(err: serde_json::Error) -> Self {
        use serde_json::error::Category;
        match err.classify() {
            Category::Syntax | Category::Eof | Category::Io => IntentError::Syntax(err.to_string()),
            Category::Data => {
                // quantity failures surface through serde as custom data errors
                let msg = err.to_string();
                match msg.strip_prefix(crate::quantity::QUANTITY_ERROR_TAG) {
                    Some(rest) => IntentError::Quantity(QuantityError(rest.to_string())),
                    None => IntentError::Schema(msg),
                }
            }
        }
    }
}

/// Identifiers double as store path components: `[A-Za-z0-9][A-Za-z0-9._-]*`.
pub fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphanumeric() => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-'))
}

/// Parses a `v<positive integer>` revision label.
pub fn parse_revision_label(label: &str) -> Option<u32> {
    let digits = label.strip_prefix('v')?;
    if digits.is_empty() || digits.starts_with('0') || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok().filter(|n| *n > 0)
}

fn default_qos() -> String {
    "default".to_string()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeploymentIntent {
    pub domain_name: String,
    pub deployment_id: String,
    pub timestamp: String,
    pub services: Vec<ServiceSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceSpec {
    pub package_name: String,
    pub version: String,
    #[serde(default = "default_qos")]
    pub qos_level: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub dependencies: Vec<Dependency>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dependency {
    pub after: String,
    pub domain: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fqdn: Option<String>,
}

impl DeploymentIntent {
    pub fn service(&self, name: &str) -> Option<&ServiceSpec> {
        self.services.iter().find(|s| s.package_name == name)
    }

    pub fn service_names(&self) -> BTreeSet<&str> {
        self.services.iter().map(|s| s.package_name.as_str()).collect()
    }

    pub fn is_local(&self, dep: &Dependency) -> bool {
        dep.domain == self.domain_name
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("intent serializes")
    }

    /// Checks every invariant. `shared` names local services owned by other
    /// active deployments that a dependency may point at.
    pub fn validate_with(&self, shared: &BTreeSet<String>) -> Result<(), IntentError> {
        if !is_identifier(&self.domain_name) {
            return Err(IntentError::Schema(format!("invalid domain_name {:?}", self.domain_name)));
        }
        if !is_identifier(&self.deployment_id) {
            return Err(IntentError::Schema(format!("invalid deployment_id {:?}", self.deployment_id)));
        }
        validate_timestamp(&self.timestamp)?;
        if self.services.is_empty() {
            return Err(IntentError::Semantic("intent declares no services".into()));
        }
        let mut names = BTreeSet::new();
        for svc in &self.services {
            if !is_identifier(&svc.package_name) {
                return Err(IntentError::Schema(format!("invalid package_name {:?}", svc.package_name)));
            }
            if svc.package_name == RESERVED_NETWORK_PACKAGE {
                return Err(IntentError::Semantic(format!(
                    "package name {RESERVED_NETWORK_PACKAGE:?} is reserved"
                )));
            }
            if !names.insert(svc.package_name.as_str()) {
                return Err(IntentError::Semantic(format!("duplicate package_name {}", svc.package_name)));
            }
            if parse_revision_label(&svc.version).is_none() {
                return Err(IntentError::Schema(format!(
                    "{}: version {:?} is not v<positive integer>",
                    svc.package_name, svc.version
                )));
            }
            if svc.qos_level.trim().is_empty() {
                return Err(IntentError::Schema(format!("{}: empty qos_level", svc.package_name)));
            }
        }
        for svc in &self.services {
            for dep in &svc.dependencies {
                if dep.after.is_empty() || !is_identifier(&dep.domain) {
                    return Err(IntentError::Schema(format!("{}: malformed dependency", svc.package_name)));
                }
                if self.is_local(dep) {
                    if dep.after == svc.package_name {
                        return Err(IntentError::Semantic(format!(
                            "{} depends on itself",
                            svc.package_name
                        )));
                    }
                    if !names.contains(dep.after.as_str()) && !shared.contains(&dep.after) {
                        return Err(IntentError::Semantic(format!(
                            "{}: dependency after {:?} names no service",
                            svc.package_name, dep.after
                        )));
                    }
                } else if dep.fqdn.as_deref().is_none_or(|f| f.trim().is_empty()) {
                    return Err(IntentError::Semantic(format!(
                        "{}: external dependency {}/{} needs an fqdn",
                        svc.package_name, dep.domain, dep.after
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Package name used for the per-deployment network configuration bundle.
pub const RESERVED_NETWORK_PACKAGE: &str = "mesh";

fn validate_timestamp(ts: &str) -> Result<(), IntentError> {
    let ok = chrono::DateTime::parse_from_rfc3339(ts).is_ok()
        || chrono::NaiveDateTime::parse_from_str(ts, "%Y-%m-%dT%H:%M:%S%.f").is_ok();
    if ok {
        Ok(())
    } else {
        Err(IntentError::Schema(format!("timestamp {ts:?} is not ISO-8601")))
    }
}

pub fn parse_deployment_intent(document: &str) -> Result<DeploymentIntent, IntentError> {
    parse_deployment_intent_with(document, &BTreeSet::new())
}

/// Like [`parse_deployment_intent`], but local dependencies may also name
/// services of other active deployments in `shared`.
pub fn parse_deployment_intent_with(
    document: &str,
    shared: &BTreeSet<String>,
) -> Result<DeploymentIntent, IntentError> {
    let intent: DeploymentIntent = serde_json::from_str(document).map_err(IntentError::from_json)?;
    intent.validate_with(shared)?;
    Ok(intent)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TerminationIntent {
    pub deployment_id: String,
    pub domain_name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PackageDescriptor {
    pub name: String,
    pub package_requirements: Vec<PackageRequirement>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PackageRequirement {
    pub qos: String,
    pub revision: String,
    pub package_resources: PackageResources,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PackageResources {
    pub container: String,
    pub cpu: CpuQuantity,
    pub memory: MemoryQuantity,
}

/// Normalized resource request: milli-cores and bytes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ResourceRequest {
    pub cpu_millis: u64,
    pub memory_bytes: u64,
}

impl ResourceRequest {
    pub const ZERO: ResourceRequest = ResourceRequest { cpu_millis: 0, memory_bytes: 0 };

    pub fn new(cpu_millis: u64, memory_bytes: u64) -> Self {
        Self { cpu_millis, memory_bytes }
    }

    pub fn saturating_add(self, other: Self) -> Self {
        Self {
            cpu_millis: self.cpu_millis.saturating_add(other.cpu_millis),
            memory_bytes: self.memory_bytes.saturating_add(other.memory_bytes),
        }
    }

    pub fn saturating_sub(self, other: Self) -> Self {
        Self {
            cpu_millis: self.cpu_millis.saturating_sub(other.cpu_millis),
            memory_bytes: self.memory_bytes.saturating_sub(other.memory_bytes),
        }
    }

    pub fn fits_within(&self, free: &ResourceRequest) -> bool {
        self.cpu_millis <= free.cpu_millis && self.memory_bytes <= free.memory_bytes
    }
}

impl std::ops::Add for ResourceRequest {
    type Output = ResourceRequest;
    fn add(self, rhs: Self) -> Self {
        self.saturating_add(rhs)
    }
}

impl std::iter::Sum for ResourceRequest {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(ResourceRequest::ZERO, |a, b| a + b)
    }
}

impl PackageResources {
    pub fn request(&self) -> ResourceRequest {
        ResourceRequest {
            cpu_millis: self.cpu.millis(),
            memory_bytes: self.memory.bytes(),
        }
    }
}

impl PackageDescriptor {
    /// Entry for a blueprint revision, preferring a matching QoS label.
    pub fn requirement_for(&self, revision: &str, qos: Option<&str>) -> Option<&PackageRequirement> {
        let mut candidates = self.package_requirements.iter().filter(|r| r.revision == revision);
        match qos {
            Some(q) => {
                let all: Vec<_> = candidates.collect();
                all.iter().find(|r| r.qos == q).or_else(|| all.first()).copied()
            }
            None => candidates.next(),
        }
    }

    fn validate(&self) -> Result<(), IntentError> {
        if !is_identifier(&self.name) {
            return Err(IntentError::Schema(format!("invalid package name {:?}", self.name)));
        }
        if self.package_requirements.is_empty() {
            return Err(IntentError::Schema("package_requirements is empty".into()));
        }
        for req in &self.package_requirements {
            if parse_revision_label(&req.revision).is_none() {
                return Err(IntentError::Schema(format!("revision {:?} is not v<n>", req.revision)));
            }
            if req.qos.trim().is_empty() || req.package_resources.container.trim().is_empty() {
                return Err(IntentError::Schema("qos and container must be non-empty".into()));
            }
        }
        Ok(())
    }
}

pub fn parse_package_descriptor(document: &str) -> Result<PackageDescriptor, IntentError> {
    let descriptor: PackageDescriptor = serde_json::from_str(document).map_err(IntentError::from_json)?;
    descriptor.validate()?;
    Ok(descriptor)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Protocol {
    #[serde(rename = "HTTP")]
    Http,
    #[serde(rename = "TCP")]
    Tcp,
    #[serde(rename = "UDP")]
    Udp,
    #[serde(rename = "GRPC")]
    Grpc,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::Http => "HTTP",
            Protocol::Tcp => "TCP",
            Protocol::Udp => "UDP",
            Protocol::Grpc => "GRPC",
        })
    }
}

impl std::str::FromStr for Protocol {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "HTTP" => Ok(Protocol::Http),
            "TCP" => Ok(Protocol::Tcp),
            "UDP" => Ok(Protocol::Udp),
            "GRPC" => Ok(Protocol::Grpc),
            other => Err(format!("unknown protocol {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Endpoint {
    pub host: String,
    pub port: u16,
    pub protocol: Protocol,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LinkType {
    #[serde(rename = "intra-edge")]
    IntraEdge,
    #[serde(rename = "inter-edge")]
    InterEdge,
    #[serde(rename = "cross-domain")]
    CrossDomain,
}

impl fmt::Display for LinkType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LinkType::IntraEdge => "intra-edge",
            LinkType::InterEdge => "inter-edge",
            LinkType::CrossDomain => "cross-domain",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Resolution {
    pub domain: String,
    pub fqdn: String,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Link {
    pub name: String,
    #[serde(rename = "type")]
    pub kind: LinkType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolution: Option<Resolution>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkService {
    pub name: String,
    pub endpoints: Vec<Endpoint>,
    #[serde(default)]
    pub links_to: Vec<Link>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkIntent {
    pub deployment_id: String,
    pub services: Vec<NetworkService>,
}

impl NetworkIntent {
    pub fn service(&self, name: &str) -> Option<&NetworkService> {
        self.services.iter().find(|s| s.name == name)
    }

    /// Every directed link as `(from, link)`.
    pub fn links(&self) -> impl Iterator<Item = (&str, &Link)> {
        self.services
            .iter()
            .flat_map(|s| s.links_to.iter().map(move |l| (s.name.as_str(), l)))
    }

    pub fn validate(&self) -> Result<(), IntentError> {
        let names: BTreeSet<&str> = self.services.iter().map(|s| s.name.as_str()).collect();
        if names.len() != self.services.len() {
            return Err(IntentError::Semantic("duplicate service in network intent".into()));
        }
        for svc in &self.services {
            if svc.endpoints.iter().any(|e| e.port == 0 || e.host.is_empty()) {
                return Err(IntentError::Schema(format!("{}: invalid endpoint", svc.name)));
            }
            for link in &svc.links_to {
                let cross = link.kind == LinkType::CrossDomain;
                if cross != link.resolution.is_some() {
                    return Err(IntentError::Semantic(format!(
                        "{} -> {}: resolution must be present exactly for cross-domain links",
                        svc.name, link.name
                    )));
                }
                if cross {
                    continue;
                }
                if !names.contains(link.name.as_str()) {
                    return Err(IntentError::Semantic(format!("{} -> {}: dangling link", svc.name, link.name)));
                }
                let reverse = self
                    .service(&link.name)
                    .is_some_and(|peer| peer.links_to.iter().any(|l| l.name == svc.name && l.kind == link.kind));
                if !reverse {
                    return Err(IntentError::Semantic(format!(
                        "{} -> {}: link is not symmetric",
                        svc.name, link.name
                    )));
                }
            }
        }
        Ok(())
    }
}

pub fn parse_network_intent(document: &str) -> Result<NetworkIntent, IntentError> {
    let net: NetworkIntent = serde_json::from_str(document).map_err(IntentError::from_json)?;
    net.validate()?;
    Ok(net)
}

/// Service name to edge cluster id.
pub type PlacementMap = BTreeMap<String, String>;

/// Package name to the endpoints its blueprint exposes.
pub type EndpointCatalog = BTreeMap<String, Vec<Endpoint>>;

/// Classifies a local-to-local link by co-location.
pub fn classify_local(from_edge: &str, to_edge: &str) -> LinkType {
    if from_edge == to_edge {
        LinkType::IntraEdge
    } else {
        LinkType::InterEdge
    }
}

/// Builds the network intent for a placed deployment. Dependencies on
/// services of other deployments in the same domain carry no link here.
pub fn derive_network_intent(
    intent: &DeploymentIntent,
    placement: &PlacementMap,
    catalog: &EndpointCatalog,
) -> Result<NetworkIntent, IntentError> {
    let names = intent.service_names();
    let edge_of = |svc: &str| {
        placement
            .get(svc)
            .map(String::as_str)
            .ok_or_else(|| IntentError::UnplacedService(svc.to_string()))
    };

    let mut links: BTreeMap<&str, BTreeMap<String, Link>> = BTreeMap::new();
    for svc in &intent.services {
        edge_of(&svc.package_name)?;
        links.entry(svc.package_name.as_str()).or_default();
    }
    for svc in &intent.services {
        let here = svc.package_name.as_str();
        for dep in &svc.dependencies {
            if intent.is_local(dep) {
                if !names.contains(dep.after.as_str()) {
                    continue;
                }
                let kind = classify_local(edge_of(here)?, edge_of(&dep.after)?);
                let there = dep.after.as_str();
                links.get_mut(here).unwrap().insert(
                    there.to_string(),
                    Link { name: there.to_string(), kind, resolution: None },
                );
                links.get_mut(there).unwrap().insert(
                    here.to_string(),
                    Link { name: here.to_string(), kind, resolution: None },
                );
            } else {
                let resolution = Resolution {
                    domain: dep.domain.clone(),
                    fqdn: dep.fqdn.clone().unwrap_or_default(),
                };
                links.get_mut(here).unwrap().insert(
                    dep.after.clone(),
                    Link { name: dep.after.clone(), kind: LinkType::CrossDomain, resolution: Some(resolution) },
                );
            }
        }
    }

    let mut services = Vec::with_capacity(intent.services.len());
    for svc in &intent.services {
        let endpoints = catalog
            .get(&svc.package_name)
            .filter(|e| !e.is_empty())
            .cloned()
            .ok_or_else(|| IntentError::MissingEndpointMetadata(svc.package_name.clone()))?;
        let links_to = links.remove(svc.package_name.as_str()).unwrap_or_default().into_values().collect();
        services.push(NetworkService { name: svc.package_name.clone(), endpoints, links_to });
    }
    Ok(NetworkIntent { deployment_id: intent.deployment_id.clone(), services })
}
