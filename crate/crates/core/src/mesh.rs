//! Mesh planning: turns a network intent plus placement into per-edge route,
//! remote-entry and gateway objects, and checks that every link is served.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::intent::{LinkType, NetworkIntent, PlacementMap, Protocol};
use crate::store::{BlueprintRef, ManifestDocument, PackageStore, RepositoryKind, RevisionRef, ScalarValue, StoreError};

pub const DEFAULT_GATEWAY_PORT: u16 = 15443;

pub const ROUTE_BLUEPRINT: &str = "mesh-route";
pub const REMOTE_ENTRY_BLUEPRINT: &str = "mesh-remote-entry";
pub const GATEWAY_BLUEPRINT: &str = "mesh-gateway";

/// Domain name to the fqdn of its entry point.
pub type TrustedDomainTable = BTreeMap<String, String>;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MeshError {
    #[error("unresolvable domain {0}")]
    UnresolvableDomain(String),
    #[error("dangling link {from} -> {to}")]
    DanglingLink { from: String, to: String },
    #[error("network blueprint {0} is not published")]
    MissingBlueprint(String),
    #[error("edge {0} has no deployment repository")]
    NoDeploymentRepository(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Hint wins; otherwise the trusted table.
pub fn resolve_domain(name: &str, trusted: &TrustedDomainTable, hint: Option<&str>) -> Result<String, MeshError> {
    match hint.map(str::trim).filter(|h| !h.is_empty()) {
        Some(h) => Ok(h.to_string()),
        None => trusted.get(name).cloned().ok_or_else(|| MeshError::UnresolvableDomain(name.to_string())),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RoutePolicy {
    #[default]
    RoundRobin,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Route {
    pub from: String,
    pub to: String,
    pub policy: RoutePolicy,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RemoteTarget {
    Edge(String),
    Domain(String),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RemoteEntry {
    pub service: String,
    pub namespace: String,
    pub remote: RemoteTarget,
    pub address: String,
    pub port: u16,
    pub protocol: Protocol,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ExposedService {
    pub service: String,
    pub port: u16,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GatewayExposure {
    pub external_address: String,
    pub port: u16,
    pub exposed: Vec<ExposedService>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeshConfig {
    pub edge_id: String,
    pub namespace: String,
    pub local_services: Vec<String>,
    pub routes: Vec<Route>,
    pub remote_entries: Vec<RemoteEntry>,
    pub gateway: Option<GatewayExposure>,
}

impl MeshConfig {
    pub fn is_empty(&self) -> bool {
        self.routes.is_empty() && self.remote_entries.is_empty() && self.gateway.is_none()
    }

    pub fn object_count(&self) -> usize {
        self.routes.len() + self.remote_entries.len() + self.gateway.as_ref().map_or(0, |g| g.exposed.len())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MeshSettings {
    pub namespace: String,
    /// Address at which this domain's east-west gateway is reachable.
    pub gateway_address: String,
    pub gateway_base_port: u16,
    /// Port of the gateway in remote domains.
    pub remote_gateway_port: u16,
}

impl MeshSettings {
    pub fn new(namespace: &str, gateway_address: &str) -> Self {
        Self {
            namespace: namespace.to_string(),
            gateway_address: gateway_address.to_string(),
            gateway_base_port: DEFAULT_GATEWAY_PORT,
            remote_gateway_port: DEFAULT_GATEWAY_PORT,
        }
    }
}

/// Cluster-local DNS name of a service on a peer edge; the namespace is the
/// same on every edge.
pub fn peer_address(host: &str, namespace: &str, edge: &str) -> String {
    format!("{host}.{namespace}.svc.{}.local", edge.to_ascii_lowercase())
}

pub fn plan_mesh(
    net: &NetworkIntent,
    placement: &PlacementMap,
    trusted: &TrustedDomainTable,
    settings: &MeshSettings,
) -> Result<BTreeMap<String, MeshConfig>, MeshError> {
    let mut configs: BTreeMap<String, MeshConfig> = BTreeMap::new();
    let edge_of = |svc: &str| placement.get(svc).cloned();
    for svc in &net.services {
        let edge = edge_of(&svc.name)
            .ok_or_else(|| MeshError::DanglingLink { from: svc.name.clone(), to: svc.name.clone() })?;
        configs
            .entry(edge.clone())
            .or_insert_with(|| MeshConfig {
                edge_id: edge.clone(),
                namespace: settings.namespace.clone(),
                local_services: Vec::new(),
                routes: Vec::new(),
                remote_entries: Vec::new(),
                gateway: None,
            })
            .local_services
            .push(svc.name.clone());
    }

    let mut routes: BTreeMap<String, BTreeSet<Route>> = BTreeMap::new();
    let mut entries: BTreeMap<String, BTreeSet<RemoteEntry>> = BTreeMap::new();
    let mut exposed: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();

    for (from, link) in net.links() {
        let here = edge_of(from).expect("placed above");
        let dangling = || MeshError::DanglingLink { from: from.to_string(), to: link.name.clone() };
        match link.kind {
            LinkType::IntraEdge | LinkType::InterEdge => {
                let peer = net.service(&link.name).ok_or_else(dangling)?;
                let there = edge_of(&peer.name).ok_or_else(dangling)?;
                let expected = if here == there { LinkType::IntraEdge } else { LinkType::InterEdge };
                if expected != link.kind {
                    return Err(dangling());
                }
                routes.entry(here.clone()).or_default().insert(Route {
                    from: from.to_string(),
                    to: peer.name.clone(),
                    policy: RoutePolicy::RoundRobin,
                });
                if link.kind == LinkType::InterEdge {
                    let set = entries.entry(here.clone()).or_default();
                    for ep in &peer.endpoints {
                        set.insert(RemoteEntry {
                            service: peer.name.clone(),
                            namespace: settings.namespace.clone(),
                            remote: RemoteTarget::Edge(there.clone()),
                            address: peer_address(&ep.host, &settings.namespace, &there),
                            port: ep.port,
                            protocol: ep.protocol,
                        });
                    }
                }
            }
            LinkType::CrossDomain => {
                let resolution = link.resolution.as_ref().ok_or_else(dangling)?;
                let fqdn = resolve_domain(&resolution.domain, trusted, Some(&resolution.fqdn))?;
                entries.entry(here.clone()).or_default().insert(RemoteEntry {
                    service: link.name.clone(),
                    namespace: settings.namespace.clone(),
                    remote: RemoteTarget::Domain(resolution.domain.clone()),
                    address: fqdn,
                    port: settings.remote_gateway_port,
                    protocol: Protocol::Tcp,
                });
                exposed.entry(here.clone()).or_default().insert(from.to_string());
            }
        }
    }

    for (edge, config) in configs.iter_mut() {
        config.local_services.sort();
        config.routes = routes.remove(edge).unwrap_or_default().into_iter().collect();
        config.remote_entries = entries.remove(edge).unwrap_or_default().into_iter().collect();
        config.gateway = exposed.remove(edge).map(|services| GatewayExposure {
            external_address: settings.gateway_address.clone(),
            port: settings.gateway_base_port,
            exposed: services
                .into_iter()
                .enumerate()
                .map(|(i, service)| ExposedService { service, port: settings.gateway_base_port + i as u16 })
                .collect(),
        });
    }
    Ok(configs)
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Unreachable {
    pub from: String,
    pub to: String,
    pub kind: LinkType,
}

/// Walks every link of `net` through the planned objects.
pub fn check_reachability(
    configs: &BTreeMap<String, MeshConfig>,
    net: &NetworkIntent,
    placement: &PlacementMap,
) -> Vec<Unreachable> {
    let mut out = Vec::new();
    for (from, link) in net.links() {
        let here = placement.get(from).and_then(|e| configs.get(e));
        let has_route = |cfg: &MeshConfig| cfg.routes.iter().any(|r| r.from == from && r.to == link.name);
        let ok = match (link.kind, here) {
            (_, None) => false,
            (LinkType::IntraEdge, Some(cfg)) => has_route(cfg) && cfg.local_services.contains(&link.name),
            (LinkType::InterEdge, Some(cfg)) => {
                let peer_edge = placement.get(&link.name);
                let peer_hosted = peer_edge
                    .and_then(|e| configs.get(e))
                    .is_some_and(|p| p.local_services.contains(&link.name) && p.namespace == cfg.namespace);
                let endpoints = net.service(&link.name).map(|s| s.endpoints.as_slice()).unwrap_or_default();
                let all_entries = !endpoints.is_empty()
                    && endpoints.iter().all(|ep| {
                        cfg.remote_entries.iter().any(|e| {
                            e.service == link.name
                                && Some(&e.remote) == peer_edge.map(|p| RemoteTarget::Edge(p.clone())).as_ref()
                                && e.namespace == cfg.namespace
                                && e.port == ep.port
                                && e.protocol == ep.protocol
                        })
                    });
                has_route(cfg) && peer_hosted && all_entries
            }
            (LinkType::CrossDomain, Some(cfg)) => {
                let domain = link.resolution.as_ref().map(|r| RemoteTarget::Domain(r.domain.clone()));
                let entry = cfg.remote_entries.iter().any(|e| e.service == link.name && Some(&e.remote) == domain.as_ref());
                let gateway = cfg.gateway.as_ref().is_some_and(|g| g.exposed.iter().any(|x| x.service == from));
                entry && gateway
            }
        };
        if !ok {
            out.push(Unreachable { from: from.to_string(), to: link.name.clone(), kind: link.kind });
        }
    }
    out.sort();
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProxyInjection {
    pub workload: String,
    pub enabled: bool,
}

/// Sidecar injection for each service: on iff it takes part in a link.
pub fn proxy_injections(net: &NetworkIntent) -> Vec<ProxyInjection> {
    let mut linked: BTreeSet<&str> = BTreeSet::new();
    for (from, link) in net.links() {
        linked.insert(from);
        linked.insert(&link.name);
    }
    let mut out: Vec<ProxyInjection> = net
        .services
        .iter()
        .map(|s| ProxyInjection { workload: s.name.clone(), enabled: linked.contains(s.name.as_str()) })
        .collect();
    out.sort_by(|a, b| a.workload.cmp(&b.workload));
    out
}

fn object_name(parts: &[&str]) -> String {
    parts
        .iter()
        .map(|p| p.to_ascii_lowercase().replace(|c: char| !c.is_ascii_alphanumeric() && c != '-', "-"))
        .collect::<Vec<_>>()
        .join("-")
}

fn str_bindings(pairs: &[(&str, String)]) -> BTreeMap<String, ScalarValue> {
    pairs.iter().map(|(k, v)| (k.to_string(), ScalarValue::Str(v.clone()))).collect()
}

fn render_one(
    store: &PackageStore,
    blueprint_repo: &str,
    package: &str,
    bindings: BTreeMap<String, ScalarValue>,
) -> Result<Vec<ManifestDocument>, MeshError> {
    let latest = store
        .repository(blueprint_repo)
        .filter(|r| r.kind == RepositoryKind::Blueprint)
        .and_then(|r| r.latest_published(package))
        .ok_or_else(|| MeshError::MissingBlueprint(package.to_string()))?;
    let bp = BlueprintRef { repo: blueprint_repo.to_string(), package: package.to_string(), revision: latest.revision };
    Ok(store.render(&bp, &BTreeMap::new(), &bindings)?)
}

/// Renders the manifests of one edge's mesh objects from the network
/// blueprints, without writing anything.
pub fn render_mesh_config(
    config: &MeshConfig,
    store: &PackageStore,
    blueprint_repo: &str,
) -> Result<Vec<ManifestDocument>, MeshError> {
    let ns = config.namespace.clone();
    let mut docs = Vec::new();
    for r in &config.routes {
        docs.extend(render_one(
            store,
            blueprint_repo,
            ROUTE_BLUEPRINT,
            str_bindings(&[
                ("name", object_name(&["route", &r.from, &r.to])),
                ("namespace", ns.clone()),
                ("from", r.from.clone()),
                ("to", r.to.clone()),
                ("policy", "round-robin".to_string()),
            ]),
        )?);
    }
    for e in &config.remote_entries {
        let (remote_kind, remote) = match &e.remote {
            RemoteTarget::Edge(x) => ("edge", x.clone()),
            RemoteTarget::Domain(x) => ("domain", x.clone()),
        };
        let mut bindings = str_bindings(&[
            ("name", object_name(&["remote", &e.service, &remote, &e.port.to_string()])),
            ("namespace", ns.clone()),
            ("service", e.service.clone()),
            ("remote-kind", remote_kind.to_string()),
            ("remote", remote),
            ("address", e.address.clone()),
            ("protocol", e.protocol.to_string()),
        ]);
        bindings.insert("port".into(), ScalarValue::Int(e.port.into()));
        docs.extend(render_one(store, blueprint_repo, REMOTE_ENTRY_BLUEPRINT, bindings)?);
    }
    if let Some(g) = &config.gateway {
        for x in &g.exposed {
            let mut bindings = str_bindings(&[
                ("name", object_name(&["gateway", &x.service])),
                ("namespace", ns.clone()),
                ("service", x.service.clone()),
                ("address", g.external_address.clone()),
            ]);
            bindings.insert("port".into(), ScalarValue::Int(x.port.into()));
            docs.extend(render_one(store, blueprint_repo, GATEWAY_BLUEPRINT, bindings)?);
        }
    }
    Ok(docs)
}

/// One Draft network package per edge with mesh objects, stored in that
/// edge's deployment repository under `package_key`.
pub fn hydrate_network_packages(
    configs: &BTreeMap<String, MeshConfig>,
    store: &mut PackageStore,
    blueprint_repo: &str,
    package_key: &str,
    labels: &BTreeMap<String, String>,
) -> Result<Vec<RevisionRef>, MeshError> {
    let mut rendered = Vec::new();
    for (edge, config) in configs.iter().filter(|(_, c)| !c.is_empty()) {
        let repo = store
            .deployment_repo_for(edge)
            .ok_or_else(|| MeshError::NoDeploymentRepository(edge.clone()))?
            .id
            .clone();
        rendered.push((repo, render_mesh_config(config, store, blueprint_repo)?));
    }
    let mut out = Vec::with_capacity(rendered.len());
    for (repo, docs) in rendered {
        match store.store_rendered(&repo, package_key, docs, labels.clone()) {
            Ok(r) => out.push(r),
            Err(e) => {
                for r in &out {
                    let _ = store.delete_revision(r);
                }
                return Err(e.into());
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::intent::{parse_network_intent, Endpoint, Link, NetworkService, Resolution};

    const LISTING3: &str = include_str!("../../../fixtures/intents/listing3.json");

    fn two_edge_placement() -> PlacementMap {
        [("CNF-1", "Edge1"), ("CNF-2", "Edge1"), ("CNF-4", "Edge2")]
            .iter()
            .map(|(s, e)| (s.to_string(), e.to_string()))
            .collect()
    }

    fn settings() -> MeshSettings {
        MeshSettings::new("camino-338d10a2-2669-46e1", "xxx.xxx.xxx.xxx")
    }

    #[test]
    fn resolve_domain_rules() {
        let empty = TrustedDomainTable::new();
        assert_eq!(resolve_domain("Domain-Y", &empty, Some("yyy.yyy.yyy.yyy")).unwrap(), "yyy.yyy.yyy.yyy");
        let table = TrustedDomainTable::from([("Domain-Y".to_string(), "y.example".to_string())]);
        assert_eq!(resolve_domain("Domain-Y", &table, None).unwrap(), "y.example");
        assert_eq!(
            resolve_domain("Domain-Z", &empty, None).unwrap_err(),
            MeshError::UnresolvableDomain("Domain-Z".into())
        );
    }

    #[test]
    fn two_edge_plan_with_remote_domain() {
        let net = parse_network_intent(LISTING3).unwrap();
        let plan = plan_mesh(&net, &two_edge_placement(), &TrustedDomainTable::new(), &settings()).unwrap();
        assert_eq!(plan.keys().collect::<Vec<_>>(), vec!["Edge1", "Edge2"]);
        let e1 = &plan["Edge1"];
        let route_pairs: Vec<(&str, &str)> = e1.routes.iter().map(|r| (r.from.as_str(), r.to.as_str())).collect();
        assert_eq!(route_pairs, vec![("CNF-1", "CNF-2"), ("CNF-2", "CNF-1"), ("CNF-2", "CNF-4")]);
        let remote: Vec<(&str, &RemoteTarget, &str)> =
            e1.remote_entries.iter().map(|e| (e.service.as_str(), &e.remote, e.address.as_str())).collect();
        assert_eq!(
            remote,
            vec![
                ("CNF-3", &RemoteTarget::Domain("Domain-Y".into()), "yyy.yyy.yyy.yyy"),
                ("CNF-4", &RemoteTarget::Edge("Edge2".into()), "svc4.camino-338d10a2-2669-46e1.svc.edge2.local"),
            ]
        );
        let gw = e1.gateway.as_ref().unwrap();
        assert_eq!(gw.exposed, vec![ExposedService { service: "CNF-2".into(), port: DEFAULT_GATEWAY_PORT }]);

        let e2 = &plan["Edge2"];
        assert_eq!(e2.routes, vec![Route { from: "CNF-4".into(), to: "CNF-2".into(), policy: RoutePolicy::RoundRobin }]);
        assert_eq!(e2.remote_entries.len(), 1);
        assert_eq!(e2.remote_entries[0].remote, RemoteTarget::Edge("Edge1".into()));
        assert_eq!(e2.remote_entries[0].namespace, e1.remote_entries[1].namespace);
        assert!(e2.gateway.is_none());

        assert!(check_reachability(&plan, &net, &two_edge_placement()).is_empty());
    }

    #[test]
    fn removing_a_remote_entry_is_detected() {
        let net = parse_network_intent(LISTING3).unwrap();
        let mut plan = plan_mesh(&net, &two_edge_placement(), &TrustedDomainTable::new(), &settings()).unwrap();
        plan.get_mut("Edge2").unwrap().remote_entries.clear();
        assert_eq!(
            check_reachability(&plan, &net, &two_edge_placement()),
            vec![Unreachable { from: "CNF-4".into(), to: "CNF-2".into(), kind: LinkType::InterEdge }]
        );
    }

    fn single_edge_intent() -> NetworkIntent {
        let ep = |h: &str| vec![Endpoint { host: h.into(), port: 80, protocol: Protocol::Http }];
        NetworkIntent {
            deployment_id: "d".into(),
            services: vec![
                NetworkService {
                    name: "A".into(),
                    endpoints: ep("a"),
                    links_to: vec![Link { name: "B".into(), kind: LinkType::IntraEdge, resolution: None }],
                },
                NetworkService { name: "B".into(), endpoints: ep("b"), links_to: vec![] },
            ],
        }
    }

    #[test]
    fn single_intra_link() {
        let net = single_edge_intent();
        let placement = PlacementMap::from([("A".into(), "E".into()), ("B".into(), "E".into())]);
        let plan = plan_mesh(&net, &placement, &TrustedDomainTable::new(), &settings()).unwrap();
        assert_eq!(plan["E"].routes.len(), 1);
        assert!(plan["E"].remote_entries.is_empty());
        assert!(plan["E"].gateway.is_none());
        let proxies = proxy_injections(&net);
        assert!(proxies.iter().all(|p| p.enabled));
    }

    #[test]
    fn unresolvable_cross_domain_link() {
        let mut net = single_edge_intent();
        net.services[0].links_to = vec![Link {
            name: "Z".into(),
            kind: LinkType::CrossDomain,
            resolution: Some(Resolution { domain: "Domain-Z".into(), fqdn: String::new() }),
        }];
        let placement = PlacementMap::from([("A".into(), "E".into()), ("B".into(), "E".into())]);
        assert_eq!(
            plan_mesh(&net, &placement, &TrustedDomainTable::new(), &settings()).unwrap_err(),
            MeshError::UnresolvableDomain("Domain-Z".into())
        );
        assert_eq!(
            proxy_injections(&net),
            vec![
                ProxyInjection { workload: "A".into(), enabled: true },
                ProxyInjection { workload: "B".into(), enabled: false },
            ]
        );
    }

    #[test]
    fn empty_intent() {
        let net = NetworkIntent { deployment_id: "d".into(), services: vec![] };
        let plan = plan_mesh(&net, &PlacementMap::new(), &TrustedDomainTable::new(), &settings()).unwrap();
        assert!(plan.is_empty());
        assert!(check_reachability(&plan, &net, &PlacementMap::new()).is_empty());
    }
}
