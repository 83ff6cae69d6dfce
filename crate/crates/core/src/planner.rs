//! Dependency graph, deployment order and service placement.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::intent::{DeploymentIntent, PackageDescriptor, PackageRequirement, PlacementMap, ResourceRequest};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum GraphNode {
    Local(String),
    /// A predecessor owned elsewhere: another domain, or another deployment.
    External { domain: String, package: String },
}

impl fmt::Display for GraphNode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GraphNode::Local(name) => f.write_str(name),
            GraphNode::External { domain, package } => write!(f, "ext:{domain}/{package}"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DependencyGraph {
    nodes: Vec<GraphNode>,
    /// `(predecessor, dependent)` as indices into `nodes`.
    edges: Vec<(usize, usize)>,
}

impl DependencyGraph {
    /// Graph over local nodes only, for callers that already hold an edge list.
    pub fn from_local_edges<S: AsRef<str>>(nodes: &[S], edges: &[(S, S)]) -> Self {
        let mut graph = DependencyGraph::default();
        for n in nodes {
            graph.node(GraphNode::Local(n.as_ref().to_string()));
        }
        for (a, b) in edges {
            let a = graph.node(GraphNode::Local(a.as_ref().to_string()));
            let b = graph.node(GraphNode::Local(b.as_ref().to_string()));
            graph.edges.push((a, b));
        }
        graph
    }

    fn node(&mut self, node: GraphNode) -> usize {
        match self.nodes.iter().position(|n| *n == node) {
            Some(i) => i,
            None => {
                self.nodes.push(node);
                self.nodes.len() - 1
            }
        }
    }

    pub fn nodes(&self) -> &[GraphNode] {
        &self.nodes
    }

    pub fn edges(&self) -> impl Iterator<Item = (&GraphNode, &GraphNode)> {
        self.edges.iter().map(|&(a, b)| (&self.nodes[a], &self.nodes[b]))
    }

    pub fn external_nodes(&self) -> impl Iterator<Item = &GraphNode> {
        self.nodes.iter().filter(|n| matches!(n, GraphNode::External { .. }))
    }
}

pub fn build_graph(intent: &DeploymentIntent) -> DependencyGraph {
    let mut graph = DependencyGraph::default();
    let local = intent.service_names();
    for svc in &intent.services {
        graph.node(GraphNode::Local(svc.package_name.clone()));
    }
    for svc in &intent.services {
        let dependent = graph.node(GraphNode::Local(svc.package_name.clone()));
        for dep in &svc.dependencies {
            let predecessor = if intent.is_local(dep) && local.contains(dep.after.as_str()) {
                GraphNode::Local(dep.after.clone())
            } else {
                GraphNode::External { domain: dep.domain.clone(), package: dep.after.clone() }
            };
            let predecessor = graph.node(predecessor);
            graph.edges.push((predecessor, dependent));
        }
    }
    graph
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("dependency cycle: {}", display_cycle(.cycle))]
pub struct CycleError {
    /// Consecutive entries are edges; the last wraps around to the first.
    pub cycle: Vec<String>,
}

fn display_cycle(cycle: &[String]) -> String {
    let mut parts = cycle.to_vec();
    if let Some(first) = cycle.first() {
        parts.push(first.clone());
    }
    parts.join(" -> ")
}

/// Local services in deployment sequence.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DeploymentOrder(pub Vec<String>);

impl DeploymentOrder {
    pub fn position(&self, name: &str) -> Option<usize> {
        self.0.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl DoubleEndedIterator<Item = &String> {
        self.0.iter()
    }
}

/// Kahn's algorithm over local nodes with a lexicographic ready queue.
/// External predecessors count as already satisfied.
pub fn order_services(graph: &DependencyGraph) -> Result<DeploymentOrder, CycleError> {
    let local: Vec<usize> = (0..graph.nodes.len())
        .filter(|&i| matches!(graph.nodes[i], GraphNode::Local(_)))
        .collect();
    let name = |i: usize| match &graph.nodes[i] {
        GraphNode::Local(n) => n.as_str(),
        GraphNode::External { .. } => unreachable!("external nodes are filtered"),
    };
    let is_local = |i: usize| matches!(graph.nodes[i], GraphNode::Local(_));

    let mut indegree: BTreeMap<usize, usize> = local.iter().map(|&i| (i, 0)).collect();
    let mut successors: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &(a, b) in &graph.edges {
        if is_local(a) && is_local(b) {
            *indegree.get_mut(&b).unwrap() += 1;
            successors.entry(a).or_default().push(b);
        }
    }

    let mut ready: BTreeSet<(&str, usize)> =
        indegree.iter().filter(|(_, &d)| d == 0).map(|(&i, _)| (name(i), i)).collect();
    let mut order = Vec::with_capacity(local.len());
    while let Some(next) = ready.pop_first() {
        let (_, i) = next;
        order.push(name(i).to_string());
        indegree.remove(&i);
        for &s in successors.get(&i).map(Vec::as_slice).unwrap_or_default() {
            let d = indegree.get_mut(&s).unwrap();
            *d -= 1;
            if *d == 0 {
                ready.insert((name(s), s));
            }
        }
    }

    if indegree.is_empty() {
        return Ok(DeploymentOrder(order));
    }

    // Every residual node has a residual predecessor, so walking backwards
    // from any of them must revisit a node.
    let residual: BTreeSet<usize> = indegree.keys().copied().collect();
    let mut predecessor: BTreeMap<usize, usize> = BTreeMap::new();
    for &(a, b) in &graph.edges {
        if residual.contains(&a) && residual.contains(&b) {
            let entry = predecessor.entry(b).or_insert(a);
            if name(a) < name(*entry) {
                *entry = a;
            }
        }
    }
    let start = *residual.iter().min_by_key(|&&i| name(i)).unwrap();
    let mut path = vec![start];
    let mut current = start;
    loop {
        current = predecessor[&current];
        if let Some(pos) = path.iter().position(|&n| n == current) {
            let mut cycle: Vec<String> = path[pos..].iter().map(|&i| name(i).to_string()).collect();
            cycle.reverse();
            return Err(CycleError { cycle });
        }
        path.push(current);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeInventory {
    pub edge_id: String,
    pub free: ResourceRequest,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeShortfall {
    pub edge_id: String,
    pub cpu_millis: u64,
    pub memory_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PlacementError {
    #[error("no edge can host {service}")]
    InsufficientCapacity { service: String, shortfalls: Vec<EdgeShortfall> },
    #[error("no resource requirement known for {0}")]
    MissingRequirement(String),
}

/// First-fit-decreasing by CPU. Services are taken largest first (ties by
/// name); each goes to the first edge, ordered by current free CPU
/// descending (ties by id), that covers both CPU and memory.
pub fn place_services(
    intent: &DeploymentIntent,
    requests: &BTreeMap<String, ResourceRequest>,
    inventory: &[EdgeInventory],
) -> Result<PlacementMap, PlacementError> {
    let mut services: Vec<(&str, ResourceRequest)> = intent
        .services
        .iter()
        .map(|s| {
            requests
                .get(&s.package_name)
                .map(|r| (s.package_name.as_str(), *r))
                .ok_or_else(|| PlacementError::MissingRequirement(s.package_name.clone()))
        })
        .collect::<Result<_, _>>()?;
    services.sort_by(|a, b| b.1.cpu_millis.cmp(&a.1.cpu_millis).then_with(|| a.0.cmp(b.0)));

    let mut working: Vec<EdgeInventory> = inventory.to_vec();
    let mut placement = PlacementMap::new();
    for (service, request) in services {
        working.sort_by(|a, b| {
            b.free.cpu_millis.cmp(&a.free.cpu_millis).then_with(|| a.edge_id.cmp(&b.edge_id))
        });
        match working.iter_mut().find(|e| request.fits_within(&e.free)) {
            Some(edge) => {
                edge.free = edge.free.saturating_sub(request);
                placement.insert(service.to_string(), edge.edge_id.clone());
            }
            None => {
                let mut shortfalls: Vec<EdgeShortfall> = working
                    .iter()
                    .map(|e| EdgeShortfall {
                        edge_id: e.edge_id.clone(),
                        cpu_millis: request.cpu_millis.saturating_sub(e.free.cpu_millis),
                        memory_bytes: request.memory_bytes.saturating_sub(e.free.memory_bytes),
                    })
                    .collect();
                shortfalls.sort_by(|a, b| a.edge_id.cmp(&b.edge_id));
                return Err(PlacementError::InsufficientCapacity { service: service.to_string(), shortfalls });
            }
        }
    }
    Ok(placement)
}

/// Picks each service's requirement entry from its descriptor, matching the
/// service version and QoS label.
pub fn requirements_for_intent(
    intent: &DeploymentIntent,
    descriptors: &BTreeMap<String, PackageDescriptor>,
) -> Result<BTreeMap<String, PackageRequirement>, PlacementError> {
    intent
        .services
        .iter()
        .map(|s| {
            descriptors
                .get(&s.package_name)
                .and_then(|d| d.requirement_for(&s.version, Some(&s.qos_level)))
                .map(|r| (s.package_name.clone(), r.clone()))
                .ok_or_else(|| PlacementError::MissingRequirement(s.package_name.clone()))
        })
        .collect()
}
