//! Seeded trial generators and brute-force oracles shared by the property
//! tests and the acceptance suite. Every trial returns `Err` with a
//! description of the first violated property.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use camino_core::edge::{Cluster, EdgeClusterState, Topology, WorkloadState};
use camino_core::intent::{
    derive_network_intent, parse_deployment_intent, Endpoint, EndpointCatalog, LinkType, PlacementMap, Protocol,
    ResourceRequest,
};
use camino_core::manager::{Engine, EngineConfig, EngineError, Phase};
use camino_core::mesh::{check_reachability, plan_mesh, MeshSettings, RemoteTarget, TrustedDomainTable, Unreachable};
use camino_core::monitoring::{Aggregation, DataLake, Labels, MetricQuery, MetricSample, QueryResult, Scope};
use camino_core::planner::{order_services, DependencyGraph};
use camino_core::store::{parse_manifest, PackageStore, RepositoryKind, RevisionRef, RevisionState};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const LISTING1_ID: &str = "338d10a2-2669-46e1";

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn read_fixture(rel: &str) -> String {
    std::fs::read_to_string(fixtures().join(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
}

pub fn fixture_config() -> EngineConfig {
    let mut config = EngineConfig::new("Domain-X", Topology::load(fixtures().join("topology.json")).unwrap());
    config.trusted_domains.insert("Domain-Y".into(), "yyy.yyy.yyy.yyy".into());
    config.gateway_address = "xxx.xxx.xxx.xxx".into();
    config
}

pub fn fixture_engine() -> Engine {
    Engine::with_blueprints(fixture_config(), fixtures().join("blueprints")).unwrap()
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---- topological order ----

/// Random graph over at most `max_nodes` nodes; roughly a third of them get
/// a back edge that may close a cycle.
pub fn random_graph(rng: &mut ChaCha8Rng, max_nodes: usize) -> (Vec<String>, Vec<(String, String)>) {
    let n = rng.random_range(1..=max_nodes);
    let mut nodes: Vec<String> = (0..n).map(|i| format!("N{i}")).collect();
    nodes.shuffle(rng);
    let density: f64 = rng.random_range(0.0..0.6);
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.random_bool(density) {
                edges.push((nodes[i].clone(), nodes[j].clone()));
            }
        }
    }
    if n > 1 && rng.random_bool(0.35) {
        let i = rng.random_range(0..n - 1);
        let j = rng.random_range(i + 1..n);
        edges.push((nodes[j].clone(), nodes[i].clone()));
    }
    nodes.sort();
    (nodes, edges)
}

/// Cycle detection by transitive closure.
pub fn has_cycle(nodes: &[String], edges: &[(String, String)]) -> bool {
    let idx: BTreeMap<&str, usize> = nodes.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let n = nodes.len();
    let mut reach = vec![vec![false; n]; n];
    for (a, b) in edges {
        reach[idx[a.as_str()]][idx[b.as_str()]] = true;
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                if reach[i][k] && reach[k][j] {
                    reach[i][j] = true;
                }
            }
        }
    }
    (0..n).any(|i| reach[i][i])
}

pub fn order_trial(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (nodes, edges) = random_graph(&mut rng, 8);
    let graph = DependencyGraph::from_local_edges(&nodes, &edges);
    let cyclic = has_cycle(&nodes, &edges);
    match order_services(&graph) {
        Ok(order) => {
            ensure(!cyclic, || format!("seed {seed}: cyclic graph {edges:?} was ordered"))?;
            let mut sorted = order.0.clone();
            sorted.sort();
            ensure(sorted == nodes, || format!("seed {seed}: order {:?} is not a permutation", order.0))?;
            for (a, b) in &edges {
                ensure(order.position(a) < order.position(b), || {
                    format!("seed {seed}: {a} must precede {b} in {:?}", order.0)
                })?;
            }
            Ok(())
        }
        Err(e) => {
            ensure(cyclic, || format!("seed {seed}: acyclic graph {edges:?} rejected"))?;
            let c = &e.cycle;
            ensure(!c.is_empty(), || format!("seed {seed}: empty witness"))?;
            let distinct: BTreeSet<&String> = c.iter().collect();
            ensure(distinct.len() == c.len(), || format!("seed {seed}: witness {c:?} repeats a node"))?;
            for i in 0..c.len() {
                let (a, b) = (&c[i], &c[(i + 1) % c.len()]);
                ensure(edges.iter().any(|(x, y)| x == a && y == b), || {
                    format!("seed {seed}: witness step {a} -> {b} is not an edge")
                })?;
            }
            Ok(())
        }
    }
}

// ---- reconciliation convergence ----

fn deployment_doc(cpu_cores: u64) -> String {
    format!(
        "kind: Deployment\nmetadata:\n  name: w\nspec:\n  containers:\n    - name: c\n      resources:\n        cpu: {cpu_cores}\n        memory: 512Mi\n"
    )
}

pub struct ConvergenceReport {
    pub interval: u64,
    pub max_delay: u64,
    pub mutation_ticks: u64,
    pub converged_after: u64,
}

/// Random publish/delete/draft schedule on three edges, then quiescence.
pub fn convergence_trial(seed: u64) -> Result<ConvergenceReport, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let interval = rng.random_range(1..=5);
    let max_delay = rng.random_range(1..=5);
    let edge_ids = ["Edge0", "Edge1", "Edge2"];
    let mut store = PackageStore::in_memory();
    let mut edges = Vec::new();
    for (i, id) in edge_ids.iter().enumerate() {
        let repo = format!("{}-deploy", id.to_lowercase());
        store.register_repository(&repo, RepositoryKind::Deployment, Some(id)).unwrap();
        edges.push(EdgeClusterState::with_capacity(
            id,
            ResourceRequest::new(64_000, 256 << 30),
            BTreeSet::new(),
            interval,
            max_delay,
            seed.wrapping_mul(31).wrapping_add(i as u64),
        ));
    }
    let mut cluster = Cluster::from_edges(edges);
    let mutation_ticks = rng.random_range(10..=60);
    let packages = ["p0@d", "p1@d", "p2@d", "p3@d"];
    let labels = |pkg: &str| {
        BTreeMap::from([
            ("deployment-id".to_string(), "d".to_string()),
            ("package".to_string(), pkg.trim_end_matches("@d").to_string()),
        ])
    };
    for _ in 0..mutation_ticks {
        if rng.random_bool(0.4) {
            let edge = edge_ids.choose(&mut rng).unwrap();
            let repo = format!("{}-deploy", edge.to_lowercase());
            let published: Vec<RevisionRef> = store
                .repository(&repo)
                .unwrap()
                .published()
                .map(|(p, r)| RevisionRef::new(&repo, p, r.revision))
                .collect();
            let pkg = packages.choose(&mut rng).unwrap();
            match rng.random_range(0..4) {
                0 | 1 if published.len() < 6 => {
                    let doc = if rng.random_bool(0.8) {
                        deployment_doc(rng.random_range(1..=4))
                    } else {
                        "kind: Service\nmetadata:\n  name: s\nspec:\n  ports:\n    - port: 80\n      protocol: TCP\n"
                            .to_string()
                    };
                    let r = store
                        .create_revision(&repo, pkg, None, vec![parse_manifest(&doc).unwrap()], labels(pkg))
                        .map_err(|e| e.to_string())?;
                    store.publish(&r).map_err(|e| e.to_string())?;
                }
                2 if !published.is_empty() => {
                    let r = published.choose(&mut rng).unwrap();
                    store.delete_revision(r).map_err(|e| e.to_string())?;
                }
                _ => {
                    store
                        .create_revision(&repo, pkg, None, vec![parse_manifest(&deployment_doc(1)).unwrap()], labels(pkg))
                        .map_err(|e| e.to_string())?;
                }
            }
        }
        cluster.advance(&store, 1);
        check_ledgers(&cluster)?;
    }
    let bound = 2 * interval + max_delay;
    let mut converged_after = None;
    for t in 0..=bound {
        if cluster.converged(&store) {
            converged_after = Some(t);
            break;
        }
        cluster.advance(&store, 1);
        check_ledgers(&cluster)?;
    }
    let converged_after = converged_after
        .ok_or_else(|| format!("seed {seed}: not converged {bound} ticks after mutations stopped"))?;
    for edge in cluster.edges() {
        let repo = store.deployment_repo_for(&edge.edge_id).unwrap();
        let mut probe = edge.clone();
        let second = probe.reconcile(repo);
        ensure(second.is_empty(), || format!("seed {seed}: reconcile on converged {} changed {second:?}", edge.edge_id))?;
    }
    Ok(ConvergenceReport { interval, max_delay, mutation_ticks, converged_after })
}

pub fn check_ledgers(cluster: &Cluster) -> Result<(), String> {
    for e in cluster.edges() {
        ensure(e.committed().fits_within(&e.capacity), || {
            format!("{} committed {:?} exceeds capacity {:?} at tick {}", e.edge_id, e.committed(), e.capacity, e.clock())
        })?;
    }
    Ok(())
}

// ---- admission atomicity ----

fn revisions_of(engine: &Engine, deployment_id: &str) -> Vec<(RevisionRef, RevisionState)> {
    let mut out = Vec::new();
    for repo in engine.store().repositories().filter(|r| r.kind == RepositoryKind::Deployment) {
        for (package, rev) in repo.revisions() {
            if rev.label("deployment-id") == Some(deployment_id) {
                out.push((RevisionRef::new(&repo.id, package, rev.revision), rev.state));
            }
        }
    }
    out
}

fn single_intent(id: &str, package: &str, version: &str) -> String {
    format!(
        r#"{{"domain_name":"Domain-X","deployment_id":"{id}","timestamp":"2025-01-24T20:55:50Z",
            "services":[{{"package_name":"{package}","version":"{version}"}}]}}"#
    )
}

/// Submits Listing 1 and a few single-service intents while publications
/// fail at random, checking that every deployment is all-or-nothing and
/// that no edge ever over-commits.
#[derive(Debug, Default, Clone, Copy)]
pub struct AdmissionStats {
    pub approved: usize,
    pub failed: usize,
    pub rejected: usize,
}

pub fn admission_trial(seed: u64) -> Result<AdmissionStats, String> {
    let mut stats = AdmissionStats::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut engine = fixture_engine();
    let fail_rate: f64 = rng.random_range(0.05..0.5);
    let fault_rng = Arc::new(Mutex::new(ChaCha8Rng::seed_from_u64(seed ^ 0x5eed)));
    let hook_rng = fault_rng.clone();
    engine
        .store_mut()
        .set_publish_fault(Some(Box::new(move |_r: &RevisionRef| hook_rng.lock().unwrap().random_bool(fail_rate))));

    let mut intents = vec![(LISTING1_ID.to_string(), read_fixture("intents/listing1.json"))];
    let choices = [("CNF-1", "v1"), ("CNF-2", "v1"), ("CNF-2", "v2"), ("CNF-4", "v1"), ("CNF-4", "v2")];
    for i in 0..rng.random_range(1..=4) {
        let (p, v) = choices.choose(&mut rng).unwrap();
        let id = format!("extra-{i}");
        intents.push((id.clone(), single_intent(&id, p, v)));
    }
    for (id, doc) in &intents {
        let outcome = engine.submit(doc);
        let revs = revisions_of(&engine, id);
        match outcome {
            Ok(record) => {
                let expected = record.packages.len() + record.network_packages.len();
                ensure(revs.len() == expected, || format!("seed {seed}: {id} has {} of {expected} revisions", revs.len()))?;
                ensure(revs.iter().all(|(_, s)| *s == RevisionState::Published), || {
                    format!("seed {seed}: {id} approved but not fully published: {revs:?}")
                })?;
                stats.approved += 1;
            }
            Err(EngineError::Storage(_)) => {
                ensure(revs.is_empty(), || format!("seed {seed}: failed {id} left {revs:?}"))?;
                ensure(engine.record(id).map(|r| r.phase) == Some(Phase::Failed), || {
                    format!("seed {seed}: failed {id} not recorded as Failed")
                })?;
                stats.failed += 1;
            }
            Err(EngineError::Rejected(_)) | Err(EngineError::Capacity(_)) => {
                ensure(revs.is_empty(), || format!("seed {seed}: rejected {id} left {revs:?}"))?;
                stats.rejected += 1;
            }
            Err(e) => return Err(format!("seed {seed}: {id}: unexpected {e}")),
        }
        for _ in 0..rng.random_range(0..8) {
            engine.step();
            check_ledgers(engine.cluster())?;
        }
    }
    for _ in 0..40 {
        engine.step();
        check_ledgers(engine.cluster())?;
    }
    Ok(stats)
}

// ---- mesh planning totality ----

pub struct MeshTrialStats {
    pub links: usize,
    pub entries_removed: usize,
}

/// Random intent with local and cross-domain dependencies, random
/// placement over up to three edges.
pub fn mesh_trial(seed: u64) -> Result<MeshTrialStats, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=6);
    let edges: Vec<String> = (0..rng.random_range(1..=3)).map(|i| format!("Edge{i}")).collect();
    let names: Vec<String> = (0..n).map(|i| format!("S{i}")).collect();
    let mut services = Vec::new();
    let mut catalog = EndpointCatalog::new();
    let mut placement = PlacementMap::new();
    for (i, name) in names.iter().enumerate() {
        let mut deps = Vec::new();
        for prev in names.iter().take(i) {
            if rng.random_bool(0.4) {
                deps.push(serde_json::json!({"after": prev, "domain": "Domain-X", "fqdn": "x"}));
            }
        }
        if rng.random_bool(0.3) {
            let (domain, fqdn) = if rng.random_bool(0.5) { ("Domain-Y", "yyy.example") } else { ("Domain-Z", "") };
            let fqdn = if fqdn.is_empty() { "zzz.example" } else { fqdn };
            deps.push(serde_json::json!({"after": format!("R{}", rng.random_range(0..3)), "domain": domain, "fqdn": fqdn}));
        }
        services.push(serde_json::json!({"package_name": name, "version": "v1", "dependencies": deps}));
        let endpoints: Vec<Endpoint> = (0..rng.random_range(1..=2))
            .map(|k| Endpoint {
                host: format!("{}-{k}", name.to_lowercase()),
                port: 80 + k as u16,
                protocol: if rng.random_bool(0.5) { Protocol::Http } else { Protocol::Tcp },
            })
            .collect();
        catalog.insert(name.clone(), endpoints);
        placement.insert(name.clone(), edges.choose(&mut rng).unwrap().clone());
    }
    let doc = serde_json::json!({
        "domain_name": "Domain-X", "deployment_id": format!("m{seed}"),
        "timestamp": "2025-01-24T20:55:50Z", "services": services,
    });
    let intent = parse_deployment_intent(&doc.to_string()).map_err(|e| format!("seed {seed}: {e}"))?;
    let net = derive_network_intent(&intent, &placement, &catalog).map_err(|e| format!("seed {seed}: {e}"))?;
    let trusted = TrustedDomainTable::from([("Domain-Y".to_string(), "yyy.example".to_string())]);
    let settings = MeshSettings::new(&format!("camino-m{seed}"), "xxx.example");
    let plan = plan_mesh(&net, &placement, &trusted, &settings).map_err(|e| format!("seed {seed}: {e}"))?;

    let mut links = 0;
    for (from, link) in net.links() {
        links += 1;
        let here = &placement[from];
        let cfg = &plan[here];
        let route = cfg.routes.iter().any(|r| r.from == from && r.to == link.name);
        let edge_entry = cfg
            .remote_entries
            .iter()
            .any(|e| e.service == link.name && matches!(e.remote, RemoteTarget::Edge(_)));
        let domain_entry = cfg
            .remote_entries
            .iter()
            .any(|e| e.service == link.name && matches!(e.remote, RemoteTarget::Domain(_)));
        let exposed = cfg.gateway.as_ref().is_some_and(|g| g.exposed.iter().any(|x| x.service == from));
        let pattern = match (route, edge_entry, domain_entry) {
            (true, false, _) if link.kind == LinkType::IntraEdge => placement[&link.name] == *here,
            (true, true, _) if link.kind == LinkType::InterEdge => {
                let want = catalog[&link.name].len();
                let got = cfg
                    .remote_entries
                    .iter()
                    .filter(|e| e.service == link.name && e.remote == RemoteTarget::Edge(placement[&link.name].clone()))
                    .count();
                placement[&link.name] != *here && want == got
            }
            (false, false, true) if link.kind == LinkType::CrossDomain => exposed,
            _ => false,
        };
        ensure(pattern, || format!("seed {seed}: link {from} -> {} ({:?}) matches no single pattern", link.name, link.kind))?;
        if link.kind == LinkType::CrossDomain {
            let resolution = link.resolution.as_ref().unwrap();
            let want = if resolution.fqdn.is_empty() { trusted[&resolution.domain].clone() } else { resolution.fqdn.clone() };
            ensure(
                cfg.remote_entries.iter().any(|e| e.service == link.name && e.address == want && e.port == 15443),
                || format!("seed {seed}: cross-domain entry for {} does not target {want}:15443", link.name),
            )?;
        }
    }
    let clean = check_reachability(&plan, &net, &placement);
    ensure(clean.is_empty(), || format!("seed {seed}: untampered plan reports {clean:?}"))?;

    let mut removed = 0;
    for (edge, cfg) in &plan {
        for (k, entry) in cfg.remote_entries.iter().enumerate() {
            removed += 1;
            let mut tampered = plan.clone();
            tampered.get_mut(edge).unwrap().remote_entries.remove(k);
            let mut expected: Vec<Unreachable> = net
                .links()
                .filter(|(from, link)| {
                    placement[*from] == *edge
                        && link.name == entry.service
                        && match &entry.remote {
                            RemoteTarget::Edge(_) => link.kind == LinkType::InterEdge,
                            RemoteTarget::Domain(d) => {
                                link.kind == LinkType::CrossDomain
                                    && link.resolution.as_ref().is_some_and(|r| &r.domain == d)
                            }
                        }
                })
                .map(|(from, link)| Unreachable { from: from.to_string(), to: link.name.clone(), kind: link.kind })
                .collect();
            expected.sort();
            let got = check_reachability(&tampered, &net, &placement);
            ensure(got == expected && !got.is_empty(), || {
                format!("seed {seed}: removing {entry:?} on {edge} gave {got:?}, expected {expected:?}")
            })?;
        }
    }
    Ok(MeshTrialStats { links, entries_removed: removed })
}

// ---- monitoring oracle ----

pub fn random_samples(rng: &mut ChaCha8Rng, count: usize) -> Vec<MetricSample> {
    let metrics = ["free_cpu", "committed_cpu", "usage_cpu", "usage_memory"];
    (0..count)
        .map(|_| {
            let metric = *metrics.choose(rng).unwrap();
            let mut labels = Labels::from([("edge".to_string(), format!("Edge{}", rng.random_range(0..3)))]);
            if metric.starts_with("usage") {
                labels.insert("package".into(), format!("p{}", rng.random_range(0..3)));
                labels.insert("deployment_id".into(), format!("d{}", rng.random_range(0..2)));
            }
            MetricSample {
                metric: metric.to_string(),
                labels,
                value: rng.random_range(0..10_000) as f64,
                tick: rng.random_range(0..50),
            }
        })
        .collect()
}

pub fn random_query(rng: &mut ChaCha8Rng) -> MetricQuery {
    let metric = *["free_cpu", "committed_cpu", "usage_cpu", "usage_memory"].choose(rng).unwrap();
    let aggregation =
        *[Aggregation::Sum, Aggregation::Avg, Aggregation::Max, Aggregation::Min, Aggregation::Latest].choose(rng).unwrap();
    let a = rng.random_range(0..55);
    let b = rng.random_range(0..55);
    let mut q = MetricQuery::new(metric, aggregation, a.min(b), a.max(b));
    let external = rng.random_bool(0.4);
    if !external && rng.random_bool(0.3) {
        q = q.select("edge", &format!("Edge{}", rng.random_range(0..3)));
    }
    if rng.random_bool(0.3) {
        q = q.select("package", &format!("p{}", rng.random_range(0..3)));
    }
    for label in ["edge", "package", "deployment_id"] {
        if (label != "edge" || !external) && rng.random_bool(0.35) {
            q = q.group(label);
        }
    }
    if external {
        q = q.external();
    }
    q
}

/// Filter, optional edge folding, group, aggregate; written for clarity
/// rather than speed.
pub fn query_oracle(q: &MetricQuery, raw: &[MetricSample]) -> Vec<QueryResult> {
    let mut rows: Vec<MetricSample> = raw
        .iter()
        .filter(|x| x.metric == q.metric && x.tick >= q.from && x.tick <= q.to)
        .filter(|x| q.selectors.iter().all(|(k, v)| x.labels.get(k) == Some(v)))
        .cloned()
        .collect();
    if q.scope == Scope::External {
        let mut merged: Vec<MetricSample> = Vec::new();
        for mut r in rows {
            r.labels.remove("edge");
            match merged.iter_mut().find(|m| m.labels == r.labels && m.tick == r.tick) {
                Some(m) => m.value += r.value,
                None => merged.push(r),
            }
        }
        rows = merged;
    }
    let key_of = |r: &MetricSample| -> Labels {
        q.group_by.iter().filter_map(|g| r.labels.get(g).map(|v| (g.clone(), v.clone()))).collect()
    };
    let keys: BTreeSet<Labels> = rows.iter().map(key_of).collect();
    keys.into_iter()
        .map(|k| {
            let members: Vec<&MetricSample> = rows.iter().filter(|r| key_of(r) == k).collect();
            let vals: Vec<f64> = members.iter().map(|m| m.value).collect();
            let value = match q.aggregation {
                Aggregation::Sum => vals.iter().sum(),
                Aggregation::Avg => vals.iter().sum::<f64>() / vals.len() as f64,
                Aggregation::Max => vals.iter().cloned().fold(f64::MIN, f64::max),
                Aggregation::Min => vals.iter().cloned().fold(f64::MAX, f64::min),
                Aggregation::Latest => {
                    let series: BTreeSet<&Labels> = members.iter().map(|m| &m.labels).collect();
                    series
                        .iter()
                        .map(|l| {
                            let last = members.iter().filter(|m| &m.labels == *l).map(|m| m.tick).max().unwrap();
                            members.iter().find(|m| &m.labels == *l && m.tick == last).unwrap().value
                        })
                        .sum()
                }
            };
            QueryResult { labels: k, value }
        })
        .collect()
}

pub fn results_match(q: &MetricQuery, got: &[QueryResult], want: &[QueryResult]) -> bool {
    got.len() == want.len()
        && got.iter().zip(want).all(|(g, w)| {
            g.labels == w.labels
                && if q.aggregation == Aggregation::Avg {
                    (g.value - w.value).abs() <= 1e-9 * w.value.abs().max(1.0)
                } else {
                    g.value == w.value
                }
        })
}

/// One lake of up to `max_samples` samples and `queries` random queries.
pub fn monitoring_trial(seed: u64, max_samples: usize, queries: usize) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.random_range(0..=max_samples);
    let samples = random_samples(&mut rng, count);
    let mut lake = DataLake::new(max_samples.max(1));
    lake.ingest(samples.iter().cloned());
    for i in 0..queries {
        let q = random_query(&mut rng);
        let got = lake.query(&q).map_err(|e| format!("seed {seed} query {i}: {e}"))?;
        let want = query_oracle(&q, &samples);
        ensure(results_match(&q, &got, &want), || format!("seed {seed} query {i} {q:?}: got {got:?}, want {want:?}"))?;
        if q.scope == Scope::External {
            ensure(got.iter().all(|r| !r.labels.contains_key("edge")), || {
                format!("seed {seed} query {i}: external result carries an edge label")
            })?;
        }
    }
    Ok(count)
}

// ---- resource conservation ----

pub fn conservation_check() -> Result<(), String> {
    let mut engine = fixture_engine();
    engine.advance(3);
    let before = engine.ledgers();
    engine.submit(&read_fixture("intents/listing1.json")).map_err(|e| e.to_string())?;
    let ran = engine.run_until(200, |e| e.record(LISTING1_ID).is_some_and(|r| r.phase == Phase::Running));
    ensure(ran, || "Listing 1 never reached Running".into())?;
    ensure(engine.ledgers() != before, || "deployment did not commit resources".into())?;
    engine.terminate(LISTING1_ID).map_err(|e| e.to_string())?;
    let done = engine.run_until(200, |e| e.record(LISTING1_ID).is_some_and(|r| r.phase == Phase::Terminated));
    ensure(done, || "Listing 1 never reached Terminated".into())?;
    let after = engine.ledgers();
    ensure(after == before, || format!("ledgers differ: before {before:?}, after {after:?}"))?;
    ensure(engine.cluster().edges().iter().all(|e| e.workloads().all(|w| w.state != WorkloadState::Running)), || {
        "workloads still running".into()
    })
}
