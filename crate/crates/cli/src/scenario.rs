//! Scenario files: an embedded engine driven through submit, terminate,
//! advance and assert steps, producing a deterministic text report.
//!
//! Paths inside a scenario are resolved against the scenario's directory.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use camino_core::edge::Topology;
use camino_core::intent::{CpuQuantity, LinkType, MemoryQuantity, ResourceRequest};
use camino_core::manager::{DeploymentRecord, Engine, EngineConfig, EngineError, Phase};
use camino_core::mesh::TrustedDomainTable;
use serde::Deserialize;
use thiserror::Error;

fn default_limit() -> u64 {
    500
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: Option<String>,
    pub domain_name: String,
    pub topology: PathBuf,
    pub blueprints: PathBuf,
    #[serde(default)]
    pub trusted_domains: TrustedDomainTable,
    #[serde(default)]
    pub gateway_address: String,
    #[serde(default)]
    pub readiness_sequencing: bool,
    pub steps: Vec<Step>,
    /// Checked after the last step.
    #[serde(default)]
    pub expected: Option<Expectation>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "action", rename_all = "lowercase", deny_unknown_fields)]
pub enum Step {
    Submit {
        intent: PathBuf,
        /// HTTP-equivalent status the submission must fail with.
        #[serde(default)]
        expect_status: Option<u16>,
    },
    Terminate {
        deployment: String,
        #[serde(default)]
        expect_status: Option<u16>,
    },
    /// Either a fixed number of ticks, or until no deployment is mid-flight.
    Advance {
        #[serde(default)]
        ticks: Option<u64>,
        #[serde(default)]
        settle: bool,
        #[serde(default = "default_limit")]
        limit: u64,
    },
    Assert(Expectation),
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expectation {
    #[serde(default)]
    pub deployments: BTreeMap<String, DeploymentExpectation>,
    /// Number of deployments in a non-terminal phase.
    #[serde(default)]
    pub active: Option<usize>,
    #[serde(default)]
    pub ledgers: BTreeMap<String, LedgerExpectation>,
    #[serde(default)]
    pub reserved: Option<Resources>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeploymentExpectation {
    #[serde(default)]
    pub phase: Option<Phase>,
    #[serde(default)]
    pub order: Option<Vec<String>>,
    #[serde(default)]
    pub placement: Option<BTreeMap<String, String>>,
    /// Distinct service pairs per link type.
    #[serde(default)]
    pub links: Option<BTreeMap<LinkType, usize>>,
    #[serde(default)]
    pub mesh_objects: Option<BTreeMap<String, usize>>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LedgerExpectation {
    #[serde(default)]
    pub committed: Option<Resources>,
    #[serde(default)]
    pub free: Option<Resources>,
}

/// CPU and memory in quantity notation; `"0"` is accepted for either.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(try_from = "RawResources")]
pub struct Resources(ResourceRequest);

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawResources {
    cpu: serde_json::Value,
    memory: serde_json::Value,
}

fn quantity_text(v: &serde_json::Value) -> Result<String, String> {
    match v {
        serde_json::Value::String(s) => Ok(s.trim().to_string()),
        serde_json::Value::Number(n) => Ok(n.to_string()),
        other => Err(format!("expected a quantity, got {other}")),
    }
}

impl TryFrom<RawResources> for Resources {
    type Error = String;

    fn try_from(raw: RawResources) -> Result<Self, String> {
        let (cpu, memory) = (quantity_text(&raw.cpu)?, quantity_text(&raw.memory)?);
        let cpu = match cpu.as_str() {
            "0" | "0m" => 0,
            s => s.parse::<CpuQuantity>().map_err(|e| e.to_string())?.millis(),
        };
        let memory = match memory.as_str() {
            "0" => 0,
            s => s.parse::<MemoryQuantity>().map_err(|e| e.to_string())?.bytes(),
        };
        Ok(Resources(ResourceRequest::new(cpu, memory)))
    }
}

impl Resources {
    fn request(&self) -> ResourceRequest {
        self.0
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{path}: {reason}")]
    Parse { path: String, reason: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Engine(#[from] EngineError),
}

impl Scenario {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        let path = path.as_ref();
        let text = read(path)?;
        let mut scenario: Scenario = serde_json::from_str(&text)
            .map_err(|e| ScenarioError::Parse { path: path.display().to_string(), reason: e.to_string() })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut scenario.topology);
        resolve(&mut scenario.blueprints);
        for step in &mut scenario.steps {
            if let Step::Submit { intent, .. } = step {
                resolve(intent);
            }
        }
        scenario.check_files()?;
        Ok(scenario)
    }

    fn check_files(&self) -> Result<(), ScenarioError> {
        let mut files = vec![&self.topology, &self.blueprints];
        files.extend(self.steps.iter().filter_map(|s| match s {
            Step::Submit { intent, .. } => Some(intent),
            _ => None,
        }));
        for f in files {
            if !f.exists() {
                return Err(ScenarioError::Parse {
                    path: f.display().to_string(),
                    reason: "referenced file does not exist".into(),
                });
            }
        }
        Ok(())
    }

    fn engine(&self) -> Result<Engine, ScenarioError> {
        let topology = Topology::load(&self.topology).map_err(|e| ScenarioError::Parse {
            path: self.topology.display().to_string(),
            reason: e.to_string(),
        })?;
        let mut config = EngineConfig::new(&self.domain_name, topology);
        config.trusted_domains = self.trusted_domains.clone();
        config.gateway_address = self.gateway_address.clone();
        config.readiness_sequencing = self.readiness_sequencing;
        Ok(Engine::with_blueprints(config, &self.blueprints)?)
    }
}

fn read(path: &Path) -> Result<String, ScenarioError> {
    std::fs::read_to_string(path).map_err(|source| ScenarioError::Io { path: path.display().to_string(), source })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Check {
    pub step: usize,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Report {
    pub name: String,
    pub log: Vec<String>,
    pub checks: Vec<Check>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }

    fn check(&mut self, step: usize, name: String, expected: impl fmt::Debug, actual: impl fmt::Debug) {
        let (e, a) = (format!("{expected:?}"), format!("{actual:?}"));
        let passed = e == a;
        let detail = if passed { a } else { format!("expected {e}, got {a}") };
        self.checks.push(Check { step, name, passed, detail });
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "scenario {}", self.name)?;
        for line in &self.log {
            writeln!(f, "  {line}")?;
        }
        for c in &self.checks {
            let verdict = if c.passed { "PASS" } else { "FAIL" };
            writeln!(f, "{verdict} [step {}] {}: {}", c.step, c.name, c.detail)?;
        }
        let failed = self.failures().count();
        writeln!(f, "{} checks, {} passed, {} failed", self.checks.len(), self.checks.len() - failed, failed)
    }
}

fn link_pairs(record: &DeploymentRecord) -> BTreeMap<LinkType, usize> {
    let mut pairs: BTreeMap<LinkType, BTreeSet<(String, String)>> = BTreeMap::new();
    if let Some(net) = &record.network {
        for (from, link) in net.links() {
            let (a, b) = if from <= link.name.as_str() { (from, &*link.name) } else { (&*link.name, from) };
            pairs.entry(link.kind).or_default().insert((a.to_string(), b.to_string()));
        }
    }
    pairs.into_iter().map(|(k, v)| (k, v.len())).collect()
}

fn evaluate(engine: &Engine, step: usize, exp: &Expectation, report: &mut Report) {
    for (id, d) in &exp.deployments {
        let Some(record) = engine.record(id) else {
            report.checks.push(Check {
                step,
                name: format!("{id} exists"),
                passed: false,
                detail: "no such deployment".into(),
            });
            continue;
        };
        if let Some(phase) = d.phase {
            report.check(step, format!("{id} phase"), phase, record.phase);
        }
        if let Some(order) = &d.order {
            report.check(step, format!("{id} order"), order, &record.order);
        }
        if let Some(placement) = &d.placement {
            report.check(step, format!("{id} placement"), placement, &record.placement);
        }
        if let Some(links) = &d.links {
            report.check(step, format!("{id} links"), links, link_pairs(record));
        }
        if let Some(mesh) = &d.mesh_objects {
            report.check(step, format!("{id} mesh objects"), mesh, record.mesh_object_counts());
        }
    }
    if let Some(n) = exp.active {
        report.check(step, "active deployments".into(), n, engine.records().filter(|r| r.phase.is_active()).count());
    }
    let ledgers = engine.ledgers();
    for (edge, l) in &exp.ledgers {
        let Some(actual) = ledgers.get(edge) else {
            report.checks.push(Check {
                step,
                name: format!("{edge} ledger"),
                passed: false,
                detail: "no such edge".into(),
            });
            continue;
        };
        if let Some(c) = l.committed {
            report.check(step, format!("{edge} committed"), c.request(), actual.committed);
        }
        if let Some(free) = l.free {
            report.check(step, format!("{edge} free"), free.request(), actual.free);
        }
    }
    if let Some(r) = exp.reserved {
        let reserved: ResourceRequest = ledgers.values().map(|l| l.committed).sum();
        report.check(step, "reserved".into(), r.request(), reserved);
    }
}

fn settled(engine: &Engine) -> bool {
    engine.records().all(|r| !matches!(r.phase, Phase::Accepted | Phase::Deploying | Phase::Terminating))
}

/// Runs every step in order. Engine errors that a step did not expect
/// become failed checks rather than aborting the run.
pub fn run(scenario: &Scenario) -> Result<Report, ScenarioError> {
    let mut engine = scenario.engine()?;
    let mut report = Report { name: scenario.name.clone().unwrap_or_else(|| "unnamed".into()), ..Report::default() };
    for (i, step) in scenario.steps.iter().enumerate() {
        let n = i + 1;
        match step {
            Step::Submit { intent, expect_status } => {
                let doc = read(intent)?;
                let file = intent.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
                let outcome = engine.submit(&doc);
                let line = match &outcome {
                    Ok(r) => format!("{n}: submit {file} -> {} {}", r.deployment_id, r.phase),
                    Err(e) => format!("{n}: submit {file} -> {} {e}", e.status()),
                };
                report.log.push(line);
                status_check(&mut report, n, "submit", *expect_status, outcome.err().map(|e| e.status()));
            }
            Step::Terminate { deployment, expect_status } => {
                let outcome = engine.terminate(deployment);
                let line = match &outcome {
                    Ok(r) => format!("{n}: terminate {deployment} -> {}", r.phase),
                    Err(e) => format!("{n}: terminate {deployment} -> {} {e}", e.status()),
                };
                report.log.push(line);
                status_check(&mut report, n, "terminate", *expect_status, outcome.err().map(|e| e.status()));
            }
            Step::Advance { ticks, settle, limit } => {
                if let Some(t) = ticks {
                    engine.advance(*t);
                }
                if *settle {
                    let start = engine.tick();
                    let ok = engine.run_until(*limit, settled);
                    report.checks.push(Check {
                        step: n,
                        name: "settle".into(),
                        passed: ok,
                        detail: if ok {
                            format!("settled after {} ticks", engine.tick() - start)
                        } else {
                            format!("not settled within {limit} ticks")
                        },
                    });
                }
                report.log.push(format!("{n}: advance -> tick {}", engine.tick()));
            }
            Step::Assert(exp) => {
                report.log.push(format!("{n}: assert at tick {}", engine.tick()));
                evaluate(&engine, n, exp, &mut report);
            }
        }
    }
    if let Some(exp) = &scenario.expected {
        let n = scenario.steps.len() + 1;
        report.log.push(format!("{n}: expected at tick {}", engine.tick()));
        evaluate(&engine, n, exp, &mut report);
    }
    Ok(report)
}

fn status_check(report: &mut Report, step: usize, what: &str, expected: Option<u16>, actual: Option<u16>) {
    if expected.is_some() || actual.is_some() {
        report.check(step, format!("{what} status"), expected.unwrap_or(200), actual.unwrap_or(200));
    }
}

pub fn run_file(path: impl AsRef<Path>) -> Result<Report, ScenarioError> {
    run(&Scenario::load(path)?)
}
