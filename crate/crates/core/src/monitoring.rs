//! Metric collection, a bounded per-edge data lake, label-selector queries
//! and threshold alerts.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::edge::EdgeClusterState;

pub const DEFAULT_RETENTION: usize = 100_000;

pub const LABEL_EDGE: &str = "edge";
pub const LABEL_DEPLOYMENT_ID: &str = "deployment_id";
pub const LABEL_PACKAGE: &str = "package";
pub const LABEL_NAMESPACE: &str = "namespace";

pub const INFRA_METRICS: [&str; 6] =
    ["capacity_cpu", "capacity_memory", "committed_cpu", "committed_memory", "free_cpu", "free_memory"];
pub const WORKLOAD_METRICS: [&str; 2] = ["usage_cpu", "usage_memory"];

pub fn is_known_metric(name: &str) -> bool {
    INFRA_METRICS.contains(&name) || WORKLOAD_METRICS.contains(&name)
}

pub type Labels = BTreeMap<String, String>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSample {
    pub metric: String,
    pub labels: Labels,
    pub value: f64,
    pub tick: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MonitoringError {
    #[error("unknown metric {0:?}")]
    UnknownMetric(String),
    #[error("policy violation: {0}")]
    PolicyViolation(String),
    #[error("invalid query: {0}")]
    InvalidQuery(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Sum,
    Avg,
    Max,
    Min,
    Latest,
}

impl FromStr for Aggregation {
    type Err = MonitoringError;
    fn from_str(s: &str) -> Result<Self, MonitoringError> {
        match s {
            "sum" => Ok(Aggregation::Sum),
            "avg" => Ok(Aggregation::Avg),
            "max" => Ok(Aggregation::Max),
            "min" => Ok(Aggregation::Min),
            "latest" => Ok(Aggregation::Latest),
            other => Err(MonitoringError::InvalidQuery(format!("unknown aggregation {other:?}"))),
        }
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregation::Sum => "sum",
            Aggregation::Avg => "avg",
            Aggregation::Max => "max",
            Aggregation::Min => "min",
            Aggregation::Latest => "latest",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    #[default]
    Internal,
    External,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricQuery {
    pub metric: String,
    #[serde(default)]
    pub selectors: Labels,
    #[serde(default)]
    pub group_by: Vec<String>,
    /// Inclusive tick range.
    pub from: u64,
    pub to: u64,
    pub aggregation: Aggregation,
    #[serde(default)]
    pub scope: Scope,
}

impl MetricQuery {
    pub fn new(metric: &str, aggregation: Aggregation, from: u64, to: u64) -> Self {
        Self {
            metric: metric.to_string(),
            selectors: Labels::new(),
            group_by: Vec::new(),
            from,
            to,
            aggregation,
            scope: Scope::Internal,
        }
    }

    pub fn select(mut self, label: &str, value: &str) -> Self {
        self.selectors.insert(label.to_string(), value.to_string());
        self
    }

    pub fn group(mut self, label: &str) -> Self {
        self.group_by.push(label.to_string());
        self
    }

    pub fn external(mut self) -> Self {
        self.scope = Scope::External;
        self
    }

    fn validate(&self) -> Result<(), MonitoringError> {
        if !is_known_metric(&self.metric) {
            return Err(MonitoringError::UnknownMetric(self.metric.clone()));
        }
        if self.from > self.to {
            return Err(MonitoringError::InvalidQuery(format!("range {}..{} is inverted", self.from, self.to)));
        }
        if self.scope == Scope::External
            && (self.selectors.contains_key(LABEL_EDGE) || self.group_by.iter().any(|g| g == LABEL_EDGE))
        {
            return Err(MonitoringError::PolicyViolation(
                "external callers may only query domain-level aggregates".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub labels: Labels,
    pub value: f64,
}

fn sample(metric: &str, labels: &Labels, value: u64, tick: u64) -> MetricSample {
    MetricSample { metric: metric.to_string(), labels: labels.clone(), value: value as f64, tick }
}

/// Snapshot of one edge: six infrastructure samples plus cpu and memory
/// usage for every live workload.
pub fn collect(edge: &EdgeClusterState) -> Vec<MetricSample> {
    let tick = edge.clock();
    let infra = Labels::from([(LABEL_EDGE.to_string(), edge.edge_id.clone())]);
    let (cap, committed, free) = (edge.capacity, edge.committed(), edge.free());
    let mut out = vec![
        sample("capacity_cpu", &infra, cap.cpu_millis, tick),
        sample("capacity_memory", &infra, cap.memory_bytes, tick),
        sample("committed_cpu", &infra, committed.cpu_millis, tick),
        sample("committed_memory", &infra, committed.memory_bytes, tick),
        sample("free_cpu", &infra, free.cpu_millis, tick),
        sample("free_memory", &infra, free.memory_bytes, tick),
    ];
    for w in edge.workloads() {
        let labels = Labels::from([
            (LABEL_EDGE.to_string(), edge.edge_id.clone()),
            (LABEL_DEPLOYMENT_ID.to_string(), w.deployment_id.clone()),
            (LABEL_PACKAGE.to_string(), w.package.clone()),
            (LABEL_NAMESPACE.to_string(), w.namespace.clone()),
        ]);
        out.push(sample("usage_cpu", &labels, w.usage.cpu_millis, tick));
        out.push(sample("usage_memory", &labels, w.usage.memory_bytes, tick));
    }
    out
}

/// Per-edge ring buffers; oldest samples are evicted first.
#[derive(Debug, Clone)]
pub struct DataLake {
    retention: usize,
    buffers: BTreeMap<String, VecDeque<MetricSample>>,
}

impl Default for DataLake {
    fn default() -> Self {
        Self::new(DEFAULT_RETENTION)
    }
}

impl DataLake {
    pub fn new(retention: usize) -> Self {
        Self { retention: retention.max(1), buffers: BTreeMap::new() }
    }

    pub fn retention(&self) -> usize {
        self.retention
    }

    pub fn ingest(&mut self, samples: impl IntoIterator<Item = MetricSample>) {
        for s in samples {
            let edge = s.labels.get(LABEL_EDGE).cloned().unwrap_or_default();
            let buf = self.buffers.entry(edge).or_default();
            if buf.len() == self.retention {
                buf.pop_front();
            }
            buf.push_back(s);
        }
    }

    pub fn samples(&self) -> impl Iterator<Item = &MetricSample> {
        self.buffers.values().flatten()
    }

    pub fn len(&self) -> usize {
        self.buffers.values().map(VecDeque::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn latest_tick(&self) -> Option<u64> {
        self.buffers.values().filter_map(|b| b.back()).map(|s| s.tick).max()
    }

    /// Oldest tick still fully retained on every edge.
    pub fn oldest_tick(&self) -> Option<u64> {
        self.buffers.values().filter_map(|b| b.front()).map(|s| s.tick).max()
    }

    pub fn query(&self, q: &MetricQuery) -> Result<Vec<QueryResult>, MonitoringError> {
        q.validate()?;
        run_query(q, self.samples())
    }

    /// Writes every retained sample as one JSON object per line.
    pub fn export_jsonl(&self, mut out: impl Write) -> std::io::Result<()> {
        for s in self.samples() {
            serde_json::to_writer(&mut out, s)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn alerts(&self, rules: &[AlertRule]) -> Vec<Alert> {
        let now = match self.latest_tick() {
            Some(t) => t,
            None => return Vec::new(),
        };
        let mut out = Vec::new();
        for rule in rules {
            if rule.window == 0 || now + 1 < rule.window {
                continue;
            }
            let from = now + 1 - rule.window;
            let mut series: BTreeMap<&Labels, BTreeMap<u64, f64>> = BTreeMap::new();
            for s in self.samples().filter(|s| {
                s.metric == rule.metric && s.tick >= from && s.tick <= now && selectors_match(&rule.selectors, &s.labels)
            }) {
                series.entry(&s.labels).or_default().insert(s.tick, s.value);
            }
            for (labels, points) in series {
                if points.len() as u64 != rule.window {
                    continue;
                }
                let values: Vec<f64> = points.values().copied().collect();
                let value = fold(rule.aggregation, &values);
                if value > rule.threshold {
                    out.push(Alert {
                        id: alert_id(&rule.name, labels),
                        rule: rule.name.clone(),
                        labels: labels.clone(),
                        value,
                        tick: now,
                    });
                }
            }
        }
        out
    }
}

fn selectors_match(selectors: &Labels, labels: &Labels) -> bool {
    selectors.iter().all(|(k, v)| labels.get(k) == Some(v))
}

fn fold(aggregation: Aggregation, values: &[f64]) -> f64 {
    match aggregation {
        Aggregation::Sum | Aggregation::Latest => values.iter().sum(),
        Aggregation::Avg => values.iter().sum::<f64>() / values.len() as f64,
        Aggregation::Max => values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        Aggregation::Min => values.iter().copied().fold(f64::INFINITY, f64::min),
    }
}

fn run_query<'a>(
    q: &MetricQuery,
    samples: impl Iterator<Item = &'a MetricSample>,
) -> Result<Vec<QueryResult>, MonitoringError> {
    let matching = samples
        .filter(|s| s.metric == q.metric && s.tick >= q.from && s.tick <= q.to && selectors_match(&q.selectors, &s.labels));

    // external scope folds edges together per tick first
    let points: Vec<(Labels, u64, f64)> = match q.scope {
        Scope::Internal => matching.map(|s| (s.labels.clone(), s.tick, s.value)).collect(),
        Scope::External => {
            let mut folded: BTreeMap<(Labels, u64), f64> = BTreeMap::new();
            for s in matching {
                let mut labels = s.labels.clone();
                labels.remove(LABEL_EDGE);
                *folded.entry((labels, s.tick)).or_insert(0.0) += s.value;
            }
            folded.into_iter().map(|((l, t), v)| (l, t, v)).collect()
        }
    };

    let mut groups: BTreeMap<Labels, Vec<(&Labels, u64, f64)>> = BTreeMap::new();
    for (labels, tick, value) in &points {
        let key: Labels = q
            .group_by
            .iter()
            .filter_map(|g| labels.get(g).map(|v| (g.clone(), v.clone())))
            .collect();
        groups.entry(key).or_default().push((labels, *tick, *value));
    }

    let mut out = Vec::with_capacity(groups.len());
    for (labels, members) in groups {
        let value = match q.aggregation {
            Aggregation::Latest => {
                let mut latest: BTreeMap<&Labels, (u64, f64)> = BTreeMap::new();
                for (series, tick, value) in &members {
                    let e = latest.entry(series).or_insert((*tick, *value));
                    if *tick > e.0 {
                        *e = (*tick, *value);
                    }
                }
                latest.values().map(|(_, v)| v).sum()
            }
            agg => fold(agg, &members.iter().map(|m| m.2).collect::<Vec<_>>()),
        };
        out.push(QueryResult { labels, value });
    }
    Ok(out)
}

/// Parses `agg(metric{label="value",...}) by (label,...)` into a query over
/// the inclusive tick range `from..=to`. Selectors and grouping are optional.
pub fn parse_expression(expr: &str, from: u64, to: u64) -> Result<MetricQuery, MonitoringError> {
    let bad = |why: &str| MonitoringError::InvalidQuery(format!("{why} in {expr:?}"));
    let expr = expr.trim();
    let open = expr.find('(').ok_or_else(|| bad("missing '('"))?;
    let aggregation: Aggregation = expr[..open].trim().parse()?;
    let close = expr.rfind(')').ok_or_else(|| bad("missing ')'"))?;
    let (inner_end, by) = match expr.find(" by ").or_else(|| expr.find(")by")) {
        Some(pos) => {
            let head = &expr[..=pos];
            let end = head.rfind(')').ok_or_else(|| bad("missing ')'"))?;
            (end, Some(expr[pos..].trim_start_matches(')').trim()))
        }
        None => (close, None),
    };
    let inner = expr[open + 1..inner_end].trim();
    let (metric, selectors) = match inner.find('{') {
        Some(b) => {
            let rest = inner[b + 1..].strip_suffix('}').ok_or_else(|| bad("unterminated selector"))?;
            (inner[..b].trim(), parse_selectors(rest).map_err(|w| bad(&w))?)
        }
        None => (inner, Labels::new()),
    };
    let mut query = MetricQuery::new(metric, aggregation, from, to);
    query.selectors = selectors;
    if let Some(by) = by {
        let list = by
            .strip_prefix("by")
            .map(str::trim)
            .and_then(|l| l.strip_prefix('('))
            .and_then(|l| l.strip_suffix(')'))
            .ok_or_else(|| bad("malformed by clause"))?;
        query.group_by = list.split(',').map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
    }
    if query.metric.is_empty() {
        return Err(bad("missing metric"));
    }
    Ok(query)
}

fn parse_selectors(text: &str) -> Result<Labels, String> {
    let mut out = Labels::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (k, v) = part.split_once('=').ok_or_else(|| format!("selector {part:?} lacks '='"))?;
        let v = v.trim();
        let v = v
            .strip_prefix('"')
            .and_then(|v| v.strip_suffix('"'))
            .ok_or_else(|| format!("selector value {v:?} must be quoted"))?;
        out.insert(k.trim().to_string(), v.to_string());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlertRule {
    pub name: String,
    pub metric: String,
    #[serde(default)]
    pub selectors: Labels,
    pub threshold: f64,
    pub window: u64,
    #[serde(default = "default_alert_aggregation")]
    pub aggregation: Aggregation,
}

fn default_alert_aggregation() -> Aggregation {
    Aggregation::Min
}

pub fn parse_alert_rules(text: &str) -> Result<Vec<AlertRule>, MonitoringError> {
    let rules: Vec<AlertRule> =
        serde_json::from_str(text).map_err(|e| MonitoringError::InvalidQuery(format!("alert rules: {e}")))?;
    let mut names = BTreeSet::new();
    for r in &rules {
        if !is_known_metric(&r.metric) {
            return Err(MonitoringError::UnknownMetric(r.metric.clone()));
        }
        if !names.insert(r.name.as_str()) {
            return Err(MonitoringError::InvalidQuery(format!("duplicate alert rule {}", r.name)));
        }
    }
    Ok(rules)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alert {
    pub id: String,
    pub rule: String,
    pub labels: Labels,
    pub value: f64,
    pub tick: u64,
}

fn alert_id(rule: &str, labels: &Labels) -> String {
    let mut hasher = Sha256::new();
    hasher.update(rule.as_bytes());
    for (k, v) in labels {
        hasher.update(format!("\0{k}={v}").as_bytes());
    }
    hex::encode(&hasher.finalize()[..8])
}
