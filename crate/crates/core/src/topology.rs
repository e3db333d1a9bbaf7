//! Tiered service graph: services, their call plans, and planted resilience defects.
//!
//! A topology document has three sections (`services`, `edges`, `entry_points`).
//! Edges are grouped into each caller's call plan by their `stage` index; edges that
//! share a stage run concurrently.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default entry point budget when the document does not set one.
pub const DEFAULT_ENTRY_TIMEOUT_MS: u64 = 10_000;
/// Edge budgets default to this multiple of the callee's base latency.
pub const DEFAULT_BUDGET_FACTOR: u64 = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TopologyError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("duplicate service `{0}`")]
    DuplicateService(String),
    #[error("service `{service}` has tier {tier}, expected 0..=5")]
    TierOutOfRange { service: String, tier: u8 },
    #[error("service `{0}` must have base_latency_ms >= 1")]
    ZeroLatency(String),
    #[error("service `{service}` declares endpoint `{path}` twice")]
    DuplicateEndpoint { service: String, path: String },
    #[error("endpoint `{service}{path}` has baseline_failure_weight {weight} outside [0,1]")]
    FailureWeight { service: String, path: String, weight: f64 },
    #[error("edge declared on unknown service `{0}`")]
    UnknownCaller(String),
    #[error("edge from `{caller}` references unknown service `{callee}`")]
    UnknownService { caller: String, callee: String },
    #[error("edge from `{caller}` references unknown endpoint `{callee}{endpoint}`")]
    UnknownEndpoint { caller: String, callee: String, endpoint: String },
    #[error("duplicate edge `{0}`")]
    DuplicateEdge(EdgeRef),
    #[error("non-critical edge `{0}` has no fallback_payload")]
    MissingFallback(EdgeRef),
    #[error("edge `{0}` has timeout_budget_ms = 0")]
    ZeroBudget(EdgeRef),
    #[error("entry point `{entry}` references unknown target `{service}{endpoint}`")]
    UnknownEntryTarget { entry: String, service: String, endpoint: String },
    #[error("call cycle: {}", .0.join(" -> "))]
    Cycle(Vec<String>),
    #[error("unknown edge `{0}`")]
    UnknownEdge(EdgeRef),
    #[error("edge `{0}` is declared critical and cannot carry a violation")]
    DeclaredCritical(EdgeRef),
    #[error("invalid degradation marker `{0}`")]
    Marker(String),
}

/// Service criticality tier, 0 (most critical) through 5.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct TierLevel(u8);

impl TierLevel {
    pub const MAX: u8 = 5;

    pub fn new(value: u8) -> Option<Self> {
        (value <= Self::MAX).then_some(Self(value))
    }

    pub fn value(self) -> u8 {
        self.0
    }

    pub fn all() -> impl Iterator<Item = TierLevel> {
        (0..=Self::MAX).map(TierLevel)
    }
}

impl TryFrom<u8> for TierLevel {
    type Error = String;
    fn try_from(value: u8) -> Result<Self, Self::Error> {
        TierLevel::new(value).ok_or_else(|| format!("tier {value} outside 0..=5"))
    }
}

impl From<TierLevel> for u8 {
    fn from(t: TierLevel) -> u8 {
        t.0
    }
}

impl fmt::Display for TierLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "tier-{}", self.0)
    }
}

/// Relevance of an endpoint to a flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relevance {
    Direct,
    Indirect,
    Supporting,
    Unrelated,
}

impl Relevance {
    pub const ALL: [Relevance; 4] = [
        Relevance::Direct,
        Relevance::Indirect,
        Relevance::Supporting,
        Relevance::Unrelated,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Relevance::Direct => "direct",
            Relevance::Indirect => "indirect",
            Relevance::Supporting => "supporting",
            Relevance::Unrelated => "unrelated",
        }
    }
}

impl fmt::Display for Relevance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criticality {
    Critical,
    NonCritical,
}

/// How a UI element renders when the data behind it falls back.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MarkerEffect {
    Missing,
    Placeholder,
    /// Element shows up this many ms after the screen renders.
    Delayed(u64),
}

/// `element:effect`, e.g. `fare_estimate:placeholder` or `eta_banner:delayed(1500)`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct DegradationMarker {
    pub element: String,
    pub effect: MarkerEffect,
}

impl DegradationMarker {
    pub fn new(element: impl Into<String>, effect: MarkerEffect) -> Self {
        Self { element: element.into(), effect }
    }
}

impl fmt::Display for DegradationMarker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.effect {
            MarkerEffect::Missing => write!(f, "{}:missing", self.element),
            MarkerEffect::Placeholder => write!(f, "{}:placeholder", self.element),
            MarkerEffect::Delayed(ms) => write!(f, "{}:delayed({ms})", self.element),
        }
    }
}

impl FromStr for DegradationMarker {
    type Err = TopologyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || TopologyError::Marker(s.to_string());
        let (element, effect) = s.split_once(':').ok_or_else(bad)?;
        if element.is_empty() {
            return Err(bad());
        }
        let effect = match effect {
            "missing" => MarkerEffect::Missing,
            "placeholder" => MarkerEffect::Placeholder,
            other => {
                let ms = other
                    .strip_prefix("delayed(")
                    .and_then(|r| r.strip_suffix(')'))
                    .and_then(|n| n.parse::<u64>().ok())
                    .ok_or_else(bad)?;
                MarkerEffect::Delayed(ms)
            }
        };
        Ok(Self::new(element, effect))
    }
}

impl TryFrom<String> for DegradationMarker {
    type Error = TopologyError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<DegradationMarker> for String {
    fn from(m: DegradationMarker) -> String {
        m.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointSpec {
    pub path: String,
    #[serde(default)]
    pub relevance_tags: BTreeMap<String, Relevance>,
    #[serde(default)]
    pub baseline_failure_weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DependencyEdge {
    pub callee: String,
    pub endpoint: String,
    /// Restricts the edge to requests the caller serves on this endpoint.
    pub caller_endpoint: Option<String>,
    pub declared_criticality: Criticality,
    pub actual_criticality: Criticality,
    pub timeout_budget_ms: u64,
    pub fallback_payload: Option<DegradationMarker>,
}

impl DependencyEdge {
    pub fn applies_to(&self, endpoint: &str) -> bool {
        self.caller_endpoint.as_deref().is_none_or(|e| e == endpoint)
    }

    pub fn is_violation(&self) -> bool {
        self.declared_criticality == Criticality::NonCritical
            && self.actual_criticality == Criticality::Critical
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallStage {
    pub parallel_calls: Vec<DependencyEdge>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceSpec {
    pub name: String,
    pub tier: TierLevel,
    pub base_latency_ms: u64,
    pub jitter_ms: u64,
    pub endpoints: Vec<EndpointSpec>,
    pub call_plan: Vec<CallStage>,
}

impl ServiceSpec {
    pub fn endpoint(&self, path: &str) -> Option<&EndpointSpec> {
        self.endpoints.iter().find(|e| e.path == path)
    }

    pub fn edges(&self) -> impl Iterator<Item = &DependencyEdge> {
        self.call_plan.iter().flat_map(|s| s.parallel_calls.iter())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EntryPoint {
    pub service: String,
    pub endpoint: String,
    #[serde(default = "default_entry_timeout")]
    pub timeout_budget_ms: u64,
}

fn default_entry_timeout() -> u64 {
    DEFAULT_ENTRY_TIMEOUT_MS
}

/// Identifies one edge by `(caller, callee, endpoint)`; unique within a topology.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EdgeRef {
    pub caller: String,
    pub callee: String,
    pub endpoint: String,
}

impl EdgeRef {
    pub fn new(caller: impl Into<String>, callee: impl Into<String>, endpoint: impl Into<String>) -> Self {
        Self { caller: caller.into(), callee: callee.into(), endpoint: endpoint.into() }
    }
}

impl fmt::Display for EdgeRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}->{}{}", self.caller, self.callee, self.endpoint)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    pub name: String,
    pub services: BTreeMap<String, ServiceSpec>,
    pub entry_points: BTreeMap<String, EntryPoint>,
}

/// Tier predicate used to pick fault targets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TierPredicate {
    AtLeast(u8),
    AtMost(u8),
    Exactly(u8),
    Not(Box<TierPredicate>),
}

impl TierPredicate {
    pub fn matches(&self, tier: TierLevel) -> bool {
        let t = tier.value();
        match self {
            TierPredicate::AtLeast(n) => t >= *n,
            TierPredicate::AtMost(n) => t <= *n,
            TierPredicate::Exactly(n) => t == *n,
            TierPredicate::Not(p) => !p.matches(tier),
        }
    }

    pub fn negate(self) -> TierPredicate {
        match self {
            TierPredicate::Not(inner) => *inner,
            other => TierPredicate::Not(Box::new(other)),
        }
    }
}

// ---- document form ---------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TopologyDoc {
    #[serde(default)]
    name: String,
    #[serde(default)]
    services: Vec<ServiceDoc>,
    #[serde(default)]
    edges: Vec<EdgeDoc>,
    #[serde(default)]
    entry_points: BTreeMap<String, EntryPoint>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ServiceDoc {
    name: String,
    tier: u8,
    base_latency_ms: u64,
    #[serde(default)]
    jitter_ms: u64,
    #[serde(default)]
    endpoints: Vec<EndpointSpec>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EdgeDoc {
    caller: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    caller_endpoint: Option<String>,
    #[serde(default)]
    stage: usize,
    callee: String,
    endpoint: String,
    declared_criticality: Criticality,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    actual_criticality: Option<Criticality>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    timeout_budget_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fallback_payload: Option<DegradationMarker>,
}

/// Parses and validates a topology document.
pub fn load_topology(source: &str) -> Result<Topology, TopologyError> {
    let doc: TopologyDoc = toml::from_str(source).map_err(|e| TopologyError::Parse(e.to_string()))?;
    from_doc(doc)
}

fn from_doc(doc: TopologyDoc) -> Result<Topology, TopologyError> {
    let mut services = BTreeMap::new();
    for s in doc.services {
        let tier = TierLevel::new(s.tier)
            .ok_or_else(|| TopologyError::TierOutOfRange { service: s.name.clone(), tier: s.tier })?;
        if s.base_latency_ms == 0 {
            return Err(TopologyError::ZeroLatency(s.name));
        }
        let mut seen = BTreeSet::new();
        for ep in &s.endpoints {
            if !seen.insert(ep.path.as_str()) {
                return Err(TopologyError::DuplicateEndpoint { service: s.name.clone(), path: ep.path.clone() });
            }
            if !(0.0..=1.0).contains(&ep.baseline_failure_weight) {
                return Err(TopologyError::FailureWeight {
                    service: s.name.clone(),
                    path: ep.path.clone(),
                    weight: ep.baseline_failure_weight,
                });
            }
        }
        let spec = ServiceSpec {
            name: s.name.clone(),
            tier,
            base_latency_ms: s.base_latency_ms,
            jitter_ms: s.jitter_ms,
            endpoints: s.endpoints,
            call_plan: Vec::new(),
        };
        if services.insert(s.name.clone(), spec).is_some() {
            return Err(TopologyError::DuplicateService(s.name));
        }
    }

    // caller -> stage index -> edges, in declaration order
    let mut plans: BTreeMap<String, BTreeMap<usize, Vec<DependencyEdge>>> = BTreeMap::new();
    let mut edge_keys = BTreeSet::new();
    for e in doc.edges {
        if !services.contains_key(&e.caller) {
            return Err(TopologyError::UnknownCaller(e.caller));
        }
        let callee = services.get(&e.callee).ok_or_else(|| TopologyError::UnknownService {
            caller: e.caller.clone(),
            callee: e.callee.clone(),
        })?;
        if callee.endpoint(&e.endpoint).is_none() {
            return Err(TopologyError::UnknownEndpoint {
                caller: e.caller.clone(),
                callee: e.callee.clone(),
                endpoint: e.endpoint.clone(),
            });
        }
        if let Some(ce) = &e.caller_endpoint {
            if services[&e.caller].endpoint(ce).is_none() {
                return Err(TopologyError::UnknownEndpoint {
                    caller: e.caller.clone(),
                    callee: e.caller.clone(),
                    endpoint: ce.clone(),
                });
            }
        }
        let key = EdgeRef::new(&e.caller, &e.callee, &e.endpoint);
        if !edge_keys.insert(key.clone()) {
            return Err(TopologyError::DuplicateEdge(key));
        }
        if e.declared_criticality == Criticality::NonCritical && e.fallback_payload.is_none() {
            return Err(TopologyError::MissingFallback(key));
        }
        let budget = e
            .timeout_budget_ms
            .unwrap_or(callee.base_latency_ms * DEFAULT_BUDGET_FACTOR);
        if budget == 0 {
            return Err(TopologyError::ZeroBudget(key));
        }
        plans.entry(e.caller.clone()).or_default().entry(e.stage).or_default().push(DependencyEdge {
            callee: e.callee,
            endpoint: e.endpoint,
            caller_endpoint: e.caller_endpoint,
            declared_criticality: e.declared_criticality,
            actual_criticality: e.actual_criticality.unwrap_or(e.declared_criticality),
            timeout_budget_ms: budget,
            fallback_payload: e.fallback_payload,
        });
    }
    for (caller, stages) in plans {
        let spec = services.get_mut(&caller).expect("caller checked above");
        spec.call_plan = stages.into_values().map(|parallel_calls| CallStage { parallel_calls }).collect();
    }

    for (id, entry) in &doc.entry_points {
        let ok = services.get(&entry.service).is_some_and(|s| s.endpoint(&entry.endpoint).is_some());
        if !ok {
            return Err(TopologyError::UnknownEntryTarget {
                entry: id.clone(),
                service: entry.service.clone(),
                endpoint: entry.endpoint.clone(),
            });
        }
    }

    let topology = Topology { name: doc.name, services, entry_points: doc.entry_points };
    if let Some(cycle) = find_cycle(&topology) {
        return Err(TopologyError::Cycle(cycle));
    }
    Ok(topology)
}

/// Endpoint-level DFS over every `(service, endpoint)` node.
fn find_cycle(topology: &Topology) -> Option<Vec<String>> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        Open,
        Done,
    }

    fn visit<'a>(
        topology: &'a Topology,
        node: (&'a str, &'a str),
        marks: &mut BTreeMap<(&'a str, &'a str), Mark>,
        stack: &mut Vec<(&'a str, &'a str)>,
    ) -> Option<Vec<String>> {
        match marks.get(&node) {
            Some(Mark::Done) => return None,
            Some(Mark::Open) => {
                let start = stack.iter().position(|n| *n == node).unwrap_or(0);
                let mut names: Vec<String> = stack[start..].iter().map(|(s, _)| s.to_string()).collect();
                names.push(node.0.to_string());
                return Some(names);
            }
            None => {}
        }
        marks.insert(node, Mark::Open);
        stack.push(node);
        let service = &topology.services[node.0];
        for edge in service.edges().filter(|e| e.applies_to(node.1)) {
            if let Some(c) = visit(topology, (&edge.callee, &edge.endpoint), marks, stack) {
                return Some(c);
            }
        }
        stack.pop();
        marks.insert(node, Mark::Done);
        None
    }

    let mut marks = BTreeMap::new();
    for service in topology.services.values() {
        for ep in &service.endpoints {
            let mut stack = Vec::new();
            if let Some(c) = visit(topology, (&service.name, &ep.path), &mut marks, &mut stack) {
                return Some(c);
            }
        }
    }
    None
}

impl Topology {
    pub fn service(&self, name: &str) -> Option<&ServiceSpec> {
        self.services.get(name)
    }

    pub fn edge(&self, r: &EdgeRef) -> Option<&DependencyEdge> {
        self.services
            .get(&r.caller)?
            .edges()
            .find(|e| e.callee == r.callee && e.endpoint == r.endpoint)
    }

    pub fn edges(&self) -> impl Iterator<Item = (EdgeRef, &DependencyEdge)> {
        self.services.values().flat_map(|s| {
            s.edges().map(move |e| (EdgeRef::new(&s.name, &e.callee, &e.endpoint), e))
        })
    }

    /// `(service, endpoint)` nodes reachable from `entries`, following only edges
    /// for which `follow` returns true.
    pub fn reachable_nodes<'a>(
        &'a self,
        entries: impl IntoIterator<Item = &'a str>,
        follow: impl Fn(&DependencyEdge) -> bool,
    ) -> BTreeSet<(String, String)> {
        let mut seen = BTreeSet::new();
        let mut stack: Vec<(String, String)> = entries
            .into_iter()
            .filter_map(|id| self.entry_points.get(id))
            .map(|e| (e.service.clone(), e.endpoint.clone()))
            .collect();
        while let Some(node) = stack.pop() {
            if !seen.insert(node.clone()) {
                continue;
            }
            let service = &self.services[&node.0];
            for edge in service.edges().filter(|e| e.applies_to(&node.1) && follow(e)) {
                stack.push((edge.callee.clone(), edge.endpoint.clone()));
            }
        }
        seen
    }

    /// Re-emits the topology in document form; `load_topology` of the result is equal to `self`.
    pub fn to_document(&self) -> String {
        let services = self
            .services
            .values()
            .map(|s| ServiceDoc {
                name: s.name.clone(),
                tier: s.tier.value(),
                base_latency_ms: s.base_latency_ms,
                jitter_ms: s.jitter_ms,
                endpoints: s.endpoints.clone(),
            })
            .collect();
        let mut edges = Vec::new();
        for s in self.services.values() {
            for (stage, cs) in s.call_plan.iter().enumerate() {
                for e in &cs.parallel_calls {
                    edges.push(EdgeDoc {
                        caller: s.name.clone(),
                        caller_endpoint: e.caller_endpoint.clone(),
                        stage,
                        callee: e.callee.clone(),
                        endpoint: e.endpoint.clone(),
                        declared_criticality: e.declared_criticality,
                        actual_criticality: Some(e.actual_criticality),
                        timeout_budget_ms: Some(e.timeout_budget_ms),
                        fallback_payload: e.fallback_payload.clone(),
                    });
                }
            }
        }
        let doc = TopologyDoc { name: self.name.clone(), services, edges, entry_points: self.entry_points.clone() };
        toml::to_string(&doc).expect("topology documents always serialize")
    }
}

/// Marks a declared non-critical edge as actually critical.
pub fn plant_violation(topology: &Topology, edge: &EdgeRef) -> Result<Topology, TopologyError> {
    let mut out = topology.clone();
    let target = out
        .services
        .get_mut(&edge.caller)
        .and_then(|s| {
            s.call_plan
                .iter_mut()
                .flat_map(|st| st.parallel_calls.iter_mut())
                .find(|e| e.callee == edge.callee && e.endpoint == edge.endpoint)
        })
        .ok_or_else(|| TopologyError::UnknownEdge(edge.clone()))?;
    if target.declared_criticality == Criticality::Critical {
        return Err(TopologyError::DeclaredCritical(edge.clone()));
    }
    target.actual_criticality = Criticality::Critical;
    Ok(out)
}

pub fn tier_services(topology: &Topology, selector: &TierPredicate) -> BTreeSet<String> {
    topology
        .services
        .values()
        .filter(|s| selector.matches(s.tier))
        .map(|s| s.name.clone())
        .collect()
}
