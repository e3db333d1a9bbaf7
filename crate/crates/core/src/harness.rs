//! Scenario generation, paired baseline/chaos runs, archives and metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::crawler::{CrawlError, Crawler, DefaultPolicy, FlowDefinition, FlowRun, Policy, RunResult, ScreenReader, VqaClassifier};
use crate::external::{ExternalCategorizer, ExternalPolicy, ExternalScreenClassifier, ExternalVqa, ModelEndpoint};
use crate::havoc::{encode_headers, FaultSpec, HavocHeaders, Scope, TargetSelector, FAULTS_HEADER};
use crate::rca::{
    attribute_with_traces, compare_with_baseline, compute_baseline_stats, detect_errors, emit_ticket, rank_causes, BaselineStats, BaselineVerdict,
    CausalRanking, Categorizer, ErrorFinding, KeywordCategorizer, MissingElementClassifier, OracleCategorizer, RankInput,
    RcaError, ScoreWeights, ScreenClassifier, Ticket, TicketContext,
};
use crate::runlog::{RunLog, RunLogError};
use crate::seed;
use crate::shipped;
use crate::simmesh::RpcRecord;
use crate::topology::{load_topology, plant_violation, Criticality, EdgeRef, Topology, TopologyError};

pub const BUILTIN_PREFIX: &str = "builtin:";
pub const DEFAULT_KS: [usize; 4] = [1, 2, 3, 5];
pub const RCA_KS: [usize; 3] = [1, 3, 5];

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Flow(#[from] CrawlError),
    #[error(transparent)]
    Rca(#[from] RcaError),
    #[error("{path}: {source}")]
    RunLog { path: PathBuf, source: RunLogError },
    #[error("scenario cross-product is empty")]
    EmptyCrossProduct,
    #[error("no declared non-critical edge into tiers {tiers:?} is on a critical path of `{flow}` in `{topology}`")]
    NoViolationCandidate { topology: String, flow: String, tiers: Vec<u8> },
    #[error("unknown {kind} `{name}`")]
    Unknown { kind: &'static str, name: String },
    #[error("no archives found in {0}")]
    NoArchives(PathBuf),
    #[error("bad archive {path}: {reason}")]
    Archive { path: PathBuf, reason: String },
    #[error(transparent)]
    Metric(#[from] MetricError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.to_path_buf(), source }
}

// ---- configuration --------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierMode {
    /// Relevance from topology labels.
    #[default]
    Oracle,
    /// Relevance from path keywords.
    Degraded,
    /// Everything proxied to a model service at this URL.
    External(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyRef {
    #[serde(default)]
    pub name: Option<String>,
    pub path: String,
    /// Independent copies of the topology, e.g. one per city.
    #[serde(default = "one")]
    pub variants: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowRef {
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultTemplate {
    pub name: String,
    #[serde(default)]
    pub faults: Vec<FaultSpec>,
}

fn one() -> u32 {
    1
}
fn default_tiers() -> Vec<u8> {
    vec![2]
}
fn yes() -> bool {
    true
}
fn default_timeout_ms() -> u64 {
    5_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub master_seed: u64,
    #[serde(default = "one")]
    pub workers: u32,
    #[serde(default = "one")]
    pub repeat_count: u32,
    #[serde(default)]
    pub classifier: ClassifierMode,
    #[serde(default = "default_timeout_ms")]
    pub external_timeout_ms: u64,
    pub topologies: Vec<TopologyRef>,
    pub flows: Vec<FlowRef>,
    pub fault_templates: Vec<FaultTemplate>,
    /// Plant one violation per scenario.
    #[serde(default)]
    pub plant_violation: bool,
    /// Callee tiers eligible for planting.
    #[serde(default = "default_tiers")]
    pub violation_tiers: Vec<u8>,
    /// Add an abort on the planted edge to the scenario's faults.
    #[serde(default = "yes")]
    pub violation_fault: bool,
    #[serde(default)]
    pub weights: ScoreWeights,
}

impl GeneratorConfig {
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        Self::parse(&fs::read_to_string(path).map_err(io_err(path))?)
    }

    /// Number of scenarios `generate_scenarios` produces.
    pub fn scenario_count(&self) -> usize {
        let variants: usize = self.topologies.iter().map(|t| t.variants as usize).sum();
        variants * self.flows.len() * self.fault_templates.len()
    }
}

fn read_source(path: &str, base: &Path, builtin: fn(&str) -> Option<&'static str>) -> Result<String, HarnessError> {
    if let Some(name) = path.strip_prefix(BUILTIN_PREFIX) {
        return builtin(name)
            .map(str::to_string)
            .ok_or_else(|| HarnessError::Unknown { kind: "builtin", name: name.to_string() });
    }
    let full = base.join(path);
    fs::read_to_string(&full).map_err(io_err(&full))
}

/// Loaded topologies and flows, keyed by name and flow id.
#[derive(Debug, Clone, Default)]
pub struct Catalog {
    pub topologies: BTreeMap<String, Topology>,
    pub flows: BTreeMap<String, FlowDefinition>,
}

impl Catalog {
    /// Resolves paths relative to `base`.
    pub fn load(config: &GeneratorConfig, base: &Path) -> Result<Self, HarnessError> {
        let mut cat = Catalog::default();
        for t in &config.topologies {
            let mut topo = load_topology(&read_source(&t.path, base, shipped::topology_source)?)?;
            if let Some(name) = &t.name {
                topo.name = name.clone();
            }
            cat.topologies.insert(topo.name.clone(), topo);
        }
        for f in &config.flows {
            let flow = crate::crawler::load_flow(&read_source(&f.path, base, shipped::flow_source)?)?;
            cat.flows.insert(flow.flow_id.clone(), flow);
        }
        Ok(cat)
    }

    pub fn builtin() -> Self {
        Self {
            topologies: shipped::TOPOLOGIES.iter().map(|(n, _)| (n.to_string(), shipped::topology(n).unwrap())).collect(),
            flows: shipped::FLOWS.iter().map(|(n, _)| (n.to_string(), shipped::flow(n).unwrap())).collect(),
        }
    }

    pub fn topology(&self, name: &str) -> Result<&Topology, HarnessError> {
        self.topologies.get(name).ok_or_else(|| HarnessError::Unknown { kind: "topology", name: name.to_string() })
    }

    pub fn flow(&self, id: &str) -> Result<&FlowDefinition, HarnessError> {
        self.flows.get(id).ok_or_else(|| HarnessError::Unknown { kind: "flow", name: id.to_string() })
    }
}

// ---- scenarios ------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub id: String,
    pub topology: String,
    pub variant: u32,
    pub flow: String,
    pub template: String,
    pub fault_configuration: Vec<FaultSpec>,
    pub planted_violations: Vec<EdgeRef>,
    pub seed: u64,
    pub repeat_count: u32,
}

impl Scenario {
    /// Seed of repetition `rep`; repetition 0 uses the scenario seed.
    pub fn rep_seed(&self, rep: u32) -> u64 {
        if rep == 0 {
            self.seed
        } else {
            seed::derive(self.seed, &[u64::from(rep)])
        }
    }

    pub fn instantiate(&self, catalog: &Catalog) -> Result<Topology, HarnessError> {
        let mut topo = catalog.topology(&self.topology)?.clone();
        for edge in &self.planted_violations {
            topo = plant_violation(&topo, edge)?;
        }
        Ok(topo)
    }
}

/// Declared non-critical edges into `tiers` whose caller sits on a critical path
/// of the flow, so that making the edge critical breaks the flow.
pub fn violation_pool(topology: &Topology, flow: &FlowDefinition, tiers: &[u8]) -> Vec<EdgeRef> {
    let closure = topology.reachable_nodes(flow.entries(), |e| e.actual_criticality == Criticality::Critical);
    let mut pool = BTreeSet::new();
    for (service, endpoint) in &closure {
        for edge in topology.services[service].edges().filter(|e| e.applies_to(endpoint)) {
            let tier = topology.services[&edge.callee].tier.value();
            if edge.declared_criticality == Criticality::NonCritical
                && edge.actual_criticality == Criticality::NonCritical
                && tiers.contains(&tier)
            {
                pool.insert(EdgeRef::new(service, &edge.callee, &edge.endpoint));
            }
        }
    }
    pool.into_iter().collect()
}

const PLANT_DRAW: u64 = 0x706c_616e_74;

/// Cross product in config order: topology variants, then flows, then templates.
pub fn generate_scenarios(config: &GeneratorConfig, catalog: &Catalog) -> Result<Vec<Scenario>, HarnessError> {
    if config.scenario_count() == 0 {
        return Err(HarnessError::EmptyCrossProduct);
    }
    let topo_names: Vec<(String, u32)> = config
        .topologies
        .iter()
        .zip(catalog.topologies.values().cycle())
        .map(|(r, _)| r)
        .map(|r| {
            let name = match &r.name {
                Some(n) => n.clone(),
                None => catalog
                    .topologies
                    .values()
                    .find(|t| r.path.strip_prefix(BUILTIN_PREFIX) == Some(t.name.as_str()))
                    .or_else(|| (catalog.topologies.len() == 1).then(|| catalog.topologies.values().next().unwrap()))
                    .map(|t| t.name.clone())
                    .unwrap_or_default(),
            };
            (name, r.variants)
        })
        .collect();
    let flow_ids: Vec<String> = catalog.flows.keys().cloned().collect();
    let flow_order: Vec<String> = if flow_ids.len() == config.flows.len() { ordered_flow_ids(config, catalog) } else { flow_ids };

    let mut out = Vec::with_capacity(config.scenario_count());
    for (topo_name, variants) in &topo_names {
        let topology = catalog.topology(topo_name)?;
        for variant in 0..*variants {
            for flow_id in &flow_order {
                let flow = catalog.flow(flow_id)?;
                for template in &config.fault_templates {
                    let seed = seed::derive(
                        config.master_seed,
                        &[
                            seed::fnv1a(topo_name.as_bytes()),
                            u64::from(variant),
                            seed::fnv1a(flow_id.as_bytes()),
                            seed::fnv1a(template.name.as_bytes()),
                        ],
                    );
                    let mut faults = template.faults.clone();
                    let mut planted = Vec::new();
                    if config.plant_violation {
                        let pool = violation_pool(topology, flow, &config.violation_tiers);
                        if pool.is_empty() {
                            return Err(HarnessError::NoViolationCandidate {
                                topology: topo_name.clone(),
                                flow: flow_id.clone(),
                                tiers: config.violation_tiers.clone(),
                            });
                        }
                        let edge = pool[(seed::derive(seed, &[PLANT_DRAW]) % pool.len() as u64) as usize].clone();
                        if config.violation_fault {
                            faults.push(violation_fault(&edge));
                        }
                        planted.push(edge);
                    }
                    out.push(Scenario {
                        id: format!("s{}", out.len() + 1),
                        topology: topo_name.clone(),
                        variant,
                        flow: flow_id.clone(),
                        template: template.name.clone(),
                        fault_configuration: faults,
                        planted_violations: planted,
                        seed,
                        repeat_count: config.repeat_count.max(1),
                    });
                }
            }
        }
    }
    Ok(out)
}

fn ordered_flow_ids(config: &GeneratorConfig, catalog: &Catalog) -> Vec<String> {
    // Catalog keys are sorted; recover config order by matching builtin names, then the rest.
    let mut ordered = Vec::new();
    for f in &config.flows {
        if let Some(name) = f.path.strip_prefix(BUILTIN_PREFIX) {
            if catalog.flows.contains_key(name) && !ordered.iter().any(|o| o == name) {
                ordered.push(name.to_string());
            }
        }
    }
    for id in catalog.flows.keys() {
        if !ordered.contains(id) {
            ordered.push(id.clone());
        }
    }
    ordered
}

pub fn violation_fault(edge: &EdgeRef) -> FaultSpec {
    FaultSpec::new(
        crate::havoc::FaultKind::Abort { status_code: 503 },
        TargetSelector::ByEndpoint([(edge.callee.clone(), edge.endpoint.clone())].into()),
        Scope::AllMatching,
    )
    .expect("valid clause")
}

// ---- runs -----------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    Baseline,
    Chaos,
}

impl RunMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RunMode::Baseline => "baseline",
            RunMode::Chaos => "chaos",
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunContext<'a> {
    pub catalog: &'a Catalog,
    pub mode: ClassifierMode,
    pub weights: ScoreWeights,
    pub workers: usize,
    pub external_timeout: Duration,
}

impl<'a> RunContext<'a> {
    pub fn new(catalog: &'a Catalog) -> Self {
        Self {
            catalog,
            mode: ClassifierMode::Oracle,
            weights: ScoreWeights::default(),
            workers: 1,
            external_timeout: Duration::from_millis(default_timeout_ms()),
        }
    }

    pub fn from_config(catalog: &'a Catalog, config: &GeneratorConfig) -> Self {
        Self {
            catalog,
            mode: config.classifier.clone(),
            weights: config.weights,
            workers: config.workers.max(1) as usize,
            external_timeout: Duration::from_millis(config.external_timeout_ms),
        }
    }

    fn endpoint(&self) -> Option<ModelEndpoint> {
        match &self.mode {
            ClassifierMode::External(url) => ModelEndpoint::resolve(Some(url), self.external_timeout),
            _ => None,
        }
    }

    fn policy(&self) -> Box<dyn Policy> {
        match self.endpoint() {
            Some(endpoint) => Box::new(ExternalPolicy { endpoint }),
            None => Box::new(DefaultPolicy),
        }
    }

    fn vqa(&self) -> Box<dyn VqaClassifier> {
        match self.endpoint() {
            Some(endpoint) => Box::new(ExternalVqa { endpoint }),
            None => Box::new(ScreenReader),
        }
    }

    fn screen_classifier(&self, flow: &FlowDefinition) -> Box<dyn ScreenClassifier> {
        match self.endpoint() {
            Some(endpoint) => Box::new(ExternalScreenClassifier { endpoint }),
            None => Box::new(MissingElementClassifier::for_flow(flow)),
        }
    }

    fn categorizer<'t>(&self, topology: &'t Topology) -> Box<dyn Categorizer + 't> {
        let keywords = KeywordCategorizer::new(self.catalog.flows.values());
        match (&self.mode, self.endpoint()) {
            (_, Some(endpoint)) => Box::new(ExternalCategorizer { endpoint }),
            (ClassifierMode::Degraded, None) => Box::new(keywords),
            _ => Box::new(OracleCategorizer::new(topology, keywords)),
        }
    }

    fn pool(&self) -> rayon::ThreadPool {
        rayon::ThreadPoolBuilder::new().num_threads(self.workers.max(1)).build().expect("thread pool")
    }
}

/// Everything recorded about one run. The network log lives in `run.jsonl` next
/// to `archive.json` and is not part of the JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunArchive {
    pub run_id: String,
    pub scenario: Scenario,
    pub rep: u32,
    pub mode: RunMode,
    pub seed: u64,
    pub headers: Vec<(String, String)>,
    pub result: RunResult,
    #[serde(skip)]
    pub log: Vec<RpcRecord>,
    pub findings: Vec<ErrorFinding>,
    pub ranking: Option<CausalRanking>,
    pub comparison: Option<BaselineVerdict>,
    pub ticket: Option<Ticket>,
    pub weights: ScoreWeights,
    pub files: Vec<String>,
    pub digest: String,
}

impl RunArchive {
    pub fn run_log(&self) -> RunLog {
        RunLog { rpcs: self.log.clone(), transitions: self.result.transitions.clone(), screens: self.result.screens_mosaic.clone() }
    }

    /// SHA-256 over everything except the run id.
    pub fn compute_digest(&self) -> String {
        let mut ticket = self.ticket.clone();
        if let Some(t) = &mut ticket {
            t.run_id.clear();
        }
        let faults: Vec<&String> = self.headers.iter().filter(|(k, _)| k == FAULTS_HEADER).map(|(_, v)| v).collect();
        let view = serde_json::json!({
            "scenario": self.scenario,
            "rep": self.rep,
            "mode": self.mode,
            "seed": self.seed,
            "faults": faults,
            "result": self.result,
            "findings": self.findings,
            "ranking": self.ranking,
            "comparison": self.comparison,
            "ticket": ticket,
            "weights": self.weights,
        });
        let mut h = Sha256::new();
        h.update(view.to_string().as_bytes());
        h.update(b"\n");
        h.update(self.run_log().to_text().as_bytes());
        hex::encode(h.finalize())
    }

    /// The chaos ranking's verdict on the planted edge: its 0-based position, if ranked.
    pub fn planted_rank(&self) -> Option<usize> {
        let edge = self.scenario.planted_violations.first()?;
        self.ranking.as_ref()?.position(&edge.callee, &edge.endpoint)
    }
}

/// Append-only archive directories, one per run, named `<base>-NNNN`.
#[derive(Debug, Clone)]
pub struct ArchiveStore {
    root: PathBuf,
}

impl ArchiveStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, HarnessError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(io_err(&root))?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Claims the next free run id for `base`.
    pub fn allocate(&self, base: &str) -> Result<String, HarnessError> {
        for n in 0.. {
            let id = format!("{base}-{n:04}");
            let dir = self.root.join(&id);
            match fs::create_dir(&dir) {
                Ok(()) => return Ok(id),
                Err(e) if e.kind() == io::ErrorKind::AlreadyExists => continue,
                Err(e) => return Err(HarnessError::Io { path: dir, source: e }),
            }
        }
        unreachable!()
    }

    pub fn write(&self, archive: &RunArchive) -> Result<PathBuf, HarnessError> {
        let dir = self.root.join(&archive.run_id);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let put = |name: &str, body: &str| {
            let p = dir.join(name);
            fs::write(&p, body).map_err(io_err(&p))
        };
        put("run.jsonl", &archive.run_log().to_text())?;
        if let Some(r) = &archive.ranking {
            put("ranking.jsonl", &r.to_jsonl())?;
        }
        if let Some(t) = &archive.ticket {
            put("ticket.md", &t.to_markdown())?;
        }
        let json = serde_json::to_string_pretty(archive).expect("archive serializes");
        put("archive.json", &json)?;
        Ok(dir)
    }

    pub fn read(dir: &Path) -> Result<RunArchive, HarnessError> {
        let doc = dir.join("archive.json");
        let text = fs::read_to_string(&doc).map_err(io_err(&doc))?;
        let mut archive: RunArchive =
            serde_json::from_str(&text).map_err(|e| HarnessError::Archive { path: doc.clone(), reason: e.to_string() })?;
        let log_path = dir.join("run.jsonl");
        let file = fs::File::open(&log_path).map_err(io_err(&log_path))?;
        let log = RunLog::read_from(io::BufReader::new(file)).map_err(|source| HarnessError::RunLog { path: log_path, source })?;
        archive.log = log.rpcs;
        Ok(archive)
    }

    /// Every archive under `root`, sorted by run id.
    pub fn load_all(root: &Path) -> Result<Vec<RunArchive>, HarnessError> {
        let entries = match fs::read_dir(root) {
            Ok(e) => e,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Err(HarnessError::NoArchives(root.to_path_buf())),
            Err(e) => return Err(HarnessError::Io { path: root.to_path_buf(), source: e }),
        };
        let mut dirs: Vec<PathBuf> = entries
            .filter_map(Result::ok)
            .map(|e| e.path())
            .filter(|p| p.join("archive.json").is_file())
            .collect();
        dirs.sort();
        if dirs.is_empty() {
            return Err(HarnessError::NoArchives(root.to_path_buf()));
        }
        dirs.iter().map(|d| Self::read(d)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairOutcome {
    pub baseline: RunArchive,
    pub chaos: RunArchive,
    pub ticket: Option<Ticket>,
}

fn run_base(scenario: &Scenario, rep: u32, mode: RunMode) -> String {
    if scenario.repeat_count > 1 {
        format!("{}r{rep}-{}", scenario.id, mode.as_str())
    } else {
        format!("{}-{}", scenario.id, mode.as_str())
    }
}

fn execute(
    ctx: &RunContext<'_>,
    scenario: &Scenario,
    rep: u32,
    mode: RunMode,
    store: Option<&ArchiveStore>,
) -> Result<(String, HavocHeaders, FlowRun), HarnessError> {
    let base = run_base(scenario, rep, mode);
    let run_id = match store {
        Some(s) => s.allocate(&base)?,
        None => format!("{base}-0000"),
    };
    let faults = match mode {
        RunMode::Baseline => Vec::new(),
        RunMode::Chaos => scenario.fault_configuration.clone(),
    };
    let headers = HavocHeaders::test(run_id.clone(), faults);
    let topology = scenario.instantiate(ctx.catalog)?;
    let flow = ctx.catalog.flow(&scenario.flow)?;
    let policy = ctx.policy();
    let vqa = ctx.vqa();
    let run = Crawler::new(&topology, flow).policy(policy.as_ref()).classifier(vqa.as_ref()).run(&headers, scenario.rep_seed(rep))?;
    Ok((run_id, headers, run))
}

struct Analysis {
    findings: Vec<ErrorFinding>,
    ranking: Option<CausalRanking>,
    comparison: Option<BaselineVerdict>,
    ticket: Option<Ticket>,
}

/// RCA of a failed chaos run against its baseline. Passing runs get nothing.
fn analyze(
    ctx: &RunContext<'_>,
    scenario: &Scenario,
    run_id: &str,
    chaos: &FlowRun,
    baseline: &RunResult,
    stats: &BaselineStats,
) -> Result<Analysis, HarnessError> {
    if chaos.result.verdict.is_pass() {
        return Ok(Analysis { findings: Vec::new(), ranking: None, comparison: None, ticket: None });
    }
    let topology = scenario.instantiate(ctx.catalog)?;
    let flow = ctx.catalog.flow(&scenario.flow)?;
    let detection = detect_errors(&chaos.result.transitions, &chaos.result.screens_mosaic, ctx.screen_classifier(flow).as_ref());
    let categorizer = ctx.categorizer(&topology);
    let input = RankInput { topology: &topology, flow_id: &flow.flow_id, categorizer: categorizer.as_ref(), weights: &ctx.weights };
    let ranking = attribute_with_traces(rank_causes(&chaos.log, &detection.findings, stats, &input), &chaos.log);
    let comparison = compare_with_baseline(&chaos.result, baseline)?;
    let ticket = comparison.map(|c| {
        emit_ticket(&TicketContext { run_id, result: &chaos.result, findings: &detection.findings }, &ranking, c)
    });
    Ok(Analysis { findings: detection.findings, ranking: Some(ranking), comparison, ticket })
}

fn archive(
    ctx: &RunContext<'_>,
    scenario: &Scenario,
    rep: u32,
    mode: RunMode,
    (run_id, headers, run): (String, HavocHeaders, FlowRun),
    analysis: Option<Analysis>,
) -> RunArchive {
    let analysis = analysis.unwrap_or(Analysis { findings: Vec::new(), ranking: None, comparison: None, ticket: None });
    let mut files = vec!["archive.json".to_string(), "run.jsonl".to_string()];
    if analysis.ranking.is_some() {
        files.push("ranking.jsonl".into());
    }
    if analysis.ticket.is_some() {
        files.push("ticket.md".into());
    }
    let mut a = RunArchive {
        run_id,
        scenario: scenario.clone(),
        rep,
        mode,
        seed: scenario.rep_seed(rep),
        headers: encode_headers(&headers),
        result: run.result,
        log: run.log,
        findings: analysis.findings,
        ranking: analysis.ranking,
        comparison: analysis.comparison,
        ticket: analysis.ticket,
        weights: ctx.weights,
        files,
        digest: String::new(),
    };
    a.digest = a.compute_digest();
    a
}

/// Baselines for every scenario first, then chaos runs analysed against
/// baseline statistics pooled per topology.
pub fn run_batch(scenarios: &[Scenario], ctx: &RunContext<'_>, store: Option<&ArchiveStore>) -> Result<Vec<PairOutcome>, HarnessError> {
    let jobs: Vec<(&Scenario, u32)> = scenarios.iter().flat_map(|s| (0..s.repeat_count.max(1)).map(move |r| (s, r))).collect();
    let pool = ctx.pool();

    let baselines: Vec<(String, HavocHeaders, FlowRun)> = pool.install(|| {
        jobs.par_iter().map(|(s, r)| execute(ctx, s, *r, RunMode::Baseline, store)).collect::<Result<_, _>>()
    })?;

    let mut stats: BTreeMap<&str, BaselineStats> = BTreeMap::new();
    for ((s, _), (_, _, run)) in jobs.iter().zip(&baselines) {
        let one = compute_baseline_stats([(&run.result, run.log.as_slice())]);
        stats.entry(s.topology.as_str()).or_default().merge(&one);
    }

    let outcomes: Vec<PairOutcome> = pool.install(|| {
        jobs.par_iter()
            .zip(baselines.into_par_iter())
            .map(|((s, r), base)| {
                let chaos = execute(ctx, s, *r, RunMode::Chaos, store)?;
                let topo_stats = &stats[s.topology.as_str()];
                let analysis = analyze(ctx, s, &chaos.0, &chaos.2, &base.2.result, topo_stats)?;
                let ticket = analysis.ticket.clone();
                let baseline = archive(ctx, s, *r, RunMode::Baseline, base, None);
                let chaos = archive(ctx, s, *r, RunMode::Chaos, chaos, Some(analysis));
                if let Some(store) = store {
                    store.write(&baseline)?;
                    store.write(&chaos)?;
                }
                Ok(PairOutcome { baseline, chaos, ticket })
            })
            .collect::<Result<_, HarnessError>>()
    })?;
    Ok(outcomes)
}

/// One baseline/chaos pair; RCA uses the pair's own baseline for statistics.
pub fn run_pair(scenario: &Scenario, ctx: &RunContext<'_>, store: Option<&ArchiveStore>) -> Result<PairOutcome, HarnessError> {
    let single = Scenario { repeat_count: 1, ..scenario.clone() };
    Ok(run_batch(std::slice::from_ref(&single), ctx, store)?.remove(0))
}

/// Re-runs detection and ranking on an archived chaos run.
pub fn reanalyze(archive: &RunArchive, ctx: &RunContext<'_>, baselines: &[RunArchive]) -> Result<CausalRanking, HarnessError> {
    let stats = compute_baseline_stats(
        baselines.iter().filter(|b| b.mode == RunMode::Baseline && b.scenario.topology == archive.scenario.topology).map(|b| (&b.result, b.log.as_slice())),
    );
    let topology = archive.scenario.instantiate(ctx.catalog)?;
    let flow = ctx.catalog.flow(&archive.scenario.flow)?;
    let detection = detect_errors(&archive.result.transitions, &archive.result.screens_mosaic, ctx.screen_classifier(flow).as_ref());
    let categorizer = ctx.categorizer(&topology);
    let input = RankInput { topology: &topology, flow_id: &flow.flow_id, categorizer: categorizer.as_ref(), weights: &archive.weights };
    Ok(attribute_with_traces(rank_causes(&archive.log, &detection.findings, &stats, &input), &archive.log))
}

// ---- metrics --------------------------------------------------------------

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricError {
    #[error("{0} is undefined on empty input")]
    Empty(&'static str),
    #[error("k must be positive")]
    ZeroK,
}

/// Fraction of decisions whose ground truth sits within the first `k` entries.
pub fn precision_at_k<S: AsRef<str>>(decisions: &[(Vec<S>, S)], ks: &[usize]) -> Result<BTreeMap<usize, f64>, MetricError> {
    if decisions.is_empty() {
        return Err(MetricError::Empty("precision@k"));
    }
    if ks.contains(&0) {
        return Err(MetricError::ZeroK);
    }
    Ok(ks
        .iter()
        .map(|&k| {
            let hits = decisions
                .iter()
                .filter(|(ranked, truth)| ranked.iter().take(k).any(|r| r.as_ref() == truth.as_ref()))
                .count();
            (k, hits as f64 / decisions.len() as f64)
        })
        .collect())
}

/// Nearest rank: the `ceil(pct * n / 100)`-th smallest value, 1-indexed.
pub fn percentile(sorted: &[u64], pct: u64) -> u64 {
    let n = sorted.len() as u64;
    let rank = (pct * n).div_ceil(100).max(1);
    sorted[(rank - 1) as usize]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Percentiles {
    pub p50: u64,
    pub p95: u64,
    pub p99: u64,
}

pub fn latency_percentiles(durations: &[u64]) -> Result<Percentiles, MetricError> {
    if durations.is_empty() {
        return Err(MetricError::Empty("latency percentiles"));
    }
    let mut sorted = durations.to_vec();
    sorted.sort_unstable();
    Ok(Percentiles { p50: percentile(&sorted, 50), p95: percentile(&sorted, 95), p99: percentile(&sorted, 99) })
}

/// Rows are actual (positive, negative), columns predicted; each non-empty row sums to 1.
pub fn vqa_confusion(pairs: &[(bool, bool)]) -> Result<[[f64; 2]; 2], MetricError> {
    if pairs.is_empty() {
        return Err(MetricError::Empty("confusion matrix"));
    }
    let mut counts = [[0u64; 2]; 2];
    for &(answer, truth) in pairs {
        counts[usize::from(!truth)][usize::from(!answer)] += 1;
    }
    Ok(counts.map(|row| {
        let n = row[0] + row[1];
        if n == 0 {
            [0.0, 0.0]
        } else {
            [row[0] as f64 / n as f64, row[1] as f64 / n as f64]
        }
    }))
}

pub fn pass_rate<'a>(archives: impl IntoIterator<Item = &'a RunArchive>) -> Option<f64> {
    let (mut n, mut pass) = (0usize, 0usize);
    for a in archives {
        n += 1;
        pass += usize::from(a.result.verdict.is_pass());
    }
    (n > 0).then(|| pass as f64 / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub runs: usize,
    pub precision_at: BTreeMap<usize, f64>,
    pub pass_rate: f64,
    pub latency: Percentiles,
    pub vqa_confusion: Option<[[f64; 2]; 2]>,
    pub vqa_abstentions: usize,
    /// Over chaos runs with a planted violation; unranked runs count as misses.
    pub rca_precision_at: Option<BTreeMap<usize, f64>>,
}

pub fn metric_set(archives: &[&RunArchive]) -> Result<MetricSet, MetricError> {
    if archives.is_empty() {
        return Err(MetricError::Empty("metric set"));
    }
    let decisions: Vec<(Vec<&str>, &str)> = archives
        .iter()
        .flat_map(|a| a.result.decisions.iter())
        .map(|d| (d.ranked_actions.iter().map(String::as_str).collect(), d.optimal.as_str()))
        .collect();
    let precision_at = if decisions.is_empty() { BTreeMap::new() } else { precision_at_k(&decisions, &DEFAULT_KS)? };
    let durations: Vec<u64> = archives.iter().map(|a| a.result.duration_ms).collect();
    let mut pairs = Vec::new();
    let mut abstentions = 0;
    for r in archives.iter().flat_map(|a| &a.result.assertions) {
        match r.answer {
            Some(ans) => pairs.push((ans, r.ground_truth)),
            None => abstentions += 1,
        }
    }
    let planted: Vec<(Vec<String>, String)> = archives
        .iter()
        .filter(|a| a.mode == RunMode::Chaos)
        .filter_map(|a| {
            let edge = a.scenario.planted_violations.first()?;
            let ranked = a
                .ranking
                .iter()
                .flat_map(|r| &r.entries)
                .map(|e| format!("{} {}", e.callee, e.endpoint))
                .collect();
            Some((ranked, format!("{} {}", edge.callee, edge.endpoint)))
        })
        .collect();
    Ok(MetricSet {
        runs: archives.len(),
        precision_at,
        pass_rate: pass_rate(archives.iter().copied()).unwrap_or(0.0),
        latency: latency_percentiles(&durations)?,
        vqa_confusion: if pairs.is_empty() { None } else { Some(vqa_confusion(&pairs)?) },
        vqa_abstentions: abstentions,
        rca_precision_at: if planted.is_empty() { None } else { Some(precision_at_k(&planted, &RCA_KS)?) },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: MetricSet,
    pub baseline: Option<MetricSet>,
    /// Chaos runs grouped by fault template.
    pub by_template: BTreeMap<String, MetricSet>,
}

pub fn evaluate(archives: &[RunArchive]) -> Result<EvalReport, HarnessError> {
    if archives.is_empty() {
        return Err(HarnessError::NoArchives(PathBuf::new()));
    }
    let all: Vec<&RunArchive> = archives.iter().collect();
    let baseline: Vec<&RunArchive> = archives.iter().filter(|a| a.mode == RunMode::Baseline).collect();
    let mut groups: BTreeMap<String, Vec<&RunArchive>> = BTreeMap::new();
    for a in archives.iter().filter(|a| a.mode == RunMode::Chaos) {
        groups.entry(a.scenario.template.clone()).or_default().push(a);
    }
    Ok(EvalReport {
        overall: metric_set(&all)?,
        baseline: if baseline.is_empty() { None } else { Some(metric_set(&baseline)?) },
        by_template: groups.into_iter().map(|(k, v)| Ok((k, metric_set(&v)?))).collect::<Result<_, MetricError>>()?,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

impl EvalReport {
    fn rows(&self) -> Vec<(&str, &MetricSet)> {
        self.baseline.iter().map(|m| ("baseline", m)).chain(self.by_template.iter().map(|(k, m)| (k.as_str(), m))).collect()
    }

    pub fn to_markdown(&self) -> String {
        let mut md = String::new();
        let rows = self.rows();
        let _ = writeln!(md, "## Action precision@k\n\n| runs | p@1 | p@2 | p@3 | p@5 |\n|---|---|---|---|---|");
        for (name, m) in &rows {
            let p = |k| fmt_opt(m.precision_at.get(&k).copied());
            let _ = writeln!(md, "| {name} | {} | {} | {} | {} |", p(1), p(2), p(3), p(5));
        }
        let _ = writeln!(md, "\n## Latency (virtual ms)\n\n| runs | p50 | p95 | p99 |\n|---|---|---|---|");
        for (name, m) in &rows {
            let _ = writeln!(md, "| {name} | {} | {} | {} |", m.latency.p50, m.latency.p95, m.latency.p99);
        }
        let _ = writeln!(md, "\n## Assertion confusion matrix\n");
        match self.overall.vqa_confusion {
            Some(c) => {
                let _ = writeln!(
                    md,
                    "| actual \\ predicted | positive | negative |\n|---|---|---|\n| positive | {:.5} | {:.5} |\n| negative | {:.5} | {:.5} |",
                    c[0][0], c[0][1], c[1][0], c[1][1]
                );
            }
            None => {
                let _ = writeln!(md, "No answered assertions.");
            }
        }
        let _ = writeln!(md, "\nAbstentions: {}", self.overall.vqa_abstentions);
        let _ = writeln!(md, "\n## Root-cause precision@k\n\n| runs | p@1 | p@3 | p@5 |\n|---|---|---|---|");
        for (name, m) in &rows {
            if let Some(p) = &m.rca_precision_at {
                let _ = writeln!(md, "| {name} | {} | {} | {} |", fmt_opt(p.get(&1).copied()), fmt_opt(p.get(&3).copied()), fmt_opt(p.get(&5).copied()));
            }
        }
        let _ = writeln!(md, "\n## Pass rate\n\n| runs | n | pass rate |\n|---|---|---|");
        for (name, m) in &rows {
            let _ = writeln!(md, "| {name} | {} | {:.4} |", m.runs, m.pass_rate);
        }
        md
    }

    /// `metric <group> <name> <value>` lines.
    pub fn metric_lines(&self) -> String {
        let mut out = String::new();
        for (name, m) in self.rows().into_iter().chain(std::iter::once(("overall", &self.overall))) {
            for (k, v) in &m.precision_at {
                let _ = writeln!(out, "metric {name} action_p@{k} {v}");
            }
            if let Some(p) = &m.rca_precision_at {
                for (k, v) in p {
                    let _ = writeln!(out, "metric {name} rca_p@{k} {v}");
                }
            }
            let _ = writeln!(out, "metric {name} pass_rate {}", m.pass_rate);
            let _ = writeln!(out, "metric {name} latency_p50 {}", m.latency.p50);
            let _ = writeln!(out, "metric {name} latency_p95 {}", m.latency.p95);
            let _ = writeln!(out, "metric {name} latency_p99 {}", m.latency.p99);
        }
        out
    }
}
