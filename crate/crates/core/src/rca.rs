//! Root-cause analysis of failed runs.
//!
//! Error detection finds the first bad screen, baseline statistics say how often
//! each request pattern fails in healthy runs, and every request up to the first
//! bad screen is scored as
//!
//! ```text
//! score = F(status) * (1 - normalFailureRate) * F(tier) * F(category)
//! ```
//!
//! and ranked.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crawler::{ClassifierError, ElementState, FailReason, FlowDefinition, RunResult, ScreenState, ScreenTransition, Verdict};
use crate::simmesh::{RpcRecord, RpcStatus};
use crate::topology::{Relevance, TierLevel, Topology};

#[derive(Debug, Error, PartialEq)]
pub enum RcaError {
    #[error("cannot compare runs of different flows: `{chaos}` vs `{baseline}`")]
    FlowMismatch { chaos: String, baseline: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatusClass {
    Success,
    ClientError,
    ServerError,
}

impl StatusClass {
    /// Timeouts count as server errors.
    pub fn of(status: RpcStatus) -> Self {
        match status {
            RpcStatus::TimedOut => StatusClass::ServerError,
            RpcStatus::Code(c) if c >= 500 => StatusClass::ServerError,
            RpcStatus::Code(c) if c >= 400 => StatusClass::ClientError,
            RpcStatus::Code(_) => StatusClass::Success,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatusWeights {
    pub server_error: f64,
    pub client_error: f64,
    pub success: f64,
}

impl Default for StatusWeights {
    fn default() -> Self {
        Self { server_error: 1.0, client_error: 0.5, success: 0.2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CategoryWeights {
    pub direct: f64,
    pub indirect: f64,
    pub supporting: f64,
    pub unrelated: f64,
}

impl Default for CategoryWeights {
    fn default() -> Self {
        Self { direct: 3.0, indirect: 2.0, supporting: 1.2, unrelated: 0.3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreWeights {
    pub status: StatusWeights,
    /// Indexed by tier level.
    pub tier: [f64; 6],
    pub category: CategoryWeights,
}

impl Default for ScoreWeights {
    fn default() -> Self {
        Self { status: StatusWeights::default(), tier: [1.0, 0.9, 0.7, 0.4, 0.1, 0.1], category: CategoryWeights::default() }
    }
}

impl ScoreWeights {
    pub fn f_status(&self, class: StatusClass) -> f64 {
        match class {
            StatusClass::ServerError => self.status.server_error,
            StatusClass::ClientError => self.status.client_error,
            StatusClass::Success => self.status.success,
        }
    }

    pub fn f_tier(&self, tier: TierLevel) -> f64 {
        self.tier[usize::from(tier.value())]
    }

    pub fn f_category(&self, category: Relevance) -> f64 {
        match category {
            Relevance::Direct => self.category.direct,
            Relevance::Indirect => self.category.indirect,
            Relevance::Supporting => self.category.supporting,
            Relevance::Unrelated => self.category.unrelated,
        }
    }
}

// ---- error detection ------------------------------------------------------

pub const ERROR_PATTERNS: [&str; 5] = ["error", "something went wrong", "try again", "unable to", "failed"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FindingMethod {
    Regex,
    Classifier,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorFinding {
    pub screen_id: String,
    pub at_ms: u64,
    pub method: FindingMethod,
    pub evidence: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorDetection {
    pub findings: Vec<ErrorFinding>,
    /// The classifier was unreachable; only regex findings are present.
    pub degraded: bool,
}

/// Second-phase detector for screens without error text.
pub trait ScreenClassifier: Send + Sync {
    /// `Some(evidence)` when the screen looks broken.
    fn classify(&self, screen: &ScreenState) -> Result<Option<String>, ClassifierError>;
}

/// Flags screens where an element the flow needs is not visible: the primary
/// action's element on step screens, the end-state assertion's elements on the
/// end screen.
#[derive(Debug, Clone, Default)]
pub struct MissingElementClassifier {
    required: BTreeMap<String, BTreeSet<String>>,
}

impl MissingElementClassifier {
    pub fn for_flow(flow: &FlowDefinition) -> Self {
        let mut required: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for step in &flow.steps {
            required.entry(step.screen.screen_id.clone()).or_default().insert(step.primary_action.element.clone());
        }
        let needed = flow.end_state_assertion.ground_truth_predicate.referenced_elements(true);
        required.entry(flow.end_screen.screen_id.clone()).or_default().extend(needed.into_iter().map(str::to_string));
        Self { required }
    }
}

impl ScreenClassifier for MissingElementClassifier {
    fn classify(&self, screen: &ScreenState) -> Result<Option<String>, ClassifierError> {
        let Some(required) = self.required.get(&screen.screen_id) else {
            return Ok(None);
        };
        let missing: Vec<&str> = screen
            .elements
            .iter()
            .filter(|e| required.contains(&e.element_id))
            .filter(|e| matches!(e.state, ElementState::Missing | ElementState::Placeholder))
            .map(|e| e.element_id.as_str())
            .collect();
        Ok((!missing.is_empty()).then(|| format!("required element not shown: {}", missing.join(", "))))
    }
}

fn error_regex() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| {
        let alternation = ERROR_PATTERNS.iter().map(|p| regex::escape(p)).collect::<Vec<_>>().join("|");
        Regex::new(&format!("(?i){alternation}")).expect("static pattern")
    })
}

/// Regex over each screen's text, then the classifier on screens without a hit.
/// Consecutive observations of the same screen at the same state are reported once.
pub fn detect_errors(_transitions: &[ScreenTransition], screens: &[ScreenState], classifier: &dyn ScreenClassifier) -> ErrorDetection {
    let mut out = ErrorDetection::default();
    let mut previous: Option<&ScreenState> = None;
    for screen in screens {
        let repeat = previous.is_some_and(|p| p.screen_id == screen.screen_id && p.elements == screen.elements);
        previous = Some(screen);
        if repeat {
            continue;
        }
        if let Some(m) = error_regex().find(&screen.text()) {
            out.findings.push(ErrorFinding {
                screen_id: screen.screen_id.clone(),
                at_ms: screen.rendered_at_ms,
                method: FindingMethod::Regex,
                evidence: m.as_str().to_string(),
            });
            continue;
        }
        if out.degraded {
            continue;
        }
        match classifier.classify(screen) {
            Ok(Some(evidence)) => out.findings.push(ErrorFinding {
                screen_id: screen.screen_id.clone(),
                at_ms: screen.rendered_at_ms,
                method: FindingMethod::Classifier,
                evidence,
            }),
            Ok(None) => {}
            Err(_) => out.degraded = true,
        }
    }
    out.findings.sort_by_key(|f| f.at_ms);
    out
}

// ---- baseline statistics --------------------------------------------------

pub const UNSEEN_PRIOR: f64 = 0.5;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatternCounts {
    pub failures: u64,
    pub total: u64,
}

impl PatternCounts {
    /// Laplace-smoothed failure rate.
    pub fn rate(self) -> f64 {
        (self.failures as f64 + 1.0) / (self.total as f64 + 2.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct PatternEntry {
    callee: String,
    endpoint: String,
    #[serde(flatten)]
    counts: PatternCounts,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "StatsDoc", into = "StatsDoc")]
pub struct BaselineStats {
    pub patterns: BTreeMap<(String, String), PatternCounts>,
    /// Passing baseline runs that contributed.
    pub runs_observed: usize,
}

#[derive(Serialize, Deserialize)]
struct StatsDoc {
    runs_observed: usize,
    patterns: Vec<PatternEntry>,
}

impl From<StatsDoc> for BaselineStats {
    fn from(d: StatsDoc) -> Self {
        Self {
            runs_observed: d.runs_observed,
            patterns: d.patterns.into_iter().map(|p| ((p.callee, p.endpoint), p.counts)).collect(),
        }
    }
}

impl From<BaselineStats> for StatsDoc {
    fn from(s: BaselineStats) -> Self {
        Self {
            runs_observed: s.runs_observed,
            patterns: s
                .patterns
                .into_iter()
                .map(|((callee, endpoint), counts)| PatternEntry { callee, endpoint, counts })
                .collect(),
        }
    }
}

impl BaselineStats {
    pub fn nfr(&self, callee: &str, endpoint: &str) -> f64 {
        self.patterns
            .get(&(callee.to_string(), endpoint.to_string()))
            .map_or(UNSEEN_PRIOR, |c| c.rate())
    }

    /// No passing baseline contributed; every rate is the prior.
    pub fn low_confidence(&self) -> bool {
        self.runs_observed == 0
    }

    pub fn merge(&mut self, other: &BaselineStats) {
        self.runs_observed += other.runs_observed;
        for (k, c) in &other.patterns {
            let e = self.patterns.entry(k.clone()).or_default();
            e.failures += c.failures;
            e.total += c.total;
        }
    }
}

/// Only passing runs contribute.
pub fn compute_baseline_stats<'a>(baselines: impl IntoIterator<Item = (&'a RunResult, &'a [RpcRecord])>) -> BaselineStats {
    let mut stats = BaselineStats::default();
    for (result, log) in baselines {
        if !result.verdict.is_pass() {
            continue;
        }
        stats.runs_observed += 1;
        for r in log {
            let c = stats.patterns.entry((r.callee.clone(), r.endpoint.clone())).or_default();
            c.total += 1;
            c.failures += u64::from(r.status_code.is_failure());
        }
    }
    stats
}

// ---- categorization -------------------------------------------------------

/// Relevance of an endpoint to a flow.
pub trait Categorizer: Send + Sync {
    fn categorize(&self, callee: &str, path: &str, flow_id: &str) -> Result<Relevance, ClassifierError>;
}

pub const UNRELATED_WORDS: [&str; 12] = [
    "ads", "analytics", "banner", "loyalty", "marketing", "pixel", "promo", "promotions", "referral", "referrals", "rewards", "survey",
];
pub const SUPPORTING_WORDS: [&str; 7] = ["auth", "config", "experiments", "flags", "notifications", "profile", "session"];

fn tokens(s: &str) -> impl Iterator<Item = String> + '_ {
    s.split(|c: char| !c.is_ascii_alphanumeric()).filter(|t| !t.is_empty()).map(str::to_lowercase)
}

/// Keyword rules over path tokens, used when no relevance labels are available.
#[derive(Debug, Clone, Default)]
pub struct KeywordCategorizer {
    keywords: BTreeMap<String, BTreeSet<String>>,
}

impl KeywordCategorizer {
    pub fn new<'a>(flows: impl IntoIterator<Item = &'a FlowDefinition>) -> Self {
        let keywords = flows
            .into_iter()
            .map(|f| {
                let words = tokens(&f.flow_id).chain(f.keywords.iter().flat_map(|k| tokens(k))).collect();
                (f.flow_id.clone(), words)
            })
            .collect();
        Self { keywords }
    }

    pub fn rule(&self, path: &str, flow_id: &str) -> Relevance {
        let flow_words: BTreeSet<String> = self.keywords.get(flow_id).cloned().unwrap_or_else(|| tokens(flow_id).collect());
        let path_words: Vec<String> = tokens(path).collect();
        if path_words.iter().any(|t| flow_words.contains(t)) {
            Relevance::Direct
        } else if path_words.iter().any(|t| UNRELATED_WORDS.contains(&t.as_str())) {
            Relevance::Unrelated
        } else if path_words.iter().any(|t| SUPPORTING_WORDS.contains(&t.as_str())) {
            Relevance::Supporting
        } else {
            Relevance::Indirect
        }
    }
}

impl Categorizer for KeywordCategorizer {
    fn categorize(&self, _callee: &str, path: &str, flow_id: &str) -> Result<Relevance, ClassifierError> {
        Ok(self.rule(path, flow_id))
    }
}

/// The topology's relevance labels; unlabeled endpoints fall back to keyword rules.
pub struct OracleCategorizer<'a> {
    pub topology: &'a Topology,
    pub fallback: KeywordCategorizer,
}

impl<'a> OracleCategorizer<'a> {
    pub fn new(topology: &'a Topology, fallback: KeywordCategorizer) -> Self {
        Self { topology, fallback }
    }
}

impl Categorizer for OracleCategorizer<'_> {
    fn categorize(&self, callee: &str, path: &str, flow_id: &str) -> Result<Relevance, ClassifierError> {
        let tagged = self
            .topology
            .service(callee)
            .and_then(|s| s.endpoint(path))
            .and_then(|e| e.relevance_tags.get(flow_id).copied());
        Ok(tagged.unwrap_or_else(|| self.fallback.rule(path, flow_id)))
    }
}

/// Falls back to `supporting` on failure and reports whether it did.
pub fn categorize_endpoint(categorizer: &dyn Categorizer, callee: &str, path: &str, flow_id: &str) -> (Relevance, bool) {
    match categorizer.categorize(callee, path, flow_id) {
        Ok(r) => (r, false),
        Err(_) => (Relevance::Supporting, true),
    }
}

// ---- scoring and ranking --------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreComponents {
    pub f_status: f64,
    pub one_minus_nfr: f64,
    pub f_tier: f64,
    pub f_category: f64,
}

impl ScoreComponents {
    pub fn product(&self) -> f64 {
        self.f_status * self.one_minus_nfr * self.f_tier * self.f_category
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredRequest {
    pub callee: String,
    pub endpoint: String,
    pub status: RpcStatus,
    pub start_ms: u64,
    pub tier: TierLevel,
    pub category: Relevance,
    pub score: f64,
    pub components: ScoreComponents,
}

impl ScoredRequest {
    pub fn status_class(&self) -> StatusClass {
        StatusClass::of(self.status)
    }
}

pub fn score_with_nfr(r: &RpcRecord, nfr: f64, tier: TierLevel, category: Relevance, weights: &ScoreWeights) -> ScoredRequest {
    let components = ScoreComponents {
        f_status: weights.f_status(StatusClass::of(r.status_code)),
        one_minus_nfr: 1.0 - nfr,
        f_tier: weights.f_tier(tier),
        f_category: weights.f_category(category),
    };
    ScoredRequest {
        callee: r.callee.clone(),
        endpoint: r.endpoint.clone(),
        status: r.status_code,
        start_ms: r.start_ms,
        tier,
        category,
        score: components.product(),
        components,
    }
}

pub fn score_request(r: &RpcRecord, stats: &BaselineStats, tier: TierLevel, category: Relevance, weights: &ScoreWeights) -> ScoredRequest {
    score_with_nfr(r, stats.nfr(&r.callee, &r.endpoint), tier, category, weights)
}

/// Higher score, then higher status weight, earlier start, callee, endpoint, status.
pub fn rank_order(a: &ScoredRequest, b: &ScoredRequest) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(b.components.f_status.total_cmp(&a.components.f_status))
        .then(a.start_ms.cmp(&b.start_ms))
        .then_with(|| a.callee.cmp(&b.callee))
        .then_with(|| a.endpoint.cmp(&b.endpoint))
        .then_with(|| a.status.cmp(&b.status))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CausalRanking {
    pub entries: Vec<ScoredRequest>,
    /// No error finding bounded the candidate window.
    pub inconclusive_context: bool,
    /// Some categories are fallbacks after a categorizer failure.
    pub categorization_degraded: bool,
    /// Entries were reordered by trace attribution.
    #[serde(default)]
    pub trace_attributed: bool,
}

impl CausalRanking {
    pub fn position(&self, callee: &str, endpoint: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.callee == callee && e.endpoint == endpoint)
    }

    /// One JSON object per line, ranks from 1.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for (i, e) in self.entries.iter().enumerate() {
            let line = serde_json::json!({
                "rank": i + 1,
                "callee": e.callee,
                "endpoint": e.endpoint,
                "status": e.status,
                "score": e.score,
                "f_status": e.components.f_status,
                "one_minus_nfr": e.components.one_minus_nfr,
                "f_tier": e.components.f_tier,
                "f_category": e.components.f_category,
            });
            out.push_str(&line.to_string());
            out.push('\n');
        }
        out
    }
}

/// Failed records that only relay a failure from a call they made: some failed
/// record in the same app, issued by this record's callee, lies inside its span.
pub fn propagated_failures(log: &[RpcRecord]) -> BTreeSet<usize> {
    log.iter()
        .enumerate()
        .filter(|(i, p)| {
            p.status_code.is_failure()
                && log.iter().enumerate().any(|(j, c)| {
                    j != *i
                        && c.status_code.is_failure()
                        && c.app_instance == p.app_instance
                        && c.caller == p.callee
                        && c.start_ms >= p.start_ms
                        && c.end_ms <= p.end_ms
                })
        })
        .map(|(i, _)| i)
        .collect()
}

pub struct RankInput<'a> {
    pub topology: &'a Topology,
    pub flow_id: &'a str,
    pub categorizer: &'a dyn Categorizer,
    pub weights: &'a ScoreWeights,
}

/// Candidates are the requests started by the first finding (all requests when
/// there is none), minus relayed failures, deduplicated per
/// `(callee, endpoint, status class)` keeping the best occurrence.
pub fn rank_causes(log: &[RpcRecord], findings: &[ErrorFinding], stats: &BaselineStats, input: &RankInput<'_>) -> CausalRanking {
    let cutoff = findings.iter().map(|f| f.at_ms).min();
    let relayed = propagated_failures(log);
    let mut degraded = false;
    let mut categories: BTreeMap<(&str, &str), Relevance> = BTreeMap::new();
    let mut best: BTreeMap<(String, String, StatusClass), ScoredRequest> = BTreeMap::new();
    for (i, r) in log.iter().enumerate() {
        if relayed.contains(&i) || cutoff.is_some_and(|c| r.start_ms > c) {
            continue;
        }
        let Some(service) = input.topology.service(&r.callee) else {
            continue;
        };
        let category = *categories.entry((&r.callee, &r.endpoint)).or_insert_with(|| {
            let (c, flagged) = categorize_endpoint(input.categorizer, &r.callee, &r.endpoint, input.flow_id);
            degraded |= flagged;
            c
        });
        let scored = score_request(r, stats, service.tier, category, input.weights);
        let key = (r.callee.clone(), r.endpoint.clone(), StatusClass::of(r.status_code));
        match best.get(&key) {
            Some(existing) if rank_order(existing, &scored) != Ordering::Greater => {}
            _ => {
                best.insert(key, scored);
            }
        }
    }
    let mut entries: Vec<ScoredRequest> = best.into_values().collect();
    entries.sort_by(rank_order);
    CausalRanking { entries, inconclusive_context: cutoff.is_none(), categorization_degraded: degraded, trace_attributed: false }
}

/// The innermost record that issued `log[i]`: same app, its callee is the
/// caller of `log[i]`, and its span contains `log[i]`'s span.
fn enclosing(log: &[RpcRecord], i: usize) -> Option<usize> {
    let r = &log[i];
    log.iter()
        .enumerate()
        .filter(|(j, p)| {
            *j != i
                && p.app_instance == r.app_instance
                && p.callee == r.caller
                && p.start_ms <= r.start_ms
                && r.end_ms <= p.end_ms
        })
        .max_by_key(|(j, p)| (p.start_ms, std::cmp::Reverse(p.end_ms), std::cmp::Reverse(*j)))
        .map(|(j, _)| j)
}

/// Failure patterns whose failure reached the app: the failed request was
/// issued by the app itself or by a request that failed too. A failure its
/// caller absorbed with a fallback is not implicated.
pub fn implicated_patterns(log: &[RpcRecord]) -> BTreeSet<(String, String, StatusClass)> {
    let relayed = propagated_failures(log);
    (0..log.len())
        .filter(|&i| log[i].status_code.is_failure() && !relayed.contains(&i))
        .filter(|&i| enclosing(log, i).is_none_or(|p| log[p].status_code.is_failure()))
        .map(|i| (log[i].callee.clone(), log[i].endpoint.clone(), StatusClass::of(log[i].status_code)))
        .collect()
}

/// Trace phase: moves implicated failures ahead of everything else, keeping
/// score order within each group.
pub fn attribute_with_traces(ranking: CausalRanking, log: &[RpcRecord]) -> CausalRanking {
    let implicated = implicated_patterns(log);
    let is_implicated = |e: &ScoredRequest| implicated.contains(&(e.callee.clone(), e.endpoint.clone(), e.status_class()));
    let (mut entries, rest): (Vec<_>, Vec<_>) = ranking.entries.into_iter().partition(|e| is_implicated(e));
    let trace_attributed = !entries.is_empty();
    entries.extend(rest);
    CausalRanking { entries, trace_attributed, ..ranking }
}

// ---- baseline comparison and tickets --------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineVerdict {
    ResilienceRisk,
    Environmental,
    Inconclusive,
}

impl BaselineVerdict {
    pub fn as_str(self) -> &'static str {
        match self {
            BaselineVerdict::ResilienceRisk => "resilience_risk",
            BaselineVerdict::Environmental => "environmental",
            BaselineVerdict::Inconclusive => "inconclusive",
        }
    }
}

/// `None` when the chaos run passed. A baseline that looped proves nothing either way.
pub fn compare_with_baseline(chaos: &RunResult, baseline: &RunResult) -> Result<Option<BaselineVerdict>, RcaError> {
    if chaos.flow_id != baseline.flow_id {
        return Err(RcaError::FlowMismatch { chaos: chaos.flow_id.clone(), baseline: baseline.flow_id.clone() });
    }
    Ok(match (chaos.verdict, baseline.verdict) {
        (Verdict::Pass, _) => None,
        (_, Verdict::Pass) => Some(BaselineVerdict::ResilienceRisk),
        (_, Verdict::Fail(FailReason::LoopAbort)) => Some(BaselineVerdict::Inconclusive),
        _ => Some(BaselineVerdict::Environmental),
    })
}

pub const TICKET_TOP_K: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TicketAction {
    /// File against the owner of the top cause.
    AssignOwner,
    NoAction,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ticket {
    pub run_id: String,
    pub flow_id: String,
    pub verdict: Verdict,
    pub comparison: BaselineVerdict,
    pub action: TicketAction,
    pub owner: Option<String>,
    pub top_causes: Vec<ScoredRequest>,
    pub findings: Vec<ErrorFinding>,
    pub transitions: Vec<String>,
    pub narrative: String,
}

pub struct TicketContext<'a> {
    pub run_id: &'a str,
    pub result: &'a RunResult,
    pub findings: &'a [ErrorFinding],
}

pub fn emit_ticket(ctx: &TicketContext<'_>, ranking: &CausalRanking, comparison: BaselineVerdict) -> Ticket {
    let comparison = if ranking.entries.is_empty() && !ctx.result.verdict.is_pass() {
        BaselineVerdict::Inconclusive
    } else {
        comparison
    };
    let top_causes: Vec<ScoredRequest> = ranking.entries.iter().take(TICKET_TOP_K).cloned().collect();
    let (action, owner) = match comparison {
        BaselineVerdict::ResilienceRisk => (TicketAction::AssignOwner, top_causes.first().map(|c| c.callee.clone())),
        BaselineVerdict::Environmental => (TicketAction::NoAction, None),
        BaselineVerdict::Inconclusive => (TicketAction::Inconclusive, None),
    };
    let narrative = match (comparison, top_causes.first()) {
        (BaselineVerdict::ResilienceRisk, Some(top)) => format!(
            "The flow failed under fault injection while its control run passed. The most likely cause is {} {} returning {} (score {:.4}).",
            top.callee, top.endpoint, top.status, top.score
        ),
        (BaselineVerdict::Environmental, _) => {
            "The control run failed as well, so the failure is not attributed to the injected faults.".to_string()
        }
        _ => "No candidate request could be tied to the failure.".to_string(),
    };
    Ticket {
        run_id: ctx.run_id.to_string(),
        flow_id: ctx.result.flow_id.clone(),
        verdict: ctx.result.verdict,
        comparison,
        action,
        owner,
        top_causes,
        findings: ctx.findings.to_vec(),
        transitions: ctx
            .result
            .transitions
            .iter()
            .map(|t| format!("{} --{}--> {} @{}ms", t.from_screen, t.action_taken, t.to_screen, t.at_ms))
            .collect(),
        narrative,
    }
}

impl Ticket {
    pub fn to_markdown(&self) -> String {
        let mut md = String::new();
        let _ = writeln!(md, "# {} `{}`\n", self.comparison.as_str(), self.flow_id);
        let _ = writeln!(md, "- run: `{}`", self.run_id);
        let _ = writeln!(md, "- verdict: {}", self.verdict);
        let action = match self.action {
            TicketAction::AssignOwner => format!("assign to `{}`", self.owner.as_deref().unwrap_or("unknown")),
            TicketAction::NoAction => "no action".to_string(),
            TicketAction::Inconclusive => "inconclusive".to_string(),
        };
        let _ = writeln!(md, "- action: {action}\n");
        let _ = writeln!(md, "## Summary\n\n{}\n", self.narrative);
        let _ = writeln!(md, "## Likely causes\n");
        if self.top_causes.is_empty() {
            let _ = writeln!(md, "None.\n");
        } else {
            let _ = writeln!(md, "| rank | callee | endpoint | status | score | F(status) | 1-nfr | F(tier) | F(category) |");
            let _ = writeln!(md, "|---|---|---|---|---|---|---|---|---|");
            for (i, c) in self.top_causes.iter().enumerate() {
                let flag = if i == 0 && self.action == TicketAction::AssignOwner { " **top**" } else { "" };
                let _ = writeln!(
                    md,
                    "| {}{} | {} | {} | {} | {:.4} | {} | {:.4} | {} | {} |",
                    i + 1,
                    flag,
                    c.callee,
                    c.endpoint,
                    c.status,
                    c.score,
                    c.components.f_status,
                    c.components.one_minus_nfr,
                    c.components.f_tier,
                    c.components.f_category
                );
            }
            md.push('\n');
        }
        let _ = writeln!(md, "## Error findings\n");
        if self.findings.is_empty() {
            let _ = writeln!(md, "None.\n");
        } else {
            for f in &self.findings {
                let method = match f.method {
                    FindingMethod::Regex => "regex",
                    FindingMethod::Classifier => "classifier",
                };
                let _ = writeln!(md, "- `{}` at {} ms ({method}): {}", f.screen_id, f.at_ms, f.evidence);
            }
            md.push('\n');
        }
        let _ = writeln!(md, "## Transitions\n");
        for (i, t) in self.transitions.iter().enumerate() {
            let _ = writeln!(md, "{}. {t}", i + 1);
        }
        md
    }
}
