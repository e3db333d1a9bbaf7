//! Adaptive execution of a flow against screens rendered from backend responses.
//!
//! Each step issues one backend request through the mesh, renders the step's
//! screen from the response, and asks a [`Policy`] for a ranked list of actions.
//! A successful primary or alternate action advances to the next step; the last
//! step leads to the flow's end screen, where the end-state assertion decides the
//! verdict.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::havoc::{FaultSpec, HavocHeaders};
use crate::simmesh::{self, merge_app_logs, AppInstance, RequestContext, ResponsePayload, RpcRecord, SimError, VirtualClock};
use crate::topology::{MarkerEffect, Topology};

pub const WAIT: &str = "wait";
pub const BACK: &str = "back";
pub const RETRY: &str = "retry";

pub const ERROR_SCREEN_ID: &str = "error";
pub const ERROR_TEXT: &str = "Something went wrong. Please try again.";
pub const PLACEHOLDER_TEXT: &str = "Calculating...";

pub const CYCLE_WINDOW: usize = 12;
pub const CYCLE_REPEATS: usize = 3;
/// Wait granted when nothing on screen is pending.
pub const WAIT_TICK_MS: u64 = 1_000;

#[derive(Debug, Error)]
pub enum CrawlError {
    #[error("flow parse error: {0}")]
    Parse(String),
    #[error("invalid flow `{flow}`: {reason}")]
    Invalid { flow: String, reason: String },
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionSpec {
    pub id: String,
    pub element: String,
    #[serde(default)]
    pub extra_cost_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScreenSpec {
    pub screen_id: String,
    #[serde(default)]
    pub app: AppInstance,
    /// Topology entry point whose response backs this screen.
    pub entry: String,
    pub elements: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepSpec {
    pub goal: String,
    #[serde(flatten)]
    pub screen: ScreenSpec,
    pub primary_action: ActionSpec,
    #[serde(default)]
    pub alternate_actions: Vec<ActionSpec>,
    /// Ground-truth best action for precision scoring; the primary action when unset.
    #[serde(default)]
    pub optimal_action: Option<String>,
}

impl StepSpec {
    pub fn optimal(&self) -> &str {
        self.optimal_action.as_deref().unwrap_or(&self.primary_action.id)
    }

    fn tap(&self, id: &str) -> Option<&ActionSpec> {
        std::iter::once(&self.primary_action)
            .chain(&self.alternate_actions)
            .find(|a| a.id == id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Predicate {
    Present(String),
    Absent(String),
    TextContains(String),
    All(Vec<Predicate>),
    Any(Vec<Predicate>),
    Not(Box<Predicate>),
}

impl Predicate {
    /// True when some screen shows `id` as present (or, for `Absent`, none does).
    pub fn eval(&self, screens: &[ScreenState]) -> bool {
        match self {
            Predicate::Present(id) => screens.iter().any(|s| s.is_present(id)),
            Predicate::Absent(id) => !screens.iter().any(|s| s.is_present(id)),
            Predicate::TextContains(t) => {
                let t = t.to_lowercase();
                screens.iter().any(|s| s.text().to_lowercase().contains(&t))
            }
            Predicate::All(ps) => ps.iter().all(|p| p.eval(screens)),
            Predicate::Any(ps) => ps.iter().any(|p| p.eval(screens)),
            Predicate::Not(p) => !p.eval(screens),
        }
    }

    /// Element ids the predicate mentions; `positive` keeps only those it needs visible.
    pub fn referenced_elements(&self, positive: bool) -> Vec<&str> {
        let mut out = Vec::new();
        self.collect(positive, &mut out);
        out
    }

    fn collect<'a>(&'a self, positive: bool, out: &mut Vec<&'a str>) {
        match self {
            Predicate::Present(id) if positive => out.push(id),
            Predicate::Absent(id) if !positive => out.push(id),
            Predicate::Present(_) | Predicate::Absent(_) | Predicate::TextContains(_) => {}
            Predicate::All(ps) | Predicate::Any(ps) => ps.iter().for_each(|p| p.collect(positive, out)),
            Predicate::Not(p) => p.collect(!positive, out),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssertionTarget {
    EndState,
    Mosaic,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assertion {
    pub prompt: String,
    pub target: AssertionTarget,
    pub ground_truth_predicate: Predicate,
}

impl Assertion {
    /// The screens this assertion looks at.
    pub fn view<'a>(&self, screens: &'a [ScreenState]) -> &'a [ScreenState] {
        match self.target {
            AssertionTarget::EndState => screens.last().map(std::slice::from_ref).unwrap_or(&[]),
            AssertionTarget::Mosaic => screens,
        }
    }
}

fn default_timeout() -> u64 {
    300_000
}
fn default_wait() -> u64 {
    5_000
}
fn default_action_cost() -> u64 {
    2_000
}
fn default_max_actions() -> usize {
    60
}
fn default_max_retries() -> u32 {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowDefinition {
    pub flow_id: String,
    /// Words that mark an endpoint path as directly relevant to this flow.
    #[serde(default)]
    pub keywords: Vec<String>,
    pub steps: Vec<StepSpec>,
    pub end_screen: ScreenSpec,
    pub end_state_assertion: Assertion,
    #[serde(default)]
    pub mid_state_assertions: Vec<Assertion>,
    #[serde(default)]
    pub fault_configuration: Vec<FaultSpec>,
    #[serde(default = "default_timeout")]
    pub overall_timeout_ms: u64,
    #[serde(default = "default_wait")]
    pub per_element_wait_ms: u64,
    #[serde(default = "default_action_cost")]
    pub action_cost_ms: u64,
    #[serde(default = "default_max_actions")]
    pub max_actions: usize,
    /// Consecutive failed renders of one screen tolerated before giving up.
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
}

impl FlowDefinition {
    pub fn validate(&self) -> Result<(), CrawlError> {
        let invalid = |reason: String| CrawlError::Invalid { flow: self.flow_id.clone(), reason };
        if self.steps.is_empty() {
            return Err(invalid("flow has no steps".into()));
        }
        if self.max_actions == 0 {
            return Err(invalid("max_actions must be positive".into()));
        }
        for step in &self.steps {
            for a in std::iter::once(&step.primary_action).chain(&step.alternate_actions) {
                if !step.screen.elements.contains(&a.element) {
                    return Err(invalid(format!(
                        "action `{}` on `{}` uses unknown element `{}`",
                        a.id, step.screen.screen_id, a.element
                    )));
                }
                if [WAIT, BACK, RETRY].contains(&a.id.as_str()) {
                    return Err(invalid(format!("action id `{}` is reserved", a.id)));
                }
            }
        }
        let p = &self.end_state_assertion.ground_truth_predicate;
        let mut refs = p.referenced_elements(true);
        refs.extend(p.referenced_elements(false));
        if let Some(missing) = refs.iter().find(|r| !self.end_screen.elements.iter().any(|e| e == *r)) {
            return Err(invalid(format!("end-state assertion references `{missing}`, not on the end screen")));
        }
        Ok(())
    }

    pub fn screens(&self) -> impl Iterator<Item = &ScreenSpec> {
        self.steps.iter().map(|s| &s.screen).chain(std::iter::once(&self.end_screen))
    }

    pub fn apps(&self) -> BTreeSet<AppInstance> {
        self.screens().map(|s| s.app).collect()
    }

    pub fn entries(&self) -> impl Iterator<Item = &str> {
        self.screens().map(|s| s.entry.as_str())
    }

    pub fn screen(&self, index: usize) -> &ScreenSpec {
        self.steps.get(index).map_or(&self.end_screen, |s| &s.screen)
    }
}

pub fn load_flow(source: &str) -> Result<FlowDefinition, CrawlError> {
    let flow: FlowDefinition = toml::from_str(source).map_err(|e| CrawlError::Parse(e.to_string()))?;
    flow.validate()?;
    Ok(flow)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElementState {
    Present,
    Placeholder,
    Delayed { until_ms: u64 },
    Missing,
    ErrorText(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScreenElement {
    pub element_id: String,
    pub state: ElementState,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScreenState {
    pub screen_id: String,
    pub elements: Vec<ScreenElement>,
    pub rendered_at_ms: u64,
}

impl ScreenState {
    pub fn error(rendered_at_ms: u64) -> Self {
        Self {
            screen_id: ERROR_SCREEN_ID.to_string(),
            elements: vec![
                ScreenElement { element_id: "error_message".into(), state: ElementState::ErrorText(ERROR_TEXT.into()) },
                ScreenElement { element_id: "retry_button".into(), state: ElementState::Present },
            ],
            rendered_at_ms,
        }
    }

    pub fn is_error(&self) -> bool {
        self.screen_id == ERROR_SCREEN_ID
    }

    pub fn element(&self, id: &str) -> Option<&ElementState> {
        self.elements.iter().find(|e| e.element_id == id).map(|e| &e.state)
    }

    pub fn is_present(&self, id: &str) -> bool {
        matches!(self.element(id), Some(ElementState::Present))
    }

    /// Visible text: error messages and placeholder labels.
    pub fn text(&self) -> String {
        let parts: Vec<&str> = self
            .elements
            .iter()
            .filter_map(|e| match &e.state {
                ElementState::ErrorText(t) => Some(t.as_str()),
                ElementState::Placeholder => Some(PLACEHOLDER_TEXT),
                _ => None,
            })
            .collect();
        parts.join("\n")
    }

    /// The same screen observed at `now_ms`: delayed elements that are due become present.
    pub fn refreshed(&self, now_ms: u64) -> Self {
        let mut out = self.clone();
        out.rendered_at_ms = now_ms;
        for e in &mut out.elements {
            if let ElementState::Delayed { until_ms } = e.state {
                if until_ms <= now_ms {
                    e.state = ElementState::Present;
                }
            }
        }
        out
    }

    pub fn pending_until(&self, id: &str) -> Option<u64> {
        match self.element(id) {
            Some(ElementState::Delayed { until_ms }) => Some(*until_ms),
            _ => None,
        }
    }
}

/// Renders `screen` from the backing response. Failed responses render the error screen.
pub fn render_screen(screen: &ScreenSpec, payload: &ResponsePayload, clock: &VirtualClock) -> ScreenState {
    let now = clock.now();
    if payload.status_code.is_failure() {
        return ScreenState::error(now);
    }
    let effects: BTreeMap<&str, MarkerEffect> = payload
        .degradation_markers
        .iter()
        .map(|m| (m.element.as_str(), m.effect))
        .collect();
    let elements = screen
        .elements
        .iter()
        .map(|id| {
            let state = match effects.get(id.as_str()) {
                None => ElementState::Present,
                Some(MarkerEffect::Missing) => ElementState::Missing,
                Some(MarkerEffect::Placeholder) => ElementState::Placeholder,
                Some(MarkerEffect::Delayed(0)) => ElementState::Present,
                Some(MarkerEffect::Delayed(ms)) => ElementState::Delayed { until_ms: now + ms },
            };
            ScreenElement { element_id: id.clone(), state }
        })
        .collect();
    ScreenState { screen_id: screen.screen_id.clone(), elements, rendered_at_ms: now }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScreenTransition {
    pub from_screen: String,
    pub action_taken: String,
    pub to_screen: String,
    pub at_ms: u64,
    pub policy_reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyDecision {
    pub ranked_actions: Vec<String>,
    pub reason: String,
}

impl PolicyDecision {
    /// Drops duplicates (first occurrence wins); an empty ranking becomes `[retry]`.
    pub fn new(ranked: Vec<String>, reason: impl Into<String>) -> Self {
        let mut seen = BTreeSet::new();
        let mut ranked_actions: Vec<String> = ranked.into_iter().filter(|a| seen.insert(a.clone())).collect();
        if ranked_actions.is_empty() {
            ranked_actions.push(RETRY.to_string());
        }
        Self { ranked_actions, reason: reason.into() }
    }

    pub fn chosen(&self) -> &str {
        &self.ranked_actions[0]
    }
}

/// What the policy is trying to achieve on the current screen.
#[derive(Debug, Clone, Copy)]
pub struct Goal<'a> {
    pub step: &'a StepSpec,
    pub wait_budget_ms: u64,
}

pub trait Policy: Send + Sync {
    fn select(&self, screen: &ScreenState, goal: &Goal<'_>, history: &[ScreenTransition]) -> PolicyDecision;
}

pub fn select_action(
    policy: &dyn Policy,
    screen: &ScreenState,
    goal: &Goal<'_>,
    history: &[ScreenTransition],
) -> PolicyDecision {
    let d = policy.select(screen, goal, history);
    PolicyDecision::new(d.ranked_actions, d.reason)
}

/// Time already spent waiting on this screen: the span covered by the trailing
/// run of `wait` transitions out of it.
pub fn waited_ms(screen: &ScreenState, history: &[ScreenTransition]) -> u64 {
    let first = history
        .iter()
        .rev()
        .take_while(|t| t.action_taken == WAIT && t.from_screen == screen.screen_id)
        .last();
    first.map_or(0, |t| screen.rendered_at_ms.saturating_sub(t.at_ms))
}

/// Primary action if actionable; otherwise wait while the element is pending and
/// budget remains; otherwise alternates whose element is present; then back/retry.
#[derive(Debug, Clone, Copy, Default)]
pub struct DefaultPolicy;

impl Policy for DefaultPolicy {
    fn select(&self, screen: &ScreenState, goal: &Goal<'_>, history: &[ScreenTransition]) -> PolicyDecision {
        if screen.is_error() {
            return PolicyDecision::new(vec![RETRY.into(), BACK.into()], "error screen shown; retrying");
        }
        let step = goal.step;
        let alternates = step
            .alternate_actions
            .iter()
            .filter(|a| screen.is_present(&a.element))
            .map(|a| a.id.clone());
        let tail = [BACK.to_string(), RETRY.to_string()];
        let primary = &step.primary_action;
        match screen.element(&primary.element) {
            Some(ElementState::Present) => PolicyDecision::new(
                std::iter::once(primary.id.clone()).chain(alternates).chain(tail).collect(),
                format!("`{}` is visible", primary.element),
            ),
            Some(ElementState::Delayed { .. } | ElementState::Placeholder)
                if waited_ms(screen, history) < goal.wait_budget_ms =>
            {
                PolicyDecision::new(
                    [WAIT.to_string(), primary.id.clone()].into_iter().chain(alternates).chain(tail).collect(),
                    format!("`{}` is still loading; waiting", primary.element),
                )
            }
            _ => PolicyDecision::new(
                alternates.chain(tail).collect(),
                format!("`{}` is unavailable; trying another route", primary.element),
            ),
        }
    }
}

/// Always picks an action that does nothing. Exercises cycle handling.
#[derive(Debug, Clone, Copy, Default)]
pub struct StuckPolicy;

impl Policy for StuckPolicy {
    fn select(&self, _: &ScreenState, _: &Goal<'_>, _: &[ScreenTransition]) -> PolicyDecision {
        PolicyDecision::new(vec!["tap_nowhere".into()], "convinced the step is not done yet")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum CycleCheck {
    NoCycle,
    Cycle { screen_id: String, action: String, repeats: usize },
}

/// A cycle is a `(screen, action)` pair seen at least [`CYCLE_REPEATS`] times among
/// the last `window` transitions, counting from the most recent transition that
/// reached a screen not seen before in `history`.
pub fn detect_cycle(history: &[ScreenTransition], window: usize) -> CycleCheck {
    let window = window.max(2);
    let mut seen = BTreeSet::new();
    let mut last_progress = 0;
    for (i, t) in history.iter().enumerate() {
        if i == 0 {
            seen.insert(t.from_screen.as_str());
        }
        if t.to_screen != t.from_screen && seen.insert(t.to_screen.as_str()) {
            last_progress = i;
        }
    }
    let start = last_progress.max(history.len().saturating_sub(window));
    let mut counts: BTreeMap<(&str, &str), usize> = BTreeMap::new();
    for t in &history[start..] {
        *counts.entry((t.from_screen.as_str(), t.action_taken.as_str())).or_default() += 1;
    }
    counts
        .into_iter()
        .filter(|(_, n)| *n >= CYCLE_REPEATS)
        .max_by_key(|(_, n)| *n)
        .map_or(CycleCheck::NoCycle, |((s, a), n)| CycleCheck::Cycle {
            screen_id: s.to_string(),
            action: a.to_string(),
            repeats: n,
        })
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("classifier unavailable: {0}")]
pub struct ClassifierError(pub String);

/// Yes/no questions about screen content.
pub trait VqaClassifier: Send + Sync {
    fn answer(&self, prompt: &str, screens: &[ScreenState]) -> Result<bool, ClassifierError>;
}

/// Reads the question, finds the on-screen elements it mentions, and answers yes
/// when at least one is mentioned and every mentioned one is visible.
#[derive(Debug, Clone, Copy, Default)]
pub struct ScreenReader;

fn word_set(s: &str) -> BTreeSet<String> {
    s.to_lowercase()
        .split(|c: char| !c.is_ascii_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

impl VqaClassifier for ScreenReader {
    fn answer(&self, prompt: &str, screens: &[ScreenState]) -> Result<bool, ClassifierError> {
        let words = word_set(prompt);
        let mut mentioned: BTreeMap<&str, bool> = BTreeMap::new();
        for screen in screens {
            for e in &screen.elements {
                let id_words = word_set(&e.element_id);
                if !id_words.is_empty() && id_words.is_subset(&words) {
                    let visible = e.state == ElementState::Present;
                    *mentioned.entry(&e.element_id).or_insert(false) |= visible;
                }
            }
        }
        Ok(!mentioned.is_empty() && mentioned.values().all(|v| *v))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("classifier abstained: {reason}")]
pub struct Abstain {
    pub reason: String,
    pub ground_truth: bool,
}

/// Classifier answer and ground truth for one assertion.
pub fn evaluate_assertion(
    classifier: &dyn VqaClassifier,
    assertion: &Assertion,
    screens: &[ScreenState],
) -> Result<(bool, bool), Abstain> {
    let view = assertion.view(screens);
    let truth = assertion.ground_truth_predicate.eval(view);
    match classifier.answer(&assertion.prompt, view) {
        Ok(answer) => Ok((answer, truth)),
        Err(e) => Err(Abstain { reason: e.0, ground_truth: truth }),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailReason {
    EndStateNotReached,
    AssertionFailed,
    Timeout,
    LoopAbort,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail(FailReason),
}

impl Verdict {
    pub fn is_pass(self) -> bool {
        self == Verdict::Pass
    }
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Verdict::Pass => f.write_str("pass"),
            Verdict::Fail(r) => {
                let r = serde_json::to_value(r).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
                write!(f, "fail({r})")
            }
        }
    }
}

/// One policy decision on a step screen, scored against the step's optimal action.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub screen_id: String,
    pub step_index: usize,
    pub ranked_actions: Vec<String>,
    pub chosen: String,
    pub optimal: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssertionResult {
    pub prompt: String,
    pub target: AssertionTarget,
    /// `None` when the classifier abstained.
    pub answer: Option<bool>,
    pub ground_truth: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunResult {
    pub flow_id: String,
    pub verdict: Verdict,
    pub end_state_reached: bool,
    pub transitions: Vec<ScreenTransition>,
    pub screens_mosaic: Vec<ScreenState>,
    pub action_count: usize,
    pub duration_ms: u64,
    pub decisions: Vec<DecisionRecord>,
    pub assertions: Vec<AssertionResult>,
}

impl RunResult {
    /// Transitions chain: the target of each is the source of the next.
    pub fn transitions_chain(&self) -> bool {
        self.transitions.windows(2).all(|w| w[0].to_screen == w[1].from_screen)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlowRun {
    pub result: RunResult,
    /// Network activity of every app instance in the flow, merged by time.
    pub log: Vec<RpcRecord>,
}

/// Runs `flow` with the default policy and classifier.
pub fn run_flow(
    flow: &FlowDefinition,
    topology: &Topology,
    headers: &HavocHeaders,
    policy: &dyn Policy,
    seed: u64,
) -> Result<FlowRun, CrawlError> {
    Crawler::new(topology, flow).policy(policy).run(headers, seed)
}

pub struct Crawler<'a> {
    topology: &'a Topology,
    flow: &'a FlowDefinition,
    policy: &'a dyn Policy,
    classifier: &'a dyn VqaClassifier,
}

impl<'a> Crawler<'a> {
    pub fn new(topology: &'a Topology, flow: &'a FlowDefinition) -> Self {
        Self { topology, flow, policy: &DefaultPolicy, classifier: &ScreenReader }
    }

    pub fn policy(mut self, policy: &'a dyn Policy) -> Self {
        self.policy = policy;
        self
    }

    pub fn classifier(mut self, classifier: &'a dyn VqaClassifier) -> Self {
        self.classifier = classifier;
        self
    }

    pub fn run(&self, headers: &HavocHeaders, seed: u64) -> Result<FlowRun, CrawlError> {
        self.flow.validate()?;
        for entry in self.flow.entries() {
            if !self.topology.entry_points.contains_key(entry) {
                return Err(SimError::UnknownEntry(entry.to_string()).into());
            }
        }
        let mut run = RunState {
            crawler: self,
            headers,
            seed,
            clock: VirtualClock::new(0),
            request_seq: 0,
            logs: BTreeMap::new(),
            failures: BTreeMap::new(),
        };
        run.execute()
    }
}

struct RunState<'c, 'a> {
    crawler: &'c Crawler<'a>,
    headers: &'c HavocHeaders,
    seed: u64,
    clock: VirtualClock,
    request_seq: u64,
    logs: BTreeMap<AppInstance, Vec<RpcRecord>>,
    /// step index -> consecutive failed renders
    failures: BTreeMap<usize, u32>,
}

impl RunState<'_, '_> {
    fn request(&mut self, step: usize) -> Result<ScreenState, CrawlError> {
        let spec = self.crawler.flow.screen(step);
        let ctx = RequestContext { seed: self.seed, request_seq: self.request_seq, start_ms: self.clock.now(), app: spec.app };
        self.request_seq += 1;
        let ex = simmesh::execute_at(self.crawler.topology, &spec.entry, self.headers, ctx)?;
        self.clock.advance_to(ex.trace.root.end_ms);
        self.logs.entry(spec.app).or_default().extend(ex.log);
        let screen = render_screen(spec, &ex.payload, &self.clock);
        if screen.is_error() {
            *self.failures.entry(step).or_default() += 1;
        } else {
            self.failures.remove(&step);
        }
        Ok(screen)
    }

    fn wait_for(&self, screen: &ScreenState, step: &StepSpec, history: &[ScreenTransition]) -> u64 {
        let remaining = self.crawler.flow.per_element_wait_ms.saturating_sub(waited_ms(screen, history));
        match screen.pending_until(&step.primary_action.element) {
            Some(until) => until.saturating_sub(self.clock.now()).min(remaining).max(1),
            None if remaining > 0 => remaining,
            None => WAIT_TICK_MS,
        }
    }

    fn execute(&mut self) -> Result<FlowRun, CrawlError> {
        let flow = self.crawler.flow;
        let last_step = flow.steps.len() - 1;
        let mut step = 0usize;
        let mut current = self.request(step)?;
        let mut transitions: Vec<ScreenTransition> = Vec::new();
        let mut mosaic = vec![current.clone()];
        let mut decisions = Vec::new();
        let mut action_count = 0usize;
        let mut recovery_from: Option<usize> = None;
        let mut force_alternative = false;
        let mut end_state_reached = false;

        let verdict = loop {
            if self.clock.now() > flow.overall_timeout_ms {
                break Verdict::Fail(FailReason::Timeout);
            }
            let on_end = step > last_step && !current.is_error();
            if on_end {
                end_state_reached = true;
                if let Some(until) = current.elements.iter().filter_map(|e| match e.state {
                    ElementState::Delayed { until_ms } => Some(until_ms),
                    _ => None,
                }).max() {
                    let at = self.clock.now();
                    let target = until.min(at + flow.per_element_wait_ms);
                    self.clock.advance_to(target);
                    let next = current.refreshed(self.clock.now());
                    transitions.push(ScreenTransition {
                        from_screen: current.screen_id.clone(),
                        action_taken: WAIT.into(),
                        to_screen: next.screen_id.clone(),
                        at_ms: at,
                        policy_reason: "end screen still loading".into(),
                    });
                    action_count += 1;
                    mosaic.push(next);
                    if self.clock.now() > flow.overall_timeout_ms {
                        break Verdict::Fail(FailReason::Timeout);
                    }
                }
                let ok = match evaluate_assertion(self.crawler.classifier, &flow.end_state_assertion, &mosaic) {
                    Ok((answer, _)) => answer,
                    Err(_) => evaluate_assertion(&ScreenReader, &flow.end_state_assertion, &mosaic)
                        .map(|(a, _)| a)
                        .unwrap_or(false),
                };
                break if ok { Verdict::Pass } else { Verdict::Fail(FailReason::AssertionFailed) };
            }
            if current.is_error() && self.failures.get(&step).copied().unwrap_or(0) > flow.max_retries {
                break Verdict::Fail(FailReason::EndStateNotReached);
            }
            if action_count >= flow.max_actions {
                break Verdict::Fail(FailReason::EndStateNotReached);
            }

            let step_spec = &flow.steps[step.min(last_step)];
            let goal = Goal { step: step_spec, wait_budget_ms: flow.per_element_wait_ms };
            let decision = select_action(self.crawler.policy, &current, &goal, &transitions);
            let (chosen, reason) = if std::mem::take(&mut force_alternative) {
                let alt = decision.ranked_actions.get(1).map_or(BACK, String::as_str).to_string();
                (alt, format!("loop detected; forcing alternative to `{}`", decision.chosen()))
            } else {
                (decision.chosen().to_string(), decision.reason.clone())
            };
            if step <= last_step && !current.is_error() {
                decisions.push(DecisionRecord {
                    screen_id: current.screen_id.clone(),
                    step_index: step,
                    ranked_actions: decision.ranked_actions.clone(),
                    chosen: chosen.clone(),
                    optimal: step_spec.optimal().to_string(),
                });
            }

            let at = self.clock.now();
            let next = match chosen.as_str() {
                WAIT => {
                    let ms = self.wait_for(&current, step_spec, &transitions);
                    self.clock.advance(ms);
                    current.refreshed(self.clock.now())
                }
                BACK => {
                    self.clock.advance(flow.action_cost_ms);
                    step = step.saturating_sub(1);
                    self.request(step)?
                }
                RETRY => {
                    self.clock.advance(flow.action_cost_ms);
                    self.request(step)?
                }
                id => match step_spec.tap(id) {
                    Some(action) if !current.is_error() && step <= last_step && current.is_present(&action.element) => {
                        self.clock.advance(flow.action_cost_ms + action.extra_cost_ms);
                        step += 1;
                        self.request(step)?
                    }
                    _ => {
                        self.clock.advance(flow.action_cost_ms);
                        current.refreshed(self.clock.now())
                    }
                },
            };
            transitions.push(ScreenTransition {
                from_screen: current.screen_id.clone(),
                action_taken: chosen,
                to_screen: next.screen_id.clone(),
                at_ms: at,
                policy_reason: reason,
            });
            action_count += 1;
            mosaic.push(next.clone());
            current = next;

            let window = &transitions[recovery_from.unwrap_or(0)..];
            if let CycleCheck::Cycle { .. } = detect_cycle(window, CYCLE_WINDOW) {
                if recovery_from.is_some() {
                    break Verdict::Fail(FailReason::LoopAbort);
                }
                recovery_from = Some(transitions.len());
                force_alternative = true;
            }
        };

        let mut assertions = Vec::new();
        for a in std::iter::once(&flow.end_state_assertion).chain(&flow.mid_state_assertions) {
            let (answer, ground_truth) = match evaluate_assertion(self.crawler.classifier, a, &mosaic) {
                Ok((ans, truth)) => (Some(ans), truth),
                Err(abstain) => (None, abstain.ground_truth),
            };
            assertions.push(AssertionResult { prompt: a.prompt.clone(), target: a.target, answer, ground_truth });
        }

        let log = merge_app_logs(std::mem::take(&mut self.logs).into_iter().collect())?;
        Ok(FlowRun {
            result: RunResult {
                flow_id: flow.flow_id.clone(),
                verdict,
                end_state_reached,
                transitions,
                screens_mosaic: mosaic,
                action_count,
                duration_ms: self.clock.now().min(flow.overall_timeout_ms),
                decisions,
                assertions,
            },
            log,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::DegradationMarker;

    fn step(screen: &str, elements: &[&str], primary: (&str, &str), alts: &[(&str, &str)]) -> StepSpec {
        StepSpec {
            goal: format!("get past {screen}"),
            screen: ScreenSpec {
                screen_id: screen.into(),
                app: AppInstance::Rider,
                entry: "e".into(),
                elements: elements.iter().map(|s| s.to_string()).collect(),
            },
            primary_action: ActionSpec { id: primary.0.into(), element: primary.1.into(), extra_cost_ms: 0 },
            alternate_actions: alts
                .iter()
                .map(|(id, el)| ActionSpec { id: id.to_string(), element: el.to_string(), extra_cost_ms: 0 })
                .collect(),
            optimal_action: None,
        }
    }

    fn payload(markers: &[&str]) -> ResponsePayload {
        ResponsePayload {
            status_code: simmesh::RpcStatus::OK,
            degradation_markers: markers.iter().map(|m| m.parse::<DegradationMarker>().unwrap()).collect(),
        }
    }

    fn tr(from: &str, action: &str, to: &str, at: u64) -> ScreenTransition {
        ScreenTransition { from_screen: from.into(), action_taken: action.into(), to_screen: to.into(), at_ms: at, policy_reason: String::new() }
    }

    #[test]
    fn render_examples() {
        let s = step("home", &["discount_banner", "where_to"], ("tap", "where_to"), &[]);
        let clock = VirtualClock::new(100);
        let clean = render_screen(&s.screen, &payload(&[]), &clock);
        assert!(clean.elements.iter().all(|e| e.state == ElementState::Present));

        let degraded = render_screen(&s.screen, &payload(&["discount_banner:missing"]), &clock);
        assert_eq!(degraded.element("discount_banner"), Some(&ElementState::Missing));
        assert_eq!(degraded.element("where_to"), Some(&ElementState::Present));

        let delayed = render_screen(&s.screen, &payload(&["where_to:delayed(50)"]), &clock);
        assert_eq!(delayed.pending_until("where_to"), Some(150));
        assert!(delayed.refreshed(150).is_present("where_to"));

        let failed = render_screen(&s.screen, &ResponsePayload::failed(simmesh::RpcStatus::Code(500)), &clock);
        assert!(failed.is_error());
        assert!(failed.text().contains("Something went wrong"));
    }

    #[test]
    fn default_policy_rules() {
        let s = step("pricing", &["request", "schedule"], ("tap_request", "request"), &[("tap_schedule", "schedule")]);
        let goal = Goal { step: &s, wait_budget_ms: 1_000 };
        let clock = VirtualClock::new(0);

        let present = render_screen(&s.screen, &payload(&[]), &clock);
        assert_eq!(DefaultPolicy.select(&present, &goal, &[]).chosen(), "tap_request");

        let delayed = render_screen(&s.screen, &payload(&["request:delayed(5000)"]), &clock);
        let d = DefaultPolicy.select(&delayed, &goal, &[]);
        assert_eq!(d.ranked_actions[..2], ["wait".to_string(), "tap_request".to_string()]);

        // wait budget already spent on this screen
        let later = delayed.refreshed(1_500);
        let history = [tr("pricing", WAIT, "pricing", 0)];
        assert_eq!(DefaultPolicy.select(&later, &goal, &history).chosen(), "tap_schedule");

        let missing = render_screen(&s.screen, &payload(&["request:missing"]), &clock);
        let d = DefaultPolicy.select(&missing, &goal, &[]);
        assert_eq!(d.chosen(), "tap_schedule");
        assert!(!d.ranked_actions.contains(&"tap_request".to_string()));

        let err = ScreenState::error(0);
        assert_eq!(DefaultPolicy.select(&err, &goal, &[]).ranked_actions, [RETRY, BACK]);
    }

    #[test]
    fn decision_normalizes() {
        let d = PolicyDecision::new(vec!["a".into(), "b".into(), "a".into()], "");
        assert_eq!(d.ranked_actions, ["a", "b"]);
        assert_eq!(PolicyDecision::new(vec![], "").ranked_actions, [RETRY]);
    }

    #[test]
    fn cycle_examples() {
        let same: Vec<_> = (0..3).map(|i| tr("S2", "tap_x", "S2", i)).collect();
        assert!(matches!(detect_cycle(&same, CYCLE_WINDOW), CycleCheck::Cycle { repeats: 3, .. }));
        assert_eq!(detect_cycle(&same[..2], CYCLE_WINDOW), CycleCheck::NoCycle);

        let alternating = [
            tr("S2", "tap_x", "S3", 0),
            tr("S3", "back", "S2", 1),
            tr("S2", "tap_x", "S3", 2),
            tr("S3", "back", "S2", 3),
        ];
        assert_eq!(detect_cycle(&alternating, CYCLE_WINDOW), CycleCheck::NoCycle);
        let mut three = alternating.to_vec();
        three.push(tr("S2", "tap_x", "S3", 4));
        assert!(matches!(detect_cycle(&three, CYCLE_WINDOW), CycleCheck::Cycle { repeats: 3, .. }));

        let progress = [tr("S1", "a", "S2", 0), tr("S2", "a", "S3", 1), tr("S3", "a", "S4", 2)];
        assert_eq!(detect_cycle(&progress, CYCLE_WINDOW), CycleCheck::NoCycle);
    }

    #[test]
    fn cycle_window_bounds_lookback() {
        let mut h = vec![tr("S", "x", "S", 0), tr("S", "x", "S", 1)];
        h.extend((0..10).map(|i| tr("S", &format!("y{i}"), "S", 2 + i)));
        h.push(tr("S", "x", "S", 20));
        // only one `x` inside the last 12
        assert_eq!(detect_cycle(&h, CYCLE_WINDOW), CycleCheck::NoCycle);
    }

    fn end_screen(state: ElementState) -> ScreenState {
        ScreenState {
            screen_id: "rating".into(),
            elements: vec![
                ScreenElement { element_id: "tipping_options".into(), state },
                ScreenElement { element_id: "star_rating".into(), state: ElementState::Present },
            ],
            rendered_at_ms: 0,
        }
    }

    struct Liar;
    impl VqaClassifier for Liar {
        fn answer(&self, _: &str, _: &[ScreenState]) -> Result<bool, ClassifierError> {
            Ok(true)
        }
    }

    struct Down;
    impl VqaClassifier for Down {
        fn answer(&self, _: &str, _: &[ScreenState]) -> Result<bool, ClassifierError> {
            Err(ClassifierError("connection refused".into()))
        }
    }

    #[test]
    fn assertion_examples() {
        let a = Assertion {
            prompt: "Does the screen show tipping options?".into(),
            target: AssertionTarget::EndState,
            ground_truth_predicate: Predicate::Present("tipping_options".into()),
        };
        assert_eq!(evaluate_assertion(&ScreenReader, &a, &[end_screen(ElementState::Present)]), Ok((true, true)));
        assert_eq!(evaluate_assertion(&ScreenReader, &a, &[end_screen(ElementState::Missing)]), Ok((false, false)));
        assert_eq!(evaluate_assertion(&Liar, &a, &[end_screen(ElementState::Missing)]), Ok((true, false)));
        let abstain = evaluate_assertion(&Down, &a, &[end_screen(ElementState::Present)]).unwrap_err();
        assert!(abstain.ground_truth);

        let negative = Assertion {
            prompt: "Does the screen show a surge warning?".into(),
            target: AssertionTarget::EndState,
            ground_truth_predicate: Predicate::Present("surge_warning".into()),
        };
        assert_eq!(evaluate_assertion(&ScreenReader, &negative, &[end_screen(ElementState::Present)]), Ok((false, false)));
    }

    #[test]
    fn mosaic_assertions_span_screens() {
        let first = ScreenState {
            screen_id: "a".into(),
            elements: vec![ScreenElement { element_id: "vehicle_info".into(), state: ElementState::Present }],
            rendered_at_ms: 0,
        };
        let screens = [first, end_screen(ElementState::Present)];
        let a = Assertion {
            prompt: "Was the vehicle info shown at any point?".into(),
            target: AssertionTarget::Mosaic,
            ground_truth_predicate: Predicate::Present("vehicle_info".into()),
        };
        assert_eq!(evaluate_assertion(&ScreenReader, &a, &screens), Ok((true, true)));
        let end_only = Assertion { target: AssertionTarget::EndState, ..a };
        assert_eq!(evaluate_assertion(&ScreenReader, &end_only, &screens), Ok((false, false)));
    }

    #[test]
    fn waited_ms_counts_trailing_waits() {
        let s = ScreenState { screen_id: "p".into(), elements: vec![], rendered_at_ms: 900 };
        assert_eq!(waited_ms(&s, &[]), 0);
        let h = [tr("q", "tap", "p", 0), tr("p", WAIT, "p", 300), tr("p", WAIT, "p", 600)];
        assert_eq!(waited_ms(&s, &h), 600);
    }
}
