//! Fault specifications, the `x-havoc-*` header codec and the injection step that
//! runs on behalf of the destination service.
//!
//! Header grammar (ASCII):
//!
//! ```text
//! x-havoc-tenancy: test|production
//! x-havoc-run:     <opaque>
//! x-havoc-faults:  <fault>{,<fault>}*
//! <fault>      := kindspec ';' targetspec ';' scopespec
//! kindspec     := abort '(' code ')' | timeout | latency '(' ms ')'
//! targetspec   := tier '>=' d | svc '=' name{'|' name}* | ep '=' name ':' path{'|' name ':' path}*
//! scopespec    := all | p '=' decimal
//! ```
//!
//! Only test-tenancy requests are ever faulted. A request without a tenancy
//! header is production.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::topology::{ServiceSpec, TierLevel};

pub const TENANCY_HEADER: &str = "x-havoc-tenancy";
pub const RUN_HEADER: &str = "x-havoc-run";
pub const FAULTS_HEADER: &str = "x-havoc-faults";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HavocError {
    #[error("malformed fault clause `{clause}`: {reason}")]
    Clause { clause: String, reason: String },
    #[error("invalid fault: {0}")]
    Invalid(String),
}

fn clause_err(clause: &str, reason: impl Into<String>) -> HavocError {
    HavocError::Clause { clause: clause.to_string(), reason: reason.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Tenancy {
    #[default]
    Production,
    Test,
}

impl Tenancy {
    pub fn as_str(self) -> &'static str {
        match self {
            Tenancy::Production => "production",
            Tenancy::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FaultKind {
    Abort { status_code: u16 },
    Timeout,
    Latency { extra_ms: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum TargetSelector {
    ByServices(BTreeSet<String>),
    ByTierAtLeast(TierLevel),
    ByEndpoint(BTreeSet<(String, String)>),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scope {
    AllMatching,
    /// Fires when the per-RPC uniform draw is below `p`; `p` in (0, 1].
    Probability(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct FaultSpec {
    kind: FaultKind,
    selector: TargetSelector,
    scope: Scope,
}

fn valid_name(s: &str) -> bool {
    !s.is_empty()
        && s.chars().all(|c| c.is_ascii_graphic() && !",;|:=()".contains(c))
}

fn valid_path(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_graphic() && !",;|".contains(c))
}

impl FaultSpec {
    pub fn new(kind: FaultKind, selector: TargetSelector, scope: Scope) -> Result<Self, HavocError> {
        match kind {
            FaultKind::Abort { status_code } if !(400..=599).contains(&status_code) => {
                return Err(HavocError::Invalid(format!("abort status {status_code} outside 400..=599")));
            }
            FaultKind::Latency { extra_ms: 0 } => {
                return Err(HavocError::Invalid("latency must add at least 1 ms".into()));
            }
            _ => {}
        }
        match &selector {
            TargetSelector::ByServices(names) => {
                if names.is_empty() {
                    return Err(HavocError::Invalid("empty service selector".into()));
                }
                if let Some(bad) = names.iter().find(|n| !valid_name(n)) {
                    return Err(HavocError::Invalid(format!("service name `{bad}`")));
                }
            }
            TargetSelector::ByEndpoint(eps) => {
                if eps.is_empty() {
                    return Err(HavocError::Invalid("empty endpoint selector".into()));
                }
                if let Some((s, p)) = eps.iter().find(|(s, p)| !valid_name(s) || !valid_path(p)) {
                    return Err(HavocError::Invalid(format!("endpoint `{s}:{p}`")));
                }
            }
            TargetSelector::ByTierAtLeast(_) => {}
        }
        if let Scope::Probability(p) = scope {
            if !(p > 0.0 && p <= 1.0) {
                return Err(HavocError::Invalid(format!("probability {p} outside (0,1]")));
            }
        }
        Ok(Self { kind, selector, scope })
    }

    pub fn abort(status_code: u16, selector: TargetSelector) -> Result<Self, HavocError> {
        Self::new(FaultKind::Abort { status_code }, selector, Scope::AllMatching)
    }

    pub fn kind(&self) -> FaultKind {
        self.kind
    }

    pub fn selector(&self) -> &TargetSelector {
        &self.selector
    }

    pub fn scope(&self) -> Scope {
        self.scope
    }
}

impl fmt::Display for FaultSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            FaultKind::Abort { status_code } => write!(f, "abort({status_code})")?,
            FaultKind::Timeout => f.write_str("timeout")?,
            FaultKind::Latency { extra_ms } => write!(f, "latency({extra_ms})")?,
        }
        f.write_str(";")?;
        match &self.selector {
            TargetSelector::ByTierAtLeast(t) => write!(f, "tier>={}", t.value())?,
            TargetSelector::ByServices(names) => {
                let joined: Vec<&str> = names.iter().map(String::as_str).collect();
                write!(f, "svc={}", joined.join("|"))?
            }
            TargetSelector::ByEndpoint(eps) => {
                let joined: Vec<String> = eps.iter().map(|(s, p)| format!("{s}:{p}")).collect();
                write!(f, "ep={}", joined.join("|"))?
            }
        }
        f.write_str(";")?;
        match self.scope {
            Scope::AllMatching => f.write_str("all"),
            Scope::Probability(p) => write!(f, "p={p}"),
        }
    }
}

impl FromStr for FaultSpec {
    type Err = HavocError;

    fn from_str(clause: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = clause.split(';').collect();
        let [kind, target, scope] = parts.as_slice() else {
            return Err(clause_err(clause, "expected `kind;target;scope`"));
        };
        let number = |s: &str, open: &str| -> Option<u64> {
            let digits = s.strip_prefix(open)?.strip_suffix(')')?;
            if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
                return None;
            }
            digits.parse().ok()
        };
        let kind = if *kind == "timeout" {
            FaultKind::Timeout
        } else if kind.starts_with("abort(") {
            let code = number(kind, "abort(").ok_or_else(|| clause_err(clause, "bad abort code"))?;
            let status_code = u16::try_from(code).map_err(|_| clause_err(clause, "abort code out of range"))?;
            FaultKind::Abort { status_code }
        } else if kind.starts_with("latency(") {
            let extra_ms = number(kind, "latency(").ok_or_else(|| clause_err(clause, "bad latency"))?;
            FaultKind::Latency { extra_ms }
        } else {
            return Err(clause_err(clause, format!("unknown fault kind `{kind}`")));
        };

        let selector = if let Some(d) = target.strip_prefix("tier>=") {
            let tier = d
                .parse::<u8>()
                .ok()
                .filter(|_| d.len() == 1)
                .and_then(TierLevel::new)
                .ok_or_else(|| clause_err(clause, format!("bad tier `{d}`")))?;
            TargetSelector::ByTierAtLeast(tier)
        } else if let Some(names) = target.strip_prefix("svc=") {
            TargetSelector::ByServices(names.split('|').map(str::to_string).collect())
        } else if let Some(eps) = target.strip_prefix("ep=") {
            let mut set = BTreeSet::new();
            for ep in eps.split('|') {
                let (s, p) = ep
                    .split_once(':')
                    .ok_or_else(|| clause_err(clause, format!("endpoint `{ep}` lacks `service:path`")))?;
                set.insert((s.to_string(), p.to_string()));
            }
            TargetSelector::ByEndpoint(set)
        } else {
            return Err(clause_err(clause, format!("unknown target `{target}`")));
        };

        let scope = if *scope == "all" {
            Scope::AllMatching
        } else if let Some(p) = scope.strip_prefix("p=") {
            let decimal = !p.is_empty()
                && p.bytes().all(|b| b.is_ascii_digit() || b == b'.')
                && p.bytes().filter(|b| *b == b'.').count() <= 1;
            let value = p
                .parse::<f64>()
                .ok()
                .filter(|_| decimal)
                .ok_or_else(|| clause_err(clause, format!("bad probability `{p}`")))?;
            Scope::Probability(value)
        } else {
            return Err(clause_err(clause, format!("unknown scope `{scope}`")));
        };

        FaultSpec::new(kind, selector, scope).map_err(|e| clause_err(clause, e.to_string()))
    }
}

impl TryFrom<String> for FaultSpec {
    type Error = HavocError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<FaultSpec> for String {
    fn from(f: FaultSpec) -> String {
        f.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct HavocHeaders {
    pub tenancy: Tenancy,
    pub faults: Vec<FaultSpec>,
    pub run_id: String,
}

impl HavocHeaders {
    pub fn test(run_id: impl Into<String>, faults: Vec<FaultSpec>) -> Self {
        Self { tenancy: Tenancy::Test, faults, run_id: run_id.into() }
    }

    pub fn production(run_id: impl Into<String>, faults: Vec<FaultSpec>) -> Self {
        Self { tenancy: Tenancy::Production, faults, run_id: run_id.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultEffect {
    Aborted(u16),
    TimedOut,
    Delayed(u64),
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FaultOutcome {
    pub applied: bool,
    pub effect: FaultEffect,
}

impl FaultOutcome {
    pub const NONE: FaultOutcome = FaultOutcome { applied: false, effect: FaultEffect::None };

    fn applied(effect: FaultEffect) -> Self {
        Self { applied: true, effect }
    }
}

pub fn encode_headers(h: &HavocHeaders) -> Vec<(String, String)> {
    let faults: Vec<String> = h.faults.iter().map(ToString::to_string).collect();
    vec![
        (TENANCY_HEADER.to_string(), h.tenancy.as_str().to_string()),
        (RUN_HEADER.to_string(), h.run_id.clone()),
        (FAULTS_HEADER.to_string(), faults.join(",")),
    ]
}

pub fn decode_headers<K, V>(raw: &[(K, V)]) -> Result<HavocHeaders, HavocError>
where
    K: AsRef<str>,
    V: AsRef<str>,
{
    let mut out = HavocHeaders::default();
    for (k, v) in raw {
        let v = v.as_ref();
        match k.as_ref().to_ascii_lowercase().as_str() {
            // anything other than an exact `test` stays production
            TENANCY_HEADER => out.tenancy = if v.trim() == "test" { Tenancy::Test } else { Tenancy::Production },
            RUN_HEADER => out.run_id = v.to_string(),
            FAULTS_HEADER => {
                out.faults = if v.is_empty() {
                    Vec::new()
                } else {
                    v.split(',').map(str::parse).collect::<Result<_, _>>()?
                };
            }
            _ => {}
        }
    }
    Ok(out)
}

pub fn selector_matches(s: &TargetSelector, callee: &ServiceSpec, endpoint: &str) -> bool {
    match s {
        TargetSelector::ByServices(names) => names.contains(&callee.name),
        TargetSelector::ByTierAtLeast(t) => callee.tier >= *t,
        TargetSelector::ByEndpoint(eps) => eps.iter().any(|(svc, p)| *svc == callee.name && p == endpoint),
    }
}

/// Decides the fault (if any) for one RPC attempt. Draws exactly one uniform from
/// `rng` for test-tenancy requests and none otherwise. The first fault in list
/// order that matches and fires wins.
pub fn apply_fault<R: Rng + ?Sized>(
    h: &HavocHeaders,
    callee: &ServiceSpec,
    endpoint: &str,
    rng: &mut R,
) -> FaultOutcome {
    if h.tenancy != Tenancy::Test {
        return FaultOutcome::NONE;
    }
    let draw: f64 = rng.gen();
    for fault in &h.faults {
        if !selector_matches(&fault.selector, callee, endpoint) {
            continue;
        }
        let fires = match fault.scope {
            Scope::AllMatching => true,
            Scope::Probability(p) => draw < p,
        };
        if fires {
            return FaultOutcome::applied(match fault.kind {
                FaultKind::Abort { status_code } => FaultEffect::Aborted(status_code),
                FaultKind::Timeout => FaultEffect::TimedOut,
                FaultKind::Latency { extra_ms } => FaultEffect::Delayed(extra_ms),
            });
        }
    }
    FaultOutcome::NONE
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn svc(name: &str, tier: u8) -> ServiceSpec {
        ServiceSpec {
            name: name.into(),
            tier: TierLevel::new(tier).unwrap(),
            base_latency_ms: 10,
            jitter_ms: 0,
            endpoints: vec![],
            call_plan: vec![],
        }
    }

    fn services(names: &[&str]) -> TargetSelector {
        TargetSelector::ByServices(names.iter().map(|s| s.to_string()).collect())
    }

    fn header<'a>(enc: &'a [(String, String)], key: &str) -> &'a str {
        &enc.iter().find(|(k, _)| k == key).unwrap().1
    }

    #[test]
    fn encode_examples() {
        let h = HavocHeaders::test(
            "r1",
            vec![FaultSpec::abort(503, TargetSelector::ByTierAtLeast(TierLevel::new(2).unwrap())).unwrap()],
        );
        let enc = encode_headers(&h);
        assert_eq!(enc.len(), 3);
        assert_eq!(header(&enc, TENANCY_HEADER), "test");
        assert_eq!(header(&enc, RUN_HEADER), "r1");
        assert_eq!(header(&enc, FAULTS_HEADER), "abort(503);tier>=2;all");

        let enc = encode_headers(&HavocHeaders::production("r2", vec![]));
        assert_eq!(header(&enc, FAULTS_HEADER), "");
        assert_eq!(header(&enc, TENANCY_HEADER), "production");

        let latency = FaultSpec::new(
            FaultKind::Latency { extra_ms: 2000 },
            services(&["pricing"]),
            Scope::Probability(0.5),
        )
        .unwrap();
        let enc = encode_headers(&HavocHeaders::test("r3", vec![latency]));
        assert_eq!(header(&enc, FAULTS_HEADER), "latency(2000);svc=pricing;p=0.5");
    }

    #[test]
    fn decode_defaults_and_errors() {
        let none: Vec<(String, String)> = vec![("content-type".into(), "json".into())];
        let h = decode_headers(&none).unwrap();
        assert_eq!(h, HavocHeaders { tenancy: Tenancy::Production, faults: vec![], run_id: String::new() });

        let bad = [(FAULTS_HEADER, "abort(9999);tier>=2;all")];
        let err = decode_headers(&bad).unwrap_err();
        assert!(err.to_string().contains("abort(9999)"), "{err}");

        for clause in ["abort(503);tier>=9;all", "latency(0);tier>=1;all", "nuke;tier>=1;all", "timeout;svc=a;p=1.5", "timeout;svc=;all", "timeout;ep=a;all", "timeout;tier>=1"] {
            assert!(decode_headers(&[(FAULTS_HEADER, clause)]).is_err(), "{clause}");
        }
    }

    #[test]
    fn selector_examples() {
        assert!(selector_matches(&TargetSelector::ByTierAtLeast(TierLevel::new(2).unwrap()), &svc("x", 4), "/x"));
        assert!(!selector_matches(&services(&["pricing"]), &svc("matching", 1), "/m"));
        let ep = TargetSelector::ByEndpoint([("pricing".to_string(), "/quote".to_string())].into());
        assert!(!selector_matches(&ep, &svc("pricing", 2), "/surge"));
        assert!(selector_matches(&ep, &svc("pricing", 2), "/quote"));
    }

    #[test]
    fn apply_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tier2 = TargetSelector::ByTierAtLeast(TierLevel::new(2).unwrap());
        let faults = vec![FaultSpec::abort(503, tier2.clone()).unwrap()];
        let prod = HavocHeaders::production("p", faults.clone());
        assert_eq!(apply_fault(&prod, &svc("x", 3), "/x", &mut rng), FaultOutcome::NONE);

        let test = HavocHeaders::test("t", faults);
        assert_eq!(
            apply_fault(&test, &svc("x", 3), "/x", &mut rng),
            FaultOutcome { applied: true, effect: FaultEffect::Aborted(503) }
        );

        let two = HavocHeaders::test(
            "t",
            vec![
                FaultSpec::new(FaultKind::Latency { extra_ms: 100 }, tier2.clone(), Scope::AllMatching).unwrap(),
                FaultSpec::abort(500, tier2).unwrap(),
            ],
        );
        assert_eq!(apply_fault(&two, &svc("x", 3), "/x", &mut rng).effect, FaultEffect::Delayed(100));
    }

    pub(crate) fn arb_name() -> impl Strategy<Value = String> {
        "[a-z][a-z0-9_-]{0,8}"
    }

    pub(crate) fn arb_fault() -> impl Strategy<Value = FaultSpec> {
        let kind = prop_oneof![
            (400u16..=599).prop_map(|status_code| FaultKind::Abort { status_code }),
            Just(FaultKind::Timeout),
            (1u64..100_000).prop_map(|extra_ms| FaultKind::Latency { extra_ms }),
        ];
        let selector = prop_oneof![
            (0u8..=5).prop_map(|t| TargetSelector::ByTierAtLeast(TierLevel::new(t).unwrap())),
            prop::collection::btree_set(arb_name(), 1..4).prop_map(TargetSelector::ByServices),
            prop::collection::btree_set((arb_name(), "/[a-z][a-z0-9/_:-]{0,12}"), 1..4)
                .prop_map(TargetSelector::ByEndpoint),
        ];
        let scope = prop_oneof![
            Just(Scope::AllMatching),
            (1u32..=1_000_000).prop_map(|n| Scope::Probability(f64::from(n) / 1_000_000.0)),
            (1e-9f64..=1.0).prop_map(Scope::Probability),
        ];
        (kind, selector, scope).prop_map(|(k, s, sc)| FaultSpec::new(k, s, sc).unwrap())
    }

    pub(crate) fn arb_headers() -> impl Strategy<Value = HavocHeaders> {
        (
            prop_oneof![Just(Tenancy::Test), Just(Tenancy::Production)],
            prop::collection::vec(arb_fault(), 0..5),
            "[ -~]{0,16}",
        )
            .prop_map(|(tenancy, faults, run_id)| HavocHeaders { tenancy, faults, run_id })
    }

    proptest! {
        #[test]
        fn codec_round_trip(h in arb_headers()) {
            prop_assert_eq!(decode_headers(&encode_headers(&h)).unwrap(), h);
        }

        #[test]
        fn production_is_never_faulted(
            h in arb_headers(),
            tier in 0u8..=5,
            seed in any::<u64>(),
        ) {
            let h = HavocHeaders { tenancy: Tenancy::Production, ..h };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            prop_assert_eq!(apply_fault(&h, &svc("svc", tier), "/x", &mut rng), FaultOutcome::NONE);
        }

        #[test]
        fn outcome_is_deterministic_and_consistent(h in arb_headers(), tier in 0u8..=5, seed in any::<u64>()) {
            let callee = svc("svc", tier);
            let a = apply_fault(&h, &callee, "/x", &mut ChaCha8Rng::seed_from_u64(seed));
            let b = apply_fault(&h, &callee, "/x", &mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(a, b);
            prop_assert_eq!(a.applied, a.effect != FaultEffect::None);
        }
    }
}
