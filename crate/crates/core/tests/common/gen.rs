//! Proptest strategies over the public API.

use chaosflow::havoc::{FaultKind, FaultSpec, HavocHeaders, Scope, TargetSelector, Tenancy};
use chaosflow::topology::TierLevel;
use proptest::prelude::*;

pub fn name() -> impl Strategy<Value = String> {
    "[a-z][a-z0-9_-]{0,8}"
}

pub fn fault() -> impl Strategy<Value = FaultSpec> {
    let kind = prop_oneof![
        (400u16..=599).prop_map(|status_code| FaultKind::Abort { status_code }),
        Just(FaultKind::Timeout),
        (1u64..100_000).prop_map(|extra_ms| FaultKind::Latency { extra_ms }),
    ];
    let selector = prop_oneof![
        (0u8..=5).prop_map(|t| TargetSelector::ByTierAtLeast(TierLevel::new(t).unwrap())),
        prop::collection::btree_set(name(), 1..4).prop_map(TargetSelector::ByServices),
        prop::collection::btree_set((name(), "/[a-z][a-z0-9/_:-]{0,12}"), 1..4).prop_map(TargetSelector::ByEndpoint),
    ];
    let scope = prop_oneof![
        Just(Scope::AllMatching),
        (1e-9f64..=1.0).prop_map(Scope::Probability),
    ];
    (kind, selector, scope).prop_map(|(k, s, sc)| FaultSpec::new(k, s, sc).unwrap())
}

pub fn headers() -> impl Strategy<Value = HavocHeaders> {
    (
        prop_oneof![Just(Tenancy::Test), Just(Tenancy::Production)],
        prop::collection::vec(fault(), 0..5),
        "[ -~]{0,16}",
    )
        .prop_map(|(tenancy, faults, run_id)| HavocHeaders { tenancy, faults, run_id })
}

/// Faults aimed at services that exist in the shipped topologies.
pub fn mesh_fault(services: Vec<String>) -> impl Strategy<Value = FaultSpec> {
    let kind = prop_oneof![
        prop_oneof![Just(500u16), Just(503), Just(404), Just(429)].prop_map(|status_code| FaultKind::Abort { status_code }),
        Just(FaultKind::Timeout),
        (1u64..5_000).prop_map(|extra_ms| FaultKind::Latency { extra_ms }),
    ];
    let selector = prop_oneof![
        (0u8..=5).prop_map(|t| TargetSelector::ByTierAtLeast(TierLevel::new(t).unwrap())),
        prop::sample::subsequence(services, 1..4).prop_map(|s| TargetSelector::ByServices(s.into_iter().collect())),
    ];
    let scope = prop_oneof![Just(Scope::AllMatching), (0.01f64..=1.0).prop_map(Scope::Probability)];
    (kind, selector, scope).prop_map(|(k, s, sc)| FaultSpec::new(k, s, sc).unwrap())
}
