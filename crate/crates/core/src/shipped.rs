//! Topologies, flows and configs bundled with the crate. Config files refer to
//! them as `builtin:<name>`.

use crate::crawler::{load_flow, FlowDefinition};
use crate::topology::{load_topology, Topology};

pub const RIDE_MIN: &str = include_str!("../../../docs/topologies/ride-min.toml");
pub const RIDE_CITY: &str = include_str!("../../../docs/topologies/ride-city.toml");
pub const CORE_TRIP: &str = include_str!("../../../docs/flows/core-trip.toml");
pub const EATS_ORDER: &str = include_str!("../../../docs/flows/eats-order.toml");
pub const DEMO_CONFIG: &str = include_str!("../../../docs/configs/demo.toml");

pub const TOPOLOGIES: [(&str, &str); 2] = [("ride-min", RIDE_MIN), ("ride-city", RIDE_CITY)];
pub const FLOWS: [(&str, &str); 2] = [("core-trip", CORE_TRIP), ("eats-order", EATS_ORDER)];

pub fn topology_source(name: &str) -> Option<&'static str> {
    TOPOLOGIES.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}

pub fn flow_source(name: &str) -> Option<&'static str> {
    FLOWS.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}

pub fn topology(name: &str) -> Option<Topology> {
    topology_source(name).map(|s| load_topology(s).expect("bundled topologies are valid"))
}

pub fn flow(name: &str) -> Option<FlowDefinition> {
    flow_source(name).map(|s| load_flow(s).expect("bundled flows are valid"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_assets_load() {
        for (name, _) in TOPOLOGIES {
            assert_eq!(topology(name).unwrap().name, name);
        }
        for (name, _) in FLOWS {
            let f = flow(name).unwrap();
            assert_eq!(f.flow_id, name);
            for t in TOPOLOGIES.map(|(n, _)| topology(n).unwrap()) {
                for e in f.entries() {
                    assert!(t.entry_points.contains_key(e), "{} lacks entry {e}", t.name);
                }
            }
        }
    }

    #[test]
    fn ride_city_shape() {
        let t = topology("ride-city").unwrap();
        assert_eq!(t.services.len(), 40);
        let mut per_tier = [0; 6];
        for s in t.services.values() {
            per_tier[usize::from(s.tier.value())] += 1;
        }
        assert_eq!(per_tier, [5, 9, 9, 7, 5, 5]);
        assert_eq!(topology("ride-min").unwrap().services.len(), 8);
    }
}
