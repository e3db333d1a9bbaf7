//! Chaos testing over a simulated service mesh.
//!
//! - [`topology`]: the tiered service graph and planted dependency violations.
//! - [`havoc`]: fault specs, the `x-havoc-*` header codec, tenancy-gated injection.
//! - [`simmesh`]: deterministic virtual-time request execution and network logs.
//! - [`crawler`]: adaptive flow execution against screens rendered from responses.
//! - [`rca`]: error detection, baseline statistics and causal RPC ranking.
//! - [`harness`]: scenario generation, paired runs, metrics, archives.

pub mod crawler;
pub mod external;
pub mod harness;
pub mod havoc;
pub mod rca;
pub mod runlog;
pub mod seed;
pub mod shipped;
pub mod simmesh;
pub mod topology;

pub use havoc::{FaultSpec, HavocHeaders, Tenancy};
pub use simmesh::{AppInstance, RpcRecord, RpcStatus};
pub use topology::{EdgeRef, Topology, TierLevel};
