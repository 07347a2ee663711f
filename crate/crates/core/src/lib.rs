//! Bandwidth-aware resource orchestration for fog networks.
//!
//! End-devices ask a central controller for a containerized service with a
//! guaranteed bandwidth, CPU and memory budget. The controller picks a
//! fog-device and a path with a bandwidth-weighted shortest-path search over
//! a k-ary heap, reserves the bandwidth with rate-limited queues and flows on
//! every switch along the path, and starts the container. A simulated
//! switch/fog fabric stands in for the real southbound protocols, and a
//! discrete-event model reproduces the control-plane delay behaviour.

pub mod audit;
pub mod kheap;
pub mod oracle;
pub mod orchestrator;
pub mod protocol;
pub mod raa;
pub mod scalar;
pub mod simnet;
pub mod southbound;
pub mod topology;

pub use num_rational::BigRational;
pub use scalar::{Scalar, Weight};
pub use topology::{Bps, Millicores, NodeId, NodeKind, PortNo, Topology};

/// Path costs in double precision; what the orchestrator runs on.
pub type Cost = f64;
/// Exact rational path costs, used to check optimality without rounding.
pub type ExactCost = BigRational;

pub type PathTree = raa::PathTree<Cost>;
pub type ExactPathTree = raa::PathTree<ExactCost>;
pub type LinkWeight = Weight<Cost>;
pub type ExactLinkWeight = Weight<ExactCost>;
