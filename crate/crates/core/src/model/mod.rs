//! Declarative topology, converge planning, and change application.

mod apply;
mod plan;
mod topology;

pub use apply::{apply, converge, ApplyReport, ConvergeTarget, Outcome};
pub use plan::{
    diff, newest_first, Action, ChangeSet, IngressBinding, ObservedReplica, ObservedService, ObservedState, ServiceKey,
};
pub use topology::{
    format_duration, parse_duration, parse_topology, ChallengeSpec, NodeRole, NodeSpec, PortRange, ProbeSpec, Settings,
    Topology, TopologyError, Violation, Workload, PORT_PLACEHOLDER,
};
