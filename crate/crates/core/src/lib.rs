pub mod balancer;
pub mod cli;
pub mod fixture;
pub mod fsutil;
pub mod ids;
pub mod ingress;
pub mod model;
pub mod pipeline;
pub mod platform;
pub mod proxy_header;
pub mod registry;
pub mod supervisor;
#[cfg(test)]
mod testutil;
pub mod text;
pub mod time;

pub use ids::{NodeId, ReplicaId};
