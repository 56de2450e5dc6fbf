//! Discrete-event simulator of an onion-routing relay network comparing two
//! socket scheduling policies, AMAP and KIST, under varying load and loss.

pub mod engine;
pub mod experiment;
pub mod metrics;
pub mod netgraph;
pub mod relay;
pub mod sched;
pub mod sim;
pub mod tcp;
pub mod traffic;
