//! Imbalanced age estimation: a multi-hop attention graph network over
//! patch graphs, a group-aware margin loss, and a Q-learning agent that
//! tunes the per-group margins.

pub mod emagcn;
pub mod error;
pub mod group_margin;
pub mod harness;
pub mod metrics;
pub mod numerics;
pub mod optim;
pub mod patch_graph;
pub mod rl_margin;

pub use error::{Error, Result};
