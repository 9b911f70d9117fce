pub mod alsc;
pub mod cluster_graph;
pub mod error;
pub mod explain;
pub mod graph;
pub mod idd;
pub mod louvain;
pub mod metrics;
pub mod optim;
pub mod persist;
pub mod pipeline;
pub mod rng;
pub mod sage;
pub mod synth;
pub mod tape;
pub mod two_level;

pub use error::{Error, Result};
