//! Unsupervised GraphSAGE embeddings (mean aggregator, two layers) for the
//! weighted cluster graph and the unweighted aspect subgraph.

mod model;
mod table;
mod train;
mod walks;

pub use model::{encode, encode_masked, graph_loss, unsup_loss, EncodePlan, PairBatch, SageModel, SageVars};
pub use table::{EmbeddingTable, TableHeader};
pub use train::{build_pair_batch, train_embeddings, train_model, TrainReport};
pub use walks::{sample_neighborhood, sample_walks, NegativeSampler, SampledNeighborhood, Sampler};

use serde::{Deserialize, Serialize};

use crate::cluster_graph::ClusterGraph;
use crate::error::{Error, Result};
use crate::graph::{EntityGraph, NodeId};

/// Read access shared by the two graph kinds the trainer runs on.
pub trait SageGraph {
    fn node_count(&self) -> usize;
    fn neighbors(&self, u: NodeId) -> &[NodeId];
    /// Edge weights aligned with `neighbors`, or `None` for unweighted graphs.
    fn edge_weights(&self, u: NodeId) -> Option<&[f64]>;
}

impl SageGraph for EntityGraph {
    fn node_count(&self) -> usize {
        EntityGraph::node_count(self)
    }
    fn neighbors(&self, u: NodeId) -> &[NodeId] {
        EntityGraph::neighbors(self, u)
    }
    fn edge_weights(&self, _u: NodeId) -> Option<&[f64]> {
        None
    }
}

impl SageGraph for ClusterGraph {
    fn node_count(&self) -> usize {
        self.cluster_count()
    }
    fn neighbors(&self, u: NodeId) -> &[NodeId] {
        ClusterGraph::neighbors(self, u)
    }
    fn edge_weights(&self, u: NodeId) -> Option<&[f64]> {
        Some(self.weights(u))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SageConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub fanouts: [usize; 2],
    pub negatives: usize,
}

impl Default for SageConfig {
    fn default() -> Self {
        SageConfig {
            input_dim: 50,
            hidden_dim: 50,
            output_dim: 50,
            fanouts: [25, 10],
            negatives: 5,
        }
    }
}

impl SageConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.output_dim == 0 {
            return Err(Error::Invalid("sage dimensions must be positive".into()));
        }
        if self.fanouts.contains(&0) {
            return Err(Error::Invalid("sage fanouts must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WalkConfig {
    pub walk_length: usize,
    pub walks_per_node: usize,
    pub window: usize,
    pub seed: u64,
}

impl Default for WalkConfig {
    fn default() -> Self {
        WalkConfig {
            walk_length: 5,
            walks_per_node: 50,
            window: 5,
            seed: 0,
        }
    }
}

impl WalkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.walk_length == 0 || self.walks_per_node == 0 || self.window == 0 {
            return Err(Error::Invalid("walk settings must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-5,
            batch_size: 512,
            epochs: 1,
            seed: 0,
        }
    }
}
