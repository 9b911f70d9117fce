use std::collections::HashMap;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::walks::Sampler;
use super::{EmbeddingTable, SageConfig, SageGraph};
use crate::error::{Error, Result};
use crate::graph::NodeId;
use crate::persist::mat_serde;
use crate::rng::Rng;
use crate::tape::{clamped_log_sigmoid, AggTerm, Mat, Tape, Var};

/// Learnable id features plus the two mean-aggregator layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SageModel {
    pub config: SageConfig,
    #[serde(with = "mat_serde")]
    pub features: Mat,
    #[serde(with = "mat_serde")]
    pub w1: Mat,
    #[serde(with = "mat_serde")]
    pub b1: Mat,
    #[serde(with = "mat_serde")]
    pub w2: Mat,
    #[serde(with = "mat_serde")]
    pub b2: Mat,
}

#[derive(Debug, Clone, Copy)]
pub struct SageVars {
    pub features: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl SageVars {
    pub fn all(&self) -> [Var; 5] {
        [self.features, self.w1, self.b1, self.w2, self.b2]
    }
}

fn glorot(rows: usize, cols: usize, rng: &mut Rng) -> Mat {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Mat::from_shape_fn((rows, cols), |_| rng.random_range(-limit..limit))
}

impl SageModel {
    pub fn init(config: SageConfig, node_count: usize, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let normal =
            Normal::new(0.0, 1.0 / (config.input_dim as f64).sqrt()).map_err(|e| Error::Invalid(e.to_string()))?;
        let features = Mat::from_shape_fn((node_count, config.input_dim), |_| normal.sample(rng));
        let w1 = glorot(2 * config.input_dim, config.hidden_dim, rng);
        let w2 = glorot(2 * config.hidden_dim, config.output_dim, rng);
        Ok(SageModel {
            b1: Mat::zeros((1, config.hidden_dim)),
            b2: Mat::zeros((1, config.output_dim)),
            features,
            w1,
            w2,
            config,
        })
    }

    pub fn node_count(&self) -> usize {
        self.features.nrows()
    }

    pub fn params(&self) -> [&Mat; 5] {
        [&self.features, &self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn params_mut(&mut self) -> [&mut Mat; 5] {
        [
            &mut self.features,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }

    pub fn from_params(config: SageConfig, p: &[Mat]) -> Self {
        SageModel {
            config,
            features: p[0].clone(),
            w1: p[1].clone(),
            b1: p[2].clone(),
            w2: p[3].clone(),
            b2: p[4].clone(),
        }
    }

    /// Put the parameters on a tape, as trainable inputs or as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> SageVars {
        let mut put = |m: &Mat| {
            if trainable {
                tape.param(m.clone())
            } else {
                tape.constant(m.clone())
            }
        };
        SageVars {
            features: put(&self.features),
            w1: put(&self.w1),
            b1: put(&self.b1),
            w2: put(&self.w2),
            b2: put(&self.b2),
        }
    }

    /// Deterministic embeddings of `targets` using full-neighbourhood means.
    pub fn embed<G: SageGraph + ?Sized>(&self, g: &G, targets: &[NodeId]) -> Result<Mat> {
        if g.node_count() != self.node_count() {
            return Err(Error::DimMismatch {
                context: "sage graph size",
                expected: self.node_count(),
                got: g.node_count(),
            });
        }
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let plan = EncodePlan::full(g, targets);
        let z = encode(&mut tape, &vars, &plan);
        Ok(tape.value(z).clone())
    }

    pub fn embed_all<G: SageGraph + ?Sized>(&self, g: &G) -> Result<Mat> {
        let all: Vec<NodeId> = (0..g.node_count() as NodeId).collect();
        self.embed(g, &all)
    }

    pub fn embedding_table<G: SageGraph + ?Sized>(&self, g: &G) -> Result<EmbeddingTable> {
        Ok(EmbeddingTable::dense(&self.embed_all(g)?))
    }
}

/// Which rows the two layers compute and how they aggregate.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodePlan {
    /// Node whose layer-1 representation each row holds.
    pub l1_nodes: Vec<NodeId>,
    /// Layer-1 neighbour means, indexing feature rows.
    pub l1_terms: Vec<Vec<AggTerm>>,
    /// Layer-1 row holding each target's own representation.
    pub target_rows: Vec<usize>,
    /// Layer-2 neighbour means, indexing layer-1 rows.
    pub l2_terms: Vec<Vec<AggTerm>>,
}

fn full_terms<G: SageGraph + ?Sized>(g: &G, u: NodeId, index: impl Fn(NodeId) -> usize) -> Vec<AggTerm> {
    let nbrs = g.neighbors(u);
    if nbrs.is_empty() {
        return vec![AggTerm::plain(index(u), 1.0)];
    }
    match g.edge_weights(u) {
        Some(w) => {
            let total: f64 = w.iter().sum();
            nbrs.iter()
                .zip(w)
                .map(|(&v, &wv)| AggTerm::plain(index(v), wv / total))
                .collect()
        }
        None => {
            let s = 1.0 / nbrs.len() as f64;
            nbrs.iter().map(|&v| AggTerm::plain(index(v), s)).collect()
        }
    }
}

fn mean_terms(rows: impl ExactSizeIterator<Item = usize>) -> Vec<AggTerm> {
    let s = 1.0 / rows.len() as f64;
    rows.map(|r| AggTerm::plain(r, s)).collect()
}

impl EncodePlan {
    pub fn target_count(&self) -> usize {
        self.target_rows.len()
    }

    /// Tags every neighbour term with the index `edge_index` assigns to its
    /// undirected edge. Self terms of isolated nodes stay unmasked.
    pub fn attach_edge_masks(&mut self, targets: &[NodeId], mut edge_index: impl FnMut(NodeId, NodeId) -> usize) {
        for (r, terms) in self.l1_terms.iter_mut().enumerate() {
            let u = self.l1_nodes[r];
            for t in terms.iter_mut() {
                let v = t.src as NodeId;
                if v != u {
                    t.mask = Some(edge_index(u, v));
                }
            }
        }
        for (ti, terms) in self.l2_terms.iter_mut().enumerate() {
            let u = targets[ti];
            for t in terms.iter_mut() {
                let v = self.l1_nodes[t.src];
                if v != u {
                    t.mask = Some(edge_index(u, v));
                }
            }
        }
    }

    /// Exact (weighted) means over every neighbour.
    pub fn full<G: SageGraph + ?Sized>(g: &G, targets: &[NodeId]) -> Self {
        let mut l1_nodes = Vec::new();
        let mut row_of: HashMap<NodeId, usize> = HashMap::new();
        let mut intern = |u: NodeId, nodes: &mut Vec<NodeId>| {
            *row_of.entry(u).or_insert_with(|| {
                nodes.push(u);
                nodes.len() - 1
            })
        };
        let target_rows: Vec<usize> = targets.iter().map(|&t| intern(t, &mut l1_nodes)).collect();
        for &t in targets {
            let nbrs = g.neighbors(t);
            for &v in nbrs {
                intern(v, &mut l1_nodes);
            }
        }
        let l2_terms = targets.iter().map(|&t| full_terms(g, t, |v| row_of[&v])).collect();
        let l1_terms = l1_nodes.iter().map(|&u| full_terms(g, u, |v| v as usize)).collect();
        EncodePlan {
            l1_nodes,
            l1_terms,
            target_rows,
            l2_terms,
        }
    }

    /// Sampled neighbourhoods: each target aggregates `fanouts[0]` sampled
    /// neighbours at both layers, each distinct sampled neighbour aggregates
    /// `fanouts[1]` of its own. Hop samples are shared within the plan.
    pub fn sampled<G: SageGraph + ?Sized>(
        sampler: &Sampler<'_, G>,
        targets: &[NodeId],
        fanouts: [usize; 2],
        rng: &mut Rng,
    ) -> Self {
        let mut l1_nodes: Vec<NodeId> = targets.to_vec();
        let mut l1_terms = Vec::with_capacity(targets.len());
        let mut hop_row: HashMap<NodeId, usize> = HashMap::new();
        let mut hop_nodes: Vec<NodeId> = Vec::new();
        let mut target_samples = Vec::with_capacity(targets.len());
        for &t in targets {
            let s = sampler.sample(t, fanouts[0], rng);
            l1_terms.push(mean_terms(s.iter().map(|&v| v as usize)));
            for &v in &s {
                hop_row.entry(v).or_insert_with(|| {
                    hop_nodes.push(v);
                    targets.len() + hop_nodes.len() - 1
                });
            }
            target_samples.push(s);
        }
        for &v in &hop_nodes {
            let s = sampler.sample(v, fanouts[1], rng);
            l1_terms.push(mean_terms(s.iter().map(|&w| w as usize)));
        }
        l1_nodes.extend_from_slice(&hop_nodes);
        let l2_terms = target_samples
            .iter()
            .map(|s| mean_terms(s.iter().map(|v| hop_row[v])))
            .collect();
        EncodePlan {
            l1_nodes,
            l1_terms,
            target_rows: (0..targets.len()).collect(),
            l2_terms,
        }
    }
}

/// `normalize(W2·[h1(t); mean h1(N(t))] + b2)` with
/// `h1(v) = relu(W1·[x(v); mean x(N(v))] + b1)`.
pub fn encode(tape: &mut Tape, vars: &SageVars, plan: &EncodePlan) -> Var {
    encode_masked(tape, vars, plan, None)
}

/// As [`encode`], with aggregation terms gated by `mask` entries where the
/// plan's terms carry a mask index. Denominators are left unchanged.
pub fn encode_masked(tape: &mut Tape, vars: &SageVars, plan: &EncodePlan, mask: Option<Var>) -> Var {
    let own = tape.gather(vars.features, plan.l1_nodes.iter().map(|&u| u as usize).collect());
    let nbr = tape.aggregate(vars.features, mask, plan.l1_terms.clone());
    let cat = tape.concat(own, nbr);
    let pre = tape.matmul(cat, vars.w1);
    let pre = tape.add_row(pre, vars.b1);
    let h1 = tape.relu(pre);
    let own2 = tape.gather(h1, plan.target_rows.clone());
    let nbr2 = tape.aggregate(h1, mask, plan.l2_terms.clone());
    let cat2 = tape.concat(own2, nbr2);
    let out = tape.matmul(cat2, vars.w2);
    let out = tape.add_row(out, vars.b2);
    tape.row_normalize(out)
}

/// Positive and negative row pairs into an encoded batch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairBatch {
    pub positives: Vec<(usize, usize)>,
    pub negatives: Vec<(usize, usize)>,
}

/// Mean over positive pairs of `−log σ(z_i·z_j) − Σ_k log σ(−z_i·z_k)`.
pub fn graph_loss(tape: &mut Tape, z: Var, batch: &PairBatch) -> Var {
    let pos = tape.row_dots(z, z, batch.positives.clone());
    let lp = tape.log_sigmoid(pos);
    let mut total = tape.sum(lp);
    if !batch.negatives.is_empty() {
        let neg = tape.row_dots(z, z, batch.negatives.clone());
        let neg = tape.scale(neg, -1.0);
        let ln = tape.log_sigmoid(neg);
        let sn = tape.sum(ln);
        total = tape.add(total, sn);
    }
    tape.scale(total, -1.0 / batch.positives.len().max(1) as f64)
}

/// Scalar form of the per-pair objective.
pub fn unsup_loss(zi: &[f64], zj: &[f64], negatives: &[&[f64]]) -> f64 {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut loss = -clamped_log_sigmoid(dot(zi, zj));
    for zk in negatives {
        loss -= clamped_log_sigmoid(-dot(zi, zk));
    }
    loss
}
