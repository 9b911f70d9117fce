use std::collections::{HashMap, HashSet};

use super::Frozen;
use crate::alsc::argmax;
use crate::error::Result;
use crate::graph::{EntityGraph, NodeId};
use crate::sage::SageGraph;

/// `g` with `removed` vertices and their incident edges taken out; ids are
/// kept so learned per-node features still line up.
pub struct WithoutVertices<'a> {
    g: &'a EntityGraph,
    removed: HashSet<NodeId>,
    pruned: HashMap<NodeId, Vec<NodeId>>,
}

impl<'a> WithoutVertices<'a> {
    pub fn new(g: &'a EntityGraph, removed: &[NodeId]) -> Self {
        let removed: HashSet<NodeId> = removed.iter().copied().collect();
        let mut pruned = HashMap::new();
        for &r in &removed {
            for &v in g.neighbors(r) {
                if !removed.contains(&v) && !pruned.contains_key(&v) {
                    let kept: Vec<NodeId> = g
                        .neighbors(v)
                        .iter()
                        .copied()
                        .filter(|w| !removed.contains(w))
                        .collect();
                    pruned.insert(v, kept);
                }
            }
        }
        WithoutVertices { g, removed, pruned }
    }
}

impl SageGraph for WithoutVertices<'_> {
    fn node_count(&self) -> usize {
        self.g.node_count()
    }

    fn neighbors(&self, u: NodeId) -> &[NodeId] {
        if self.removed.contains(&u) {
            return &[];
        }
        match self.pruned.get(&u) {
            Some(v) => v,
            None => self.g.neighbors(u),
        }
    }

    fn edge_weights(&self, _u: NodeId) -> Option<&[f64]> {
        None
    }
}

/// Inputs for labelling one instance.
#[derive(Debug, Clone)]
pub struct PerturbInput {
    pub h: Vec<f64>,
    /// Text features with the explanation words masked.
    pub h_masked: Vec<f64>,
    pub zc: Vec<f64>,
    /// Local subgraph id, `None` for UNK.
    pub entity: Option<NodeId>,
    /// Explanation vertices to drop (the instance's own entity excluded).
    pub removed: Vec<NodeId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Perturbation {
    pub pred: usize,
    pub text_pred: usize,
    pub graph_pred: usize,
    pub s_t: bool,
    pub s_g: bool,
}

fn predict(m: &Frozen<'_>, h: &[f64], zc: &[f64], zs: &[f64]) -> Result<usize> {
    let x: Vec<f64> = h.iter().chain(zc).chain(zs).copied().collect();
    Ok(argmax(&m.head.logits(&x)?))
}

fn embed<G: SageGraph + ?Sized>(m: &Frozen<'_>, g: &G, u: Option<NodeId>) -> Result<Vec<f64>> {
    match u {
        Some(u) => Ok(m.sage.embed(g, &[u])?.row(0).to_vec()),
        None => Ok(vec![0.0; m.sage.config.output_dim]),
    }
}

/// Recomputes the prediction on the full input, on `x̃` and on `G̃`.
pub fn perturb_and_label(m: &Frozen<'_>, inp: &PerturbInput) -> Result<Perturbation> {
    let zs = embed(m, m.gs, inp.entity)?;
    let removed: Vec<NodeId> = inp.removed.iter().copied().filter(|&v| Some(v) != inp.entity).collect();
    let zs_tilde = embed(m, &WithoutVertices::new(m.gs, &removed), inp.entity)?;
    let pred = predict(m, &inp.h, &inp.zc, &zs)?;
    let text_pred = predict(m, &inp.h_masked, &inp.zc, &zs)?;
    let graph_pred = predict(m, &inp.h, &inp.zc, &zs_tilde)?;
    Ok(Perturbation {
        pred,
        text_pred,
        graph_pred,
        s_t: text_pred != pred,
        s_g: graph_pred != pred,
    })
}

/// [`perturb_and_label`] over many instances, split across threads.
pub fn perturb_and_label_all(m: &Frozen<'_>, inputs: &[PerturbInput]) -> Result<Vec<Perturbation>> {
    if inputs.is_empty() {
        return Ok(Vec::new());
    }
    let workers = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(inputs.len());
    let chunk = inputs.len().div_ceil(workers);
    let parts: Vec<Result<Vec<Perturbation>>> = std::thread::scope(|s| {
        let handles: Vec<_> = inputs
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(|i| perturb_and_label(m, i)).collect()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("labelling worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(inputs.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}
