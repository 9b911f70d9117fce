use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng as _;

use super::concepts::gather_rows;
use super::{ExplainData, Frozen};
use crate::alsc::{head_soft_ce_rows, HeadVars};
use crate::error::{Error, Result};
use crate::graph::{EntityGraph, NodeId};
use crate::optim::{all_finite, Adam};
use crate::rng::{self, Rng};
use crate::sage::{encode_masked, EncodePlan, SageVars};
use crate::tape::{sigmoid, Mat, Tape, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct GraphExplainerConfig {
    pub hidden: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Relaxed mask draws per step.
    pub samples: usize,
    pub temp_start: f64,
    pub temp_end: f64,
    pub sparsity: f64,
    pub budget: usize,
    pub seed: u64,
}

impl Default for GraphExplainerConfig {
    fn default() -> Self {
        GraphExplainerConfig {
            hidden: 32,
            lr: 1e-3,
            batch_size: 32,
            epochs: 20,
            samples: 8,
            temp_start: 1.0,
            temp_end: 0.1,
            sparsity: 0.01,
            budget: 6,
            seed: 0,
        }
    }
}

impl GraphExplainerConfig {
    pub fn temperature(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            return self.temp_start;
        }
        let f = epoch as f64 / (self.epochs - 1) as f64;
        self.temp_start * (self.temp_end / self.temp_start).powf(f)
    }
}

/// Edge scorer over endpoint embeddings: `½(f([z_a; z_b]) + f([z_b; z_a]))`
/// with `f` a one-hidden-layer ReLU network.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphExplainer {
    pub w1: Mat,
    pub b1: Mat,
    pub w2: Mat,
    pub b2: Mat,
}

pub(crate) struct ExplainerVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl ExplainerVars {
    pub fn all(&self) -> [Var; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}

impl GraphExplainer {
    pub fn init(dim_z: usize, hidden: usize, rng: &mut Rng) -> Self {
        let l1 = (6.0 / (2 * dim_z + hidden) as f64).sqrt();
        let l2 = (6.0 / (hidden + 1) as f64).sqrt();
        GraphExplainer {
            w1: Mat::from_shape_fn((2 * dim_z, hidden), |_| rng.random_range(-l1..l1)),
            b1: Mat::zeros((1, hidden)),
            w2: Mat::from_shape_fn((hidden, 1), |_| rng.random_range(-l2..l2)),
            b2: Mat::zeros((1, 1)),
        }
    }

    pub(crate) fn bind(&self, tape: &mut Tape) -> ExplainerVars {
        ExplainerVars {
            w1: tape.param(self.w1.clone()),
            b1: tape.param(self.b1.clone()),
            w2: tape.param(self.w2.clone()),
            b2: tape.param(self.b2.clone()),
        }
    }

    pub(crate) fn params_mut(&mut self) -> [&mut Mat; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    fn half(&self, x: &Mat) -> Mat {
        let h = (x.dot(&self.w1) + &self.b1).mapv(|v| v.max(0.0));
        h.dot(&self.w2) + &self.b2
    }

    /// Inclusion logits for `edges`, using rows of `zs` as endpoint features.
    pub fn logits(&self, edges: &EdgeSet, zs: &Mat) -> Vec<f64> {
        let (ab, ba) = edges.features(zs);
        let (la, lb) = (self.half(&ab), self.half(&ba));
        la.iter().zip(lb.iter()).map(|(a, b)| 0.5 * (a + b)).collect()
    }
}

pub(crate) fn edge_logits(tape: &mut Tape, v: &ExplainerVars, xab: Var, xba: Var) -> Var {
    let mut half = |x: Var| {
        let h = tape.matmul(x, v.w1);
        let h = tape.add_row(h, v.b1);
        let h = tape.relu(h);
        let o = tape.matmul(h, v.w2);
        tape.add_row(o, v.b2)
    };
    let a = half(xab);
    let b = half(xba);
    let s = tape.add(a, b);
    tape.scale(s, 0.5)
}

/// Canonical undirected edges `(min, max)` in first-seen order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EdgeSet {
    pub edges: Vec<(NodeId, NodeId)>,
    index: HashMap<(NodeId, NodeId), usize>,
}

impl EdgeSet {
    pub fn intern(&mut self, u: NodeId, v: NodeId) -> usize {
        let key = (u.min(v), u.max(v));
        let next = self.edges.len();
        *self.index.entry(key).or_insert_with(|| {
            self.edges.push(key);
            next
        })
    }

    pub fn get(&self, u: NodeId, v: NodeId) -> Option<usize> {
        self.index.get(&(u.min(v), u.max(v))).copied()
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    fn features(&self, zs: &Mat) -> (Mat, Mat) {
        let d = zs.ncols();
        let mut ab = Mat::zeros((self.len(), 2 * d));
        let mut ba = Mat::zeros((self.len(), 2 * d));
        for (e, &(a, b)) in self.edges.iter().enumerate() {
            for c in 0..d {
                let (za, zb) = (zs[[a as usize, c]], zs[[b as usize, c]]);
                ab[[e, c]] = za;
                ab[[e, d + c]] = zb;
                ba[[e, c]] = zb;
                ba[[e, d + c]] = za;
            }
        }
        (ab, ba)
    }
}

/// Full encode plan for `targets` with each neighbour term gated by its edge.
fn masked_plan(g: &EntityGraph, targets: &[NodeId]) -> (EncodePlan, EdgeSet) {
    let mut plan = EncodePlan::full(g, targets);
    let mut edges = EdgeSet::default();
    plan.attach_edge_masks(targets, |u, v| edges.intern(u, v));
    (plan, edges)
}

/// Edges the two-layer encoder reads when embedding `targets`.
pub fn computation_edges(g: &EntityGraph, targets: &[NodeId]) -> EdgeSet {
    masked_plan(g, targets).1
}

/// One step's worth of masked-encoding inputs.
pub struct MaskBatch {
    pub plan: EncodePlan,
    pub edges: EdgeSet,
    pub xab: Mat,
    pub xba: Mat,
    /// Target row for every instance row.
    pub rows: Vec<usize>,
}

impl MaskBatch {
    pub fn new(g: &EntityGraph, zs: &Mat, entities: &[NodeId]) -> Self {
        let mut targets: Vec<NodeId> = Vec::new();
        let rows = entities
            .iter()
            .map(|&u| {
                targets.iter().position(|&t| t == u).unwrap_or_else(|| {
                    targets.push(u);
                    targets.len() - 1
                })
            })
            .collect();
        let (plan, edges) = masked_plan(g, &targets);
        let (xab, xba) = edges.features(zs);
        MaskBatch {
            plan,
            edges,
            xab,
            xba,
            rows,
        }
    }

    /// Logistic noise `ln u − ln(1−u)` for each edge.
    pub fn noise(&self, rng: &mut Rng) -> Mat {
        Mat::from_shape_fn((self.edges.len(), 1), |_| {
            let u: f64 = rng.random_range(1e-6..1.0 - 1e-6);
            u.ln() - (1.0 - u).ln()
        })
    }
}

/// Per-row cross-entropy between `full` and predictions on relaxed masked
/// graphs, averaged over the noise draws (`N×1`), and the sparsity term
/// `sparsity · mean σ(logit)`.
#[allow(clippy::too_many_arguments)]
pub fn edge_mask_loss(
    tape: &mut Tape,
    sage: &SageVars,
    head: &HeadVars,
    ev_w: [Var; 4],
    batch: &MaskBatch,
    hz: Var,
    full: &Mat,
    noise: &[Mat],
    temperature: f64,
    sparsity: f64,
) -> (Var, Var) {
    let ev = ExplainerVars {
        w1: ev_w[0],
        b1: ev_w[1],
        w2: ev_w[2],
        b2: ev_w[3],
    };
    let xab = tape.constant(batch.xab.clone());
    let xba = tape.constant(batch.xba.clone());
    let logits = edge_logits(tape, &ev, xab, xba);
    let mut acc: Option<Var> = None;
    for eps in noise {
        let e = tape.constant(eps.clone());
        let s = tape.add(logits, e);
        let s = tape.scale(s, 1.0 / temperature);
        let mask = tape.sigmoid(s);
        let z = encode_masked(tape, sage, &batch.plan, Some(mask));
        let zr = tape.gather(z, batch.rows.clone());
        let x = tape.concat(hz, zr);
        let ce = head_soft_ce_rows(tape, head, x, full);
        acc = Some(match acc {
            Some(a) => tape.add(a, ce),
            None => ce,
        });
    }
    let ce = acc.expect("at least one noise draw");
    let ce = tape.scale(ce, 1.0 / noise.len() as f64);
    let p = tape.sigmoid(logits);
    let mp = tape.mean(p);
    let sp = tape.scale(mp, sparsity);
    (ce, sp)
}

pub fn train_graph_explainer(
    m: &Frozen<'_>,
    data: &ExplainData,
    cfg: &GraphExplainerConfig,
) -> Result<(GraphExplainer, Vec<f64>)> {
    if cfg.samples == 0 || cfg.batch_size == 0 {
        return Err(Error::Invalid(
            "graph explainer needs positive samples and batch size".into(),
        ));
    }
    let full = m.probs(&data.inputs())?;
    let hz = {
        let x = data.inputs();
        let w = data.dim_h() + data.zc.ncols();
        x.slice(ndarray::s![.., ..w]).to_owned()
    };
    let mut ex = GraphExplainer::init(
        data.zs.ncols(),
        cfg.hidden,
        &mut rng::stream(cfg.seed, "explain.graph.init"),
    );
    let mut adam = Adam::new(cfg.lr);
    let mut losses = Vec::new();
    let with_entity: Vec<usize> = (0..data.len()).filter(|&i| data.entities[i].is_some()).collect();
    if with_entity.is_empty() {
        log::warn!("no instance has a graph entity; graph explainer left at its initialisation");
        return Ok((ex, losses));
    }
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let temp = cfg.temperature(epoch);
        let mut order = with_entity.clone();
        order.shuffle(&mut rng::stream_indexed(cfg.seed, "explain.graph.epoch", epoch as u64));
        for batch in order.chunks(cfg.batch_size) {
            let ents: Vec<NodeId> = batch.iter().map(|&i| data.entities[i].expect("filtered")).collect();
            let mb = MaskBatch::new(m.gs, &data.zs, &ents);
            let mut nr = rng::stream_indexed(cfg.seed, "explain.graph.noise", step as u64);
            let noise: Vec<Mat> = (0..cfg.samples).map(|_| mb.noise(&mut nr)).collect();
            let mut tape = Tape::new();
            let sv = m.sage.bind(&mut tape, false);
            let hv = m.head.bind(&mut tape, false);
            let ev = ex.bind(&mut tape);
            let hzb = tape.constant(gather_rows(&hz, batch));
            let (ce, sp) = edge_mask_loss(
                &mut tape,
                &sv,
                &hv,
                ev.all(),
                &mb,
                hzb,
                &gather_rows(&full, batch),
                &noise,
                temp,
                cfg.sparsity,
            );
            let mean = tape.mean(ce);
            let loss = tape.add(mean, sp);
            let lv = tape.scalar_value(loss);
            if !lv.is_finite() {
                return Err(Error::Divergence {
                    stage: "explain-graph",
                    step,
                    loss: lv,
                });
            }
            let g = tape.backward(loss);
            let grads: Vec<Mat> = ev.all().iter().map(|&v| g.get(&tape, v)).collect();
            let [a, b, c, d] = ex.params_mut();
            adam.step(&mut [a, b, c, d], &grads);
            debug_assert!(all_finite(&ex.w1) && all_finite(&ex.w2));
            losses.push(lv);
            step += 1;
        }
    }
    Ok((ex, losses))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphExplanation {
    /// Selected edges with inclusion probabilities, best first.
    pub edges: Vec<(NodeId, NodeId, f64)>,
    /// Endpoints of the selected edges, ascending.
    pub nodes: Vec<NodeId>,
    /// Node of `nodes` with the most training instances, lowest id on ties.
    pub top_entity: Option<NodeId>,
}

/// The `budget` most probable edges of `u`'s computation graph.
pub fn extract_subgraph(
    ex: &GraphExplainer,
    g: &EntityGraph,
    zs: &Mat,
    u: NodeId,
    budget: usize,
    train_counts: &HashMap<NodeId, usize>,
) -> GraphExplanation {
    let edges = computation_edges(g, &[u]);
    let logits = ex.logits(&edges, zs);
    let mut scored: Vec<(NodeId, NodeId, f64)> = edges
        .edges
        .iter()
        .zip(&logits)
        .map(|(&(a, b), &l)| (a, b, sigmoid(l)))
        .collect();
    scored.sort_by(|x, y| y.2.total_cmp(&x.2).then((x.0, x.1).cmp(&(y.0, y.1))));
    scored.truncate(budget);
    let mut nodes: Vec<NodeId> = scored.iter().flat_map(|&(a, b, _)| [a, b]).collect();
    nodes.sort_unstable();
    nodes.dedup();
    let top_entity = nodes.iter().copied().max_by(|a, b| {
        let (ca, cb) = (train_counts.get(a).unwrap_or(&0), train_counts.get(b).unwrap_or(&0));
        ca.cmp(cb).then(b.cmp(a))
    });
    GraphExplanation {
        edges: scored,
        nodes,
        top_entity,
    }
}
