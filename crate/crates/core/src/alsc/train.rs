use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::head::{head_loss, Head};
use crate::error::{Error, Result};
use crate::graph::{EntityGraph, NodeId};
use crate::optim::{all_finite, Adam};
use crate::rng::{self, Rng};
use crate::sage::{
    build_pair_batch, encode, graph_loss, sample_walks, EncodePlan, NegativeSampler, SageModel, Sampler, WalkConfig,
};
use crate::tape::{AggTerm, Mat, Tape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            lr: 3e-5,
            batch_size: 32,
            epochs: 7,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointConfig {
    pub alpha1: f64,
    pub alpha2: f64,
    pub graph_batch: usize,
    pub head: HeadConfig,
}

impl Default for JointConfig {
    fn default() -> Self {
        JointConfig {
            alpha1: 1.0,
            alpha2: 1.0,
            graph_batch: 512,
            head: HeadConfig::default(),
        }
    }
}

impl JointConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha1 < 0.0 || self.alpha2 < 0.0 || (self.alpha1 == 0.0 && self.alpha2 == 0.0) {
            return Err(Error::Invalid(
                "alpha1 and alpha2 must be non-negative and not both zero".into(),
            ));
        }
        if self.graph_batch == 0 || self.head.batch_size == 0 {
            return Err(Error::Invalid("batch sizes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainTrace {
    pub step_losses: Vec<f64>,
    /// Mean step loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream_indexed(seed, "alsc.epoch", epoch as u64));
    order
}

fn head_rng(seed: u64) -> Rng {
    rng::stream(seed, "alsc.head.init")
}

fn check_rows(x: &Mat, labels: &[usize]) -> Result<()> {
    if x.nrows() != labels.len() {
        return Err(Error::DimMismatch {
            context: "training labels",
            expected: x.nrows(),
            got: labels.len(),
        });
    }
    if labels.is_empty() {
        return Err(Error::Invalid("empty training set".into()));
    }
    Ok(())
}

fn gather_rows(m: &Mat, rows: &[usize]) -> Mat {
    Mat::from_shape_fn((rows.len(), m.ncols()), |(r, c)| m[[rows[r], c]])
}

/// Head-only training on fixed inputs `x = [h; z]`. Returns the parameters
/// from the epoch with the lowest mean training loss.
pub fn train_static(x: &Mat, labels: &[usize], cfg: &HeadConfig) -> Result<(Head, TrainTrace)> {
    check_rows(x, labels)?;
    if cfg.batch_size == 0 {
        return Err(Error::Invalid("batch size must be positive".into()));
    }
    let mut head = Head::init(x.ncols(), &mut head_rng(cfg.seed));
    let mut adam = Adam::new(cfg.lr);
    let mut trace = TrainTrace::default();
    let mut best = (f64::INFINITY, head.clone());
    for epoch in 0..cfg.epochs {
        let order = epoch_order(x.nrows(), cfg.seed, epoch);
        let mut total = 0.0;
        let mut steps = 0;
        for batch in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let vars = head.bind(&mut tape, true);
            let xb = tape.constant(gather_rows(x, batch));
            let yb: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let loss = head_loss(&mut tape, &vars, xb, &yb);
            let value = tape.scalar_value(loss);
            if !value.is_finite() {
                return Err(Error::Divergence {
                    stage: "train-static",
                    step: trace.step_losses.len(),
                    loss: value,
                });
            }
            let g = tape.backward(loss);
            adam.step(
                &mut [&mut head.w, &mut head.b],
                &[g.get(&tape, vars.w), g.get(&tape, vars.b)],
            );
            debug_assert!(all_finite(&head.w) && all_finite(&head.b));
            trace.step_losses.push(value);
            total += value;
            steps += 1;
        }
        let mean = total / steps.max(1) as f64;
        log::debug!("train-static epoch {epoch}: loss {mean:.6}");
        trace.epoch_losses.push(mean);
        if mean < best.0 {
            best = (mean, head.clone());
            trace.best_epoch = epoch;
        }
    }
    if cfg.epochs > 0 {
        head = best.1;
    }
    Ok((head, trace))
}

/// Per-instance inputs for end-to-end training.
pub struct JointInputs<'a> {
    /// `N × dim_h` text features.
    pub text: &'a Mat,
    /// `N × dim_C` frozen cluster embeddings (zero rows for UNK).
    pub zc: &'a Mat,
    /// Local id of each instance's entity in `G_s`, `None` for UNK.
    pub entities: &'a [Option<NodeId>],
    pub labels: &'a [usize],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointStep {
    pub alsc: f64,
    pub graph: f64,
    pub joint: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct JointTrace {
    pub steps: Vec<JointStep>,
    pub epoch_losses: Vec<f64>,
    pub best_epoch: usize,
}

/// `[text | zc | zs]` for every instance, with `zs` taken from `zs_local`
/// (rows indexed by local subgraph id) and zero for UNK.
pub fn joint_features(text: &Mat, zc: &Mat, zs_local: &Mat, entities: &[Option<NodeId>]) -> Mat {
    let (dh, dc, ds) = (text.ncols(), zc.ncols(), zs_local.ncols());
    let mut x = Mat::zeros((text.nrows(), dh + dc + ds));
    for r in 0..text.nrows() {
        for c in 0..dh {
            x[[r, c]] = text[[r, c]];
        }
        for c in 0..dc {
            x[[r, dh + c]] = zc[[r, c]];
        }
        if let Some(u) = entities[r] {
            for c in 0..ds {
                x[[r, dh + dc + c]] = zs_local[[u as usize, c]];
            }
        }
    }
    x
}

/// Interleaved minimisation of `α1·L_ALSC + α2·L_GS`: every step takes one
/// classification batch and one graph batch and applies a single update to
/// the head and the subgraph encoder. `z_C` enters as a constant.
pub fn train_joint(
    inputs: &JointInputs<'_>,
    gs: &EntityGraph,
    sage: &SageModel,
    walks: &WalkConfig,
    cfg: &JointConfig,
) -> Result<(Head, SageModel, JointTrace)> {
    cfg.validate()?;
    let n = inputs.labels.len();
    if inputs.text.nrows() != n || inputs.zc.nrows() != n || inputs.entities.len() != n {
        return Err(Error::DimMismatch {
            context: "joint inputs",
            expected: n,
            got: inputs.text.nrows().min(inputs.zc.nrows()).min(inputs.entities.len()),
        });
    }
    if n == 0 {
        return Err(Error::Invalid("empty training set".into()));
    }
    if sage.node_count() != gs.node_count() {
        return Err(Error::DimMismatch {
            context: "subgraph encoder size",
            expected: gs.node_count(),
            got: sage.node_count(),
        });
    }
    let hcfg = &cfg.head;
    let dim = inputs.text.ncols() + inputs.zc.ncols() + sage.config.output_dim;
    let mut head = Head::init(dim, &mut head_rng(hcfg.seed));
    let mut model = sage.clone();
    let mut adam = Adam::new(hcfg.lr);

    let mut pairs = if gs.node_count() > 0 {
        sample_walks(gs, walks)
    } else {
        Vec::new()
    };
    let sampler = Sampler::new(gs);
    let negatives = NegativeSampler::new(gs);
    let mut cursor = 0usize;
    let mut cycle = 0u64;

    let mut trace = JointTrace::default();
    let mut best = (f64::INFINITY, head.clone(), model.clone());
    for epoch in 0..hcfg.epochs {
        let order = epoch_order(n, hcfg.seed, epoch);
        let mut total = 0.0;
        let mut steps = 0;
        for batch in order.chunks(hcfg.batch_size) {
            let step = trace.steps.len();
            let mut tape = Tape::new();
            let hv = head.bind(&mut tape, true);
            let sv = model.bind(&mut tape, true);

            // classification branch
            let mut targets: Vec<NodeId> = Vec::new();
            let mut rows = Vec::with_capacity(batch.len());
            for &i in batch {
                rows.push(match inputs.entities[i] {
                    Some(u) => {
                        let r = targets.iter().position(|&t| t == u).unwrap_or_else(|| {
                            targets.push(u);
                            targets.len() - 1
                        });
                        vec![AggTerm::plain(r, 1.0)]
                    }
                    None => Vec::new(),
                });
            }
            let zs_rows = if targets.is_empty() {
                tape.constant(Mat::zeros((batch.len(), model.config.output_dim)))
            } else {
                let plan = EncodePlan::full(gs, &targets);
                let z = encode(&mut tape, &sv, &plan);
                tape.aggregate(z, None, rows)
            };
            let hb = tape.constant(gather_rows(inputs.text, batch));
            let zcb = tape.constant(gather_rows(inputs.zc, batch));
            let x = tape.concat(hb, zcb);
            let x = tape.concat(x, zs_rows);
            let yb: Vec<usize> = batch.iter().map(|&i| inputs.labels[i]).collect();
            let l_alsc = head_loss(&mut tape, &hv, x, &yb);

            // graph branch
            let l_gs = if pairs.is_empty() {
                tape.scalar(0.0)
            } else {
                if cursor >= pairs.len() {
                    cursor = 0;
                }
                if cursor == 0 {
                    pairs.shuffle(&mut rng::stream_indexed(hcfg.seed, "joint.pairs", cycle));
                    cycle += 1;
                }
                let end = (cursor + cfg.graph_batch).min(pairs.len());
                let chunk = &pairs[cursor..end];
                cursor = end;
                let mut brng = rng::stream_indexed(hcfg.seed, "joint.graph-batch", step as u64);
                let (plan, pb) = build_pair_batch(&sampler, &negatives, &model.config, chunk, &mut brng);
                let z = encode(&mut tape, &sv, &plan);
                graph_loss(&mut tape, z, &pb)
            };

            let a = tape.scale(l_alsc, cfg.alpha1);
            let b = tape.scale(l_gs, cfg.alpha2);
            let joint = tape.add(a, b);
            let rec = JointStep {
                alsc: tape.scalar_value(l_alsc),
                graph: tape.scalar_value(l_gs),
                joint: tape.scalar_value(joint),
            };
            if !rec.joint.is_finite() {
                return Err(Error::Divergence {
                    stage: "train-joint",
                    step,
                    loss: rec.joint,
                });
            }
            let g = tape.backward(joint);
            let mut grads = vec![g.get(&tape, hv.w), g.get(&tape, hv.b)];
            grads.extend(sv.all().iter().map(|&v| g.get(&tape, v)));
            let [f, w1, b1, w2, b2] = model.params_mut();
            adam.step(&mut [&mut head.w, &mut head.b, f, w1, b1, w2, b2], &grads);
            debug_assert!(model.params().iter().all(|p| all_finite(p)) && all_finite(&head.w));
            trace.steps.push(rec);
            total += rec.joint;
            steps += 1;
        }
        let mean = total / steps.max(1) as f64;
        log::debug!("train-joint epoch {epoch}: loss {mean:.6}");
        trace.epoch_losses.push(mean);
        if mean < best.0 {
            best = (mean, head.clone(), model.clone());
            trace.best_epoch = epoch;
        }
    }
    if hcfg.epochs > 0 {
        head = best.1;
        model = best.2;
    }
    Ok((head, model, trace))
}
