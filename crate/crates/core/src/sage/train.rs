use std::collections::HashMap;

use rand::seq::SliceRandom;

use super::model::{encode, graph_loss, EncodePlan, PairBatch, SageModel};
use super::walks::{sample_walks, NegativeSampler, Sampler};
use super::{EmbeddingTable, SageConfig, SageGraph, TrainConfig, WalkConfig};
use crate::error::{Error, Result};
use crate::graph::NodeId;
use crate::optim::{all_finite, Adam};
use crate::rng::{self, Rng};
use crate::tape::Tape;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    /// Mean batch loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
    pub pairs: usize,
}

/// Draws negatives for `pairs` and a sampled plan over every node involved.
pub fn build_pair_batch<G: SageGraph + ?Sized>(
    sampler: &Sampler<'_, G>,
    negatives: &NegativeSampler,
    cfg: &SageConfig,
    pairs: &[(NodeId, NodeId)],
    rng: &mut Rng,
) -> (EncodePlan, PairBatch) {
    let mut nodes: Vec<NodeId> = Vec::new();
    let mut row: HashMap<NodeId, usize> = HashMap::new();
    let mut intern = |u: NodeId| {
        *row.entry(u).or_insert_with(|| {
            nodes.push(u);
            nodes.len() - 1
        })
    };
    let mut batch = PairBatch::default();
    for &(i, j) in pairs {
        let (ri, rj) = (intern(i), intern(j));
        batch.positives.push((ri, rj));
        for k in negatives.draw(i, j, cfg.negatives, rng) {
            let rk = intern(k);
            batch.negatives.push((ri, rk));
        }
    }
    let plan = EncodePlan::sampled(sampler, &nodes, cfg.fanouts, rng);
    (plan, batch)
}

/// Adam on the unsupervised objective over fixed walk pairs, reshuffled every
/// epoch.
pub fn train_model<G: SageGraph + ?Sized>(
    g: &G,
    model: &mut SageModel,
    walks: &WalkConfig,
    opt: &TrainConfig,
) -> Result<TrainReport> {
    walks.validate()?;
    if g.node_count() == 0 {
        return Err(Error::EmptyGraph);
    }
    if opt.batch_size == 0 {
        return Err(Error::Invalid("batch size must be positive".into()));
    }
    let mut pairs = sample_walks(g, walks);
    let sampler = Sampler::new(g);
    let negatives = NegativeSampler::new(g);
    let mut adam = Adam::new(opt.lr);
    let mut report = TrainReport {
        pairs: pairs.len(),
        ..Default::default()
    };
    for epoch in 0..opt.epochs {
        pairs.shuffle(&mut rng::stream_indexed(opt.seed, "sage.epoch", epoch as u64));
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in pairs.chunks(opt.batch_size) {
            let mut brng = rng::stream_indexed(opt.seed, "sage.batch", report.steps as u64);
            let (plan, batch) = build_pair_batch(&sampler, &negatives, &model.config, chunk, &mut brng);
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape, true);
            let z = encode(&mut tape, &vars, &plan);
            let loss = graph_loss(&mut tape, z, &batch);
            let value = tape.scalar_value(loss);
            if !value.is_finite() {
                return Err(Error::Divergence {
                    stage: "sage",
                    step: report.steps,
                    loss: value,
                });
            }
            let grads = tape.backward(loss);
            let g: Vec<_> = vars.all().iter().map(|&v| grads.get(&tape, v)).collect();
            adam.step(&mut model.params_mut(), &g);
            debug_assert!(model.params().iter().all(|p| all_finite(p)), "non-finite parameter");
            total += value;
            batches += 1;
            report.steps += 1;
        }
        let mean = total / batches.max(1) as f64;
        log::debug!("sage epoch {epoch}: loss {mean:.6}");
        report.epoch_losses.push(mean);
    }
    Ok(report)
}

pub fn train_embeddings<G: SageGraph + ?Sized>(
    g: &G,
    cfg: &SageConfig,
    walks: &WalkConfig,
    opt: &TrainConfig,
) -> Result<(SageModel, EmbeddingTable, TrainReport)> {
    let mut init_rng = rng::stream(opt.seed, "sage.init");
    let mut model = SageModel::init(cfg.clone(), g.node_count(), &mut init_rng)?;
    let report = train_model(g, &mut model, walks, opt)?;
    let table = model.embedding_table(g)?;
    if !table.is_finite() {
        return Err(Error::Divergence {
            stage: "sage",
            step: report.steps,
            loss: f64::NAN,
        });
    }
    Ok((model, table, report))
}
