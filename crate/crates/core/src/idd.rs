//! Incorrect-disambiguation detection: a probing projection `B` learned from
//! graph-neighbourhood triplets, and zeroing of aspects whose text view
//! disagrees with their graph view.

use std::collections::BTreeMap;
use std::io::{BufRead, Read, Write};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::NodeId;
use crate::metrics::cosine;
use crate::optim::{all_finite, Adam};
use crate::rng::{self, Rng};
use crate::sage::EmbeddingTable;
use crate::tape::{sigmoid, Mat, Tape, Var};
use crate::two_level::{Flag, TwoLevelTable};

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub dim_b: usize,
    pub lambda: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            dim_b: 100,
            lambda: 0.01,
            lr: 1e-5,
            batch_size: 128,
            epochs: 100,
            seed: 0,
        }
    }
}

/// Which sign of the mean margin leads to zeroing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ZeroRule {
    /// Zero when near aspects are not more text-similar than far ones.
    #[default]
    NegativeMargin,
    /// The literal reading: zero when the margin is non-negative.
    NonNegativeMargin,
}

impl ZeroRule {
    pub fn zeroes(self, margin: f64) -> bool {
        match self {
            ZeroRule::NegativeMargin => margin < 0.0,
            ZeroRule::NonNegativeMargin => margin >= 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectConfig {
    pub n: usize,
    pub samples: usize,
    pub rule: ZeroRule,
    pub seed: u64,
}

impl Default for DetectConfig {
    fn default() -> Self {
        DetectConfig {
            n: 10,
            samples: 20,
            rule: ZeroRule::NegativeMargin,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbingModel {
    /// `dim_B × dim_h`.
    pub b: Mat,
    pub lambda: f64,
}

impl ProbingModel {
    pub fn init(dim_b: usize, dim_h: usize, lambda: f64, rng: &mut Rng) -> Self {
        let normal = Normal::new(0.0, 1.0 / (dim_b as f64).sqrt()).expect("valid std");
        ProbingModel {
            b: Mat::from_shape_fn((dim_b, dim_h), |_| normal.sample(rng)),
            lambda,
        }
    }

    pub fn dim_h(&self) -> usize {
        self.b.ncols()
    }

    pub fn project(&self, h: &[f32]) -> Result<Vec<f64>> {
        if h.len() != self.dim_h() {
            return Err(Error::DimMismatch {
                context: "probe input",
                expected: self.dim_h(),
                got: h.len(),
            });
        }
        Ok(self
            .b
            .rows()
            .into_iter()
            .map(|r| r.iter().zip(h).map(|(&b, &x)| b * x as f64).sum())
            .collect())
    }

    pub fn similarity(&self, hi: &[f32], hj: &[f32]) -> Result<f64> {
        let (pi, pj) = (self.project(hi)?, self.project(hj)?);
        Ok(similarity_projected(&pi, &pj))
    }

    /// AREM snapshot with one row per probe dimension.
    pub fn write_snapshot<W: Write>(&self, out: W) -> Result<()> {
        EmbeddingTable::dense(&self.b).write_snapshot(out)
    }

    pub fn read_snapshot<R: Read>(input: R, lambda: f64) -> Result<Self> {
        let t = EmbeddingTable::read_snapshot(input)?;
        let b = t.to_mat();
        Ok(ProbingModel { b, lambda })
    }
}

fn similarity_projected(pi: &[f64], pj: &[f64]) -> f64 {
    sigmoid(pi.iter().zip(pj).map(|(a, b)| a * b).sum())
}

/// `σ((B h_i)ᵀ(B h_j))`.
pub fn probe_similarity(b: &Mat, hi: &[f64], hj: &[f64]) -> Result<f64> {
    if hi.len() != b.ncols() || hj.len() != b.ncols() {
        return Err(Error::DimMismatch {
            context: "probe input",
            expected: b.ncols(),
            got: if hi.len() != b.ncols() { hi.len() } else { hj.len() },
        });
    }
    let proj = |h: &[f64]| -> Vec<f64> {
        b.rows()
            .into_iter()
            .map(|r| r.iter().zip(h).map(|(x, y)| x * y).sum())
            .collect()
    };
    Ok(similarity_projected(&proj(hi), &proj(hj)))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripletSet {
    /// Entity ids `(i, j, k)`.
    pub triplets: Vec<(NodeId, NodeId, NodeId)>,
    pub n: usize,
}

/// Other rows of `z` ordered by decreasing cosine similarity to row `i`,
/// ties broken by position.
pub fn rank_by_similarity(z: &EmbeddingTable, i: usize) -> Vec<usize> {
    let zi = z.row(i);
    let mut sims: Vec<(f64, usize)> = (0..z.len())
        .filter(|&o| o != i)
        .map(|o| (cosine(zi, z.row(o)), o))
        .collect();
    sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    sims.into_iter().map(|(_, o)| o).collect()
}

fn sample_pairs(ranked: &[usize], n: usize, count: usize, rng: &mut Rng) -> Vec<(usize, usize)> {
    if ranked.len() <= n || n == 0 {
        return Vec::new();
    }
    let (near, far) = ranked.split_at(n);
    (0..count)
        .map(|_| {
            (
                near[rng.random_range(0..near.len())],
                far[rng.random_range(0..far.len())],
            )
        })
        .collect()
}

/// For every aspect row `i` of `z`, `per_aspect` pairs with `j` drawn from
/// the `n` most similar aspects and `k` from the rest.
pub fn build_triplets(z: &EmbeddingTable, n: usize, per_aspect: usize, seed: u64) -> Result<TripletSet> {
    if z.len() < n + 2 {
        return Err(Error::Invalid(format!(
            "triplets need at least n + 2 = {} aspects, got {}",
            n + 2,
            z.len()
        )));
    }
    if n == 0 {
        return Err(Error::Invalid("triplet cut-off n must be positive".into()));
    }
    let mut triplets = Vec::with_capacity(z.len() * per_aspect);
    for i in 0..z.len() {
        let ranked = rank_by_similarity(z, i);
        let mut r = rng::stream_indexed(seed, "idd.triplets", z.ids()[i] as u64);
        for (j, k) in sample_pairs(&ranked, n, per_aspect, &mut r) {
            triplets.push((z.ids()[i], z.ids()[j], z.ids()[k]));
        }
    }
    Ok(TripletSet { triplets, n })
}

/// Batch objective `Σ (S(i,k) − S(i,j)) + reg · ‖B‖²` over rows of `h`.
pub fn probe_objective(tape: &mut Tape, b: Var, h: Var, triplets: &[(usize, usize, usize)], reg: f64) -> Var {
    let bt = tape.transpose(b);
    let p = tape.matmul(h, bt);
    let ij: Vec<(usize, usize)> = triplets.iter().map(|t| (t.0, t.1)).collect();
    let ik: Vec<(usize, usize)> = triplets.iter().map(|t| (t.0, t.2)).collect();
    let dij = tape.row_dots(p, p, ij);
    let dik = tape.row_dots(p, p, ik);
    let sij = tape.sigmoid(dij);
    let sik = tape.sigmoid(dik);
    let diff = tape.sub(sik, sij);
    let fit = tape.sum(diff);
    let norm = tape.sum_squares(b);
    let pen = tape.scale(norm, reg);
    tape.add(fit, pen)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProbeTrace {
    /// Objective summed over all batches, per epoch.
    pub epoch_losses: Vec<f64>,
    /// Mean `S(i,j) − S(i,k)` over `τ` after each epoch.
    pub margins: Vec<f64>,
}

fn h_rows(h: &EmbeddingTable, ids: &[NodeId]) -> Result<Mat> {
    let mut m = Mat::zeros((ids.len(), h.dim()));
    for (r, &id) in ids.iter().enumerate() {
        let row = h
            .get(id)
            .ok_or_else(|| Error::Invalid(format!("aspect entity {id} has no text embedding")))?;
        for (c, &x) in row.iter().enumerate() {
            m[[r, c]] = x as f64;
        }
    }
    Ok(m)
}

fn training_margin(b: &Mat, h: &Mat, triplets: &[(usize, usize, usize)]) -> f64 {
    let p = h.dot(&b.t());
    let s = |a: usize, c: usize| sigmoid(p.row(a).dot(&p.row(c)));
    triplets.iter().map(|&(i, j, k)| s(i, j) - s(i, k)).sum::<f64>() / triplets.len().max(1) as f64
}

pub fn train_probe(tau: &TripletSet, h: &EmbeddingTable, cfg: &ProbeConfig) -> Result<(ProbingModel, ProbeTrace)> {
    if cfg.batch_size == 0 || cfg.dim_b == 0 {
        return Err(Error::Invalid("probe batch size and dimension must be positive".into()));
    }
    let mut ids: Vec<NodeId> = tau.triplets.iter().flat_map(|&(i, j, k)| [i, j, k]).collect();
    ids.sort_unstable();
    ids.dedup();
    let hm = h_rows(h, &ids)?;
    let local = |u: NodeId| ids.binary_search(&u).expect("collected above");
    let triplets: Vec<(usize, usize, usize)> = tau
        .triplets
        .iter()
        .map(|&(i, j, k)| (local(i), local(j), local(k)))
        .collect();

    let mut model = ProbingModel::init(cfg.dim_b, h.dim(), cfg.lambda, &mut rng::stream(cfg.seed, "idd.init"));
    let mut adam = Adam::new(cfg.lr);
    let mut trace = ProbeTrace::default();
    if triplets.is_empty() {
        return Ok((model, trace));
    }
    let total = triplets.len() as f64;
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..triplets.len()).collect();
        order.shuffle(&mut rng::stream_indexed(cfg.seed, "idd.epoch", epoch as u64));
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let bt: Vec<(usize, usize, usize)> = batch.iter().map(|&t| triplets[t]).collect();
            let mut tape = Tape::new();
            let b = tape.param(model.b.clone());
            let hv = tape.constant(hm.clone());
            let reg = cfg.lambda * batch.len() as f64 / total;
            let loss = probe_objective(&mut tape, b, hv, &bt, reg);
            let lv = tape.scalar_value(loss);
            if !lv.is_finite() {
                return Err(Error::Divergence {
                    stage: "idd",
                    step,
                    loss: lv,
                });
            }
            let g = tape.backward(loss).get(&tape, b);
            adam.step(&mut [&mut model.b], &[g]);
            debug_assert!(all_finite(&model.b));
            epoch_loss += lv;
            step += 1;
        }
        trace.epoch_losses.push(epoch_loss);
        trace.margins.push(training_margin(&model.b, &hm, &triplets));
    }
    Ok((model, trace))
}

/// Mean over `pairs` of `S(h_i, h_j) − S(h_i, h_k)` given projected rows.
pub fn mean_margin(proj: &[Vec<f64>], i: usize, pairs: &[(usize, usize)]) -> Option<f64> {
    if pairs.is_empty() {
        return None;
    }
    let sum: f64 = pairs
        .iter()
        .map(|&(j, k)| similarity_projected(&proj[i], &proj[j]) - similarity_projected(&proj[i], &proj[k]))
        .sum();
    Some(sum / pairs.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AspectVerdict {
    pub entity: NodeId,
    pub flag: Flag,
    /// `None` when no pairs could be drawn.
    pub margin: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Detection {
    pub verdicts: Vec<AspectVerdict>,
    pub table: TwoLevelTable,
}

impl Detection {
    pub fn zeroed(&self) -> Vec<NodeId> {
        self.verdicts
            .iter()
            .filter(|v| v.flag == Flag::Zeroed)
            .map(|v| v.entity)
            .collect()
    }

    pub fn write_flags<W: Write>(&self, mut out: W) -> Result<()> {
        for v in &self.verdicts {
            match v.margin {
                Some(m) => writeln!(out, "{}\t{}\t{m}", v.entity, v.flag.as_str())?,
                None => writeln!(out, "{}\t{}\tNA", v.entity, v.flag.as_str())?,
            }
        }
        Ok(())
    }
}

pub fn read_flags<R: BufRead>(input: R) -> Result<Vec<AspectVerdict>> {
    let mut out = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let bad = |m: &str| Error::Parse {
            line: n + 1,
            message: m.to_string(),
        };
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(bad("expected entity<TAB>flag<TAB>margin"));
        }
        out.push(AspectVerdict {
            entity: cols[0].parse().map_err(|_| bad("bad entity id"))?,
            flag: Flag::parse(cols[1]).ok_or_else(|| bad("bad flag"))?,
            margin: if cols[2] == "NA" {
                None
            } else {
                Some(cols[2].parse().map_err(|_| bad("bad margin"))?)
            },
        });
    }
    Ok(out)
}

/// Scores every aspect in `aspects` that has both a text embedding and an
/// `OK` row in `z`, using fresh per-aspect samples, and zeroes the rows the
/// rule selects.
pub fn detect_and_correct(
    probe: &ProbingModel,
    h: &EmbeddingTable,
    z: &TwoLevelTable,
    aspects: &[NodeId],
    cfg: &DetectConfig,
) -> Result<Detection> {
    let mut ids: Vec<NodeId> = aspects
        .iter()
        .copied()
        .filter(|&u| h.get(u).is_some() && z.table().position(u).is_some_and(|p| z.flags()[p] == Flag::Ok))
        .collect();
    ids.sort_unstable();
    ids.dedup();
    let dim = z.dim();
    let mut zdata = Vec::with_capacity(ids.len() * dim);
    for &u in &ids {
        zdata.extend_from_slice(z.table().get(u).expect("filtered above"));
    }
    let zsub = EmbeddingTable::from_parts(dim, ids.clone(), zdata)?;
    let proj: Vec<Vec<f64>> = ids
        .iter()
        .map(|&u| probe.project(h.get(u).expect("filtered above")))
        .collect::<Result<_>>()?;

    let score = |i: usize| -> AspectVerdict {
        let ranked = rank_by_similarity(&zsub, i);
        let mut r = rng::stream_indexed(cfg.seed, "idd.detect", ids[i] as u64);
        let pairs = sample_pairs(&ranked, cfg.n, cfg.samples, &mut r);
        let margin = mean_margin(&proj, i, &pairs);
        let flag = match margin {
            Some(m) if cfg.rule.zeroes(m) => Flag::Zeroed,
            Some(_) => Flag::Ok,
            None => {
                log::warn!("aspect entity {} has no comparison pairs; keeping it", ids[i]);
                Flag::Ok
            }
        };
        AspectVerdict {
            entity: ids[i],
            flag,
            margin,
        }
    };

    let workers = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(ids.len().max(1));
    let chunk = ids.len().div_ceil(workers).max(1);
    let mut verdicts: BTreeMap<usize, AspectVerdict> = BTreeMap::new();
    let n_ids = ids.len();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..n_ids)
            .step_by(chunk)
            .map(|start| {
                let score = &score;
                s.spawn(move || {
                    (start..(start + chunk).min(n_ids))
                        .map(|i| (i, score(i)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            verdicts.extend(h.join().expect("detection worker panicked"));
        }
    });
    let verdicts: Vec<AspectVerdict> = verdicts.into_values().collect();
    let zero: Vec<NodeId> = verdicts
        .iter()
        .filter(|v| v.flag == Flag::Zeroed)
        .map(|v| v.entity)
        .collect();
    Ok(Detection {
        table: z.zeroed(&zero),
        verdicts,
    })
}

/// Per-entity mean of the text features of the instances mapped to it.
pub fn mean_text_embeddings(text: &Mat, entities: &[Option<NodeId>]) -> Result<EmbeddingTable> {
    if text.nrows() != entities.len() {
        return Err(Error::DimMismatch {
            context: "text rows",
            expected: entities.len(),
            got: text.nrows(),
        });
    }
    let mut acc: BTreeMap<NodeId, (Vec<f64>, usize)> = BTreeMap::new();
    for (r, e) in entities.iter().enumerate() {
        if let Some(u) = e {
            let slot = acc.entry(*u).or_insert_with(|| (vec![0.0; text.ncols()], 0));
            for (c, v) in slot.0.iter_mut().enumerate() {
                *v += text[[r, c]];
            }
            slot.1 += 1;
        }
    }
    let ids: Vec<NodeId> = acc.keys().copied().collect();
    let data: Vec<f32> = acc
        .values()
        .flat_map(|(s, n)| s.iter().map(move |v| (v / *n as f64) as f32))
        .collect();
    EmbeddingTable::from_parts(text.ncols(), ids, data)
}
