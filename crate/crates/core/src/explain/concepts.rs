use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use super::{ExplainData, Frozen};
use crate::alsc::{head_nll_rows, HeadVars};
use crate::error::{Error, Result};
use crate::optim::{all_finite, Adam};
use crate::rng::{self, Rng};
use crate::tape::{Mat, Tape, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptConfig {
    pub k: usize,
    pub lambda_div: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for ConceptConfig {
    fn default() -> Self {
        ConceptConfig {
            k: 16,
            lambda_div: 0.1,
            lr: 1e-3,
            batch_size: 64,
            epochs: 30,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptModel {
    /// `dim_h × k`, unit columns.
    pub theta: Mat,
    /// Decoder `k × dim_h` and bias `1 × dim_h`.
    pub w_dec: Mat,
    pub b_dec: Mat,
    pub lambda_div: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConceptTrace {
    pub step_losses: Vec<f64>,
    pub epoch_losses: Vec<f64>,
}

pub(crate) struct ConceptVars {
    pub theta: Var,
    pub w_dec: Var,
    pub b_dec: Var,
}

pub(crate) fn normalize_columns(m: &mut Mat) {
    for mut col in m.columns_mut() {
        let n = col.dot(&col).sqrt();
        if n > 0.0 {
            col /= n;
        }
    }
}

impl ConceptModel {
    pub fn init(dim_h: usize, k: usize, lambda_div: f64, rng: &mut Rng) -> Result<Self> {
        if k < 2 {
            return Err(Error::Invalid("at least two concepts are required".into()));
        }
        let mut theta = Mat::from_shape_fn((dim_h, k), |_| StandardNormal.sample(rng));
        normalize_columns(&mut theta);
        let limit = (6.0 / (k + dim_h) as f64).sqrt();
        Ok(ConceptModel {
            theta,
            w_dec: Mat::from_shape_fn((k, dim_h), |_| rng.random_range(-limit..limit)),
            b_dec: Mat::zeros((1, dim_h)),
            lambda_div,
        })
    }

    pub fn k(&self) -> usize {
        self.theta.ncols()
    }

    /// `g(θᵀh)` for each row of `text`.
    pub fn reconstruct(&self, text: &Mat) -> Mat {
        text.dot(&self.theta).dot(&self.w_dec) + &self.b_dec
    }

    pub(crate) fn bind(&self, tape: &mut Tape) -> ConceptVars {
        ConceptVars {
            theta: tape.param(self.theta.clone()),
            w_dec: tape.param(self.w_dec.clone()),
            b_dec: tape.param(self.b_dec.clone()),
        }
    }

    pub(crate) fn params_mut(&mut self) -> [&mut Mat; 3] {
        [&mut self.theta, &mut self.w_dec, &mut self.b_dec]
    }
}

/// Per-row `−log P(M_o(g(θᵀh), z) = target)` (`N×1`) and the diversity
/// term `λ_div · Σ_{a<b} cos²`.
#[allow(clippy::too_many_arguments)]
pub fn concept_loss(
    tape: &mut Tape,
    theta: Var,
    w_dec: Var,
    b_dec: Var,
    head: &HeadVars,
    h: Var,
    z: Var,
    targets: &[usize],
    lambda_div: f64,
) -> (Var, Var) {
    let scores = tape.matmul(h, theta);
    let rec = tape.matmul(scores, w_dec);
    let rec = tape.add_row(rec, b_dec);
    let x = tape.concat(rec, z);
    let nll = head_nll_rows(tape, head, x, targets);
    let div = tape.pairwise_cos_sq(theta);
    let r = tape.scale(div, lambda_div);
    (nll, r)
}

pub(crate) fn gather_rows(m: &Mat, rows: &[usize]) -> Mat {
    Mat::from_shape_fn((rows.len(), m.ncols()), |(r, c)| m[[rows[r], c]])
}

/// Fits concepts and decoder so the frozen head keeps its own predictions on
/// reconstructed text features.
pub fn train_concepts(m: &Frozen<'_>, data: &ExplainData, cfg: &ConceptConfig) -> Result<(ConceptModel, ConceptTrace)> {
    if data.is_empty() {
        return Err(Error::Invalid("no instances to explain".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Invalid("batch size must be positive".into()));
    }
    let targets = m.predict(&data.inputs())?;
    let z = data.graph_part();
    let mut model = ConceptModel::init(
        data.dim_h(),
        cfg.k,
        cfg.lambda_div,
        &mut rng::stream(cfg.seed, "explain.concepts.init"),
    )?;
    let mut adam = Adam::new(cfg.lr);
    let mut trace = ConceptTrace::default();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng::stream_indexed(
            cfg.seed,
            "explain.concepts.epoch",
            epoch as u64,
        ));
        let mut total = 0.0;
        let mut steps = 0;
        for batch in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let hv = m.head.bind(&mut tape, false);
            let cv = model.bind(&mut tape);
            let h = tape.constant(gather_rows(&data.text, batch));
            let zb = tape.constant(gather_rows(&z, batch));
            let tb: Vec<usize> = batch.iter().map(|&i| targets[i]).collect();
            let (nll, r) = concept_loss(&mut tape, cv.theta, cv.w_dec, cv.b_dec, &hv, h, zb, &tb, cfg.lambda_div);
            let mean = tape.mean(nll);
            let loss = tape.add(mean, r);
            let lv = tape.scalar_value(loss);
            if !lv.is_finite() {
                return Err(Error::Divergence {
                    stage: "explain-concepts",
                    step: trace.step_losses.len(),
                    loss: lv,
                });
            }
            let g = tape.backward(loss);
            let grads = [g.get(&tape, cv.theta), g.get(&tape, cv.w_dec), g.get(&tape, cv.b_dec)];
            let [a, b, c] = model.params_mut();
            adam.step(&mut [a, b, c], &grads);
            normalize_columns(&mut model.theta);
            debug_assert!(all_finite(&model.theta) && all_finite(&model.w_dec));
            trace.step_losses.push(lv);
            total += lv;
            steps += 1;
        }
        trace.epoch_losses.push(total / steps.max(1) as f64);
    }
    Ok((model, trace))
}

/// Token positions ranked by `max_k (θᵀ t_i)_k`, aspect tokens excluded,
/// ties broken by position; at most `top_m`.
pub fn extract_text_explanation(tokens: &Mat, theta: &Mat, aspect_span: (usize, usize), top_m: usize) -> Vec<usize> {
    if tokens.ncols() != theta.nrows() {
        return Vec::new();
    }
    let scores = tokens.dot(theta);
    let mut ranked: Vec<(f64, usize)> = scores
        .rows()
        .into_iter()
        .enumerate()
        .filter(|(i, _)| *i < aspect_span.0 || *i >= aspect_span.1)
        .map(|(i, row)| (row.fold(f64::NEG_INFINITY, |a, &b| a.max(b)), i))
        .collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    ranked.into_iter().take(top_m).map(|(_, i)| i).collect()
}
