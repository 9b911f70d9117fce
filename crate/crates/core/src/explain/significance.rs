use rand::seq::SliceRandom;
use rand::Rng as _;

use super::concepts::{concept_loss, gather_rows, normalize_columns, ConceptConfig, ConceptModel};
use super::graph::{edge_mask_loss, GraphExplainer, GraphExplainerConfig, MaskBatch};
use super::{ExplainData, Frozen};
use crate::error::{Error, Result};
use crate::graph::NodeId;
use crate::optim::Adam;
use crate::rng::{self, Rng};
use crate::tape::{sigmoid, Mat, Tape, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct SignificanceConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for SignificanceConfig {
    fn default() -> Self {
        SignificanceConfig {
            lr: 1e-2,
            batch_size: 64,
            epochs: 50,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineConfig {
    /// Weight of the two BCE terms.
    pub lambda: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            lambda: 1.0,
            lr: 1e-3,
            batch_size: 32,
            epochs: 5,
            seed: 0,
        }
    }
}

/// `S_t(x) = σ(x·w_t + b_t)`, `S_g(x) = σ(x·w_g + b_g)` over `x = [h; z]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SignificanceModel {
    pub w_t: Mat,
    pub b_t: Mat,
    pub w_g: Mat,
    pub b_g: Mat,
}

pub(crate) struct SigVars {
    pub w_t: Var,
    pub b_t: Var,
    pub w_g: Var,
    pub b_g: Var,
}

impl SignificanceModel {
    pub fn init(dim: usize, rng: &mut Rng) -> Self {
        let l = (6.0 / (dim + 1) as f64).sqrt();
        SignificanceModel {
            w_t: Mat::from_shape_fn((dim, 1), |_| rng.random_range(-l..l)),
            b_t: Mat::zeros((1, 1)),
            w_g: Mat::from_shape_fn((dim, 1), |_| rng.random_range(-l..l)),
            b_g: Mat::zeros((1, 1)),
        }
    }

    /// `(S_t, S_g)` for each row of `x`, kept strictly inside (0, 1) where
    /// the logistic rounds to an endpoint.
    pub fn predict(&self, x: &Mat) -> (Vec<f64>, Vec<f64>) {
        let t = x.dot(&self.w_t) + &self.b_t;
        let g = x.dot(&self.w_g) + &self.b_g;
        let open = |v: f64| sigmoid(v).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0);
        (
            t.iter().map(|&v| open(v)).collect(),
            g.iter().map(|&v| open(v)).collect(),
        )
    }

    pub(crate) fn bind(&self, tape: &mut Tape) -> SigVars {
        SigVars {
            w_t: tape.param(self.w_t.clone()),
            b_t: tape.param(self.b_t.clone()),
            w_g: tape.param(self.w_g.clone()),
            b_g: tape.param(self.b_g.clone()),
        }
    }

    pub(crate) fn params_mut(&mut self) -> [&mut Mat; 4] {
        [&mut self.w_t, &mut self.b_t, &mut self.w_g, &mut self.b_g]
    }
}

fn logits(tape: &mut Tape, x: Var, w: Var, b: Var) -> Var {
    let l = tape.matmul(x, w);
    tape.add_row(l, b)
}

/// Mean binary cross-entropy of `σ(logit)` against 0/1 `labels`.
fn bce(tape: &mut Tape, logit: Var, labels: &[bool]) -> Var {
    let y = Mat::from_shape_fn((labels.len(), 1), |(r, _)| labels[r] as u8 as f64);
    let ny = y.mapv(|v| 1.0 - v);
    let pos = tape.log_sigmoid(logit);
    let neg_in = tape.scale(logit, -1.0);
    let neg = tape.log_sigmoid(neg_in);
    let yv = tape.constant(y);
    let nyv = tape.constant(ny);
    let a = tape.mul(pos, yv);
    let b = tape.mul(neg, nyv);
    let s = tape.add(a, b);
    let m = tape.mean(s);
    tape.scale(m, -1.0)
}

/// BCE fit of the perturbation labels; returns the per-epoch mean loss.
pub fn train_significance(
    x: &Mat,
    s_t: &[bool],
    s_g: &[bool],
    cfg: &SignificanceConfig,
) -> Result<(SignificanceModel, Vec<f64>)> {
    if x.nrows() != s_t.len() || x.nrows() != s_g.len() {
        return Err(Error::DimMismatch {
            context: "significance labels",
            expected: x.nrows(),
            got: s_t.len().min(s_g.len()),
        });
    }
    if x.nrows() == 0 || cfg.batch_size == 0 {
        return Err(Error::Invalid(
            "significance training needs data and a positive batch size".into(),
        ));
    }
    let mut model = SignificanceModel::init(x.ncols(), &mut rng::stream(cfg.seed, "explain.sig.init"));
    let mut adam = Adam::new(cfg.lr);
    let mut trace = Vec::new();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..x.nrows()).collect();
        order.shuffle(&mut rng::stream_indexed(cfg.seed, "explain.sig.epoch", epoch as u64));
        let mut total = 0.0;
        let mut steps = 0;
        for batch in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let v = model.bind(&mut tape);
            let xb = tape.constant(gather_rows(x, batch));
            let lt = logits(&mut tape, xb, v.w_t, v.b_t);
            let lg = logits(&mut tape, xb, v.w_g, v.b_g);
            let yt: Vec<bool> = batch.iter().map(|&i| s_t[i]).collect();
            let yg: Vec<bool> = batch.iter().map(|&i| s_g[i]).collect();
            let bt = bce(&mut tape, lt, &yt);
            let bg = bce(&mut tape, lg, &yg);
            let loss = tape.add(bt, bg);
            let lv = tape.scalar_value(loss);
            if !lv.is_finite() {
                return Err(Error::Divergence {
                    stage: "explain-significance",
                    step: steps,
                    loss: lv,
                });
            }
            let g = tape.backward(loss);
            let grads = [
                g.get(&tape, v.w_t),
                g.get(&tape, v.b_t),
                g.get(&tape, v.w_g),
                g.get(&tape, v.b_g),
            ];
            let [a, b, c, d] = model.params_mut();
            adam.step(&mut [a, b, c, d], &grads);
            total += lv;
            steps += 1;
        }
        trace.push(total / steps.max(1) as f64);
    }
    Ok((model, trace))
}

/// Components of `L_mm` for one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmmStep {
    /// `mean(sg(S_t) · L_Et)`.
    pub text: f64,
    /// `mean(sg(S_g) · L_Eg)` over rows with a graph entity.
    pub graph: f64,
    pub diversity: f64,
    pub bce_t: f64,
    pub bce_g: f64,
    pub lambda: f64,
    pub total: f64,
}

impl LmmStep {
    pub fn recompose(&self) -> f64 {
        self.text + self.graph + self.diversity + self.lambda * (self.bce_t + self.bce_g)
    }
}

/// Everything one `L_mm` evaluation needs besides the parameters.
pub struct LmmBatch<'a> {
    pub x: Mat,
    pub h: Mat,
    pub z: Mat,
    pub targets: Vec<usize>,
    pub s_t: Vec<bool>,
    pub s_g: Vec<bool>,
    /// Stop-gradient significance weights.
    pub w_t: Mat,
    pub w_g: Mat,
    /// Masked-encoding inputs for the rows with a graph entity.
    pub mask: Option<MaskBatch>,
    pub hz: Mat,
    pub full: Mat,
    pub noise: Vec<Mat>,
    pub temperature: f64,
    pub frozen: Frozen<'a>,
}

pub struct LmmVars {
    pub total: Var,
    pub parts: [Var; 5],
}

/// Builds `L_mm` on `tape` from bound parameters `[θ_con, W_dec, b_dec]`,
/// explainer `[W1, b1, W2, b2]` and significance `[w_t, b_t, w_g, b_g]`.
#[allow(clippy::too_many_arguments)]
pub fn lmm_objective(
    tape: &mut Tape,
    b: &LmmBatch<'_>,
    concept: [Var; 3],
    explainer: [Var; 4],
    sig: [Var; 4],
    lambda_div: f64,
    sparsity: f64,
    lambda: f64,
) -> LmmVars {
    let hv = b.frozen.head.bind(tape, false);
    let h = tape.constant(b.h.clone());
    let z = tape.constant(b.z.clone());
    let (nll, r) = concept_loss(
        tape, concept[0], concept[1], concept[2], &hv, h, z, &b.targets, lambda_div,
    );
    let wt = tape.constant(b.w_t.clone());
    let et = tape.mul(nll, wt);
    let et = tape.mean(et);

    let eg = match &b.mask {
        Some(mb) => {
            let sv = b.frozen.sage.bind(tape, false);
            let hz = tape.constant(b.hz.clone());
            let (ce, sp) = edge_mask_loss(
                tape,
                &sv,
                &hv,
                explainer,
                mb,
                hz,
                &b.full,
                &b.noise,
                b.temperature,
                sparsity,
            );
            let per = tape.add_row(ce, sp);
            let wg = tape.constant(b.w_g.clone());
            let weighted = tape.mul(per, wg);
            tape.mean(weighted)
        }
        None => tape.scalar(0.0),
    };

    let x = tape.constant(b.x.clone());
    let lt = logits(tape, x, sig[0], sig[1]);
    let lg = logits(tape, x, sig[2], sig[3]);
    let bt = bce(tape, lt, &b.s_t);
    let bg = bce(tape, lg, &b.s_g);

    let a = tape.add(et, eg);
    let a = tape.add(a, r);
    let bsum = tape.add(bt, bg);
    let bs = tape.scale(bsum, lambda);
    let total = tape.add(a, bs);
    LmmVars {
        total,
        parts: [et, eg, r, bt, bg],
    }
}

/// Second stage: fits the significance predictors and refines both
/// explainers under the significance-weighted objective. The weights enter
/// as constants; they are not differentiated through.
#[allow(clippy::too_many_arguments)]
pub fn joint_refine(
    m: &Frozen<'_>,
    data: &ExplainData,
    concepts: &ConceptModel,
    explainer: &GraphExplainer,
    sig: &SignificanceModel,
    s_t: &[bool],
    s_g: &[bool],
    ccfg: &ConceptConfig,
    gcfg: &GraphExplainerConfig,
    cfg: &RefineConfig,
) -> Result<(ConceptModel, GraphExplainer, SignificanceModel, Vec<LmmStep>)> {
    if s_t.len() != data.len() || s_g.len() != data.len() {
        return Err(Error::DimMismatch {
            context: "perturbation labels",
            expected: data.len(),
            got: s_t.len().min(s_g.len()),
        });
    }
    if cfg.batch_size == 0 || gcfg.samples == 0 {
        return Err(Error::Invalid(
            "refinement needs a positive batch size and sample count".into(),
        ));
    }
    let x_all = data.inputs();
    let targets = m.predict(&x_all)?;
    let full_all = m.probs(&x_all)?;
    let z_all = data.graph_part();
    let hz_all = x_all
        .slice(ndarray::s![.., ..data.dim_h() + data.zc.ncols()])
        .to_owned();

    let mut con = concepts.clone();
    let mut ex = explainer.clone();
    let mut sm = sig.clone();
    let mut adam = Adam::new(cfg.lr);
    let mut steps = Vec::new();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng::stream_indexed(cfg.seed, "explain.refine.epoch", epoch as u64));
        for batch in order.chunks(cfg.batch_size) {
            let xb = gather_rows(&x_all, batch);
            let (pt, pg) = sm.predict(&xb);
            let graph_rows: Vec<usize> = batch
                .iter()
                .enumerate()
                .filter(|(_, &i)| data.entities[i].is_some())
                .map(|(r, _)| r)
                .collect();
            let orig: Vec<usize> = graph_rows.iter().map(|&r| batch[r]).collect();
            let ents: Vec<NodeId> = orig.iter().map(|&i| data.entities[i].expect("filtered")).collect();
            let mask = (!ents.is_empty()).then(|| MaskBatch::new(m.gs, &data.zs, &ents));
            let noise = match &mask {
                Some(mb) => {
                    let mut nr = rng::stream_indexed(cfg.seed, "explain.refine.noise", steps.len() as u64);
                    (0..gcfg.samples).map(|_| mb.noise(&mut nr)).collect()
                }
                None => Vec::new(),
            };
            let lb = LmmBatch {
                h: gather_rows(&data.text, batch),
                z: gather_rows(&z_all, batch),
                targets: batch.iter().map(|&i| targets[i]).collect(),
                s_t: batch.iter().map(|&i| s_t[i]).collect(),
                s_g: batch.iter().map(|&i| s_g[i]).collect(),
                w_t: Mat::from_shape_fn((batch.len(), 1), |(r, _)| pt[r]),
                w_g: Mat::from_shape_fn((orig.len(), 1), |(r, _)| pg[graph_rows[r]]),
                hz: gather_rows(&hz_all, &orig),
                full: gather_rows(&full_all, &orig),
                mask,
                noise,
                temperature: gcfg.temp_end,
                frozen: *m,
                x: xb,
            };
            let mut tape = Tape::new();
            let cv = con.bind(&mut tape);
            let ev = ex.bind(&mut tape);
            let sv = sm.bind(&mut tape);
            let vars = lmm_objective(
                &mut tape,
                &lb,
                [cv.theta, cv.w_dec, cv.b_dec],
                ev.all(),
                [sv.w_t, sv.b_t, sv.w_g, sv.b_g],
                ccfg.lambda_div,
                gcfg.sparsity,
                cfg.lambda,
            );
            let p = vars.parts.map(|v| tape.scalar_value(v));
            let rec = LmmStep {
                text: p[0],
                graph: p[1],
                diversity: p[2],
                bce_t: p[3],
                bce_g: p[4],
                lambda: cfg.lambda,
                total: tape.scalar_value(vars.total),
            };
            if !rec.total.is_finite() {
                return Err(Error::Divergence {
                    stage: "explain-refine",
                    step: steps.len(),
                    loss: rec.total,
                });
            }
            let g = tape.backward(vars.total);
            let order_vars = [
                cv.theta, cv.w_dec, cv.b_dec, ev.w1, ev.b1, ev.w2, ev.b2, sv.w_t, sv.b_t, sv.w_g, sv.b_g,
            ];
            let grads: Vec<Mat> = order_vars.iter().map(|&v| g.get(&tape, v)).collect();
            {
                let [c1, c2, c3] = con.params_mut();
                let [e1, e2, e3, e4] = ex.params_mut();
                let [s1, s2, s3, s4] = sm.params_mut();
                adam.step(&mut [c1, c2, c3, e1, e2, e3, e4, s1, s2, s3, s4], &grads);
            }
            normalize_columns(&mut con.theta);
            steps.push(rec);
        }
    }
    Ok((con, ex, sm, steps))
}
