use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::data::Label;
use crate::error::{Error, Result};
use crate::persist::mat_serde;
use crate::rng::Rng;
use crate::tape::{Mat, Tape, Var, LOG_EPS};

/// Single affine layer + softmax over `[h; z]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Head {
    #[serde(with = "mat_serde")]
    pub w: Mat,
    #[serde(with = "mat_serde")]
    pub b: Mat,
}

#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub w: Var,
    pub b: Var,
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let e: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// `−log max(pred[label], 1e-12)`.
pub fn alsc_loss(pred: &[f64], label: Label) -> f64 {
    -pred[label.index()].max(1e-12).ln()
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

impl Head {
    pub fn zeros(input_dim: usize) -> Self {
        Head {
            w: Mat::zeros((input_dim, 3)),
            b: Mat::zeros((1, 3)),
        }
    }

    pub fn init(input_dim: usize, rng: &mut Rng) -> Self {
        let limit = (6.0 / (input_dim + 3) as f64).sqrt();
        Head {
            w: Mat::from_shape_fn((input_dim, 3), |_| rng.random_range(-limit..limit)),
            b: Mat::zeros((1, 3)),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::DimMismatch {
                context: "head input",
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        Ok((0..3)
            .map(|c| self.b[[0, c]] + x.iter().enumerate().map(|(i, v)| v * self.w[[i, c]]).sum::<f64>())
            .collect())
    }

    /// Class probabilities for `[h; z]`.
    pub fn predict(&self, h: &[f64], z: &[f32]) -> Result<Vec<f64>> {
        let x: Vec<f64> = h.iter().copied().chain(z.iter().map(|&v| v as f64)).collect();
        Ok(softmax(&self.logits(&x)?))
    }

    /// Probabilities for each row of `x`.
    pub fn predict_rows(&self, x: &Mat) -> Result<Mat> {
        if x.ncols() != self.input_dim() {
            return Err(Error::DimMismatch {
                context: "head input",
                expected: self.input_dim(),
                got: x.ncols(),
            });
        }
        let mut logits = x.dot(&self.w) + &self.b;
        for mut row in logits.rows_mut() {
            let p = softmax(row.as_slice().unwrap());
            row.assign(&ndarray::ArrayView1::from(&p));
        }
        Ok(logits)
    }

    pub fn predict_labels(&self, x: &Mat) -> Result<Vec<Label>> {
        let p = self.predict_rows(x)?;
        Ok(p.rows()
            .into_iter()
            .map(|r| Label::from_index(argmax(r.as_slice().unwrap())))
            .collect())
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> HeadVars {
        if trainable {
            HeadVars {
                w: tape.param(self.w.clone()),
                b: tape.param(self.b.clone()),
            }
        } else {
            HeadVars {
                w: tape.constant(self.w.clone()),
                b: tape.constant(self.b.clone()),
            }
        }
    }
}

/// Clamped log-probabilities, `N×3`.
pub fn head_log_probs(tape: &mut Tape, vars: &HeadVars, x: Var) -> Var {
    let logits = tape.matmul(x, vars.w);
    let logits = tape.add_row(logits, vars.b);
    let lp = tape.log_softmax(logits);
    tape.clamp_min(lp, LOG_EPS)
}

/// Per-row `−log p[label]`, `N×1`.
pub fn head_nll_rows(tape: &mut Tape, vars: &HeadVars, x: Var, labels: &[usize]) -> Var {
    let lp = head_log_probs(tape, vars, x);
    let picked = tape.pick(lp, labels.to_vec());
    tape.scale(picked, -1.0)
}

/// Mean cross-entropy over the rows of `x`.
pub fn head_loss(tape: &mut Tape, vars: &HeadVars, x: Var, labels: &[usize]) -> Var {
    let rows = head_nll_rows(tape, vars, x, labels);
    tape.mean(rows)
}

/// Per-row `−Σ_c target[c] · log q[c]` against a fixed target distribution.
pub fn head_soft_ce_rows(tape: &mut Tape, vars: &HeadVars, x: Var, targets: &Mat) -> Var {
    let lp = head_log_probs(tape, vars, x);
    let t = tape.constant(targets.clone());
    let weighted = tape.mul(lp, t);
    let ones = tape.constant(Mat::from_elem((3, 1), -1.0));
    tape.matmul(weighted, ones)
}
