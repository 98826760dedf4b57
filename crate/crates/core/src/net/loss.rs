use serde::{Deserialize, Serialize};

use crate::diffcore::{add_all, scale, Tensor};
use crate::error::{Error, Result};
use crate::geom::{AnchorLabel, RegressionTarget, CODE_SIZE};

/// Weights of the localisation, classification and direction terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub loc: f64,
    pub cls: f64,
    pub dir: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { loc: 2.0, cls: 1.0, dir: 0.2 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.loc, self.cls, self.dir].iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config(format!("loss weights must be non-negative: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self { alpha: 0.25, gamma: 2.0 }
    }
}

/// `ln σ(x)` without overflow.
fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn expect_rows(t: &Tensor, cols: usize, rows: usize, what: &str) -> Result<()> {
    if t.shape() != [rows, cols] {
        return Err(Error::dim(format!("{what}: expected [{rows}, {cols}], got {:?}", t.shape())));
    }
    Ok(())
}

/// Focal binary cross-entropy summed over non-ignored anchors.
pub fn focal_loss(cls_logits: &Tensor, labels: &[AnchorLabel], p: FocalParams) -> Result<Tensor> {
    expect_rows(cls_logits, 1, labels.len(), "focal_loss")?;
    let FocalParams { alpha, gamma } = p;
    let x = cls_logits.data();
    let mut total = 0.0;
    let mut grad = vec![0.0; labels.len()];
    for (i, label) in labels.iter().enumerate() {
        // a negative anchor is the positive case mirrored: x → -x, α → 1-α
        let (sign, a) = match label {
            AnchorLabel::Ignore => continue,
            AnchorLabel::Positive(_) => (1.0, alpha),
            AnchorLabel::Negative => (-1.0, 1.0 - alpha),
        };
        let z = sign * x[i];
        let log_p = log_sigmoid(z);
        let p = log_p.exp();
        let q = log_sigmoid(-z).exp();
        let qg = q.powf(gamma);
        total += -a * qg * log_p;
        // d/dz of -a·q^γ·ln p
        let dz = a * (gamma * p * qg * log_p - qg * q);
        grad[i] = sign * dz;
    }
    Ok(Tensor::from_op(vec![1], vec![total], &[cls_logits], move |g| {
        vec![Some(grad.iter().map(|d| d * g[0]).collect())]
    }))
}

/// Smooth-L1 (transition at 1) summed over the 7 residuals of every anchor
/// that has a target.
pub fn smooth_l1_loc_loss(box_deltas: &Tensor, targets: &[Option<RegressionTarget>]) -> Result<Tensor> {
    expect_rows(box_deltas, CODE_SIZE, targets.len(), "smooth_l1_loc_loss")?;
    let x = box_deltas.data();
    let mut total = 0.0;
    let mut grad = vec![0.0; x.len()];
    for (i, t) in targets.iter().enumerate() {
        let Some(t) = t else { continue };
        for d in 0..CODE_SIZE {
            let r = x[i * CODE_SIZE + d] - t.0[d];
            if r.abs() < 1.0 {
                total += 0.5 * r * r;
                grad[i * CODE_SIZE + d] = r;
            } else {
                total += r.abs() - 0.5;
                grad[i * CODE_SIZE + d] = r.signum();
            }
        }
    }
    Ok(Tensor::from_op(vec![1], vec![total], &[box_deltas], move |g| {
        vec![Some(grad.iter().map(|d| d * g[0]).collect())]
    }))
}

/// Two-way softmax cross-entropy summed over anchors with a direction
/// target (`true` = class 1).
pub fn dir_loss(dir_logits: &Tensor, targets: &[Option<bool>]) -> Result<Tensor> {
    expect_rows(dir_logits, 2, targets.len(), "dir_loss")?;
    let x = dir_logits.data();
    let mut total = 0.0;
    let mut grad = vec![0.0; x.len()];
    for (i, t) in targets.iter().enumerate() {
        let Some(t) = t else { continue };
        let (a, b) = (x[2 * i], x[2 * i + 1]);
        let m = a.max(b);
        let lse = m + ((a - m).exp() + (b - m).exp()).ln();
        let k = *t as usize;
        total += lse - x[2 * i + k];
        for c in 0..2 {
            let soft = (x[2 * i + c] - lse).exp();
            grad[2 * i + c] = soft - if c == k { 1.0 } else { 0.0 };
        }
    }
    Ok(Tensor::from_op(vec![1], vec![total], &[dir_logits], move |g| {
        vec![Some(grad.iter().map(|d| d * g[0]).collect())]
    }))
}

/// `(β_loc·L_loc + β_cls·L_cls + β_dir·L_dir) / max(N_pos, 1)`.
pub fn total_loss(loc: &Tensor, cls: &Tensor, dir: &Tensor, n_pos: usize, w: LossWeights) -> Result<Tensor> {
    let norm = 1.0 / n_pos.max(1) as f64;
    let parts = [scale(loc, w.loc * norm), scale(cls, w.cls * norm), scale(dir, w.dir * norm)];
    add_all(&parts.iter().collect::<Vec<_>>())
}
