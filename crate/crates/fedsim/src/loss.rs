//! Training objectives.
//!
//! Each loss takes softmax probabilities (one row per example) and returns
//! the mean batch loss together with its exact gradient at the logits, so a
//! training step is `forward -> loss -> backward -> sgd_step`. The adversarial
//! loss is the negation of a soft cross-entropy: minimizing it pushes the
//! shared model's predictions away from an overfitted private model's
//! predictions instead of toward them.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ModelParams, LOG_FLOOR};

/// Weights of the combined local objective.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossConfig {
    /// Label-smoothing weight.
    pub mu: f64,
    /// Adversarial (negative-distillation) weight.
    pub lambda: f64,
    /// Proximal coefficient used by the FedProx local objective.
    pub prox_mu: f64,
    pub num_classes: usize,
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.mu) {
            return Err(Error::config("mu must lie in [0, 1)"));
        }
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(Error::config("lambda must be nonnegative"));
        }
        if self.prox_mu < 0.0 || !self.prox_mu.is_finite() {
            return Err(Error::config("prox_mu must be nonnegative"));
        }
        if self.num_classes == 0 {
            return Err(Error::config("num_classes must be positive"));
        }
        Ok(())
    }
}

fn ln_clamped(p: f64) -> f64 {
    p.max(LOG_FLOOR).ln()
}

fn check_labels(pred: &Array2<f64>, labels: &[usize]) -> Result<()> {
    if labels.len() != pred.nrows() {
        return Err(Error::data(format!(
            "{} labels for {} prediction rows",
            labels.len(),
            pred.nrows()
        )));
    }
    let classes = pred.ncols();
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::data(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    if pred.nrows() == 0 {
        return Err(Error::data("empty batch"));
    }
    Ok(())
}

/// Mean `-ln p[label]`; gradient at logits is `(p - onehot) / batch`.
pub fn cross_entropy(pred: &Array2<f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    check_labels(pred, labels)?;
    let batch = pred.nrows() as f64;
    let mut loss = 0.0;
    let mut grad = pred / batch;
    for (i, &y) in labels.iter().enumerate() {
        loss -= ln_clamped(pred[[i, y]]);
        grad[[i, y]] -= 1.0 / batch;
    }
    Ok((loss / batch, grad))
}

/// Label-smoothed cross-entropy: the one-hot target is replaced by
/// `(1 - mu) * onehot + mu / C`.
pub fn label_smoothed_ce(
    pred: &Array2<f64>,
    labels: &[usize],
    mu: f64,
    num_classes: usize,
) -> Result<(f64, Array2<f64>)> {
    check_labels(pred, labels)?;
    if pred.ncols() != num_classes {
        return Err(Error::config(format!(
            "prediction has {} columns, config says {} classes",
            pred.ncols(),
            num_classes
        )));
    }
    if !(0.0..=1.0).contains(&mu) {
        // mu = 1 is the fully smoothed boundary; useful for tests even though
        // configurations require mu < 1.
        return Err(Error::config("mu must lie in [0, 1]"));
    }
    let batch = pred.nrows() as f64;
    let uniform = mu / num_classes as f64;
    let mut loss = 0.0;
    let mut grad = pred / batch;
    for (i, &y) in labels.iter().enumerate() {
        for c in 0..num_classes {
            let target = if c == y { 1.0 - mu + uniform } else { uniform };
            loss -= target * ln_clamped(pred[[i, c]]);
            grad[[i, c]] -= target / batch;
        }
    }
    Ok((loss / batch, grad))
}

/// Negative distillation against a fixed teacher.
///
/// Returns the mean of `sum_c teacher_c * ln student_c` (the soft
/// cross-entropy with its sign flipped), treating `pred_private` as a
/// constant. Minimizing this drives the student's predictions away from the
/// teacher's.
pub fn negative_distillation(
    pred_global: &Array2<f64>,
    pred_private: &Array2<f64>,
) -> Result<(f64, Array2<f64>)> {
    if pred_global.dim() != pred_private.dim() {
        return Err(Error::config(format!(
            "prediction shapes differ: {:?} vs {:?}",
            pred_global.dim(),
            pred_private.dim()
        )));
    }
    if pred_global.nrows() == 0 {
        return Err(Error::data("empty batch"));
    }
    let batch = pred_global.nrows() as f64;
    let mut loss = 0.0;
    let mut grad = Array2::zeros(pred_global.dim());
    for i in 0..pred_global.nrows() {
        let mut teacher_mass = 0.0;
        for c in 0..pred_global.ncols() {
            let t = pred_private[[i, c]];
            loss += t * ln_clamped(pred_global[[i, c]]);
            teacher_mass += t;
        }
        for c in 0..pred_global.ncols() {
            grad[[i, c]] =
                (pred_private[[i, c]] - pred_global[[i, c]] * teacher_mass) / batch;
        }
    }
    Ok((loss / batch, grad))
}

/// Combined local objective: label-smoothed CE plus `lambda` times the
/// negative-distillation term. Values and gradients are additive.
pub fn combined_loss(
    pred_global: &Array2<f64>,
    pred_private: &Array2<f64>,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<(f64, Array2<f64>)> {
    let (ls, mut grad) = label_smoothed_ce(pred_global, labels, cfg.mu, cfg.num_classes)?;
    let (adv, adv_grad) = negative_distillation(pred_global, pred_private)?;
    grad.zip_mut_with(&adv_grad, |g, &a| *g += cfg.lambda * a);
    Ok((ls + cfg.lambda * adv, grad))
}

/// FedProx proximal term `(prox_mu / 2) * ||model - anchor||^2` with its
/// parameter-space gradient `prox_mu * (model - anchor)`.
pub fn prox_term(
    model: &ModelParams,
    anchor: &ModelParams,
    prox_mu: f64,
) -> Result<(f64, ModelParams)> {
    if !model.same_spec(anchor) {
        return Err(Error::config("prox anchor spec differs from model"));
    }
    let value = 0.5 * prox_mu * model.sq_l2_distance(anchor)?;
    let mut grad = model.sub(anchor)?;
    grad.scale(prox_mu);
    Ok((value, grad))
}
