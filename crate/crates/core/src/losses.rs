//! Focal classification loss and the batch loss that pairs it with CIoU box
//! regression.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::geometry::{ciou_loss, CenterBox};
use crate::numeric::stable_sum;

/// Probabilities are clamped into `[EPS, 1 - EPS]` before any logarithm.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalParams {
    alpha: f64,
    beta: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            beta: 2.0,
        }
    }
}

impl FocalParams {
    /// `alpha` balances positives against negatives, `beta` is the focusing
    /// exponent (0 recovers weighted cross-entropy).
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::invalid(format!("focal alpha must be in (0,1), got {alpha}")));
        }
        if !(beta >= 0.0) || !beta.is_finite() {
            return Err(Error::invalid(format!("focal beta must be >= 0, got {beta}")));
        }
        Ok(Self { alpha, beta })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }
}

fn checked_prob(y_prime: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&y_prime) {
        return Err(Error::invalid(format!(
            "predicted probability must be in [0,1], got {y_prime}"
        )));
    }
    Ok(y_prime.clamp(PROB_EPS, 1.0 - PROB_EPS))
}

/// Binary focal loss for one score. `positive` selects the `y = 1` branch
/// `-alpha (1-p)^beta ln p`; otherwise `-(1-alpha) p^beta ln(1-p)`.
pub fn focal_loss(y_prime: f64, positive: bool, params: FocalParams) -> Result<f64> {
    let p = checked_prob(y_prime)?;
    let FocalParams { alpha, beta } = params;
    let loss = if positive {
        -alpha * (1.0 - p).powf(beta) * p.ln()
    } else {
        -(1.0 - alpha) * p.powf(beta) * (1.0 - p).ln()
    };
    // -0.0 shows up when the modulating factor underflows.
    Ok(loss.max(0.0))
}

/// `d focal_loss / d y_prime`, evaluated at the clamped probability.
pub fn focal_loss_gradient(y_prime: f64, positive: bool, params: FocalParams) -> Result<f64> {
    let p = checked_prob(y_prime)?;
    let FocalParams { alpha, beta } = params;
    let grad = if positive {
        let q = 1.0 - p;
        let modulating = if beta == 0.0 { 0.0 } else { beta * q.powf(beta - 1.0) * p.ln() };
        alpha * (modulating - q.powf(beta) / p)
    } else {
        let q = 1.0 - p;
        let modulating = if beta == 0.0 { 0.0 } else { beta * p.powf(beta - 1.0) * q.ln() };
        -(1.0 - alpha) * (modulating - p.powf(beta) / q)
    };
    Ok(grad)
}

/// Target of a positive anchor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssignmentTarget {
    pub class: usize,
    pub bbox: CenterBox,
}

/// One anchor's prediction and, when it is positive, its target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorAssignment {
    pub anchor_index: usize,
    pub target: Option<AssignmentTarget>,
    /// Post-activation per-class probabilities.
    pub class_probs: Vec<f64>,
    pub predicted_box: CenterBox,
}

impl AnchorAssignment {
    pub fn negative(anchor_index: usize, class_probs: Vec<f64>, predicted_box: CenterBox) -> Self {
        Self {
            anchor_index,
            target: None,
            class_probs,
            predicted_box,
        }
    }

    pub fn positive(
        anchor_index: usize,
        class: usize,
        target_box: CenterBox,
        class_probs: Vec<f64>,
        predicted_box: CenterBox,
    ) -> Self {
        Self {
            anchor_index,
            target: Some(AssignmentTarget {
                class,
                bbox: target_box,
            }),
            class_probs,
            predicted_box,
        }
    }

    pub fn is_positive(&self) -> bool {
        self.target.is_some()
    }

    fn classification_loss(&self, params: FocalParams) -> Result<f64> {
        let target_class = self.target.map(|t| t.class);
        if let Some(c) = target_class {
            if c >= self.class_probs.len() {
                return Err(Error::invalid(format!(
                    "anchor {}: target class {c} outside {} class scores",
                    self.anchor_index,
                    self.class_probs.len()
                )));
            }
        }
        let terms = self
            .class_probs
            .iter()
            .enumerate()
            .map(|(c, &p)| focal_loss(p, target_class == Some(c), params))
            .collect::<Result<Vec<_>>>()?;
        Ok(stable_sum(terms))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossReport {
    pub classification_loss: f64,
    pub regression_loss: f64,
    pub total: f64,
    pub num_positives: usize,
}

/// Batch loss over anchor assignments.
///
/// Classification is the one-vs-all focal loss summed over every anchor and
/// class, divided by `max(num_positives, 1)`. Regression is `lambda_reg`
/// times the mean CIoU loss over positive anchors (0 without positives).
pub fn batch_loss(
    assignments: &[AnchorAssignment],
    focal: FocalParams,
    lambda_reg: f64,
) -> Result<LossReport> {
    if assignments.is_empty() {
        return Err(Error::invalid("batch loss needs at least one anchor assignment"));
    }
    if !(lambda_reg >= 0.0) || !lambda_reg.is_finite() {
        return Err(Error::invalid(format!("lambda_reg must be >= 0, got {lambda_reg}")));
    }

    let per_anchor = exec::map(assignments, |a| -> Result<(f64, Option<f64>)> {
        let cls = a.classification_loss(focal)?;
        let reg = a.target.map(|t| ciou_loss(&a.predicted_box, &t.bbox));
        Ok((cls, reg))
    });
    let per_anchor = per_anchor.into_iter().collect::<Result<Vec<_>>>()?;

    let num_positives = per_anchor.iter().filter(|(_, r)| r.is_some()).count();
    let cls_sum = stable_sum(per_anchor.iter().map(|(c, _)| *c));
    let classification_loss = cls_sum / num_positives.max(1) as f64;
    let regression_loss = if num_positives == 0 {
        0.0
    } else {
        let reg_sum = stable_sum(per_anchor.iter().filter_map(|(_, r)| *r));
        lambda_reg * reg_sum / num_positives as f64
    };

    Ok(LossReport {
        classification_loss,
        regression_loss,
        total: classification_loss + regression_loss,
        num_positives,
    })
}
