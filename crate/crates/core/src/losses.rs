//! Training losses and depth evaluation metrics.
//!
//! All reductions run in index order so results are bit-reproducible.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Coefficient on the squared-mean term of the SILog loss.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum SilogForm {
    /// `10 * sqrt(mean(g^2) + 0.15 * mean(g)^2)`.
    #[default]
    Printed,
    /// `10 * sqrt(mean(g^2) - lambda * mean(g)^2)`, the variance-style form.
    Subtractive { lambda: f64 },
}

impl SilogForm {
    fn coefficient(self) -> f64 {
        match self {
            SilogForm::Printed => 0.15,
            SilogForm::Subtractive { lambda } => -lambda,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    /// Derivative of the loss with respect to each input of the loss
    /// (log-depths for SILog, log-probabilities for KL).
    pub grad: Vec<f64>,
}

/// SILog over predicted and ground-truth depths in meters.
pub fn silog(pred: &[f64], gt: &[f64], form: SilogForm) -> Result<LossGrad> {
    check_pairs(pred, gt)?;
    let log_pred: Vec<f64> = pred.iter().map(|d| d.ln()).collect();
    silog_from_log(&log_pred, gt, form)
}

/// SILog where the predictions are already natural-log depths.
pub fn silog_from_log(log_pred: &[f64], gt: &[f64], form: SilogForm) -> Result<LossGrad> {
    if log_pred.len() != gt.len() {
        return Err(Error::DimMismatch {
            expected: gt.len(),
            actual: log_pred.len(),
        });
    }
    if gt.is_empty() {
        return Err(Error::invalid("SILog needs at least one pair"));
    }
    if let Some(d) = gt.iter().find(|d| !(d.is_finite() && **d > 0.0)) {
        return Err(Error::invalid(format!(
            "ground-truth depth {d} is not positive and finite"
        )));
    }
    if log_pred.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite log-depth prediction".into()));
    }
    let n = gt.len() as f64;
    let g: Vec<f64> = log_pred.iter().zip(gt).map(|(lp, d)| lp - d.ln()).collect();
    let sum: f64 = g.iter().sum();
    let sum_sq: f64 = g.iter().map(|x| x * x).sum();
    let c = form.coefficient();
    let inner = (sum_sq / n + c * sum * sum / (n * n)).max(0.0);
    let root = inner.sqrt();
    let loss = 10.0 * root;
    let grad = if root > 0.0 {
        g.iter().map(|gi| 10.0 * (gi / n + c * sum / (n * n)) / root).collect()
    } else {
        vec![0.0; g.len()]
    };
    Ok(LossGrad { loss, grad })
}

/// Order of the arguments to the KL divergence.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `sum_k t_k (log t_k - log p_k)`: target against prediction.
    #[default]
    GtToPred,
    /// `sum_k p_k (log p_k - log t_k)`: prediction against target.
    AsWritten,
}

/// KL divergence between a target histogram and predicted log-probabilities.
///
/// `0 * log 0` is taken as 0.
pub fn kldiv(target: &[f64], pred_log_probs: &[f64], direction: KlDirection) -> Result<LossGrad> {
    if target.len() != pred_log_probs.len() {
        return Err(Error::DimMismatch {
            expected: target.len(),
            actual: pred_log_probs.len(),
        });
    }
    if target.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
        return Err(Error::invalid("target probabilities must be finite and non-negative"));
    }
    let mass: f64 = target.iter().sum();
    if (mass - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(format!("target sums to {mass}, expected 1")));
    }
    if pred_log_probs.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(Error::Numerical("non-finite predicted log-probability".into()));
    }
    let lse = logsumexp(pred_log_probs);
    if lse.abs() > 1e-6 {
        return Err(Error::invalid(format!(
            "predicted log-probabilities are not normalized (logsumexp {lse})"
        )));
    }

    let mut loss = 0.0;
    let mut grad = vec![0.0; target.len()];
    match direction {
        KlDirection::GtToPred => {
            for ((t, lp), g) in target.iter().zip(pred_log_probs).zip(&mut grad) {
                if *t > 0.0 {
                    loss += t * (t.ln() - lp);
                    *g = -t;
                }
            }
        }
        KlDirection::AsWritten => {
            for (k, ((t, lp), g)) in target.iter().zip(pred_log_probs).zip(&mut grad).enumerate() {
                let p = lp.exp();
                if p == 0.0 {
                    continue;
                }
                if *t == 0.0 {
                    return Err(Error::invalid(format!(
                        "divergence is infinite: target has no mass in bin {k} where the prediction does"
                    )));
                }
                let diff = lp - t.ln();
                loss += p * diff;
                *g = p * (diff + 1.0);
            }
        }
    }
    Ok(LossGrad { loss, grad })
}

/// Mean of per-datapoint divergences; gradients are scaled by `1 / batch`.
pub fn kldiv_batch(
    targets: &[&[f64]],
    pred_log_probs: &[&[f64]],
    direction: KlDirection,
) -> Result<(f64, Vec<Vec<f64>>)> {
    if targets.len() != pred_log_probs.len() || targets.is_empty() {
        return Err(Error::invalid(
            "KL batch needs equal, non-zero numbers of targets and predictions",
        ));
    }
    let n = targets.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(targets.len());
    for (t, p) in targets.iter().zip(pred_log_probs) {
        let LossGrad { loss, mut grad } = kldiv(t, p, direction)?;
        total += loss;
        grad.iter_mut().for_each(|g| *g /= n);
        grads.push(grad);
    }
    Ok((total / n, grads))
}

pub fn logsumexp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Numerically stable log-softmax (max logit subtracted first).
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let lse = logsumexp(logits);
    logits.iter().map(|z| z - lse).collect()
}

/// Eigen depth-evaluation metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EigenMetrics {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rms: f64,
    pub rmsl: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
}

/// Threshold for accuracy `delta_n`: `1.25^n`.
pub fn delta_threshold(n: i32) -> f64 {
    1.25f64.powi(n)
}

/// Abs Rel, Sq Rel (squared difference over ground truth), RMS, RMSL and
/// the three threshold accuracies over paired depths.
pub fn eigen_metrics(pred: &[f64], gt: &[f64]) -> Result<EigenMetrics> {
    check_pairs(pred, gt)?;
    let t = gt.len() as f64;
    let thresholds = [delta_threshold(1), delta_threshold(2), delta_threshold(3)];
    let (mut abs_rel, mut sq_rel, mut sq, mut sq_log) = (0.0, 0.0, 0.0, 0.0);
    let mut hits = [0usize; 3];
    for (&d, &g) in pred.iter().zip(gt) {
        let diff = d - g;
        abs_rel += diff.abs() / g;
        sq_rel += diff * diff / g;
        sq += diff * diff;
        let log_diff = d.ln() - g.ln();
        sq_log += log_diff * log_diff;
        let ratio = (d / g).max(g / d);
        for (hit, thr) in hits.iter_mut().zip(thresholds) {
            if ratio < thr {
                *hit += 1;
            }
        }
    }
    Ok(EigenMetrics {
        abs_rel: abs_rel / t,
        sq_rel: sq_rel / t,
        rms: (sq / t).sqrt(),
        rmsl: (sq_log / t).sqrt(),
        delta1: hits[0] as f64 / t,
        delta2: hits[1] as f64 / t,
        delta3: hits[2] as f64 / t,
    })
}

impl EigenMetrics {
    pub const COLUMNS: [&'static str; 7] = ["Abs Rel", "Sq Rel", "RMS", "RMSL", "d1", "d2", "d3"];

    pub fn values(&self) -> [f64; 7] {
        [
            self.abs_rel,
            self.sq_rel,
            self.rms,
            self.rmsl,
            self.delta1,
            self.delta2,
            self.delta3,
        ]
    }

    /// Fixed-width table: header row, then one row of values to 3 decimals.
    pub fn table(&self) -> String {
        let mut out = String::new();
        for c in Self::COLUMNS {
            write!(out, "{c:>9}").unwrap();
        }
        out.push('\n');
        for v in self.values() {
            write!(out, "{v:>9.3}").unwrap();
        }
        out.push('\n');
        out
    }

    /// The seven metrics plus the number of evaluated pairs, as one JSON object.
    pub fn report_json(&self, n: usize) -> serde_json::Value {
        serde_json::json!({
            "abs_rel": self.abs_rel,
            "sq_rel": self.sq_rel,
            "rms": self.rms,
            "rmsl": self.rmsl,
            "delta1": self.delta1,
            "delta2": self.delta2,
            "delta3": self.delta3,
            "n": n,
        })
    }
}

fn check_pairs(pred: &[f64], gt: &[f64]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::invalid(format!(
            "{} predictions but {} ground-truth values",
            pred.len(),
            gt.len()
        )));
    }
    if gt.is_empty() {
        return Err(Error::invalid("need at least one depth pair"));
    }
    if let Some(d) = pred.iter().chain(gt).find(|d| !(d.is_finite() && **d > 0.0)) {
        return Err(Error::invalid(format!("depth {d} is not positive and finite")));
    }
    Ok(())
}
