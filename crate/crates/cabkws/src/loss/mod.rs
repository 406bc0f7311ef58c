//! Loss functions: cross-entropy, the contrastive family (self-supervised,
//! supervised, and the dual anchored form used for training), bottleneck
//! similarity, average-feature reconstruction, and the weighted unsupervised
//! objective that combines them.

mod contrastive;
mod recon;

pub use contrastive::{
    anchored_contrastive, dual_finetune, dual_pretrain, l_self, l_sup, normalize_rows,
    AnchoredGrads, DualFinetuneGrads, DualPretrainGrads,
};
pub use recon::{l_sim, l_x, time_mean};

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-step loss values written to training metrics. Fields not computed by
/// a phase stay zero.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize, PartialEq)]
pub struct LossBreakdown {
    pub l_sim: f64,
    pub l_x: f64,
    pub l_x_aug: f64,
    pub l_z: f64,
    pub l_theta: f64,
    pub l_dual: f64,
    pub l_ul: f64,
    pub l_ce: f64,
}

/// A batch of unit-norm embeddings with per-sample anchors, labels, and the
/// softmax temperature, validated on construction.
pub struct EmbeddingBatch {
    pub z: Array2<f64>,
    pub anchors: Array2<f64>,
    pub labels: Vec<usize>,
    pub tau: f64,
}

impl EmbeddingBatch {
    pub fn new(z: Array2<f64>, anchors: Array2<f64>, labels: Vec<usize>, tau: f64) -> Result<Self> {
        if z.nrows() < 2 {
            return Err(Error::Domain("contrastive batch needs at least 2 samples".into()));
        }
        if z.dim() != anchors.dim() {
            return Err(Error::Shape(format!(
                "embeddings {:?} and anchors {:?} disagree",
                z.dim(),
                anchors.dim()
            )));
        }
        if labels.len() != z.nrows() {
            return Err(Error::Shape(format!(
                "{} labels for {} embeddings",
                labels.len(),
                z.nrows()
            )));
        }
        if !(tau > 0.0) {
            return Err(Error::Domain(format!("temperature must be positive, got {tau}")));
        }
        for (name, m) in [("embedding", &z), ("anchor", &anchors)] {
            for (i, row) in m.rows().into_iter().enumerate() {
                let norm = row.dot(&row).sqrt();
                if (norm - 1.0).abs() > 1e-6 {
                    return Err(Error::Domain(format!("{name} row {i} has norm {norm}, expected 1")));
                }
            }
        }
        Ok(EmbeddingBatch { z, anchors, labels, tau })
    }
}

/// Mean cross-entropy with max-subtracted softmax; returns the loss and its
/// gradient with respect to the logits.
pub fn ce_loss(logits: ArrayView2<'_, f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    let (n, s) = logits.dim();
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {} logit rows", labels.len(), n)));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= s) {
        return Err(Error::Domain(format!("label {bad} out of range for {s} classes")));
    }
    let mut d = Array2::zeros((n, s));
    let mut loss = 0.0;
    for (i, row) in logits.rows().into_iter().enumerate() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (j, &v) in row.iter().enumerate() {
            let e = (v - max).exp();
            d[[i, j]] = e;
            sum += e;
        }
        loss += sum.ln() - (row[labels[i]] - max);
        for j in 0..s {
            d[[i, j]] /= sum;
        }
        d[[i, labels[i]]] -= 1.0;
    }
    let scale = 1.0 / n as f64;
    d *= scale;
    Ok((loss * scale, d))
}

/// Weighted unsupervised objective.
pub fn l_ul(l_sim: f64, l_x: f64, l_x_aug: f64, l_dual: f64, lambdas: [f64; 4]) -> Result<f64> {
    if lambdas.iter().any(|&l| l < 0.0) {
        return Err(Error::Config(format!("loss weights must be non-negative, got {lambdas:?}")));
    }
    Ok(lambdas[0] * l_sim + lambdas[1] * l_x + lambdas[2] * l_x_aug + lambdas[3] * l_dual)
}
