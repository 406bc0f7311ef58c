//! Classifier evaluation: argmax accuracy and a full confusion matrix.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::{BatchBuilder, Split};
use crate::error::{Error, Result};
use crate::model::{forward_batch, Mode, ParamStore};

/// Forward passes are batched in groups of this size to bound memory.
const EVAL_CHUNK: usize = 32;

/// Accuracy plus the class-by-class confusion matrix.
/// `confusion[true_label][predicted]` counts utterances, so row `c` sums to
/// the number of evaluated utterances with label `c`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub n: usize,
    pub confusion: Vec<Vec<usize>>,
}

/// Evaluates every labeled utterance of `split`, in manifest order.
pub fn evaluate(params: &ParamStore, builder: &BatchBuilder, split: Split) -> Result<EvalReport> {
    let batch = builder.labeled_split_batch(split)?;
    evaluate_features(params, &batch.features, &batch.labels)
}

/// Evaluates pre-featurized utterances. Separated from [`evaluate`] so
/// training loops can featurize a dev set once and score it repeatedly.
pub fn evaluate_features(
    params: &ParamStore,
    features: &[Array2<f64>],
    labels: &[usize],
) -> Result<EvalReport> {
    if features.is_empty() {
        return Err(Error::Domain("cannot evaluate an empty utterance set".into()));
    }
    if features.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} feature matrices but {} labels",
            features.len(),
            labels.len()
        )));
    }
    let s = params.config.n_classes;
    if let Some(&bad) = labels.iter().find(|&&l| l >= s) {
        return Err(Error::Domain(format!("label {bad} out of range for {s} classes")));
    }
    let mut confusion = vec![vec![0usize; s]; s];
    for (chunk, chunk_labels) in features.chunks(EVAL_CHUNK).zip(labels.chunks(EVAL_CHUNK)) {
        let trace = forward_batch(chunk, params, Mode::Finetune);
        tally(trace.logits.view(), chunk_labels, &mut confusion);
    }
    let correct: usize = (0..s).map(|c| confusion[c][c]).sum();
    Ok(EvalReport {
        accuracy: correct as f64 / labels.len() as f64,
        n: labels.len(),
        confusion,
    })
}

/// Adds one argmax prediction per logits row into the confusion matrix.
/// Ties resolve to the lowest class index.
pub(crate) fn tally(logits: ArrayView2<f64>, labels: &[usize], confusion: &mut [Vec<usize>]) {
    assert_eq!(logits.nrows(), labels.len());
    for (row, &label) in logits.outer_iter().zip(labels) {
        let mut best = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        confusion[label][best] += 1;
    }
}
