//! Central-difference verification of the analytic gradients, run on a
//! reduced configuration under both training objectives.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{init_params, GradStore, ModelConfig, ParamStore};
use crate::seeds::rng_for;
use crate::train::loops::{supervised_step, ul_step, StepOutput};

/// Central-difference step size.
pub const FD_STEP: f64 = 1e-4;
/// Maximum allowed relative error between analytic and numeric derivatives.
pub const REL_TOLERANCE: f64 = 1e-4;
/// Redraws allowed when a coordinate's numeric estimate is corrupted by a
/// ReLU sign flip inside the perturbation interval.
const KINK_RETRIES: usize = 25;
/// Derivatives with both estimates below this are counted as agreeing;
/// they sit under the finite-difference noise floor.
const ZERO_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorCoverage {
    pub tensor: String,
    pub coords: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObjectiveReport {
    pub objective: String,
    pub coords_checked: usize,
    /// Coordinates abandoned because the perturbation crossed a ReLU or
    /// softmax-argmax boundary, then redrawn within the same tensor.
    pub kinks_resampled: usize,
    pub max_rel_err: f64,
    pub passed: bool,
    pub tensors: Vec<TensorCoverage>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub fd_step: f64,
    pub tolerance: f64,
    pub coords_per_objective: usize,
    pub passed: bool,
    pub objectives: Vec<ObjectiveReport>,
}

struct FdInputs {
    features: Vec<Array2<f64>>,
    valid_frames: Vec<usize>,
    aug_features: Vec<Array2<f64>>,
    aug_valid_frames: Vec<usize>,
    pair_labels: Vec<usize>,
    class_labels: Vec<usize>,
}

fn synth_inputs(cfg: &ModelConfig, seed: u64, batch: usize) -> FdInputs {
    // Inputs span +-8, the magnitude of log-filterbank features. Smaller
    // inputs shrink every pre-activation margin proportionally, and with
    // thousands of ReLU sites downstream of each early-layer parameter the
    // 1e-4 perturbation would then cross a boundary on almost every draw.
    let draw = |tag: &str, i: u64| {
        let mut rng = rng_for(seed, tag, i);
        Array2::from_shape_fn((cfg.input_frames, cfg.input_mels), |_| {
            16.0 * rng.random::<f64>() - 8.0
        })
    };
    let mut label_rng = rng_for(seed, "gradcheck_labels", 0);
    FdInputs {
        features: (0..batch).map(|i| draw("gradcheck_clean", i as u64)).collect(),
        valid_frames: (0..batch).map(|i| cfg.input_frames - 2 * i).collect(),
        aug_features: (0..batch).map(|i| draw("gradcheck_aug", i as u64)).collect(),
        aug_valid_frames: (0..batch).map(|i| cfg.input_frames - 3 * i).collect(),
        pair_labels: (0..batch).collect(),
        class_labels: (0..batch)
            .map(|_| label_rng.random_range(0..cfg.n_classes))
            .collect(),
    }
}

/// Verifies every parameter tensor of `cfg` against central differences
/// under the unsupervised composite objective and the cross-entropy
/// objective, sampling `coords_per_objective` coordinates for each.
///
/// Coordinates whose perturbation flips any ReLU sign are redrawn, since
/// the loss is not differentiable there.
pub fn grad_check(
    cfg: &ModelConfig,
    seed: u64,
    coords_per_objective: usize,
) -> Result<GradCheckReport> {
    cfg.validate()?;
    let mut params = init_params(cfg, seed)?;
    let inputs = synth_inputs(cfg, seed, 3);

    let ul = |p: &ParamStore, g: Option<&mut GradStore>| -> Result<StepOutput> {
        ul_step(
            p,
            &inputs.features,
            &inputs.valid_frames,
            &inputs.aug_features,
            &inputs.aug_valid_frames,
            &inputs.pair_labels,
            g,
        )
    };
    let ce = |p: &ParamStore, g: Option<&mut GradStore>| -> Result<StepOutput> {
        supervised_step(p, &inputs.features, &inputs.class_labels, false, g)
    };

    let mut objectives = Vec::new();
    objectives.push(check_objective("l_ul", &mut params, seed, coords_per_objective, &ul)?);
    objectives.push(check_objective("ce", &mut params, seed, coords_per_objective, &ce)?);
    Ok(GradCheckReport {
        fd_step: FD_STEP,
        tolerance: REL_TOLERANCE,
        coords_per_objective,
        passed: objectives.iter().all(|o| o.passed),
        objectives,
    })
}

fn check_objective(
    name: &str,
    params: &mut ParamStore,
    seed: u64,
    n_coords: usize,
    f: &dyn Fn(&ParamStore, Option<&mut GradStore>) -> Result<StepOutput>,
) -> Result<ObjectiveReport> {
    let mut grads = GradStore::zeros_like(params);
    let base = f(params, Some(&mut grads))?;

    let n_defs = params.defs.len();
    let mut coverage: Vec<TensorCoverage> = params
        .defs
        .iter()
        .map(|d| TensorCoverage { tensor: d.name.clone(), coords: 0, max_rel_err: 0.0 })
        .collect();
    let mut rng = rng_for(seed, "gradcheck_coords", 0);
    let mut checked = 0usize;
    let mut kinks = 0usize;
    let mut max_rel = 0.0f64;

    for trial in 0..n_coords {
        // First sweep over every tensor guarantees coverage, then the
        // remaining draws spread uniformly over tensors.
        let id = if trial < n_defs { trial } else { rng.random_range(0..n_defs) };
        let def = params.defs[id].clone();
        let mut rel = f64::INFINITY;
        for retry in 0..=KINK_RETRIES {
            let k = rng.random_range(0..def.len());
            let offset = def.offset + k;
            let orig = params.data[offset];
            params.data[offset] = orig + FD_STEP;
            let up = f(params, None)?;
            params.data[offset] = orig - FD_STEP;
            let down = f(params, None)?;
            params.data[offset] = orig;
            let fd = (up.objective - down.objective) / (2.0 * FD_STEP);
            let an = grads.data[offset];
            rel = if an.abs().max(fd.abs()) < ZERO_FLOOR {
                0.0
            } else {
                (an - fd).abs() / an.abs().max(fd.abs())
            };
            if rel <= REL_TOLERANCE {
                break;
            }
            // Out of tolerance. If the perturbation crossed a ReLU boundary
            // the numeric estimate is the corrupted side, so redraw; with an
            // unchanged activation pattern the disagreement is a genuine
            // gradient failure and is recorded as such.
            let kinked =
                up.relu_sig != base.relu_sig || down.relu_sig != base.relu_sig;
            if !kinked || retry == KINK_RETRIES {
                break;
            }
            kinks += 1;
        }
        checked += 1;
        coverage[id].coords += 1;
        coverage[id].max_rel_err = coverage[id].max_rel_err.max(rel);
        max_rel = max_rel.max(rel);
    }

    let covered = coverage.iter().all(|c| c.coords > 0);
    Ok(ObjectiveReport {
        objective: name.to_string(),
        coords_checked: checked,
        kinks_resampled: kinks,
        max_rel_err: max_rel,
        passed: covered && max_rel <= REL_TOLERANCE,
        tensors: coverage,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reduced_configuration_passes_under_both_objectives() {
        let report = grad_check(&ModelConfig::reduced(), 0, 140).unwrap();
        let offenders: Vec<_> = report
            .objectives
            .iter()
            .flat_map(|o| {
                o.tensors
                    .iter()
                    .filter(|t| t.max_rel_err > REL_TOLERANCE)
                    .map(move |t| (o.objective.clone(), t.tensor.clone(), t.max_rel_err))
            })
            .collect();
        assert!(report.passed, "out-of-tolerance tensors: {offenders:?}");
        assert_eq!(report.objectives.len(), 2);
        for obj in &report.objectives {
            assert!(obj.coords_checked >= 140);
            assert!(obj.max_rel_err <= REL_TOLERANCE);
            for t in &obj.tensors {
                assert!(t.coords > 0, "{} uncovered under {}", t.tensor, obj.objective);
            }
        }
    }

    #[test]
    fn report_lists_every_tensor_by_name() {
        let report = grad_check(&ModelConfig::reduced(), 1, 80).unwrap();
        let json = serde_json::to_string(&report).unwrap();
        for name in ["conv0.w", "pool.b", "enc1.ffn.w2", "fc_recon.b", "fc_proj.w"] {
            assert!(json.contains(name), "missing {name}");
        }
        let back: GradCheckReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.objectives.len(), report.objectives.len());
    }
}
