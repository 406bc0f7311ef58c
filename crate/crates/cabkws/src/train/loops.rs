//! The two training loops: unsupervised pretraining on paired views and
//! supervised fine-tuning with an optional dual contrastive regularizer.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{BatchBuilder, Split};
use crate::error::{Error, Result};
use crate::loss::{self, ce_loss, dual_finetune, dual_pretrain, LossBreakdown};
use crate::model::{
    backward_batch, forward_batch, init_params, load_checkpoint, save_checkpoint, GradStore,
    LossSeeds, Mode, ParamStore,
};
use crate::seeds::{derive_seed, rng_for};
use crate::train::eval::evaluate_features;
use crate::train::{clip_global_norm, Adam, MetricsWriter, StepMetrics, TrainConfig};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FINAL_CHECKPOINT: &str = "checkpoint_final.ckpt";
pub const BEST_CHECKPOINT: &str = "checkpoint_best.ckpt";
pub const SUMMARY_FILE: &str = "run_summary.json";

/// Name of the periodic checkpoint written after `step` steps.
pub fn step_checkpoint_name(step: usize) -> String {
    format!("checkpoint_{step:06}.ckpt")
}

/// Loss values and the ReLU sign signature from one optimization step.
pub(crate) struct StepOutput {
    pub objective: f64,
    pub breakdown: LossBreakdown,
    pub relu_sig: u64,
}

/// Unsupervised objective on one paired batch: forward both views, combine
/// the similarity, reconstruction, and dual contrastive terms, and (when
/// `grads` is given) backpropagate the full weighted gradient.
pub(crate) fn ul_step(
    params: &ParamStore,
    features: &[Array2<f64>],
    valid_frames: &[usize],
    aug_features: &[Array2<f64>],
    aug_valid_frames: &[usize],
    labels: &[usize],
    grads: Option<&mut GradStore>,
) -> Result<StepOutput> {
    let cfg = &params.config;
    let lambdas = [cfg.lambda_sim, cfg.lambda_x, cfg.lambda_x_aug, cfg.lambda_dual];

    let clean = forward_batch(features, params, Mode::Pretrain);
    let aug = forward_batch(aug_features, params, Mode::Pretrain);
    let recon_clean = clean.recon.as_ref().expect("pretrain trace keeps the reconstruction");
    let recon_aug = aug.recon.as_ref().expect("pretrain trace keeps the reconstruction");

    let (sim, d_ebn_sim, d_ebn_aug_sim) = loss::l_sim(clean.e_bn.view(), aug.e_bn.view())?;
    let (lx, d_recon_clean) = loss::l_x(features, valid_frames, recon_clean.view())?;
    let (lx_aug, d_recon_aug) = loss::l_x(aug_features, aug_valid_frames, recon_aug.view())?;
    let dual = dual_pretrain(clean.e_bn.view(), aug.e_bn.view(), labels, cfg.temperature)?;
    let l_dual = dual.l_z + dual.l_theta;
    let ul = loss::l_ul(sim, lx, lx_aug, l_dual, lambdas)?;

    if let Some(grads) = grads {
        let mut d_ebn_clean = d_ebn_sim * cfg.lambda_sim;
        d_ebn_clean.scaled_add(cfg.lambda_dual, &dual.d_clean);
        let mut d_ebn_aug = d_ebn_aug_sim * cfg.lambda_sim;
        d_ebn_aug.scaled_add(cfg.lambda_dual, &dual.d_aug);
        let seeds_clean = LossSeeds {
            d_logits: None,
            d_ebn: Some(d_ebn_clean),
            d_recon: Some(d_recon_clean * cfg.lambda_x),
        };
        backward_batch(&clean, params, &seeds_clean, grads)?;
        let seeds_aug = LossSeeds {
            d_logits: None,
            d_ebn: Some(d_ebn_aug),
            d_recon: Some(d_recon_aug * cfg.lambda_x_aug),
        };
        backward_batch(&aug, params, &seeds_aug, grads)?;
    }

    Ok(StepOutput {
        objective: ul,
        breakdown: LossBreakdown {
            l_sim: sim,
            l_x: lx,
            l_x_aug: lx_aug,
            l_z: dual.l_z,
            l_theta: dual.l_theta,
            l_dual,
            l_ul: ul,
            l_ce: 0.0,
        },
        relu_sig: clean.relu_sig ^ aug.relu_sig.rotate_left(17),
    })
}

/// Supervised objective on one labeled batch: cross-entropy, plus the
/// weighted dual contrastive term against the live classifier columns when
/// `use_dual` is set.
pub(crate) fn supervised_step(
    params: &ParamStore,
    features: &[Array2<f64>],
    labels: &[usize],
    use_dual: bool,
    grads: Option<&mut GradStore>,
) -> Result<StepOutput> {
    let cfg = &params.config;
    let trace = forward_batch(features, params, Mode::Finetune);
    let (ce, d_logits) = ce_loss(trace.logits.view(), labels)?;

    let mut breakdown = LossBreakdown { l_ce: ce, ..LossBreakdown::default() };
    let mut objective = ce;
    let mut seeds = LossSeeds { d_logits: Some(d_logits), d_ebn: None, d_recon: None };
    let mut d_proj_extra: Option<Array2<f64>> = None;
    if use_dual {
        let proj_id = params.id("fc_proj.w");
        let dual = dual_finetune(trace.e_bn.view(), params.matrix(proj_id), labels, cfg.temperature)?;
        breakdown.l_z = dual.l_z;
        breakdown.l_theta = dual.l_theta;
        breakdown.l_dual = dual.l_z + dual.l_theta;
        objective += cfg.lambda_dual * breakdown.l_dual;
        seeds.d_ebn = Some(dual.d_ebn * cfg.lambda_dual);
        d_proj_extra = Some(dual.d_proj_w * cfg.lambda_dual);
    }
    let lambdas = [cfg.lambda_sim, cfg.lambda_x, cfg.lambda_x_aug, cfg.lambda_dual];
    breakdown.l_ul = loss::l_ul(0.0, 0.0, 0.0, breakdown.l_dual, lambdas)?;

    if let Some(grads) = grads {
        backward_batch(&trace, params, &seeds, grads)?;
        if let Some(dp) = d_proj_extra {
            let mut g = grads.matrix_mut(params.id("fc_proj.w"));
            g += &dp;
        }
    }
    Ok(StepOutput { objective, breakdown, relu_sig: trace.relu_sig })
}

/// Result paths and the final unsupervised loss of a pretraining run.
#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub final_checkpoint: PathBuf,
    pub metrics_path: PathBuf,
    pub steps: usize,
    pub final_l_ul: f64,
}

/// Pretrains from random init on paired clean/augmented views, writing
/// per-step metrics, periodic checkpoints every `eval_every` steps, and a
/// final checkpoint into `out_dir`.
pub fn pretrain(
    builder: &BatchBuilder,
    model_cfg: &crate::model::ModelConfig,
    train_cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<PretrainOutcome> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    if train_cfg.batch_size < 2 {
        return Err(Error::Config(format!(
            "pretraining needs batch_size >= 2 for the contrastive terms, got {}",
            train_cfg.batch_size
        )));
    }
    if builder.manifest.split_entries(Split::Train).is_empty() {
        return Err(Error::Config("the manifest's train split is empty".into()));
    }
    std::fs::create_dir_all(out_dir)?;

    let mut params = init_params(model_cfg, train_cfg.seed)?;
    let mut grads = GradStore::zeros_like(&params);
    let mut adam = Adam::new(train_cfg, params.n_params());
    let mut writer = MetricsWriter::create(&out_dir.join(METRICS_FILE))?;
    let started = Instant::now();
    let mut final_l_ul = f64::NAN;

    for step in 1..=train_cfg.pretrain_steps {
        let batch = builder.pretrain_batch(
            train_cfg.batch_size,
            derive_seed(train_cfg.seed, "pretrain_step", step as u64),
        )?;
        let aug_features = batch.aug_features.as_ref().expect("paired batch");
        let aug_valid = batch.aug_valid_frames.as_ref().expect("paired batch");
        grads.zero();
        let out = ul_step(
            &params,
            &batch.features,
            &batch.valid_frames,
            aug_features,
            aug_valid,
            &batch.labels,
            Some(&mut grads),
        )?;
        let grad_norm = clip_global_norm(&mut grads, train_cfg.grad_clip_norm);
        adam.step(&mut params.data, &grads.data);
        params.round_to_f32();
        final_l_ul = out.breakdown.l_ul;
        writer.write(&StepMetrics { step, losses: out.breakdown, grad_norm, dev_acc: None })?;
        if step % train_cfg.eval_every == 0 {
            save_checkpoint(out_dir.join(step_checkpoint_name(step)), &params)?;
            let ms = started.elapsed().as_secs_f64() * 1000.0 / step as f64;
            eprintln!("pretrain step {step}/{}: {ms:.1} ms/step", train_cfg.pretrain_steps);
        }
    }

    let final_checkpoint = out_dir.join(FINAL_CHECKPOINT);
    save_checkpoint(&final_checkpoint, &params)?;
    let metrics_path = writer.finish()?;
    Ok(PretrainOutcome {
        final_checkpoint,
        metrics_path,
        steps: train_cfg.pretrain_steps,
        final_l_ul,
    })
}

/// Result paths and dev accuracies of a fine-tuning run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinetuneOutcome {
    pub best_checkpoint: PathBuf,
    pub final_checkpoint: PathBuf,
    pub metrics_path: PathBuf,
    pub summary_path: PathBuf,
    pub best_dev_acc: f64,
    pub best_step: usize,
    pub final_dev_acc: f64,
    pub steps: usize,
}

/// Gives the classifier a fresh seeded init. Applied after loading a
/// pretraining checkpoint, whose projection never received gradient.
fn reinit_projection(params: &mut ParamStore, seed: u64) {
    let w = params.defs[params.id("fc_proj.w")].clone();
    let scale = (6.0 / (w.shape[0] + w.shape[1]) as f64).sqrt();
    let mut rng = rng_for(seed, "finetune_proj", 0);
    for v in &mut params.data[w.offset..w.offset + w.len()] {
        *v = scale * (2.0 * rng.random::<f64>() - 1.0);
    }
    let b = params.defs[params.id("fc_proj.b")].clone();
    params.data[b.offset..b.offset + b.len()].fill(0.0);
    params.round_to_f32();
}

/// Fine-tunes on labeled train data, starting from `init_from` (a
/// pretraining checkpoint, classifier re-initialized) or from random init.
/// Unlabeled train entries are ignored, so a label-budgeted manifest
/// fine-tunes on just its labeled subset.
///
/// Dev accuracy is measured every `eval_every` steps and at the last step;
/// the best-scoring parameters are kept alongside the final ones. The dev
/// split must be non-empty.
pub fn finetune(
    builder: &BatchBuilder,
    model_cfg: &crate::model::ModelConfig,
    train_cfg: &TrainConfig,
    init_from: Option<&Path>,
    out_dir: &Path,
) -> Result<FinetuneOutcome> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    let mut labeled_builder = builder.clone();
    labeled_builder
        .manifest
        .entries
        .retain(|e| e.split != Split::Train || e.label.is_some());
    let labeled_train = labeled_builder.manifest.split_entries(Split::Train).len();
    if labeled_train == 0 {
        return Err(Error::Config("the manifest has no labeled train utterances".into()));
    }
    std::fs::create_dir_all(out_dir)?;

    let mut params = match init_from {
        Some(path) => {
            let mut p = load_checkpoint(path)?;
            if p.config != *model_cfg {
                return Err(Error::Config(format!(
                    "checkpoint '{}' was trained with a different model configuration",
                    path.display()
                )));
            }
            reinit_projection(&mut p, train_cfg.seed);
            p
        }
        None => init_params(model_cfg, train_cfg.seed)?,
    };
    let mut grads = GradStore::zeros_like(&params);
    let mut adam = Adam::new(train_cfg, params.n_params());
    let mut writer = MetricsWriter::create(&out_dir.join(METRICS_FILE))?;

    let dev = builder.labeled_split_batch(Split::Dev)?;
    let batch_size = train_cfg.batch_size.min(labeled_train);

    let best_checkpoint = out_dir.join(BEST_CHECKPOINT);
    let mut best_dev_acc = f64::NEG_INFINITY;
    let mut best_step = 0usize;
    let mut final_dev_acc = f64::NAN;
    let started = Instant::now();

    let frozen: Vec<usize> = if train_cfg.freeze_backbone {
        (0..params.defs.len())
            .filter(|&i| {
                let name = &params.defs[i].name;
                !name.starts_with("fc_bn.") && !name.starts_with("fc_proj.")
            })
            .collect()
    } else {
        Vec::new()
    };
    for step in 1..=train_cfg.finetune_steps {
        let batch = labeled_builder.finetune_batch(
            batch_size,
            derive_seed(train_cfg.seed, "finetune_step", step as u64),
        )?;
        grads.zero();
        let out = supervised_step(
            &params,
            &batch.features,
            &batch.labels,
            train_cfg.finetune_use_dual,
            Some(&mut grads),
        )?;
        for &i in &frozen {
            grads.slice_mut(i).fill(0.0);
        }
        let grad_norm = clip_global_norm(&mut grads, train_cfg.grad_clip_norm);
        adam.step(&mut params.data, &grads.data);
        params.round_to_f32();

        let eval_now = step % train_cfg.eval_every == 0 || step == train_cfg.finetune_steps;
        let mut dev_acc = None;
        if eval_now {
            let report = evaluate_features(&params, &dev.features, &dev.labels)?;
            dev_acc = Some(report.accuracy);
            final_dev_acc = report.accuracy;
            if report.accuracy > best_dev_acc {
                best_dev_acc = report.accuracy;
                best_step = step;
                save_checkpoint(&best_checkpoint, &params)?;
            }
            let ms = started.elapsed().as_secs_f64() * 1000.0 / step as f64;
            eprintln!(
                "finetune step {step}/{}: dev acc {:.4}, {ms:.1} ms/step",
                train_cfg.finetune_steps, report.accuracy
            );
        }
        writer.write(&StepMetrics { step, losses: out.breakdown, grad_norm, dev_acc })?;
    }

    if train_cfg.finetune_steps == 0 {
        let report = evaluate_features(&params, &dev.features, &dev.labels)?;
        best_dev_acc = report.accuracy;
        final_dev_acc = report.accuracy;
        save_checkpoint(&best_checkpoint, &params)?;
    }

    let final_checkpoint = out_dir.join(FINAL_CHECKPOINT);
    save_checkpoint(&final_checkpoint, &params)?;
    let metrics_path = writer.finish()?;
    let outcome = FinetuneOutcome {
        best_checkpoint,
        final_checkpoint,
        metrics_path,
        summary_path: out_dir.join(SUMMARY_FILE),
        best_dev_acc,
        best_step,
        final_dev_acc,
        steps: train_cfg.finetune_steps,
    };
    let summary = serde_json::to_string_pretty(&outcome)
        .map_err(|e| Error::Parse(format!("summary serialization: {e}")))?;
    std::fs::write(&outcome.summary_path, summary + "\n")?;
    Ok(outcome)
}
