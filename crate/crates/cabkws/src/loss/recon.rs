//! Squared-error losses: bottleneck similarity between the two views and
//! reconstruction of the time-averaged feature vector.

use ndarray::{Array1, Array2, ArrayView2};

use crate::error::{Error, Result};

/// Mean squared difference between the clean and augmented bottlenecks,
/// averaged over width and batch. Returns the gradients for both inputs.
pub fn l_sim(
    e: ArrayView2<'_, f64>,
    e_aug: ArrayView2<'_, f64>,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    if e.dim() != e_aug.dim() {
        return Err(Error::Shape(format!(
            "bottleneck views {:?} and {:?} disagree",
            e.dim(),
            e_aug.dim()
        )));
    }
    let (b, u) = e.dim();
    let diff = &e - &e_aug;
    let scale = 1.0 / (b * u) as f64;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() * scale;
    let d_e = &diff * (2.0 * scale);
    let d_e_aug = -&d_e;
    Ok((loss, d_e, d_e_aug))
}

/// Mean of the first `valid` rows; trailing padding rows are excluded.
pub fn time_mean(feat: ArrayView2<'_, f64>, valid: usize) -> Result<Array1<f64>> {
    if valid == 0 {
        return Err(Error::Domain("cannot average zero frames".into()));
    }
    if valid > feat.nrows() {
        return Err(Error::Domain(format!(
            "{valid} valid frames but only {} rows",
            feat.nrows()
        )));
    }
    let mut mean = Array1::zeros(feat.ncols());
    for row in feat.rows().into_iter().take(valid) {
        mean += &row;
    }
    mean /= valid as f64;
    Ok(mean)
}

/// Reconstruction loss against per-sample time-averaged features, averaged
/// over width and batch. Returns the gradient with respect to the
/// reconstruction.
pub fn l_x(
    features: &[Array2<f64>],
    valid_frames: &[usize],
    recon: ArrayView2<'_, f64>,
) -> Result<(f64, Array2<f64>)> {
    let (b, u) = recon.dim();
    if features.len() != b || valid_frames.len() != b {
        return Err(Error::Shape(format!(
            "{} feature matrices and {} frame counts for {b} reconstructions",
            features.len(),
            valid_frames.len()
        )));
    }
    let scale = 1.0 / (b * u) as f64;
    let mut loss = 0.0;
    let mut d_recon = Array2::zeros((b, u));
    for (i, feat) in features.iter().enumerate() {
        if feat.ncols() != u {
            return Err(Error::Shape(format!(
                "feature width {} but reconstruction width {u}",
                feat.ncols()
            )));
        }
        let target = time_mean(feat.view(), valid_frames[i])?;
        for j in 0..u {
            let diff = recon[[i, j]] - target[j];
            loss += diff * diff * scale;
            d_recon[[i, j]] = 2.0 * scale * diff;
        }
    }
    Ok((loss, d_recon))
}
