//! The contrastive loss family. Everything reduces to one anchored form:
//! each anchor row scores every candidate row, positives share the anchor's
//! label, and the loss is the mean normalized-softmax log-likelihood of the
//! positives. Gradients are returned alongside values.

use ndarray::{Array1, Array2, ArrayView2};

use crate::error::{Error, Result};

/// Value and input gradients of [`anchored_contrastive`].
pub struct AnchoredGrads {
    pub loss: f64,
    pub d_anchor: Array2<f64>,
    pub d_cand: Array2<f64>,
}

/// Anchored contrastive loss. Anchor `i` scores all candidates (minus itself
/// unless `include_self`); candidates with the anchor's label are positives.
/// Anchors without positives are excluded from the mean; if none has a
/// positive the batch is rejected.
pub fn anchored_contrastive(
    anchor: ArrayView2<'_, f64>,
    cand: ArrayView2<'_, f64>,
    labels: &[usize],
    tau: f64,
    include_self: bool,
) -> Result<AnchoredGrads> {
    let n = anchor.nrows();
    if n < 2 {
        return Err(Error::Domain("contrastive batch needs at least 2 samples".into()));
    }
    if anchor.dim() != cand.dim() {
        return Err(Error::Shape(format!(
            "anchors {:?} and candidates {:?} disagree",
            anchor.dim(),
            cand.dim()
        )));
    }
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} anchors", labels.len())));
    }
    if !(tau > 0.0) {
        return Err(Error::Domain(format!("temperature must be positive, got {tau}")));
    }

    let mut scores = anchor.dot(&cand.t());
    scores /= tau;

    let anchors_with_positives = (0..n)
        .filter(|&i| (0..n).any(|p| (include_self || p != i) && labels[p] == labels[i]))
        .count();
    if anchors_with_positives == 0 {
        return Err(Error::Domain("every anchor has an empty positive set".into()));
    }
    let m = anchors_with_positives as f64;

    let mut loss = 0.0;
    let mut d_scores = Array2::zeros((n, n));
    for i in 0..n {
        let admitted = |a: usize| include_self || a != i;
        let positives: Vec<usize> =
            (0..n).filter(|&p| admitted(p) && labels[p] == labels[i]).collect();
        if positives.is_empty() {
            continue;
        }
        let np = positives.len() as f64;
        let mut max = f64::NEG_INFINITY;
        for a in 0..n {
            if admitted(a) {
                max = max.max(scores[[i, a]]);
            }
        }
        let mut sum = 0.0;
        for a in 0..n {
            if admitted(a) {
                sum += (scores[[i, a]] - max).exp();
            }
        }
        let lse = max + sum.ln();
        for &p in &positives {
            loss += (lse - scores[[i, p]]) / np;
        }
        let w = 1.0 / (m * np);
        for a in 0..n {
            if admitted(a) {
                d_scores[[i, a]] = w * np * (scores[[i, a]] - max).exp() / sum;
            }
        }
        for &p in &positives {
            d_scores[[i, p]] -= w;
        }
    }
    d_scores /= tau;
    let d_anchor = d_scores.dot(&cand);
    let d_cand = d_scores.t().dot(&anchor);
    Ok(AnchoredGrads { loss: loss / m, d_anchor, d_cand })
}

/// Self-supervised contrastive loss over paired views: `pair_of` is a
/// fixed-point-free involution mapping each sample to its positive.
pub fn l_self(z: ArrayView2<'_, f64>, pair_of: &[usize], tau: f64) -> Result<(f64, Array2<f64>)> {
    let n = z.nrows();
    if pair_of.len() != n {
        return Err(Error::Shape(format!("{} pair entries for {n} samples", pair_of.len())));
    }
    for (i, &j) in pair_of.iter().enumerate() {
        if j >= n || j == i || pair_of[j] != i {
            return Err(Error::Domain(format!(
                "pairing is not a fixed-point-free involution at sample {i}"
            )));
        }
    }
    // Labelling each pair by its smaller index makes the pair partner the
    // unique positive under the anchored form.
    let labels: Vec<usize> = (0..n).map(|i| i.min(pair_of[i])).collect();
    let g = anchored_contrastive(z, z, &labels, tau, false)?;
    Ok((g.loss, g.d_anchor + g.d_cand))
}

/// Supervised contrastive loss: positives are same-label batch mates.
pub fn l_sup(z: ArrayView2<'_, f64>, labels: &[usize], tau: f64) -> Result<(f64, Array2<f64>)> {
    let g = anchored_contrastive(z, z, labels, tau, false)?;
    Ok((g.loss, g.d_anchor + g.d_cand))
}

/// L2-normalizes each row; returns the unit rows and the original norms.
pub fn normalize_rows(v: ArrayView2<'_, f64>) -> Result<(Array2<f64>, Array1<f64>)> {
    let mut z = v.to_owned();
    let mut norms = Array1::zeros(v.nrows());
    for (i, mut row) in z.rows_mut().into_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        if norm == 0.0 {
            return Err(Error::Domain(format!("row {i} is a zero vector and cannot be normalized")));
        }
        row /= norm;
        norms[i] = norm;
    }
    Ok((z, norms))
}

/// Backward of [`normalize_rows`]: projects the gradient onto the tangent of
/// the unit sphere and rescales.
fn normalize_backward(z: &Array2<f64>, norms: &Array1<f64>, dz: &Array2<f64>) -> Array2<f64> {
    let mut dv = dz.clone();
    for i in 0..z.nrows() {
        let zi = z.row(i);
        let radial = zi.dot(&dz.row(i));
        let mut row = dv.row_mut(i);
        row.scaled_add(-radial, &zi);
        row /= norms[i];
    }
    dv
}

/// Dual contrastive loss for pretraining: the two views of each utterance
/// are mutual positives (pseudo-labels are unique per utterance), scored
/// against all clean-view anchors including their own.
pub struct DualPretrainGrads {
    pub l_z: f64,
    pub l_theta: f64,
    pub d_clean: Array2<f64>,
    pub d_aug: Array2<f64>,
}

pub fn dual_pretrain(
    ebn_clean: ArrayView2<'_, f64>,
    ebn_aug: ArrayView2<'_, f64>,
    labels: &[usize],
    tau: f64,
) -> Result<DualPretrainGrads> {
    let (zc, nc) = normalize_rows(ebn_clean)?;
    let (za, na) = normalize_rows(ebn_aug)?;
    let gz = anchored_contrastive(za.view(), zc.view(), labels, tau, true)?;
    let gt = anchored_contrastive(zc.view(), za.view(), labels, tau, true)?;
    let dza = &gz.d_anchor + &gt.d_cand;
    let dzc = &gz.d_cand + &gt.d_anchor;
    Ok(DualPretrainGrads {
        l_z: gz.loss,
        l_theta: gt.loss,
        d_clean: normalize_backward(&zc, &nc, &dzc),
        d_aug: normalize_backward(&za, &na, &dza),
    })
}

/// Dual contrastive loss for fine-tuning: each sample's anchor is the
/// normalized classifier column of its label; anchors of same-label batch
/// mates are the positives.
pub struct DualFinetuneGrads {
    pub l_z: f64,
    pub l_theta: f64,
    pub d_ebn: Array2<f64>,
    pub d_proj_w: Array2<f64>,
}

pub fn dual_finetune(
    ebn: ArrayView2<'_, f64>,
    proj_w: ArrayView2<'_, f64>,
    labels: &[usize],
    tau: f64,
) -> Result<DualFinetuneGrads> {
    let n = ebn.nrows();
    let (u, s) = proj_w.dim();
    if u != ebn.ncols() {
        return Err(Error::Shape(format!(
            "projection rows {u} disagree with embedding width {}",
            ebn.ncols()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= s) {
        return Err(Error::Domain(format!("label {bad} out of range for {s} classes")));
    }
    let (z, nz) = normalize_rows(ebn)?;
    let mut col_norms = vec![0.0f64; s];
    let mut anchors = Array2::zeros((n, u));
    for (i, &y) in labels.iter().enumerate() {
        if col_norms[y] == 0.0 {
            let col = proj_w.column(y);
            let norm = col.dot(&col).sqrt();
            if norm == 0.0 {
                return Err(Error::Domain(format!("classifier column {y} is a zero vector")));
            }
            col_norms[y] = norm;
        }
        anchors
            .row_mut(i)
            .assign(&(&proj_w.column(y) / col_norms[y]));
    }

    let gz = anchored_contrastive(z.view(), anchors.view(), labels, tau, false)?;
    let gt = anchored_contrastive(anchors.view(), z.view(), labels, tau, false)?;
    let dz = &gz.d_anchor + &gt.d_cand;
    let d_anchor_rows = &gz.d_cand + &gt.d_anchor;

    let mut d_proj_w = Array2::zeros((u, s));
    let mut d_col = Array1::zeros(u);
    for y in 0..s {
        if col_norms[y] == 0.0 {
            continue;
        }
        d_col.fill(0.0);
        for (i, &yi) in labels.iter().enumerate() {
            if yi == y {
                d_col += &d_anchor_rows.row(i);
            }
        }
        let zc = &proj_w.column(y) / col_norms[y];
        let radial = zc.dot(&d_col);
        let mut out = d_proj_w.column_mut(y);
        out.assign(&d_col);
        out.scaled_add(-radial, &zc);
        out /= col_norms[y];
    }

    Ok(DualFinetuneGrads {
        l_z: gz.loss,
        l_theta: gt.loss,
        d_ebn: normalize_backward(&z, &nz, &dz),
        d_proj_w,
    })
}
