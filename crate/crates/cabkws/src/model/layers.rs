//! Layer primitives shared by forward and backward: same-padding strided
//! convolution via im2col, group and layer normalization, row softmax, and
//! sinusoidal positional encoding.

use ndarray::{Array1, Array2, Array4, ArrayView1, ArrayView2, ArrayView4};

/// Geometry of one same-padding convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub kt: usize,
    pub kf: usize,
    pub st: usize,
    pub sf: usize,
    pub in_t: usize,
    pub in_f: usize,
    pub in_c: usize,
    pub out_t: usize,
    pub out_f: usize,
    pub pad_t: usize,
    pub pad_f: usize,
}

impl ConvGeom {
    pub fn new(
        (in_t, in_f, in_c): (usize, usize, usize),
        (kt, kf): (usize, usize),
        (st, sf): (usize, usize),
    ) -> Self {
        let out_t = in_t.div_ceil(st);
        let out_f = in_f.div_ceil(sf);
        // "Same" padding splits the total evenly, extra on the trailing side.
        let pad_t = ((out_t - 1) * st + kt).saturating_sub(in_t) / 2;
        let pad_f = ((out_f - 1) * sf + kf).saturating_sub(in_f) / 2;
        ConvGeom { kt, kf, st, sf, in_t, in_f, in_c, out_t, out_f, pad_t, pad_f }
    }

    pub fn col_width(&self) -> usize {
        self.kt * self.kf * self.in_c
    }

    pub fn n_rows(&self, batch: usize) -> usize {
        batch * self.out_t * self.out_f
    }
}

/// Unfolds `[B, T, F, C]` input into `[B*out_t*out_f, kt*kf*C]` patch rows;
/// out-of-bounds taps read zero. Column `(dt*kf + df)*C + ci` matches the
/// row-major flattening of `[kt, kf, in, out]` weights.
pub(crate) fn im2col(input: ArrayView4<'_, f64>, g: &ConvGeom) -> Array2<f64> {
    let (b, t, f, c) = input.dim();
    assert_eq!((t, f, c), (g.in_t, g.in_f, g.in_c), "im2col input shape");
    let k = g.col_width();
    let mut cols = Array2::zeros((g.n_rows(b), k));
    let src = input.as_slice().expect("standard layout");
    let dst = cols.as_slice_mut().expect("standard layout");
    for bi in 0..b {
        for to in 0..g.out_t {
            let t0 = (to * g.st) as isize - g.pad_t as isize;
            for fo in 0..g.out_f {
                let f0 = (fo * g.sf) as isize - g.pad_f as isize;
                let row = ((bi * g.out_t + to) * g.out_f + fo) * k;
                for dt in 0..g.kt {
                    let ti = t0 + dt as isize;
                    if ti < 0 || ti >= t as isize {
                        continue;
                    }
                    let fi_lo = f0.max(0) as usize;
                    let fi_hi = ((f0 + g.kf as isize).min(f as isize)) as usize;
                    if fi_lo >= fi_hi {
                        continue;
                    }
                    let len = (fi_hi - fi_lo) * c;
                    let s0 = ((bi * t + ti as usize) * f + fi_lo) * c;
                    let d0 = row + (dt * g.kf + (fi_lo as isize - f0) as usize) * c;
                    dst[d0..d0 + len].copy_from_slice(&src[s0..s0 + len]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: accumulates patch-row gradients back onto the
/// input map (zero-padding taps are dropped).
pub(crate) fn col2im_accum(d_cols: ArrayView2<'_, f64>, g: &ConvGeom, d_input: &mut Array4<f64>) {
    let (b, t, f, c) = d_input.dim();
    assert_eq!((t, f, c), (g.in_t, g.in_f, g.in_c), "col2im output shape");
    let k = g.col_width();
    assert_eq!(d_cols.dim(), (g.n_rows(b), k), "col2im cols shape");
    let src = d_cols.as_slice().expect("standard layout");
    let dst = d_input.as_slice_mut().expect("standard layout");
    for bi in 0..b {
        for to in 0..g.out_t {
            let t0 = (to * g.st) as isize - g.pad_t as isize;
            for fo in 0..g.out_f {
                let f0 = (fo * g.sf) as isize - g.pad_f as isize;
                let row = ((bi * g.out_t + to) * g.out_f + fo) * k;
                for dt in 0..g.kt {
                    let ti = t0 + dt as isize;
                    if ti < 0 || ti >= t as isize {
                        continue;
                    }
                    let fi_lo = f0.max(0) as usize;
                    let fi_hi = ((f0 + g.kf as isize).min(f as isize)) as usize;
                    if fi_lo >= fi_hi {
                        continue;
                    }
                    let len = (fi_hi - fi_lo) * c;
                    let d0 = ((bi * t + ti as usize) * f + fi_lo) * c;
                    let s0 = row + (dt * g.kf + (fi_lo as isize - f0) as usize) * c;
                    for i in 0..len {
                        dst[d0 + i] += src[s0 + i];
                    }
                }
            }
        }
    }
}

/// Group normalization over `(t, f, channels-in-group)` per sample.
/// Returns the scaled output, the normalized values, and `1/sqrt(var+eps)`
/// per `(sample, group)`.
pub(crate) fn group_norm_forward(
    x: &Array4<f64>,
    gamma: ArrayView1<'_, f64>,
    beta: ArrayView1<'_, f64>,
    groups: usize,
    eps: f64,
) -> (Array4<f64>, Array4<f64>, Array2<f64>) {
    let (b, t, f, c) = x.dim();
    assert_eq!(c % groups, 0, "channels divisible by groups");
    let cpg = c / groups;
    let m = (t * f * cpg) as f64;
    let mut y = Array4::zeros((b, t, f, c));
    let mut xhat = Array4::zeros((b, t, f, c));
    let mut inv_std = Array2::zeros((b, groups));
    for bi in 0..b {
        for g in 0..groups {
            let c0 = g * cpg;
            let mut sum = 0.0;
            let mut sumsq = 0.0;
            for ti in 0..t {
                for fi in 0..f {
                    for ci in c0..c0 + cpg {
                        let v = x[[bi, ti, fi, ci]];
                        sum += v;
                        sumsq += v * v;
                    }
                }
            }
            let mean = sum / m;
            let var = (sumsq / m - mean * mean).max(0.0);
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[[bi, g]] = istd;
            for ti in 0..t {
                for fi in 0..f {
                    for ci in c0..c0 + cpg {
                        let h = (x[[bi, ti, fi, ci]] - mean) * istd;
                        xhat[[bi, ti, fi, ci]] = h;
                        y[[bi, ti, fi, ci]] = gamma[ci] * h + beta[ci];
                    }
                }
            }
        }
    }
    (y, xhat, inv_std)
}

/// Backward of [`group_norm_forward`]; returns `dx` and accumulates
/// per-channel `dgamma`/`dbeta`.
pub(crate) fn group_norm_backward(
    dy: &Array4<f64>,
    xhat: &Array4<f64>,
    inv_std: &Array2<f64>,
    gamma: ArrayView1<'_, f64>,
    groups: usize,
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) -> Array4<f64> {
    let (b, t, f, c) = dy.dim();
    let cpg = c / groups;
    let m = (t * f * cpg) as f64;
    let mut dx = Array4::zeros((b, t, f, c));
    for bi in 0..b {
        for ti in 0..t {
            for fi in 0..f {
                for ci in 0..c {
                    let g = dy[[bi, ti, fi, ci]];
                    dgamma[ci] += g * xhat[[bi, ti, fi, ci]];
                    dbeta[ci] += g;
                }
            }
        }
    }
    for bi in 0..b {
        for g in 0..groups {
            let c0 = g * cpg;
            let mut s1 = 0.0;
            let mut s2 = 0.0;
            for ti in 0..t {
                for fi in 0..f {
                    for ci in c0..c0 + cpg {
                        let dh = dy[[bi, ti, fi, ci]] * gamma[ci];
                        s1 += dh;
                        s2 += dh * xhat[[bi, ti, fi, ci]];
                    }
                }
            }
            let istd = inv_std[[bi, g]];
            for ti in 0..t {
                for fi in 0..f {
                    for ci in c0..c0 + cpg {
                        let dh = dy[[bi, ti, fi, ci]] * gamma[ci];
                        dx[[bi, ti, fi, ci]] =
                            istd * (dh - s1 / m - xhat[[bi, ti, fi, ci]] * s2 / m);
                    }
                }
            }
        }
    }
    dx
}

/// Per-row layer normalization. Returns output, normalized values, and
/// `1/sqrt(var+eps)` per row.
pub(crate) fn layer_norm_forward(
    x: ArrayView2<'_, f64>,
    gamma: ArrayView1<'_, f64>,
    beta: ArrayView1<'_, f64>,
    eps: f64,
) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    let (r, d) = x.dim();
    let dd = d as f64;
    let mut y = Array2::zeros((r, d));
    let mut xhat = Array2::zeros((r, d));
    let mut inv_std = Array1::zeros(r);
    for i in 0..r {
        let row = x.row(i);
        let mean = row.sum() / dd;
        let var = (row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dd).max(0.0);
        let istd = 1.0 / (var + eps).sqrt();
        inv_std[i] = istd;
        for j in 0..d {
            let h = (x[[i, j]] - mean) * istd;
            xhat[[i, j]] = h;
            y[[i, j]] = gamma[j] * h + beta[j];
        }
    }
    (y, xhat, inv_std)
}

/// Backward of [`layer_norm_forward`]; returns `dx` and accumulates
/// `dgamma`/`dbeta`.
pub(crate) fn layer_norm_backward(
    dy: ArrayView2<'_, f64>,
    xhat: &Array2<f64>,
    inv_std: &Array1<f64>,
    gamma: ArrayView1<'_, f64>,
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) -> Array2<f64> {
    let (r, d) = dy.dim();
    let dd = d as f64;
    let mut dx = Array2::zeros((r, d));
    for i in 0..r {
        let mut s1 = 0.0;
        let mut s2 = 0.0;
        for j in 0..d {
            let g = dy[[i, j]];
            dgamma[j] += g * xhat[[i, j]];
            dbeta[j] += g;
            let dh = g * gamma[j];
            s1 += dh;
            s2 += dh * xhat[[i, j]];
        }
        let istd = inv_std[i];
        for j in 0..d {
            let dh = dy[[i, j]] * gamma[j];
            dx[[i, j]] = istd * (dh - s1 / dd - xhat[[i, j]] * s2 / dd);
        }
    }
    dx
}

/// In-place row softmax with max subtraction.
pub(crate) fn softmax_rows(a: &mut Array2<f64>) {
    for mut row in a.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Sinusoidal positional encoding: `PE[p, 2i] = sin(p / 10000^(2i/d))`,
/// `PE[p, 2i+1] = cos(p / 10000^(2i/d))`.
pub fn positional_encoding(positions: usize, d_model: usize) -> Array2<f64> {
    let mut pe = Array2::zeros((positions, d_model));
    for p in 0..positions {
        for i in 0..d_model.div_ceil(2) {
            let rate = 10000f64.powf(2.0 * i as f64 / d_model as f64);
            let angle = p as f64 / rate;
            pe[[p, 2 * i]] = angle.sin();
            if 2 * i + 1 < d_model {
                pe[[p, 2 * i + 1]] = angle.cos();
            }
        }
    }
    pe
}
