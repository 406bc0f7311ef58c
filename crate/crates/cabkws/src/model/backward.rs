//! Reverse-mode pass. Consumes a [`ForwardTrace`] plus loss gradients at the
//! head outputs and accumulates parameter gradients into a [`GradStore`].

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Array4, Axis, Zip};

use super::forward::{conv_front_geoms, res_geom, ForwardTrace};
use super::layers::{col2im_accum, group_norm_backward, layer_norm_backward};
use super::params::{GradStore, ParamStore};
use crate::error::{Error, Result};

/// Gradients of the training loss with respect to the head outputs. Any
/// subset may be present; absent heads contribute nothing.
#[derive(Default)]
pub struct LossSeeds {
    pub d_logits: Option<Array2<f64>>,
    pub d_ebn: Option<Array2<f64>>,
    pub d_recon: Option<Array2<f64>>,
}

fn mask_relu2(d: &mut Array2<f64>, act: &Array2<f64>) {
    Zip::from(d).and(act).for_each(|g, &a| {
        if a <= 0.0 {
            *g = 0.0;
        }
    });
}

fn mask_relu4(d: &mut Array4<f64>, act: &Array4<f64>) {
    Zip::from(d).and(act).for_each(|g, &a| {
        if a <= 0.0 {
            *g = 0.0;
        }
    });
}

/// Accumulates the gradients of `x W + b` given `d_out`, and returns `d_x`.
fn linear_backward(
    x: &Array2<f64>,
    d_out: &Array2<f64>,
    w_id: usize,
    b_id: usize,
    params: &ParamStore,
    grads: &mut GradStore,
) -> Array2<f64> {
    general_mat_mul(1.0, &x.t(), d_out, 1.0, &mut grads.matrix_mut(w_id));
    let mut db = grads.view1_mut(b_id);
    db += &d_out.sum_axis(Axis(0));
    d_out.dot(&params.matrix(w_id).t())
}

/// Accumulates conv weight/bias gradients from the patch matrix and the
/// output gradient (flattened to rows), and returns the patch gradient.
fn conv_backward(
    cols: &Array2<f64>,
    d_out2d: &Array2<f64>,
    w_id: usize,
    b_id: usize,
    params: &ParamStore,
    grads: &mut GradStore,
) -> Array2<f64> {
    general_mat_mul(1.0, &cols.t(), d_out2d, 1.0, &mut grads.matrix_mut(w_id));
    let mut db = grads.view1_mut(b_id);
    db += &d_out2d.sum_axis(Axis(0));
    d_out2d.dot(&params.matrix(w_id).t())
}

fn add_into(grads: &mut GradStore, id: usize, local: &[f64]) {
    let dst = grads.slice_mut(id);
    for (d, s) in dst.iter_mut().zip(local) {
        *d += *s;
    }
}

/// Backpropagates the seeded head gradients through the whole network,
/// accumulating parameter gradients. Callable repeatedly on fresh traces to
/// sum gradients across batches.
pub fn backward_batch(
    trace: &ForwardTrace,
    params: &ParamStore,
    seeds: &LossSeeds,
    grads: &mut GradStore,
) -> Result<()> {
    let cfg = &params.config;
    let b = trace.batch;
    let id = |name: &str| params.id(name);

    let mut d_ebn = Array2::zeros(trace.e_bn.dim());
    if let Some(dl) = &seeds.d_logits {
        assert_eq!(dl.dim(), trace.logits.dim(), "logit seed shape");
        d_ebn += &linear_backward(&trace.e_bn, dl, id("fc_proj.w"), id("fc_proj.b"), params, grads);
    }
    if let Some(dr) = &seeds.d_recon {
        let recon = trace.recon.as_ref().ok_or_else(|| {
            Error::Graph("reconstruction gradient seeded but the trace has no reconstruction head".into())
        })?;
        assert_eq!(dr.dim(), recon.dim(), "reconstruction seed shape");
        d_ebn += &linear_backward(&trace.e_bn, dr, id("fc_recon.w"), id("fc_recon.b"), params, grads);
    }
    if let Some(de) = &seeds.d_ebn {
        assert_eq!(de.dim(), trace.e_bn.dim(), "bottleneck seed shape");
        d_ebn += de;
    }

    mask_relu2(&mut d_ebn, &trace.e_bn);
    let d_efeat = linear_backward(&trace.e_feat, &d_ebn, id("fc_bn.w"), id("fc_bn.b"), params, grads);

    let p = cfg.pooled_frames();
    let d = cfg.d_model;
    let r = cfg.selected_frames;
    let mut d_x = Array2::zeros((b * p, d));
    for bi in 0..b {
        for j in 0..r {
            let mut row = d_x.row_mut(bi * p + (p - r + j));
            row += &d_efeat.slice(s![bi, j * d..(j + 1) * d]);
        }
    }

    let heads = cfg.heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    for l in (0..cfg.attn_layers).rev() {
        let cache = &trace.enc[l];
        let eid = |suffix: &str| params.id(&format!("enc{l}.{suffix}"));

        let mut d_hrelu =
            linear_backward(&cache.h_relu, &d_x, eid("ffn.w2"), eid("ffn.b2"), params, grads);
        mask_relu2(&mut d_hrelu, &cache.h_relu);
        let d_xn2 = linear_backward(&cache.xn2, &d_hrelu, eid("ffn.w1"), eid("ffn.b1"), params, grads);

        let mut dgamma = vec![0.0; d];
        let mut dbeta = vec![0.0; d];
        let mut d_xmid = d_x;
        d_xmid += &layer_norm_backward(
            d_xn2.view(),
            &cache.xhat2,
            &cache.inv_std2,
            params.view1(eid("ln2.gamma")),
            &mut dgamma,
            &mut dbeta,
        );
        add_into(grads, eid("ln2.gamma"), &dgamma);
        add_into(grads, eid("ln2.beta"), &dbeta);

        let d_ctx = linear_backward(&cache.ctx, &d_xmid, eid("attn.wo"), eid("attn.bo"), params, grads);
        let mut dq = Array2::zeros((b * p, d));
        let mut dk = Array2::zeros((b * p, d));
        let mut dv = Array2::zeros((b * p, d));
        for bi in 0..b {
            let rows = s![bi * p..(bi + 1) * p, ..];
            for h in 0..heads {
                let cols = s![.., h * dh..(h + 1) * dh];
                let attn = cache.attn.slice(s![bi, h, .., ..]);
                let d_ctx_h = d_ctx.slice(rows).slice_move(cols);
                let qh = cache.q.slice(rows).slice_move(cols);
                let kh = cache.k.slice(rows).slice_move(cols);
                let vh = cache.v.slice(rows).slice_move(cols);

                let d_attn = d_ctx_h.dot(&vh.t());
                let row_dots = (&d_attn * &attn).sum_axis(Axis(1));
                let mut d_scores = Array2::zeros((p, p));
                for i in 0..p {
                    for j in 0..p {
                        d_scores[[i, j]] = attn[[i, j]] * (d_attn[[i, j]] - row_dots[i]) * scale;
                    }
                }
                dq.slice_mut(rows).slice_move(cols).assign(&d_scores.dot(&kh));
                dk.slice_mut(rows).slice_move(cols).assign(&d_scores.t().dot(&qh));
                dv.slice_mut(rows).slice_move(cols).assign(&attn.t().dot(&d_ctx_h));
            }
        }
        let mut d_xn1 = linear_backward(&cache.xn1, &dq, eid("attn.wq"), eid("attn.bq"), params, grads);
        general_mat_mul(1.0, &cache.xn1.t(), &dk, 1.0, &mut grads.matrix_mut(eid("attn.wk")));
        d_xn1 += &dk.dot(&params.matrix(eid("attn.wk")).t());
        d_xn1 += &linear_backward(&cache.xn1, &dv, eid("attn.wv"), eid("attn.bv"), params, grads);

        let mut dgamma = vec![0.0; d];
        let mut dbeta = vec![0.0; d];
        let mut d_in = d_xmid;
        d_in += &layer_norm_backward(
            d_xn1.view(),
            &cache.xhat1,
            &cache.inv_std1,
            params.view1(eid("ln1.gamma")),
            &mut dgamma,
            &mut dbeta,
        );
        add_into(grads, eid("ln1.gamma"), &dgamma);
        add_into(grads, eid("ln1.beta"), &dbeta);
        d_x = d_in;
    }

    let (tp, fp) = (cfg.post_conv_time(), cfg.post_conv_freq());
    let c = cfg.channels;
    let g = cfg.pool_group;
    let mut d_pooled = Array4::zeros((b, p, fp, c));
    for bi in 0..b {
        for pi in 0..p {
            for ci in 0..c {
                for fi in 0..fp {
                    d_pooled[[bi, pi, fi, ci]] = d_x[[bi * p + pi, ci * fp + fi]];
                }
            }
        }
    }

    let pool_map = trace
        .res
        .last()
        .map(|rc| &rc.out)
        .unwrap_or_else(|| trace.conv_post.last().expect("at least one conv layer"));
    let pool_w = params.matrix(id("pool.w"));
    let mut d_pool_w = Array2::<f64>::zeros((c, fp));
    let mut d_map = Array4::zeros((b, tp, fp, c));
    for bi in 0..b {
        for pi in 0..p {
            let t0 = pi * g;
            let gs = g.min(tp - t0);
            for ci in 0..c {
                let mut s_q = [0.0f64; 8];
                assert!(gs <= 8, "pool group larger than supported");
                let mut sbar = 0.0;
                for q in 0..gs {
                    let mut dot = 0.0;
                    for fi in 0..fp {
                        dot += d_pooled[[bi, pi, fi, ci]] * pool_map[[bi, t0 + q, fi, ci]];
                    }
                    s_q[q] = dot;
                    sbar += trace.betas[[bi, pi, q, ci]] * dot;
                }
                for q in 0..gs {
                    let beta = trace.betas[[bi, pi, q, ci]];
                    let d_alpha = beta * (s_q[q] - sbar);
                    for fi in 0..fp {
                        d_map[[bi, t0 + q, fi, ci]] += beta * d_pooled[[bi, pi, fi, ci]]
                            + d_alpha * pool_w[[ci, fi]];
                        d_pool_w[[ci, fi]] += d_alpha * pool_map[[bi, t0 + q, fi, ci]];
                    }
                }
            }
        }
    }
    {
        let mut dw = grads.matrix_mut(id("pool.w"));
        dw += &d_pool_w;
    }
    // The pool score offset is shared by every frame in a group, and the
    // group softmax is shift-invariant, so its gradient sum(d_alpha over a
    // group) telescopes to sbar - sbar = 0 identically. Accumulating the
    // per-term float residue instead would feed Adam rounding noise, so the
    // cancellation is applied in closed form: pool.b stays at zero gradient.

    let rg = res_geom(cfg);
    let rows = b * tp * fp;
    for blk in (0..cfg.residual_blocks).rev() {
        let cache = &trace.res[blk];
        let rid = |suffix: &str| params.id(&format!("res{blk}.{suffix}"));
        let mut d_sum = d_map;
        mask_relu4(&mut d_sum, &cache.out);

        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        let d_y2 = group_norm_backward(
            &d_sum,
            &cache.xhat2,
            &cache.inv_std2,
            params.view1(rid("gn2.gamma")),
            cfg.gn_groups,
            &mut dgamma,
            &mut dbeta,
        );
        add_into(grads, rid("gn2.gamma"), &dgamma);
        add_into(grads, rid("gn2.beta"), &dbeta);

        let d_y2_2d = d_y2.into_shape_with_order((rows, c)).expect("conv grad reshape");
        let d_cols2 = conv_backward(&cache.cols2, &d_y2_2d, rid("conv2.w"), rid("conv2.b"), params, grads);
        let mut d_post1 = Array4::zeros((b, tp, fp, c));
        col2im_accum(d_cols2.view(), &rg, &mut d_post1);
        mask_relu4(&mut d_post1, &cache.post1);

        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        let d_y1 = group_norm_backward(
            &d_post1,
            &cache.xhat1,
            &cache.inv_std1,
            params.view1(rid("gn1.gamma")),
            cfg.gn_groups,
            &mut dgamma,
            &mut dbeta,
        );
        add_into(grads, rid("gn1.gamma"), &dgamma);
        add_into(grads, rid("gn1.beta"), &dbeta);

        let d_y1_2d = d_y1.into_shape_with_order((rows, c)).expect("conv grad reshape");
        let d_cols1 = conv_backward(&cache.cols1, &d_y1_2d, rid("conv1.w"), rid("conv1.b"), params, grads);
        let mut d_in = d_sum;
        col2im_accum(d_cols1.view(), &rg, &mut d_in);
        d_map = d_in;
    }

    let geoms = conv_front_geoms(cfg);
    for i in (0..cfg.conv_layers).rev() {
        let geom = &geoms[i];
        let mut d_out = d_map;
        mask_relu4(&mut d_out, &trace.conv_post[i]);
        let n = b * geom.out_t * geom.out_f;
        let d_out2d = d_out.into_shape_with_order((n, c)).expect("conv grad reshape");
        let d_cols = conv_backward(
            &trace.conv_cols[i],
            &d_out2d,
            id(&format!("conv{i}.w")),
            id(&format!("conv{i}.b")),
            params,
            grads,
        );
        if i == 0 {
            break;
        }
        let mut d_in = Array4::zeros(trace.conv_post[i - 1].dim());
        col2im_accum(d_cols.view(), geom, &mut d_in);
        d_map = d_in;
    }
    Ok(())
}
