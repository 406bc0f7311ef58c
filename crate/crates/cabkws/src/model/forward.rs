//! Batched forward pass. Every intermediate needed by the backward pass is
//! cached in [`ForwardTrace`]; samples are row-stacked so the projection and
//! FFN layers run as single matrix products per batch.

use ndarray::{s, Array1, Array2, Array4};

use super::layers::{
    group_norm_forward, im2col, layer_norm_forward, positional_encoding, softmax_rows, ConvGeom,
};
use super::params::ParamStore;
use super::ModelConfig;

pub(crate) const LN_EPS: f64 = 1e-5;

/// Which heads the graph carries: pretraining keeps the reconstruction
/// output, fine-tuning discards it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Pretrain,
    Finetune,
}

/// Folds ReLU sign bits into a 64-bit digest. Two evaluations share a digest
/// exactly when every ReLU decision matched, which is how the gradient
/// checker detects finite-difference steps that cross a kink.
pub(crate) struct SignHasher {
    sig: u64,
    word: u64,
    bits: u32,
}

impl SignHasher {
    pub fn new() -> Self {
        SignHasher { sig: 0xcbf2_9ce4_8422_2325, word: 0, bits: 0 }
    }

    #[inline]
    pub fn push(&mut self, positive: bool) {
        self.word = (self.word << 1) | positive as u64;
        self.bits += 1;
        if self.bits == 64 {
            self.fold();
        }
    }

    fn fold(&mut self) {
        self.sig = (self.sig ^ self.word).wrapping_mul(0x0000_0100_0000_01b3);
        self.word = 0;
        self.bits = 0;
    }

    pub fn finish(mut self) -> u64 {
        if self.bits > 0 {
            self.fold();
        }
        self.sig
    }
}

/// Applies ReLU in place while recording each sign bit.
fn relu_hash(xs: &mut [f64], h: &mut SignHasher) {
    for v in xs.iter_mut() {
        let positive = *v > 0.0;
        h.push(positive);
        if !positive {
            *v = 0.0;
        }
    }
}

/// Cached intermediates of one residual block.
pub(crate) struct ResCache {
    pub cols1: Array2<f64>,
    pub xhat1: Array4<f64>,
    pub inv_std1: Array2<f64>,
    pub post1: Array4<f64>,
    pub cols2: Array2<f64>,
    pub xhat2: Array4<f64>,
    pub inv_std2: Array2<f64>,
    pub out: Array4<f64>,
}

/// Cached intermediates of one encoder layer. Row-stacked matrices hold
/// `batch * positions` rows.
pub(crate) struct EncCache {
    pub xhat1: Array2<f64>,
    pub inv_std1: Array1<f64>,
    pub xn1: Array2<f64>,
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    pub attn: Array4<f64>,
    pub ctx: Array2<f64>,
    pub xhat2: Array2<f64>,
    pub inv_std2: Array1<f64>,
    pub xn2: Array2<f64>,
    pub h_relu: Array2<f64>,
}

/// Everything one forward pass produced, including the intermediates the
/// backward pass consumes.
pub struct ForwardTrace {
    pub batch: usize,
    pub mode: Mode,
    pub(crate) conv_cols: Vec<Array2<f64>>,
    pub(crate) conv_post: Vec<Array4<f64>>,
    pub(crate) res: Vec<ResCache>,
    pub(crate) betas: Array4<f64>,
    pub pooled: Array4<f64>,
    pub(crate) enc: Vec<EncCache>,
    pub e_tran: Array2<f64>,
    pub(crate) e_feat: Array2<f64>,
    pub e_bn: Array2<f64>,
    pub logits: Array2<f64>,
    pub recon: Option<Array2<f64>>,
    /// Digest of every ReLU sign decision in this pass.
    pub relu_sig: u64,
}

/// Same-padding geometry of each front convolution layer.
pub(crate) fn conv_front_geoms(cfg: &ModelConfig) -> Vec<ConvGeom> {
    let mut geoms = Vec::with_capacity(cfg.conv_layers);
    let (mut t, mut f, mut c) = (cfg.input_frames, cfg.input_mels, 1);
    for _ in 0..cfg.conv_layers {
        let g = ConvGeom::new((t, f, c), (cfg.kernel[0], cfg.kernel[1]), (cfg.stride[0], cfg.stride[1]));
        t = g.out_t;
        f = g.out_f;
        c = cfg.channels;
        geoms.push(g);
    }
    geoms
}

/// Stride-1 geometry shared by every residual-block convolution.
pub(crate) fn res_geom(cfg: &ModelConfig) -> ConvGeom {
    ConvGeom::new(
        (cfg.post_conv_time(), cfg.post_conv_freq(), cfg.channels),
        (cfg.kernel[0], cfg.kernel[1]),
        (1, 1),
    )
}

fn conv_apply(
    cols: &Array2<f64>,
    params: &ParamStore,
    w: &str,
    b: &str,
    shape: (usize, usize, usize, usize),
) -> Array4<f64> {
    let mut out = cols.dot(&params.matrix(params.id(w)));
    out += &params.view1(params.id(b));
    out.into_shape_with_order(shape).expect("conv output reshape")
}

/// Runs the pre-norm encoder stack on row-stacked frames (`b * p` rows of
/// width `d_model`). Factored out of [`forward_batch`] so the stack can be
/// exercised without positional encoding.
pub(crate) fn run_encoder(
    mut x: Array2<f64>,
    b: usize,
    p: usize,
    params: &ParamStore,
    sig: &mut SignHasher,
) -> (Array2<f64>, Vec<EncCache>) {
    let cfg = &params.config;
    let d = cfg.d_model;
    let heads = cfg.heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    assert_eq!(x.dim(), (b * p, d), "encoder input shape");
    let mut caches = Vec::with_capacity(cfg.attn_layers);
    for l in 0..cfg.attn_layers {
        let id = |suffix: &str| params.id(&format!("enc{l}.{suffix}"));
        let (xn1, xhat1, inv_std1) = layer_norm_forward(
            x.view(),
            params.view1(id("ln1.gamma")),
            params.view1(id("ln1.beta")),
            LN_EPS,
        );
        let mut q = xn1.dot(&params.matrix(id("attn.wq")));
        q += &params.view1(id("attn.bq"));
        let k = xn1.dot(&params.matrix(id("attn.wk")));
        let mut v = xn1.dot(&params.matrix(id("attn.wv")));
        v += &params.view1(id("attn.bv"));
        let mut attn = Array4::zeros((b, heads, p, p));
        let mut ctx = Array2::zeros((b * p, d));
        for bi in 0..b {
            let rows = s![bi * p..(bi + 1) * p, ..];
            for h in 0..heads {
                let cols = s![.., h * dh..(h + 1) * dh];
                let qh = q.slice(rows).slice_move(cols);
                let kh = k.slice(rows).slice_move(cols);
                let vh = v.slice(rows).slice_move(cols);
                let mut scores = qh.dot(&kh.t());
                scores *= scale;
                softmax_rows(&mut scores);
                ctx.slice_mut(rows).slice_move(cols).assign(&scores.dot(&vh));
                attn.slice_mut(s![bi, h, .., ..]).assign(&scores);
            }
        }
        let mut attn_out = ctx.dot(&params.matrix(id("attn.wo")));
        attn_out += &params.view1(id("attn.bo"));
        let x_mid = &x + &attn_out;
        let (xn2, xhat2, inv_std2) = layer_norm_forward(
            x_mid.view(),
            params.view1(id("ln2.gamma")),
            params.view1(id("ln2.beta")),
            LN_EPS,
        );
        let mut h_relu = xn2.dot(&params.matrix(id("ffn.w1")));
        h_relu += &params.view1(id("ffn.b1"));
        relu_hash(h_relu.as_slice_mut().expect("standard layout"), sig);
        let mut ffn_out = h_relu.dot(&params.matrix(id("ffn.w2")));
        ffn_out += &params.view1(id("ffn.b2"));
        let out = &x_mid + &ffn_out;
        caches.push(EncCache {
            xhat1,
            inv_std1,
            xn1,
            q,
            k,
            v,
            attn,
            ctx,
            xhat2,
            inv_std2,
            xn2,
            h_relu,
        });
        x = out;
    }
    (x, caches)
}

/// Concatenates the last `r` rows of each sample's `p`-row block, in time
/// order, into one row per sample.
pub(crate) fn select_last_frames(x: &Array2<f64>, b: usize, p: usize, r: usize) -> Array2<f64> {
    let d = x.ncols();
    assert!(p >= r, "cannot select {r} frames out of {p}");
    let mut out = Array2::zeros((b, r * d));
    for bi in 0..b {
        for j in 0..r {
            out.slice_mut(s![bi, j * d..(j + 1) * d])
                .assign(&x.row(bi * p + (p - r + j)));
        }
    }
    out
}

/// Runs the full network over a batch of feature matrices
/// (`input_frames x input_mels` each) and returns the trace.
pub fn forward_batch(features: &[Array2<f64>], params: &ParamStore, mode: Mode) -> ForwardTrace {
    let cfg = &params.config;
    let b = features.len();
    assert!(b > 0, "empty batch");
    let mut sig = SignHasher::new();

    let mut x = Array4::zeros((b, cfg.input_frames, cfg.input_mels, 1));
    for (bi, feat) in features.iter().enumerate() {
        assert_eq!(
            feat.dim(),
            (cfg.input_frames, cfg.input_mels),
            "feature matrix shape"
        );
        x.slice_mut(s![bi, .., .., 0]).assign(feat);
    }

    let geoms = conv_front_geoms(cfg);
    let mut conv_cols = Vec::with_capacity(cfg.conv_layers);
    let mut conv_post = Vec::with_capacity(cfg.conv_layers);
    let mut map = x;
    for (i, g) in geoms.iter().enumerate() {
        let cols = im2col(map.view(), g);
        let mut out = conv_apply(
            &cols,
            params,
            &format!("conv{i}.w"),
            &format!("conv{i}.b"),
            (b, g.out_t, g.out_f, cfg.channels),
        );
        relu_hash(out.as_slice_mut().expect("standard layout"), &mut sig);
        conv_cols.push(cols);
        conv_post.push(out.clone());
        map = out;
    }
    let (tp, fp) = (cfg.post_conv_time(), cfg.post_conv_freq());
    assert_eq!(map.dim(), (b, tp, fp, cfg.channels), "post-conv map shape");

    let rg = res_geom(cfg);
    let mut res = Vec::with_capacity(cfg.residual_blocks);
    for blk in 0..cfg.residual_blocks {
        let cols1 = im2col(map.view(), &rg);
        let y1 = conv_apply(
            &cols1,
            params,
            &format!("res{blk}.conv1.w"),
            &format!("res{blk}.conv1.b"),
            (b, tp, fp, cfg.channels),
        );
        let (n1, xhat1, inv_std1) = group_norm_forward(
            &y1,
            params.view1(params.id(&format!("res{blk}.gn1.gamma"))),
            params.view1(params.id(&format!("res{blk}.gn1.beta"))),
            cfg.gn_groups,
            cfg.gn_eps,
        );
        let mut post1 = n1;
        relu_hash(post1.as_slice_mut().expect("standard layout"), &mut sig);
        let cols2 = im2col(post1.view(), &rg);
        let y2 = conv_apply(
            &cols2,
            params,
            &format!("res{blk}.conv2.w"),
            &format!("res{blk}.conv2.b"),
            (b, tp, fp, cfg.channels),
        );
        let (n2, xhat2, inv_std2) = group_norm_forward(
            &y2,
            params.view1(params.id(&format!("res{blk}.gn2.gamma"))),
            params.view1(params.id(&format!("res{blk}.gn2.beta"))),
            cfg.gn_groups,
            cfg.gn_eps,
        );
        let mut out = &n2 + &map;
        relu_hash(out.as_slice_mut().expect("standard layout"), &mut sig);
        res.push(ResCache { cols1, xhat1, inv_std1, post1, cols2, xhat2, inv_std2, out: out.clone() });
        map = out;
    }

    let g = cfg.pool_group;
    let p = cfg.pooled_frames();
    let c = cfg.channels;
    let pool_w = params.matrix(params.id("pool.w"));
    let pool_b = params.view1(params.id("pool.b"));
    let mut scores = Array2::zeros((tp, c));
    let mut betas = Array4::zeros((b, p, g, c));
    let mut pooled = Array4::zeros((b, p, fp, c));
    for bi in 0..b {
        for t in 0..tp {
            for ci in 0..c {
                let mut a = pool_b[ci];
                for fi in 0..fp {
                    a += pool_w[[ci, fi]] * map[[bi, t, fi, ci]];
                }
                scores[[t, ci]] = a;
            }
        }
        for pi in 0..p {
            let t0 = pi * g;
            let gs = g.min(tp - t0);
            for ci in 0..c {
                let mut max = f64::NEG_INFINITY;
                for q in 0..gs {
                    max = max.max(scores[[t0 + q, ci]]);
                }
                let mut sum = 0.0;
                for q in 0..gs {
                    let e = (scores[[t0 + q, ci]] - max).exp();
                    betas[[bi, pi, q, ci]] = e;
                    sum += e;
                }
                for q in 0..gs {
                    betas[[bi, pi, q, ci]] /= sum;
                }
                for fi in 0..fp {
                    let mut acc = 0.0;
                    for q in 0..gs {
                        acc += betas[[bi, pi, q, ci]] * map[[bi, t0 + q, fi, ci]];
                    }
                    pooled[[bi, pi, fi, ci]] = acc;
                }
            }
        }
    }

    let d = cfg.d_model;
    let mut e_in = Array2::zeros((b * p, d));
    for bi in 0..b {
        for pi in 0..p {
            for ci in 0..c {
                for fi in 0..fp {
                    e_in[[bi * p + pi, ci * fp + fi]] = pooled[[bi, pi, fi, ci]];
                }
            }
        }
    }
    let pe = positional_encoding(p, d);
    for bi in 0..b {
        let mut block = e_in.slice_mut(s![bi * p..(bi + 1) * p, ..]);
        block += &pe;
    }

    let (e_tran, enc) = run_encoder(e_in, b, p, params, &mut sig);
    let e_feat = select_last_frames(&e_tran, b, p, cfg.selected_frames);

    let mut e_bn = e_feat.dot(&params.matrix(params.id("fc_bn.w")));
    e_bn += &params.view1(params.id("fc_bn.b"));
    relu_hash(e_bn.as_slice_mut().expect("standard layout"), &mut sig);

    let mut logits = e_bn.dot(&params.matrix(params.id("fc_proj.w")));
    logits += &params.view1(params.id("fc_proj.b"));

    let recon = match mode {
        Mode::Pretrain => {
            let mut r = e_bn.dot(&params.matrix(params.id("fc_recon.w")));
            r += &params.view1(params.id("fc_recon.b"));
            Some(r)
        }
        Mode::Finetune => None,
    };

    ForwardTrace {
        batch: b,
        mode,
        conv_cols,
        conv_post,
        res,
        betas,
        pooled,
        enc,
        e_tran,
        e_feat,
        e_bn,
        logits,
        recon,
        relu_sig: sig.finish(),
    }
}
