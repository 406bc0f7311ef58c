//! Flat parameter storage with a fixed, documented tensor enumeration,
//! seeded initialization, gradient storage, and the checkpoint format.

use std::collections::HashMap;
use std::io::{Read as _, Write as _};
use std::path::Path;

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use rand::Rng;

use crate::seeds::rng_for;
use crate::{Error, Result};

use super::ModelConfig;

/// How a tensor is initialized and which fan rule applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    /// 4-D `[kt, kf, in, out]`; fans are `kt*kf*in` / `kt*kf*out`.
    ConvWeight,
    /// 2-D `[in, out]`.
    LinearWeight,
    /// 2-D `[channels, freq]`; each row is an independent scorer (fan_out 1).
    PoolWeight,
    Bias,
    NormScale,
    NormShift,
}

/// One tensor in the flat store: name, shape, and element offset.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorDef {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub kind: TensorKind,
}

impl TensorDef {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Tensor enumeration for a configuration, in checkpoint order:
/// conv layers, residual blocks (conv1, gn1, conv2, gn2), the soft-pool
/// scorer, encoder layers (ln1, attention q/k/v/o, ln2, ffn), then the
/// bottleneck, projection, and reconstruction heads.
fn build_defs(cfg: &ModelConfig) -> Vec<TensorDef> {
    let mut defs: Vec<TensorDef> = Vec::new();
    let mut offset = 0usize;
    let mut push = |name: String, shape: Vec<usize>, kind: TensorKind| {
        let len: usize = shape.iter().product();
        defs.push(TensorDef { name, shape, offset, kind });
        offset += len;
    };
    let [kt, kf] = cfg.kernel;
    let c = cfg.channels;
    let d = cfg.d_model;

    let mut in_ch = 1;
    for i in 0..cfg.conv_layers {
        push(format!("conv{i}.w"), vec![kt, kf, in_ch, c], TensorKind::ConvWeight);
        push(format!("conv{i}.b"), vec![c], TensorKind::Bias);
        in_ch = c;
    }
    for b in 0..cfg.residual_blocks {
        push(format!("res{b}.conv1.w"), vec![kt, kf, c, c], TensorKind::ConvWeight);
        push(format!("res{b}.conv1.b"), vec![c], TensorKind::Bias);
        push(format!("res{b}.gn1.gamma"), vec![c], TensorKind::NormScale);
        push(format!("res{b}.gn1.beta"), vec![c], TensorKind::NormShift);
        push(format!("res{b}.conv2.w"), vec![kt, kf, c, c], TensorKind::ConvWeight);
        push(format!("res{b}.conv2.b"), vec![c], TensorKind::Bias);
        push(format!("res{b}.gn2.gamma"), vec![c], TensorKind::NormScale);
        push(format!("res{b}.gn2.beta"), vec![c], TensorKind::NormShift);
    }
    push("pool.w".into(), vec![c, cfg.post_conv_freq()], TensorKind::PoolWeight);
    push("pool.b".into(), vec![c], TensorKind::Bias);
    for l in 0..cfg.attn_layers {
        push(format!("enc{l}.ln1.gamma"), vec![d], TensorKind::NormScale);
        push(format!("enc{l}.ln1.beta"), vec![d], TensorKind::NormShift);
        push(format!("enc{l}.attn.wq"), vec![d, d], TensorKind::LinearWeight);
        push(format!("enc{l}.attn.bq"), vec![d], TensorKind::Bias);
        // The key projection carries no bias: shifting every key by the same
        // vector adds a per-row constant to the attention scores, which the
        // row softmax cancels, so such a bias could never receive gradient.
        push(format!("enc{l}.attn.wk"), vec![d, d], TensorKind::LinearWeight);
        push(format!("enc{l}.attn.wv"), vec![d, d], TensorKind::LinearWeight);
        push(format!("enc{l}.attn.bv"), vec![d], TensorKind::Bias);
        push(format!("enc{l}.attn.wo"), vec![d, d], TensorKind::LinearWeight);
        push(format!("enc{l}.attn.bo"), vec![d], TensorKind::Bias);
        push(format!("enc{l}.ln2.gamma"), vec![d], TensorKind::NormScale);
        push(format!("enc{l}.ln2.beta"), vec![d], TensorKind::NormShift);
        push(format!("enc{l}.ffn.w1"), vec![d, cfg.ffn_dim], TensorKind::LinearWeight);
        push(format!("enc{l}.ffn.b1"), vec![cfg.ffn_dim], TensorKind::Bias);
        push(format!("enc{l}.ffn.w2"), vec![cfg.ffn_dim, d], TensorKind::LinearWeight);
        push(format!("enc{l}.ffn.b2"), vec![d], TensorKind::Bias);
    }
    push("fc_bn.w".into(), vec![cfg.feat_dim(), cfg.bottleneck_dim], TensorKind::LinearWeight);
    push("fc_bn.b".into(), vec![cfg.bottleneck_dim], TensorKind::Bias);
    push("fc_proj.w".into(), vec![cfg.bottleneck_dim, cfg.n_classes], TensorKind::LinearWeight);
    push("fc_proj.b".into(), vec![cfg.n_classes], TensorKind::Bias);
    push("fc_recon.w".into(), vec![cfg.bottleneck_dim, cfg.recon_dim], TensorKind::LinearWeight);
    push("fc_recon.b".into(), vec![cfg.recon_dim], TensorKind::Bias);
    defs
}

/// Flat f64 parameter vector plus the tensor manifest and configuration.
///
/// Values are kept exactly representable in f32 (rounded through f32 after
/// init and after every optimizer step) so the f32 checkpoint format
/// round-trips bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    pub config: ModelConfig,
    pub defs: Vec<TensorDef>,
    pub data: Vec<f64>,
    names: HashMap<String, usize>,
}

impl ParamStore {
    fn from_parts(config: ModelConfig, defs: Vec<TensorDef>, data: Vec<f64>) -> Self {
        let names = defs
            .iter()
            .enumerate()
            .map(|(i, d)| (d.name.clone(), i))
            .collect();
        ParamStore { config, defs, data, names }
    }

    pub fn n_params(&self) -> usize {
        self.data.len()
    }

    /// Index of a tensor by name; panics on unknown names (these are
    /// compile-time constants in the forward/backward code).
    pub fn id(&self, name: &str) -> usize {
        *self
            .names
            .get(name)
            .unwrap_or_else(|| panic!("unknown tensor '{name}'"))
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.names.get(name).copied()
    }

    pub fn slice_of(&self, id: usize) -> &[f64] {
        let d = &self.defs[id];
        &self.data[d.offset..d.offset + d.len()]
    }

    pub fn view1(&self, id: usize) -> ArrayView1<'_, f64> {
        ArrayView1::from(self.slice_of(id))
    }

    /// 2-D view: conv weights `[kt,kf,in,out]` flatten to
    /// `[kt*kf*in, out]` (the im2col layout), 2-D tensors view as-is.
    pub fn matrix(&self, id: usize) -> ArrayView2<'_, f64> {
        let d = &self.defs[id];
        let (rows, cols) = matrix_dims(d);
        ArrayView2::from_shape((rows, cols), self.slice_of(id)).expect("contiguous tensor")
    }

    /// Rounds every parameter through f32.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.data {
            *v = f64::from(*v as f32);
        }
    }
}

fn matrix_dims(d: &TensorDef) -> (usize, usize) {
    match d.shape.len() {
        2 => (d.shape[0], d.shape[1]),
        4 => (d.shape[0] * d.shape[1] * d.shape[2], d.shape[3]),
        other => panic!("tensor '{}' has no matrix view ({other}-d)", d.name),
    }
}

/// Seeded initialization: weights uniform in (-s, s) with
/// `s = sqrt(6 / (fan_in + fan_out))`, biases and norm shifts zero, norm
/// scales one. Bitwise deterministic per seed.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ParamStore> {
    config.validate()?;
    let defs = build_defs(config);
    let total: usize = defs.iter().map(|d| d.len()).sum();
    let mut data = vec![0.0f64; total];
    let mut rng = rng_for(seed, "init", 0);
    for d in &defs {
        let out = &mut data[d.offset..d.offset + d.len()];
        match d.kind {
            TensorKind::ConvWeight | TensorKind::LinearWeight | TensorKind::PoolWeight => {
                let (fan_in, fan_out) = match d.kind {
                    TensorKind::ConvWeight => {
                        let k = d.shape[0] * d.shape[1];
                        (k * d.shape[2], k * d.shape[3])
                    }
                    TensorKind::LinearWeight => (d.shape[0], d.shape[1]),
                    TensorKind::PoolWeight => (d.shape[1], 1),
                    _ => unreachable!(),
                };
                let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
                for v in out.iter_mut() {
                    *v = s * (2.0 * rng.random::<f64>() - 1.0);
                }
            }
            TensorKind::Bias | TensorKind::NormShift => {}
            TensorKind::NormScale => out.fill(1.0),
        }
    }
    let mut store = ParamStore::from_parts(config.clone(), defs, data);
    store.round_to_f32();
    Ok(store)
}

/// Flat gradient vector matching a [`ParamStore`] layout.
#[derive(Debug, Clone)]
pub struct GradStore {
    pub defs: Vec<TensorDef>,
    pub data: Vec<f64>,
}

impl GradStore {
    pub fn zeros_like(store: &ParamStore) -> Self {
        GradStore { defs: store.defs.clone(), data: vec![0.0; store.data.len()] }
    }

    pub fn zero(&mut self) {
        self.data.fill(0.0);
    }

    pub fn slice_of(&self, id: usize) -> &[f64] {
        let d = &self.defs[id];
        &self.data[d.offset..d.offset + d.len()]
    }

    pub fn slice_mut(&mut self, id: usize) -> &mut [f64] {
        let d = &self.defs[id];
        let (o, l) = (d.offset, d.len());
        &mut self.data[o..o + l]
    }

    pub fn view1_mut(&mut self, id: usize) -> ArrayViewMut1<'_, f64> {
        ArrayViewMut1::from(self.slice_mut(id))
    }

    pub fn matrix_mut(&mut self, id: usize) -> ArrayViewMut2<'_, f64> {
        let (rows, cols) = matrix_dims(&self.defs[id]);
        let d = &self.defs[id];
        let (o, l) = (d.offset, d.len());
        ArrayViewMut2::from_shape((rows, cols), &mut self.data[o..o + l])
            .expect("contiguous tensor")
    }

    pub fn global_norm(&self) -> f64 {
        self.data.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn scale_all(&mut self, s: f64) {
        for g in &mut self.data {
            *g *= s;
        }
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"CABK";
const CHECKPOINT_VERSION: u32 = 1;

/// Saves parameters: header {magic "CABK", version, config JSON, tensor
/// manifest (name, shape, offset)} followed by little-endian f32 tensors in
/// manifest order. The write is atomic (temp file in the same directory,
/// then rename).
pub fn save_checkpoint(path: impl AsRef<Path>, store: &ParamStore) -> Result<()> {
    let path = path.as_ref();
    let mut buf: Vec<u8> = Vec::with_capacity(32 + store.data.len() * 4);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let config_json = serde_json::to_string(&store.config).expect("config serializes");
    buf.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(config_json.as_bytes());
    buf.extend_from_slice(&(store.defs.len() as u32).to_le_bytes());
    for d in &store.defs {
        buf.extend_from_slice(&(d.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(d.name.as_bytes());
        buf.extend_from_slice(&(d.shape.len() as u32).to_le_bytes());
        for &s in &d.shape {
            buf.extend_from_slice(&(s as u32).to_le_bytes());
        }
        buf.extend_from_slice(&(d.offset as u64).to_le_bytes());
    }
    for &v in &store.data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }

    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let tmp = match dir {
        Some(d) => d.join(format!(
            ".{}.tmp{}",
            path.file_name().map(|n| n.to_string_lossy()).unwrap_or_default(),
            std::process::id()
        )),
        None => std::path::PathBuf::from(format!(".checkpoint.tmp{}", std::process::id())),
    };
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Loads a checkpoint, validating magic, version, config, and that the
/// manifest matches the one the config implies.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ParamStore> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::Parse(format!("{}: truncated checkpoint", path.display())));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let take_u32 = |pos: &mut usize| -> Result<u32> {
        Ok(u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()))
    };
    if take(&mut pos, 4)? != CHECKPOINT_MAGIC {
        return Err(Error::Parse(format!("{}: bad checkpoint magic", path.display())));
    }
    let version = take_u32(&mut pos)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedFormat(format!(
            "{}: checkpoint version {version}, expected {CHECKPOINT_VERSION}",
            path.display()
        )));
    }
    let config_len = take_u32(&mut pos)? as usize;
    let config_json = std::str::from_utf8(take(&mut pos, config_len)?)
        .map_err(|_| Error::Parse(format!("{}: config is not UTF-8", path.display())))?;
    let config: ModelConfig = serde_json::from_str(config_json)
        .map_err(|e| Error::Parse(format!("{}: bad config JSON: {e}", path.display())))?;
    config.validate()?;

    let n_tensors = take_u32(&mut pos)? as usize;
    let mut manifest: Vec<(String, Vec<usize>, u64)> = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let name_len = take_u32(&mut pos)? as usize;
        let name = std::str::from_utf8(take(&mut pos, name_len)?)
            .map_err(|_| Error::Parse(format!("{}: tensor name is not UTF-8", path.display())))?
            .to_string();
        let ndim = take_u32(&mut pos)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(take_u32(&mut pos)? as usize);
        }
        let offset = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
        manifest.push((name, shape, offset));
    }
    let defs = build_defs(&config);
    if manifest.len() != defs.len()
        || defs.iter().zip(&manifest).any(|(d, (n, s, o))| {
            d.name != *n || d.shape != *s || d.offset as u64 != *o
        })
    {
        return Err(Error::Parse(format!(
            "{}: tensor manifest does not match the embedded config",
            path.display()
        )));
    }
    let total: usize = defs.iter().map(|d| d.len()).sum();
    let payload = take(&mut pos, total * 4)?;
    if pos != bytes.len() {
        return Err(Error::Parse(format!(
            "{}: {} trailing bytes after payload",
            path.display(),
            bytes.len() - pos
        )));
    }
    let data: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
        .collect();
    Ok(ParamStore::from_parts(config, defs, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_bitwise_deterministic_per_seed() {
        let cfg = ModelConfig::reduced();
        let a = init_params(&cfg, 3).unwrap();
        let b = init_params(&cfg, 3).unwrap();
        assert_eq!(a.data, b.data);
        let c = init_params(&cfg, 4).unwrap();
        assert_ne!(a.data, c.data);
    }

    #[test]
    fn init_biases_zero_scales_one_weights_bounded() {
        let cfg = ModelConfig::reduced();
        let p = init_params(&cfg, 0).unwrap();
        for d in &p.defs {
            let vals = &p.data[d.offset..d.offset + d.len()];
            match d.kind {
                TensorKind::Bias | TensorKind::NormShift => {
                    assert!(vals.iter().all(|&v| v == 0.0), "{}", d.name);
                }
                TensorKind::NormScale => {
                    assert!(vals.iter().all(|&v| v == 1.0), "{}", d.name);
                }
                _ => {
                    assert!(vals.iter().any(|&v| v != 0.0), "{}", d.name);
                    let s = match d.kind {
                        TensorKind::ConvWeight => {
                            let k = d.shape[0] * d.shape[1];
                            (6.0 / (k * d.shape[2] + k * d.shape[3]) as f64).sqrt()
                        }
                        TensorKind::LinearWeight => {
                            (6.0 / (d.shape[0] + d.shape[1]) as f64).sqrt()
                        }
                        TensorKind::PoolWeight => (6.0 / (d.shape[1] + 1) as f64).sqrt(),
                        _ => unreachable!(),
                    };
                    assert!(vals.iter().all(|&v| v.abs() <= s), "{}", d.name);
                }
            }
        }
    }

    #[test]
    fn params_are_f32_representable() {
        let p = init_params(&ModelConfig::reduced(), 1).unwrap();
        for &v in &p.data {
            assert_eq!(v, f64::from(v as f32));
        }
    }

    #[test]
    fn full_config_has_expected_head_shapes() {
        let p = init_params(&ModelConfig::default(), 0).unwrap();
        assert_eq!(p.defs[p.id("fc_proj.w")].shape, vec![800, 12]);
        assert_eq!(p.defs[p.id("fc_bn.w")].shape, vec![640, 800]);
        assert_eq!(p.defs[p.id("fc_recon.w")].shape, vec![800, 40]);
        assert_eq!(p.defs[p.id("pool.w")].shape, vec![32, 10]);
    }

    #[test]
    fn tensor_offsets_are_contiguous_and_names_unique() {
        let p = init_params(&ModelConfig::default(), 0).unwrap();
        let mut expected = 0usize;
        let mut names = std::collections::HashSet::new();
        for d in &p.defs {
            assert_eq!(d.offset, expected, "{}", d.name);
            expected += d.len();
            assert!(names.insert(d.name.clone()), "duplicate {}", d.name);
        }
        assert_eq!(expected, p.data.len());
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.cabk");
        let p = init_params(&ModelConfig::reduced(), 7).unwrap();
        save_checkpoint(&path, &p).unwrap();
        let q = load_checkpoint(&path).unwrap();
        assert_eq!(q.config, p.config);
        assert_eq!(q.defs, p.defs);
        assert_eq!(q.data, p.data);
        let leftovers: Vec<_> = std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .filter(|n| n != "model.cabk")
            .collect();
        assert!(leftovers.is_empty(), "stray files: {leftovers:?}");
    }

    #[test]
    fn checkpoint_saves_are_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p = init_params(&ModelConfig::reduced(), 7).unwrap();
        let (a, b) = (dir.path().join("a.cabk"), dir.path().join("b.cabk"));
        save_checkpoint(&a, &p).unwrap();
        save_checkpoint(&b, &p).unwrap();
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.cabk");
        let p = init_params(&ModelConfig::reduced(), 7).unwrap();
        save_checkpoint(&path, &p).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        let bad = dir.path().join("bad.cabk");
        std::fs::write(&bad, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&bad), Err(Error::Parse(_))));

        let mut truncated = std::fs::read(&path).unwrap();
        truncated.truncate(truncated.len() - 10);
        std::fs::write(&bad, &truncated).unwrap();
        assert!(matches!(load_checkpoint(&bad), Err(Error::Parse(_))));
    }
}
