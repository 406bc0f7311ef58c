//! Synthetic desk-scale keyword corpus: tones and chirps with seeded jitter
//! plus white noise, written as WAV files with a manifest.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{mix_noise, synth_noise, write_wav, NoiseKind, Waveform};
use crate::seeds::rng_for;
use crate::{Error, Result};

use super::{Manifest, ManifestEntry, Split};

fn default_n_classes() -> usize {
    12
}
fn default_train_per_class() -> usize {
    200
}
fn default_dev_per_class() -> usize {
    25
}
fn default_eval_per_class() -> usize {
    25
}

/// Parameters of the synthetic corpus.
///
/// Class `k` is a pure tone for even `k` and a linear chirp (+150 Hz over
/// the clip) for odd `k`, at base frequency `300 + 100k` Hz. Each utterance
/// jitters the frequency by up to 3%, the amplitude by up to 20% around
/// 0.25, and delays the onset by up to 100 ms, then mixes in white noise at
/// an SNR drawn from U[0, 20] dB.
///
/// Default split counts (200/25/25 per class) keep the 80/10/10 convention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    #[serde(default = "default_n_classes")]
    pub n_classes: usize,
    #[serde(default = "default_train_per_class")]
    pub train_per_class: usize,
    #[serde(default = "default_dev_per_class")]
    pub dev_per_class: usize,
    #[serde(default = "default_eval_per_class")]
    pub eval_per_class: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_classes: default_n_classes(),
            train_per_class: default_train_per_class(),
            dev_per_class: default_dev_per_class(),
            eval_per_class: default_eval_per_class(),
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 1 || self.train_per_class < 1 {
            return Err(Error::Config("per-class and classes must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn base_freq(&self, class: usize) -> f64 {
        300.0 + 100.0 * class as f64
    }
}

const SAMPLE_RATE: u32 = 16_000;
const CLIP_SAMPLES: usize = 16_000;
const CHIRP_RATE_HZ_PER_S: f64 = 150.0;

/// Renders one clean utterance for (class, jitter draws).
fn render_clean(class: usize, f0: f64, amp: f64, onset_s: f64) -> Waveform {
    let chirp = class % 2 == 1;
    let mut samples = vec![0.0f64; CLIP_SAMPLES];
    let onset = (onset_s * f64::from(SAMPLE_RATE)).round() as usize;
    for (i, s) in samples.iter_mut().enumerate().skip(onset) {
        let u = (i - onset) as f64 / f64::from(SAMPLE_RATE);
        let phase = if chirp {
            2.0 * std::f64::consts::PI * (f0 * u + 0.5 * CHIRP_RATE_HZ_PER_S * u * u)
        } else {
            2.0 * std::f64::consts::PI * f0 * u
        };
        *s = amp * phase.sin();
    }
    Waveform::new(samples, SAMPLE_RATE, format!("synth_c{class}")).unwrap()
}

/// Generates the corpus under `out_dir` (WAVs in `<split>/<class>/`, manifest
/// at `manifest.csv`, generation metadata at `manifest_meta.json`) and
/// returns the manifest. Deterministic per spec+seed.
pub fn synth_dataset(spec: &SynthSpec, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    spec.validate()?;
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;
    let mut entries = Vec::new();
    for (split, per_class) in [
        (Split::Train, spec.train_per_class),
        (Split::Dev, spec.dev_per_class),
        (Split::Eval, spec.eval_per_class),
    ] {
        for class in 0..spec.n_classes {
            let dir = out_dir.join(split.as_str()).join(class.to_string());
            std::fs::create_dir_all(&dir)?;
            for idx in 0..per_class {
                let id = format!("synth_{}_{class}_{idx:05}", split.as_str());
                let mut rng = rng_for(
                    spec.seed,
                    &format!("synth/{}/{class}", split.as_str()),
                    idx as u64,
                );
                let f0 = spec.base_freq(class) * (1.0 + rng.random_range(-0.03..=0.03));
                let amp = 0.25 * (1.0 + rng.random_range(-0.2..=0.2));
                let onset = rng.random_range(0.0..=0.1);
                let clean = render_clean(class, f0, amp, onset);
                let snr = rng.random_range(0.0..=20.0);
                let noise = synth_noise(NoiseKind::White, CLIP_SAMPLES, rng.random())?;
                let noisy = mix_noise(&clean, &noise, snr, rng.random())?;
                let rel = format!("{}/{class}/{id}.wav", split.as_str());
                write_wav(dir.join(format!("{id}.wav")), &noisy)?;
                entries.push(ManifestEntry {
                    utterance_id: id,
                    path: rel,
                    label: Some(class),
                    split,
                });
            }
        }
    }
    let manifest = Manifest { entries, base_dir: out_dir.to_path_buf() };
    super::write_manifest(out_dir.join("manifest.csv"), &manifest)?;
    let meta = serde_json::json!({
        "spec": spec,
        "nonstandard_classes": spec.n_classes != 12,
    });
    std::fs::write(
        out_dir.join("manifest_meta.json"),
        serde_json::to_string_pretty(&meta).expect("meta serializes") + "\n",
    )?;
    Ok(manifest)
}
