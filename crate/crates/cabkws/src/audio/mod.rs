//! Waveform ingestion, deterministic augmentation, and log-mel features.

mod augment;
mod fbank;
mod wav;

pub use augment::{mix_noise, mix_noise_with_info, speed_perturb, synth_noise, volume_perturb, MixInfo};
pub use fbank::{fbank, mel_filterbank, read_fbank, write_fbank, FbankConfig, FbankMatrix};
pub use wav::{load_wav, resample_linear, write_wav};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// A mono waveform with amplitudes in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    /// Opaque utterance identifier (file path, manifest id, or synth tag).
    pub source_id: String,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32, source_id: impl Into<String>) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Domain("waveform sample_rate must be > 0".into()));
        }
        if samples.is_empty() {
            return Err(Error::Domain("waveform must contain at least one sample".into()));
        }
        Ok(Waveform { samples, sample_rate, source_id: source_id.into() })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Mean squared amplitude.
    pub fn power(&self) -> f64 {
        let n = self.samples.len() as f64;
        self.samples.iter().map(|x| x * x).sum::<f64>() / n
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }
}

/// Noise color for [`synth_noise`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    White,
    Pink,
}

/// One concrete augmentation draw: speed and volume factors, an optional
/// noise-mixing target, and the seed that fixes the noise window offset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub lambda_speed: f64,
    pub lambda_volume: f64,
    pub snr_db: Option<f64>,
    pub rng_seed: u64,
}

impl AugmentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_speed <= 0.0 {
            return Err(Error::Domain(format!(
                "lambda_speed must be > 0, got {}",
                self.lambda_speed
            )));
        }
        if self.lambda_volume < 0.0 {
            return Err(Error::Domain(format!(
                "lambda_volume must be >= 0, got {}",
                self.lambda_volume
            )));
        }
        Ok(())
    }
}

fn default_speed_range() -> [f64; 2] {
    [0.8, 1.2]
}
fn default_volume_range() -> [f64; 2] {
    [0.5, 1.5]
}
fn default_snr_range() -> [f64; 2] {
    [0.0, 20.0]
}
fn default_noise_kinds() -> Vec<NoiseKind> {
    vec![NoiseKind::White, NoiseKind::Pink]
}

/// Sampling ranges for augmentation draws during pretraining.
///
/// Defaults: speed in [0.8, 1.2], volume in [0.5, 1.5], SNR in [0, 20] dB
/// (mean 10 dB), noise drawn from {white, pink} with equal probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    #[serde(default = "default_speed_range")]
    pub speed_range: [f64; 2],
    #[serde(default = "default_volume_range")]
    pub volume_range: [f64; 2],
    #[serde(default = "default_snr_range")]
    pub snr_range_db: [f64; 2],
    #[serde(default = "default_noise_kinds")]
    pub noise_kinds: Vec<NoiseKind>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            speed_range: default_speed_range(),
            volume_range: default_volume_range(),
            snr_range_db: default_snr_range(),
            noise_kinds: default_noise_kinds(),
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("speed_range", self.speed_range),
            ("volume_range", self.volume_range),
            ("snr_range_db", self.snr_range_db),
        ] {
            if r[0] > r[1] {
                return Err(Error::Config(format!("{name} is empty: [{}, {}]", r[0], r[1])));
            }
        }
        if self.speed_range[0] <= 0.0 {
            return Err(Error::Config("speed_range must be positive".into()));
        }
        if self.volume_range[0] < 0.0 {
            return Err(Error::Config("volume_range must be non-negative".into()));
        }
        if self.noise_kinds.is_empty() {
            return Err(Error::Config("noise_kinds must not be empty".into()));
        }
        Ok(())
    }

    /// Draws one augmentation spec.
    pub fn sample(&self, rng: &mut impl Rng) -> AugmentSpec {
        AugmentSpec {
            lambda_speed: rng.random_range(self.speed_range[0]..=self.speed_range[1]),
            lambda_volume: rng.random_range(self.volume_range[0]..=self.volume_range[1]),
            snr_db: Some(rng.random_range(self.snr_range_db[0]..=self.snr_range_db[1])),
            rng_seed: rng.random(),
        }
    }

    /// Draws a noise color from the configured set.
    pub fn sample_noise_kind(&self, rng: &mut impl Rng) -> NoiseKind {
        self.noise_kinds[rng.random_range(0..self.noise_kinds.len())]
    }
}
