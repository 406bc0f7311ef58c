//! Log-mel filterbank features and the FBNK on-disk matrix format.

use std::io::{Read as _, Write as _};
use std::path::Path;

use ndarray::{Array1, Array2};
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

use super::Waveform;

fn default_sample_rate() -> u32 {
    16_000
}
fn default_frame_length_ms() -> f64 {
    25.0
}
fn default_frame_shift_ms() -> f64 {
    10.0
}
fn default_n_fft() -> usize {
    512
}
fn default_n_mels() -> usize {
    40
}
fn default_fmin_hz() -> f64 {
    20.0
}
fn default_fmax_hz() -> f64 {
    7600.0
}
fn default_log_floor() -> f64 {
    1e-10f64.ln()
}

/// Framing, DFT, and mel-filter parameters for [`fbank`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FbankConfig {
    #[serde(default = "default_sample_rate")]
    pub sample_rate: u32,
    #[serde(default = "default_frame_length_ms")]
    pub frame_length_ms: f64,
    #[serde(default = "default_frame_shift_ms")]
    pub frame_shift_ms: f64,
    #[serde(default = "default_n_fft")]
    pub n_fft: usize,
    #[serde(default = "default_n_mels")]
    pub n_mels: usize,
    #[serde(default = "default_fmin_hz")]
    pub fmin_hz: f64,
    #[serde(default = "default_fmax_hz")]
    pub fmax_hz: f64,
    /// Lower bound on every output entry; defaults to ln(1e-10).
    #[serde(default = "default_log_floor")]
    pub log_floor: f64,
}

impl Default for FbankConfig {
    fn default() -> Self {
        FbankConfig {
            sample_rate: default_sample_rate(),
            frame_length_ms: default_frame_length_ms(),
            frame_shift_ms: default_frame_shift_ms(),
            n_fft: default_n_fft(),
            n_mels: default_n_mels(),
            fmin_hz: default_fmin_hz(),
            fmax_hz: default_fmax_hz(),
            log_floor: default_log_floor(),
        }
    }
}

impl FbankConfig {
    pub fn window_len(&self) -> usize {
        (f64::from(self.sample_rate) * self.frame_length_ms / 1000.0).round() as usize
    }

    pub fn hop_len(&self) -> usize {
        (f64::from(self.sample_rate) * self.frame_shift_ms / 1000.0).round() as usize
    }

    /// Frame count for an input of `n` samples: `1 + floor((n - win) / hop)`.
    pub fn n_frames(&self, n_samples: usize) -> Option<usize> {
        let win = self.window_len();
        if n_samples < win {
            return None;
        }
        Some(1 + (n_samples - win) / self.hop_len())
    }

    pub fn validate(&self) -> Result<()> {
        let win = self.window_len();
        if win == 0 || self.hop_len() == 0 {
            return Err(Error::Config("frame length and shift must be positive".into()));
        }
        if self.n_fft < win {
            return Err(Error::Config(format!(
                "n_fft {} is smaller than the {}-sample window",
                self.n_fft, win
            )));
        }
        if self.n_mels == 0 {
            return Err(Error::Config("n_mels must be >= 1".into()));
        }
        let nyquist = f64::from(self.sample_rate) / 2.0;
        if !(0.0 <= self.fmin_hz && self.fmin_hz < self.fmax_hz && self.fmax_hz <= nyquist) {
            return Err(Error::Config(format!(
                "mel range [{}, {}] must satisfy 0 <= fmin < fmax <= {nyquist}",
                self.fmin_hz, self.fmax_hz
            )));
        }
        Ok(())
    }
}

/// A T x U_x matrix of log-mel energies, every entry >= the configured floor.
#[derive(Debug, Clone, PartialEq)]
pub struct FbankMatrix {
    pub data: Array2<f64>,
}

impl FbankMatrix {
    pub fn n_frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_mels(&self) -> usize {
        self.data.ncols()
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filters, peak 1.0, evaluated at the `n_fft/2 + 1` DFT bin
/// frequencies. Returns an `[n_mels, n_bins]` matrix.
pub fn mel_filterbank(cfg: &FbankConfig) -> Array2<f64> {
    let n_bins = cfg.n_fft / 2 + 1;
    let mel_lo = hz_to_mel(cfg.fmin_hz);
    let mel_hi = hz_to_mel(cfg.fmax_hz);
    let n_points = cfg.n_mels + 2;
    let hz: Vec<f64> = (0..n_points)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (n_points - 1) as f64))
        .collect();
    let mut filters = Array2::zeros((cfg.n_mels, n_bins));
    let bin_hz = f64::from(cfg.sample_rate) / cfg.n_fft as f64;
    for m in 0..cfg.n_mels {
        let (left, center, right) = (hz[m], hz[m + 1], hz[m + 2]);
        for k in 0..n_bins {
            let f = k as f64 * bin_hz;
            let w = if f >= left && f <= center {
                (f - left) / (center - left)
            } else if f > center && f <= right {
                (right - f) / (right - center)
            } else {
                0.0
            };
            filters[[m, k]] = w;
        }
    }
    filters
}

/// Log-mel filterbank features.
///
/// Per frame: subtract the frame mean (DC removal), apply a Hamming window,
/// take the `n_fft`-point DFT power spectrum, apply triangular mel filters,
/// and take the natural log floored at `log_floor`.
pub fn fbank(w: &Waveform, cfg: &FbankConfig) -> Result<FbankMatrix> {
    cfg.validate()?;
    if w.sample_rate != cfg.sample_rate {
        return Err(Error::Domain(format!(
            "waveform rate {} Hz does not match fbank config {} Hz",
            w.sample_rate, cfg.sample_rate
        )));
    }
    let win = cfg.window_len();
    let hop = cfg.hop_len();
    let Some(t_frames) = cfg.n_frames(w.len()) else {
        return Err(Error::Domain(format!(
            "waveform of {} samples is shorter than one {win}-sample window",
            w.len()
        )));
    };

    let hamming: Vec<f64> = (0..win)
        .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (win - 1) as f64).cos())
        .collect();
    let filters = mel_filterbank(cfg);
    let n_bins = cfg.n_fft / 2 + 1;

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(cfg.n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
    let mut power = Array1::zeros(n_bins);

    let mut out = Array2::zeros((t_frames, cfg.n_mels));
    for t in 0..t_frames {
        let frame = &w.samples[t * hop..t * hop + win];
        let mean = frame.iter().sum::<f64>() / win as f64;
        for i in 0..cfg.n_fft {
            let x = if i < win { (frame[i] - mean) * hamming[i] } else { 0.0 };
            buf[i] = Complex::new(x, 0.0);
        }
        fft.process(&mut buf);
        for k in 0..n_bins {
            power[k] = buf[k].norm_sqr();
        }
        let energies = filters.dot(&power);
        for (m, &e) in energies.iter().enumerate() {
            out[[t, m]] = if e > 0.0 { e.ln().max(cfg.log_floor) } else { cfg.log_floor };
        }
    }
    Ok(FbankMatrix { data: out })
}

const FBNK_MAGIC: &[u8; 4] = b"FBNK";

/// Serializes a feature matrix: 16-byte header {magic "FBNK", u32 T,
/// u32 U_x, u32 reserved}, then little-endian f32 values in row-major order.
pub fn write_fbank(path: impl AsRef<Path>, fb: &FbankMatrix) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(FBNK_MAGIC)?;
    f.write_all(&(fb.n_frames() as u32).to_le_bytes())?;
    f.write_all(&(fb.n_mels() as u32).to_le_bytes())?;
    f.write_all(&0u32.to_le_bytes())?;
    let mut bytes = Vec::with_capacity(fb.data.len() * 4);
    for &v in fb.data.iter() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    f.write_all(&bytes)?;
    Ok(())
}

/// Reads a matrix written by [`write_fbank`]. Values come back at f32
/// precision.
pub fn read_fbank(path: impl AsRef<Path>) -> Result<FbankMatrix> {
    let path = path.as_ref();
    let mut f = std::fs::File::open(path)?;
    let mut header = [0u8; 16];
    f.read_exact(&mut header)
        .map_err(|_| Error::Parse(format!("{}: truncated FBNK header", path.display())))?;
    if &header[0..4] != FBNK_MAGIC {
        return Err(Error::Parse(format!("{}: bad FBNK magic", path.display())));
    }
    let t = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let u = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes)?;
    if bytes.len() != t * u * 4 {
        return Err(Error::Parse(format!(
            "{}: expected {} payload bytes for {t}x{u}, got {}",
            path.display(),
            t * u * 4,
            bytes.len()
        )));
    }
    let mut data = Array2::zeros((t, u));
    for (i, chunk) in bytes.chunks_exact(4).enumerate() {
        data[[i / u, i % u]] = f64::from(f32::from_le_bytes(chunk.try_into().unwrap()));
    }
    Ok(FbankMatrix { data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::volume_perturb;
    use crate::seeds::rng_for;
    use rand::Rng;

    fn tone(n: usize, freq: f64, amp: f64) -> Waveform {
        let samples: Vec<f64> = (0..n)
            .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / 16_000.0).sin())
            .collect();
        Waveform::new(samples, 16_000, "tone").unwrap()
    }

    #[test]
    fn one_second_at_16k_gives_98_frames() {
        let fb = fbank(&tone(16_000, 440.0, 0.5), &FbankConfig::default()).unwrap();
        assert_eq!(fb.n_frames(), 98);
        assert_eq!(fb.n_mels(), 40);
    }

    #[test]
    fn speed_perturbed_length_gives_89_frames() {
        let fb = fbank(&tone(14_545, 440.0, 0.5), &FbankConfig::default()).unwrap();
        assert_eq!(fb.n_frames(), 89);
    }

    #[test]
    fn all_zero_waveform_hits_the_floor_everywhere() {
        let cfg = FbankConfig::default();
        let w = Waveform::new(vec![0.0; 1600], 16_000, "z").unwrap();
        let fb = fbank(&w, &cfg).unwrap();
        assert!(fb.data.iter().all(|&v| v == cfg.log_floor));
    }

    #[test]
    fn sub_window_input_is_rejected() {
        let w = Waveform::new(vec![0.1; 399], 16_000, "s").unwrap();
        assert!(matches!(
            fbank(&w, &FbankConfig::default()),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn tone_at_filter_center_dominates_its_row() {
        let cfg = FbankConfig::default();
        // Independent mel arithmetic for the center of filter 20.
        let mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
        let imel = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
        let (lo, hi) = (mel(20.0), mel(7600.0));
        let center = imel(lo + (hi - lo) * 21.0 / 41.0);
        let fb = fbank(&tone(16_000, center, 0.5), &cfg).unwrap();
        for t in 1..fb.n_frames() - 1 {
            let row = fb.data.row(t);
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(argmax, 20, "frame {t}");
        }
    }

    #[test]
    fn power_spectrum_matches_naive_dft_through_filters() {
        // Recomputes one frame end to end with an O(n^2) DFT and compares
        // the filtered log energies against the fft-based pipeline.
        let cfg = FbankConfig::default();
        let mut rng = rng_for(3, "fbank_oracle", 0);
        let samples: Vec<f64> = (0..400).map(|_| rng.random::<f64>() - 0.5).collect();
        let w = Waveform::new(samples.clone(), 16_000, "o").unwrap();
        let fb = fbank(&w, &cfg).unwrap();
        assert_eq!(fb.n_frames(), 1);

        let mean = samples.iter().sum::<f64>() / 400.0;
        let ham: Vec<f64> = (0..400)
            .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / 399.0).cos())
            .collect();
        let x: Vec<f64> = (0..512)
            .map(|i| if i < 400 { (samples[i] - mean) * ham[i] } else { 0.0 })
            .collect();
        let mut power = Array1::zeros(257);
        for k in 0..257 {
            let (mut re, mut im) = (0.0, 0.0);
            for (t, &v) in x.iter().enumerate() {
                let ang = -2.0 * std::f64::consts::PI * (k * t) as f64 / 512.0;
                re += v * ang.cos();
                im += v * ang.sin();
            }
            power[k] = re * re + im * im;
        }
        let energies = mel_filterbank(&cfg).dot(&power);
        for (m, &e) in energies.iter().enumerate() {
            let expected = if e > 0.0 { e.ln().max(cfg.log_floor) } else { cfg.log_floor };
            assert!(
                (fb.data[[0, m]] - expected).abs() < 1e-8,
                "filter {m}: {} vs {expected}",
                fb.data[[0, m]]
            );
        }
    }

    #[test]
    fn fbank_is_volume_covariant_above_the_floor() {
        let cfg = FbankConfig::default();
        let mut rng = rng_for(9, "fbank_vol", 0);
        let samples: Vec<f64> = (0..3200)
            .map(|i| {
                0.2 * (2.0 * std::f64::consts::PI * 650.0 * i as f64 / 16_000.0).sin()
                    + 0.05 * (rng.random::<f64>() - 0.5)
            })
            .collect();
        let w = Waveform::new(samples, 16_000, "v").unwrap();
        for c in [0.5, 0.9, 1.7] {
            let a = fbank(&w, &cfg).unwrap();
            let b = fbank(&volume_perturb(&w, c).unwrap(), &cfg).unwrap();
            let shift = (c * c).ln();
            for (x, y) in a.data.iter().zip(b.data.iter()) {
                if *x > cfg.log_floor + 1.0 && *y > cfg.log_floor + 1.0 {
                    assert!((y - (x + shift)).abs() < 1e-9, "{y} vs {}", x + shift);
                }
            }
        }
    }

    #[test]
    fn fbnk_round_trip_preserves_values_at_f32() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.fbnk");
        let fb = fbank(&tone(16_000, 500.0, 0.4), &FbankConfig::default()).unwrap();
        write_fbank(&path, &fb).unwrap();
        let back = read_fbank(&path).unwrap();
        assert_eq!(back.n_frames(), fb.n_frames());
        assert_eq!(back.n_mels(), fb.n_mels());
        for (a, b) in fb.data.iter().zip(back.data.iter()) {
            assert_eq!(*b, f64::from(*a as f32));
        }
    }

    #[test]
    fn fbnk_bad_magic_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.fbnk");
        std::fs::write(&path, b"NOPE\x00\x00\x00\x00\x00\x00\x00\x00\x00\x00\x00\x00").unwrap();
        assert!(matches!(read_fbank(&path), Err(Error::Parse(_))));
    }

    #[test]
    fn fbank_is_deterministic() {
        let w = tone(16_000, 440.0, 0.5);
        let a = fbank(&w, &FbankConfig::default()).unwrap();
        let b = fbank(&w, &FbankConfig::default()).unwrap();
        assert_eq!(a, b);
    }
}
