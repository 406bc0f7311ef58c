//! Deterministic waveform augmentation: speed, volume, and SNR-exact noise
//! mixing, plus white/pink noise synthesis.

use rand::Rng;

use crate::seeds::rng_for;
use crate::{Error, Result};

use super::wav::interp_at_ratio;
use super::{NoiseKind, Waveform};

/// Time-axis rescaling: output sample `n` reads the input at position
/// `n * lambda_speed` by linear interpolation, so the output length is
/// `round(n / lambda_speed)`. `lambda_speed > 1` shortens (speeds up).
pub fn speed_perturb(w: &Waveform, lambda_speed: f64) -> Result<Waveform> {
    if !(lambda_speed > 0.0) {
        return Err(Error::Domain(format!(
            "lambda_speed must be > 0, got {lambda_speed}"
        )));
    }
    let samples = interp_at_ratio(&w.samples, lambda_speed);
    Waveform::new(samples, w.sample_rate, w.source_id.clone())
}

/// Amplitude scaling with hard clipping to [-1, 1]; length unchanged.
pub fn volume_perturb(w: &Waveform, lambda_volume: f64) -> Result<Waveform> {
    if lambda_volume < 0.0 {
        return Err(Error::Domain(format!(
            "lambda_volume must be >= 0, got {lambda_volume}"
        )));
    }
    let samples = w
        .samples
        .iter()
        .map(|x| (x * lambda_volume).clamp(-1.0, 1.0))
        .collect();
    Waveform::new(samples, w.sample_rate, w.source_id.clone())
}

/// How a noise window was mixed into a clean waveform: the seeded window
/// offset into the (tiled) noise source and the scale applied to it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixInfo {
    pub offset: usize,
    pub gain: f64,
}

/// Mixes noise into `clean` at an exact target SNR.
///
/// A window of `clean.len()` samples is read from `noise` starting at a
/// seeded offset (tiling by wrap-around when the source is shorter), scaled
/// by `g = sqrt(P_clean / (P_noise * 10^(snr_db/10)))` where powers are mean
/// squared amplitudes over the mixed region, added, and clipped to [-1, 1].
/// Before clipping, the measured SNR equals `snr_db` up to rounding.
pub fn mix_noise_with_info(
    clean: &Waveform,
    noise: &Waveform,
    snr_db: f64,
    rng_seed: u64,
) -> Result<(Waveform, MixInfo)> {
    if clean.sample_rate != noise.sample_rate {
        return Err(Error::Domain(format!(
            "sample rate mismatch: clean {} Hz vs noise {} Hz",
            clean.sample_rate, noise.sample_rate
        )));
    }
    let p_clean = clean.power();
    if p_clean <= 0.0 {
        return Err(Error::Domain("mix_noise requires nonzero clean power".into()));
    }
    let n = clean.len();
    let mut rng = rng_for(rng_seed, "mix_noise_offset", 0);
    let mut chosen = None;
    for _ in 0..10 {
        let offset = rng.random_range(0..noise.len());
        let p_noise = window_power(&noise.samples, offset, n);
        if p_noise > 0.0 {
            chosen = Some((offset, p_noise));
            break;
        }
    }
    let Some((offset, p_noise)) = chosen else {
        return Err(Error::Domain(
            "noise window had zero power after 10 offset draws".into(),
        ));
    };
    let gain = (p_clean / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt();
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let x = clean.samples[i] + gain * noise.samples[(offset + i) % noise.len()];
        samples.push(x.clamp(-1.0, 1.0));
    }
    let out = Waveform::new(samples, clean.sample_rate, clean.source_id.clone())?;
    Ok((out, MixInfo { offset, gain }))
}

/// [`mix_noise_with_info`] without the mixing report.
pub fn mix_noise(clean: &Waveform, noise: &Waveform, snr_db: f64, rng_seed: u64) -> Result<Waveform> {
    mix_noise_with_info(clean, noise, snr_db, rng_seed).map(|(w, _)| w)
}

fn window_power(noise: &[f64], offset: usize, len: usize) -> f64 {
    let mut acc = 0.0;
    for i in 0..len {
        let x = noise[(offset + i) % noise.len()];
        acc += x * x;
    }
    acc / len as f64
}

/// Synthesizes seeded noise at 16 kHz.
///
/// White noise is i.i.d. uniform(-0.5, 0.5). Pink noise uses the
/// Voss-McCartney scheme with 8 octave rows (row `r` redrawn every `2^r`
/// samples), then is peak-normalized so that `max |amplitude| = 0.5`.
pub fn synth_noise(kind: NoiseKind, length: usize, rng_seed: u64) -> Result<Waveform> {
    if length == 0 {
        return Err(Error::Domain("synth_noise length must be >= 1".into()));
    }
    let mut rng = rng_for(rng_seed, "synth_noise", kind as u64);
    let samples = match kind {
        NoiseKind::White => (0..length).map(|_| rng.random::<f64>() - 0.5).collect(),
        NoiseKind::Pink => {
            const ROWS: usize = 8;
            let mut rows = [0.0f64; ROWS];
            for r in rows.iter_mut() {
                *r = rng.random::<f64>() - 0.5;
            }
            let mut raw = Vec::with_capacity(length);
            raw.push(rows.iter().sum::<f64>());
            for n in 1..length {
                let r = (n.trailing_zeros() as usize).min(ROWS - 1);
                rows[r] = rng.random::<f64>() - 0.5;
                raw.push(rows.iter().sum::<f64>());
            }
            let peak = raw.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            raw.iter().map(|x| (x / peak) * 0.5).collect()
        }
    };
    Waveform::new(samples, 16_000, format!("synth_noise:{kind:?}:{rng_seed}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds::rng_for;
    use proptest::prelude::*;
    use rand::Rng;

    fn tone(n: usize, freq: f64, amp: f64) -> Waveform {
        let samples: Vec<f64> = (0..n)
            .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / 16_000.0).sin())
            .collect();
        Waveform::new(samples, 16_000, "tone").unwrap()
    }

    #[test]
    fn speed_identity_at_lambda_one() {
        let w = tone(1000, 440.0, 0.5);
        let out = speed_perturb(&w, 1.0).unwrap();
        assert_eq!(out.samples, w.samples);
    }

    #[test]
    fn speed_two_takes_every_other_sample() {
        let w = tone(16_000, 440.0, 0.5);
        let out = speed_perturb(&w, 2.0).unwrap();
        assert_eq!(out.len(), 8000);
        for (i, y) in out.samples.iter().enumerate() {
            assert_eq!(*y, w.samples[2 * i], "sample {i}");
        }
    }

    #[test]
    fn speed_1_1_gives_14545_samples_from_16000() {
        let w = tone(16_000, 440.0, 0.5);
        let out = speed_perturb(&w, 1.1).unwrap();
        assert_eq!(out.len(), 14_545);
    }

    #[test]
    fn speed_rejects_non_positive_lambda() {
        let w = tone(100, 440.0, 0.5);
        assert!(matches!(speed_perturb(&w, 0.0), Err(Error::Domain(_))));
        assert!(matches!(speed_perturb(&w, -1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn volume_scales_and_clips() {
        let w = Waveform::new(vec![0.8, -0.8, 0.1], 16_000, "v").unwrap();
        let out = volume_perturb(&w, 1.5).unwrap();
        assert_eq!(out.samples[0], 1.0);
        assert_eq!(out.samples[1], -1.0);
        assert!((out.samples[2] - 0.15).abs() < 1e-12);
        let zero = volume_perturb(&w, 0.0).unwrap();
        assert!(zero.samples.iter().all(|&x| x == 0.0));
        assert!(matches!(volume_perturb(&w, -0.1), Err(Error::Domain(_))));
    }

    #[test]
    fn equal_power_zero_snr_gives_unit_gain() {
        // The window spans exactly one wrap of the noise source, so window
        // power equals clean power regardless of the seeded offset.
        let clean = tone(4000, 500.0, 0.3);
        let mut noise = clean.clone();
        noise.samples.reverse();
        let (_, info) = mix_noise_with_info(&clean, &noise, 0.0, 7).unwrap();
        assert!((info.gain - 1.0).abs() < 1e-12, "gain {}", info.gain);
    }

    #[test]
    fn twenty_db_at_equal_power_gives_gain_one_tenth() {
        let clean = tone(4000, 500.0, 0.3);
        let noise = Waveform::new(clean.samples.clone(), 16_000, "n").unwrap();
        let (_, info) = mix_noise_with_info(&clean, &noise, 20.0, 7).unwrap();
        assert!((info.gain - 0.1).abs() < 1e-12, "gain {}", info.gain);
    }

    #[test]
    fn zero_clean_is_rejected() {
        let clean = Waveform::new(vec![0.0; 100], 16_000, "z").unwrap();
        let noise = tone(100, 440.0, 0.5);
        assert!(matches!(mix_noise(&clean, &noise, 10.0, 1), Err(Error::Domain(_))));
    }

    #[test]
    fn zero_noise_errors_after_ten_attempts() {
        let clean = tone(100, 440.0, 0.5);
        let noise = Waveform::new(vec![0.0; 100], 16_000, "z").unwrap();
        assert!(matches!(mix_noise(&clean, &noise, 10.0, 1), Err(Error::Domain(_))));
    }

    #[test]
    fn pre_clip_snr_matches_target_to_1e9_db() {
        let clean = tone(16_000, 700.0, 0.21);
        for (i, snr) in [0.0, 5.0, 10.0, 15.0, 20.0].into_iter().enumerate() {
            let noise = synth_noise(NoiseKind::White, 20_000, 100 + i as u64).unwrap();
            let (_, info) = mix_noise_with_info(&clean, &noise, snr, 55 + i as u64).unwrap();
            let mut p_noise = 0.0;
            for k in 0..clean.len() {
                let x = info.gain * noise.samples[(info.offset + k) % noise.len()];
                p_noise += x * x;
            }
            p_noise /= clean.len() as f64;
            let measured = 10.0 * (clean.power() / p_noise).log10();
            assert!(
                (measured - snr).abs() < 1e-9,
                "target {snr} dB, measured {measured} dB"
            );
        }
    }

    #[test]
    fn short_noise_is_tiled() {
        let clean = tone(1000, 440.0, 0.4);
        let noise = tone(64, 900.0, 0.2);
        let (out, _) = mix_noise_with_info(&clean, &noise, 10.0, 3).unwrap();
        assert_eq!(out.len(), clean.len());
    }

    #[test]
    fn synth_noise_is_deterministic_per_seed() {
        for kind in [NoiseKind::White, NoiseKind::Pink] {
            let a = synth_noise(kind, 2048, 11).unwrap();
            let b = synth_noise(kind, 2048, 11).unwrap();
            assert_eq!(a.samples, b.samples);
            let c = synth_noise(kind, 2048, 12).unwrap();
            assert_ne!(a.samples, c.samples);
        }
    }

    #[test]
    fn white_noise_mean_is_near_zero() {
        let w = synth_noise(NoiseKind::White, 16_000, 5).unwrap();
        let mean = w.samples.iter().sum::<f64>() / w.len() as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn pink_noise_peak_is_exactly_half() {
        let w = synth_noise(NoiseKind::Pink, 16_000, 5).unwrap();
        let peak = w.samples.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert_eq!(peak, 0.5);
    }

    #[test]
    fn zero_length_noise_is_rejected() {
        assert!(matches!(
            synth_noise(NoiseKind::White, 0, 1),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn pink_noise_concentrates_power_at_low_frequencies() {
        let w = synth_noise(NoiseKind::Pink, 16_384, 17).unwrap();
        let n = w.len();
        let band_power = |lo: usize, hi: usize| -> f64 {
            let mut acc = 0.0;
            for k in lo..hi {
                let (mut re, mut im) = (0.0, 0.0);
                for (t, &x) in w.samples.iter().enumerate() {
                    let ang = -2.0 * std::f64::consts::PI * (k * t) as f64 / n as f64;
                    re += x * ang.cos();
                    im += x * ang.sin();
                }
                acc += re * re + im * im;
            }
            acc
        };
        let low = band_power(1, 33);
        let high = band_power(4096, 4128);
        assert!(low > 10.0 * high, "low {low}, high {high}");
    }

    proptest! {
        #[test]
        fn speed_round_trip_length_within_one_sample(
            n in 400usize..4000,
            lambda in 0.8f64..1.2,
            seed in 0u64..1000,
        ) {
            let mut rng = rng_for(seed, "prop_speed", 0);
            let samples: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
            let w = Waveform::new(samples, 16_000, "p").unwrap();
            let there = speed_perturb(&w, lambda).unwrap();
            let back = speed_perturb(&there, 1.0 / lambda).unwrap();
            prop_assert!((back.len() as i64 - n as i64).abs() <= 1);
        }

        #[test]
        fn volume_composes_multiplicatively_without_clipping(
            a in 0.1f64..1.4,
            b in 0.1f64..1.4,
            seed in 0u64..1000,
        ) {
            prop_assume!(a * b <= 2.0);
            let mut rng = rng_for(seed, "prop_volume", 0);
            let samples: Vec<f64> = (0..256).map(|_| 0.8 * (rng.random::<f64>() - 0.5)).collect();
            let w = Waveform::new(samples, 16_000, "p").unwrap();
            let two_step = volume_perturb(&volume_perturb(&w, a).unwrap(), b).unwrap();
            let one_step = volume_perturb(&w, a * b).unwrap();
            for (x, y) in two_step.samples.iter().zip(&one_step.samples) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
