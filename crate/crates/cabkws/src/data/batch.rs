//! Minibatch assembly: featurized (X, X_aug, label) triples with fixed
//! frame count and right-zero-padding in feature space.

use ndarray::{s, Array2};
use rand::Rng;

use crate::audio::{
    fbank, mix_noise, speed_perturb, synth_noise, volume_perturb, AugmentConfig, FbankConfig,
    FbankMatrix, Waveform,
};
use crate::seeds::rng_for;
use crate::{Error, Result};

use super::{load_utterance, Manifest, ManifestEntry, Split};

/// A batch of fixed-shape feature matrices. `aug_features` is present for
/// paired-view (pretraining) batches and absent for supervised batches.
/// `valid_frames` counts the unpadded rows of each matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub features: Vec<Array2<f64>>,
    pub valid_frames: Vec<usize>,
    pub aug_features: Option<Vec<Array2<f64>>>,
    pub aug_valid_frames: Option<Vec<usize>>,
    pub labels: Vec<usize>,
    pub utterance_ids: Vec<String>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

/// Samples batches from a manifest, handling augmentation draws,
/// featurization, and shape normalization.
#[derive(Debug, Clone)]
pub struct BatchBuilder {
    pub manifest: Manifest,
    pub fbank_cfg: FbankConfig,
    pub augment_cfg: AugmentConfig,
    /// Every feature matrix is padded or truncated to this many frames.
    pub target_frames: usize,
}

impl BatchBuilder {
    pub fn new(
        manifest: Manifest,
        fbank_cfg: FbankConfig,
        augment_cfg: AugmentConfig,
        target_frames: usize,
    ) -> Result<Self> {
        fbank_cfg.validate()?;
        augment_cfg.validate()?;
        if target_frames == 0 {
            return Err(Error::Config("target_frames must be >= 1".into()));
        }
        Ok(BatchBuilder { manifest, fbank_cfg, augment_cfg, target_frames })
    }

    fn load_padded(&self, entry: &ManifestEntry) -> Result<Waveform> {
        let mut w = load_utterance(&self.manifest.base_dir, &entry.path)?;
        let win = self.fbank_cfg.window_len();
        if w.len() < win {
            w.samples.resize(win, 0.0);
        }
        Ok(w)
    }

    fn featurize(&self, w: &Waveform) -> Result<(Array2<f64>, usize)> {
        let fb = fbank(w, &self.fbank_cfg)?;
        Ok(pad_or_truncate(&fb, self.target_frames))
    }

    /// Samples `n` distinct utterances from `split` and builds the paired
    /// clean/augmented views used by the unsupervised objective.
    ///
    /// Clean view: seeded noise mixed in at a seeded SNR. Augmented view:
    /// speed then volume perturbation of the same clean waveform, then the
    /// same noise protocol with fresh draws. Labels are the position indices
    /// 0..n-1, i.e. distinct pseudo-labels.
    pub fn paired_views_batch(&self, split: Split, n: usize, seed: u64) -> Result<Batch> {
        if n < 2 {
            return Err(Error::Domain(format!(
                "paired-view batches need n >= 2 (contrastive terms undefined), got {n}"
            )));
        }
        let pool = self.manifest.split_entries(split);
        if pool.len() < n {
            return Err(Error::Domain(format!(
                "{} split has {} utterances, need {n}",
                split.as_str(),
                pool.len()
            )));
        }
        let mut sample_rng = rng_for(seed, "batch_sample", 0);
        let chosen = rand::seq::index::sample(&mut sample_rng, pool.len(), n);

        let mut features = Vec::with_capacity(n);
        let mut valid = Vec::with_capacity(n);
        let mut aug_features = Vec::with_capacity(n);
        let mut aug_valid = Vec::with_capacity(n);
        let mut ids = Vec::with_capacity(n);
        for (i, pool_idx) in chosen.iter().enumerate() {
            let entry = pool[pool_idx];
            let mut rng = rng_for(seed, "batch_utt", i as u64);
            let clean = self.load_padded(entry)?;

            let kind = self.augment_cfg.sample_noise_kind(&mut rng);
            let noise = synth_noise(kind, clean.len(), rng.random())?;
            let snr = rng.random_range(
                self.augment_cfg.snr_range_db[0]..=self.augment_cfg.snr_range_db[1],
            );
            let noisy = mix_noise(&clean, &noise, snr, rng.random())?;
            let (x, vx) = self.featurize(&noisy)?;

            let spec = self.augment_cfg.sample(&mut rng);
            let aug = volume_perturb(
                &speed_perturb(&clean, spec.lambda_speed)?,
                spec.lambda_volume,
            )?;
            let aug_kind = self.augment_cfg.sample_noise_kind(&mut rng);
            let aug_noise = synth_noise(aug_kind, aug.len(), rng.random())?;
            let snr_aug = spec.snr_db.expect("sampled specs always carry an SNR");
            let aug_noisy = mix_noise(&aug, &aug_noise, snr_aug, spec.rng_seed)?;
            let (xa, va) = self.featurize(&aug_noisy)?;

            features.push(x);
            valid.push(vx);
            aug_features.push(xa);
            aug_valid.push(va);
            ids.push(entry.utterance_id.clone());
        }
        Ok(Batch {
            features,
            valid_frames: valid,
            aug_features: Some(aug_features),
            aug_valid_frames: Some(aug_valid),
            labels: (0..n).collect(),
            utterance_ids: ids,
        })
    }

    /// Paired-view batch from the train split (the pretraining draw).
    pub fn pretrain_batch(&self, n: usize, seed: u64) -> Result<Batch> {
        self.paired_views_batch(Split::Train, n, seed)
    }

    /// Samples `n` distinct labeled train utterances with true labels and no
    /// augmented view. Drawing an unlabeled entry is an error.
    pub fn finetune_batch(&self, n: usize, seed: u64) -> Result<Batch> {
        if n < 1 {
            return Err(Error::Domain("finetune batch needs n >= 1".into()));
        }
        let pool = self.manifest.split_entries(Split::Train);
        if pool.len() < n {
            return Err(Error::Domain(format!(
                "train split has {} utterances, need {n}",
                pool.len()
            )));
        }
        let mut sample_rng = rng_for(seed, "batch_sample", 0);
        let chosen = rand::seq::index::sample(&mut sample_rng, pool.len(), n);
        let mut features = Vec::with_capacity(n);
        let mut valid = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        let mut ids = Vec::with_capacity(n);
        for pool_idx in chosen.iter() {
            let entry = pool[pool_idx];
            let Some(label) = entry.label else {
                return Err(Error::Domain(format!(
                    "drew unlabeled utterance '{}' for a supervised batch",
                    entry.utterance_id
                )));
            };
            let w = self.load_padded(entry)?;
            let (x, vx) = self.featurize(&w)?;
            features.push(x);
            valid.push(vx);
            labels.push(label);
            ids.push(entry.utterance_id.clone());
        }
        Ok(Batch {
            features,
            valid_frames: valid,
            aug_features: None,
            aug_valid_frames: None,
            labels,
            utterance_ids: ids,
        })
    }

    /// Featurizes every labeled entry of a split in manifest order
    /// (evaluation input). Errors on unlabeled entries or an empty split.
    pub fn labeled_split_batch(&self, split: Split) -> Result<Batch> {
        let pool = self.manifest.split_entries(split);
        if pool.is_empty() {
            return Err(Error::Domain(format!("{} split is empty", split.as_str())));
        }
        let mut features = Vec::with_capacity(pool.len());
        let mut valid = Vec::with_capacity(pool.len());
        let mut labels = Vec::with_capacity(pool.len());
        let mut ids = Vec::with_capacity(pool.len());
        for entry in pool {
            let Some(label) = entry.label else {
                return Err(Error::Domain(format!(
                    "unlabeled utterance '{}' in {} split",
                    entry.utterance_id,
                    split.as_str()
                )));
            };
            let w = self.load_padded(entry)?;
            let (x, vx) = self.featurize(&w)?;
            features.push(x);
            valid.push(vx);
            labels.push(label);
            ids.push(entry.utterance_id.clone());
        }
        Ok(Batch {
            features,
            valid_frames: valid,
            aug_features: None,
            aug_valid_frames: None,
            labels,
            utterance_ids: ids,
        })
    }
}

/// Right-zero-pads or truncates a feature matrix to `t` rows; returns the
/// matrix and the count of real (unpadded) rows.
pub fn pad_or_truncate(fb: &FbankMatrix, t: usize) -> (Array2<f64>, usize) {
    let rows = fb.n_frames().min(t);
    let mut out = Array2::zeros((t, fb.n_mels()));
    out.slice_mut(s![0..rows, ..]).assign(&fb.data.slice(s![0..rows, ..]));
    (out, rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, ManifestEntry, SynthSpec};

    fn tiny_builder(seed: u64) -> (tempfile::TempDir, BatchBuilder) {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            n_classes: 3,
            train_per_class: 4,
            dev_per_class: 1,
            eval_per_class: 1,
            seed,
        };
        let manifest = synth_dataset(&spec, dir.path()).unwrap();
        let builder = BatchBuilder::new(
            manifest,
            FbankConfig::default(),
            AugmentConfig::default(),
            98,
        )
        .unwrap();
        (dir, builder)
    }

    #[test]
    fn pretrain_batch_has_paired_views_and_pseudo_labels() {
        let (_dir, b) = tiny_builder(1);
        let batch = b.pretrain_batch(4, 7).unwrap();
        assert_eq!(batch.len(), 4);
        assert_eq!(batch.labels, vec![0, 1, 2, 3]);
        let aug = batch.aug_features.as_ref().unwrap();
        for i in 0..4 {
            assert_eq!(batch.features[i].dim(), (98, 40));
            assert_eq!(aug[i].dim(), (98, 40));
            assert_ne!(batch.features[i], aug[i]);
        }
        let ids: std::collections::HashSet<_> = batch.utterance_ids.iter().collect();
        assert_eq!(ids.len(), 4, "utterances must be distinct");
    }

    #[test]
    fn pretrain_batch_is_deterministic_per_seed() {
        let (_dir, b) = tiny_builder(1);
        let x = b.pretrain_batch(4, 7).unwrap();
        let y = b.pretrain_batch(4, 7).unwrap();
        assert_eq!(x, y);
        let z = b.pretrain_batch(4, 8).unwrap();
        assert_ne!(x, z);
    }

    #[test]
    fn pretrain_batch_rejects_n_below_two_or_above_pool() {
        let (_dir, b) = tiny_builder(1);
        assert!(matches!(b.pretrain_batch(1, 0), Err(Error::Domain(_))));
        assert!(matches!(b.pretrain_batch(13, 0), Err(Error::Domain(_))));
    }

    #[test]
    fn aug_view_padding_tracks_speed_perturbation() {
        // Slowed-down utterances produce more than 98 frames (truncated),
        // sped-up ones fewer (padded); valid_frames records both.
        let (_dir, b) = tiny_builder(2);
        let mut shorter = 0;
        for seed in 0..6 {
            let batch = b.pretrain_batch(4, seed).unwrap();
            for (i, &va) in batch.aug_valid_frames.as_ref().unwrap().iter().enumerate() {
                assert!(va <= 98);
                let aug = &batch.aug_features.as_ref().unwrap()[i];
                if va < 98 {
                    shorter += 1;
                    assert!(aug.slice(s![va.., ..]).iter().all(|&x| x == 0.0));
                }
            }
        }
        assert!(shorter > 0, "no sped-up draw in 24 utterances");
    }

    #[test]
    fn finetune_batch_carries_true_labels() {
        let (_dir, b) = tiny_builder(3);
        let batch = b.finetune_batch(6, 11).unwrap();
        assert_eq!(batch.len(), 6);
        assert!(batch.aug_features.is_none());
        assert!(batch.labels.iter().all(|&l| l < 3));
        let single = b.finetune_batch(1, 11).unwrap();
        assert_eq!(single.len(), 1);
    }

    #[test]
    fn finetune_batch_errors_on_unlabeled_draw() {
        let (_dir, mut b) = tiny_builder(4);
        for e in &mut b.manifest.entries {
            e.label = None;
        }
        assert!(matches!(b.finetune_batch(2, 0), Err(Error::Domain(_))));
    }

    #[test]
    fn labeled_split_batch_preserves_manifest_order() {
        let (_dir, b) = tiny_builder(5);
        let batch = b.labeled_split_batch(Split::Eval).unwrap();
        let expected: Vec<_> = b
            .manifest
            .split_entries(Split::Eval)
            .iter()
            .map(|e| e.utterance_id.clone())
            .collect();
        assert_eq!(batch.utterance_ids, expected);
        assert_eq!(batch.labels.len(), 3);
    }

    #[test]
    fn labeled_split_batch_errors_on_empty_or_unlabeled() {
        let (_dir, mut b) = tiny_builder(6);
        b.manifest.entries.retain(|e| e.split != Split::Dev);
        assert!(matches!(b.labeled_split_batch(Split::Dev), Err(Error::Domain(_))));
        b.manifest.entries.push(ManifestEntry {
            utterance_id: "u".into(),
            path: "train/0/missing.wav".into(),
            label: None,
            split: Split::Eval,
        });
        assert!(matches!(b.labeled_split_batch(Split::Eval), Err(Error::Domain(_))));
    }

    #[test]
    fn pad_or_truncate_handles_both_directions() {
        let fb = FbankMatrix { data: Array2::from_elem((5, 3), 1.5) };
        let (padded, v) = pad_or_truncate(&fb, 8);
        assert_eq!(padded.dim(), (8, 3));
        assert_eq!(v, 5);
        assert!(padded.slice(s![5.., ..]).iter().all(|&x| x == 0.0));
        let (cut, v2) = pad_or_truncate(&fb, 2);
        assert_eq!(cut.dim(), (2, 3));
        assert_eq!(v2, 2);
        assert!(cut.iter().all(|&x| x == 1.5));
    }
}
