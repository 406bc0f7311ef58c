//! Dataset manifests, 1-second segmentation, the synthetic keyword corpus,
//! and minibatch assembly.

mod batch;
mod manifest;
mod synth;

pub use batch::{Batch, BatchBuilder};
pub use manifest::{
    ingest_speech_commands, load_utterance, read_manifest, write_manifest, Manifest,
    ManifestEntry, Split, COMMAND_WORDS, SILENCE_CLASS, UNKNOWN_CLASS,
};
pub use synth::{synth_dataset, SynthSpec};

use crate::audio::Waveform;
use crate::Result;

/// Cuts a waveform into consecutive non-overlapping segments of
/// `seg_len` seconds. A final remainder of at least half a segment is
/// zero-padded to full length; a shorter remainder is dropped.
///
/// Segment `k` gets source id `<orig>#k`.
pub fn segment(w: &Waveform, seg_len: f64) -> Result<Vec<Waveform>> {
    if !(seg_len > 0.0) {
        return Err(crate::Error::Domain(format!(
            "segment length must be > 0, got {seg_len}"
        )));
    }
    let seg = (seg_len * f64::from(w.sample_rate)).round() as usize;
    let mut out = Vec::new();
    let mut start = 0;
    while start < w.len() {
        let remaining = w.len() - start;
        if remaining >= seg {
            out.push(Waveform::new(
                w.samples[start..start + seg].to_vec(),
                w.sample_rate,
                format!("{}#{}", w.source_id, out.len()),
            )?);
        } else {
            if remaining * 2 >= seg {
                let mut samples = w.samples[start..].to_vec();
                samples.resize(seg, 0.0);
                out.push(Waveform::new(
                    samples,
                    w.sample_rate,
                    format!("{}#{}", w.source_id, out.len()),
                )?);
            }
            break;
        }
        start += seg;
    }
    Ok(out)
}
