//! Manifest CSV I/O, utterance loading, and Speech-Commands-style ingestion.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio::{load_wav, Waveform};
use crate::{Error, Result};

use super::segment;

/// The ten command words, classes 0-9 in this order.
pub const COMMAND_WORDS: [&str; 10] =
    ["yes", "no", "up", "down", "left", "right", "on", "off", "stop", "go"];
/// Class index for word folders outside the command list.
pub const UNKNOWN_CLASS: usize = 10;
/// Class index for segments cut from background-noise recordings.
pub const SILENCE_CLASS: usize = 11;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Eval,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Eval => "eval",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "eval" => Ok(Split::Eval),
            other => Err(Error::Parse(format!("unknown split '{other}'"))),
        }
    }
}

/// One utterance: a WAV path relative to the manifest directory (optionally
/// with a `#k` fragment meaning "segment k of that file"), an optional class
/// label, and a split assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub utterance_id: String,
    pub path: String,
    pub label: Option<usize>,
    pub split: Split,
}

/// An ordered list of utterances plus the directory its paths resolve
/// against.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    /// Directory that relative entry paths are joined to.
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn validate(&self, n_classes: usize) -> Result<()> {
        let mut ids = HashSet::new();
        for e in &self.entries {
            if !ids.insert(e.utterance_id.as_str()) {
                return Err(Error::Domain(format!(
                    "duplicate utterance_id '{}'",
                    e.utterance_id
                )));
            }
            if let Some(label) = e.label {
                if label >= n_classes {
                    return Err(Error::Domain(format!(
                        "label {label} out of range for {n_classes} classes ('{}')",
                        e.utterance_id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn split_entries(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    /// Keeps labels on at most `per_class` train entries per class (selected
    /// by a seeded shuffle) and strips them from the rest, so the full train
    /// audio stays available to self-supervised pretraining while supervised
    /// fine-tuning sees only the budgeted subset. Dev/eval entries are
    /// untouched.
    pub fn with_label_budget(&self, per_class: usize, seed: u64) -> Manifest {
        use rand::seq::SliceRandom;
        let mut keep: HashSet<usize> = HashSet::new();
        let mut by_class: Vec<Vec<usize>> = Vec::new();
        for (i, e) in self.entries.iter().enumerate() {
            if e.split != Split::Train {
                continue;
            }
            let Some(label) = e.label else { continue };
            if by_class.len() <= label {
                by_class.resize(label + 1, Vec::new());
            }
            by_class[label].push(i);
        }
        for (label, mut idxs) in by_class.into_iter().enumerate() {
            let mut rng = crate::seeds::rng_for(seed, "label_budget", label as u64);
            idxs.shuffle(&mut rng);
            keep.extend(idxs.into_iter().take(per_class));
        }
        let entries = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let mut e = e.clone();
                if e.split == Split::Train && !keep.contains(&i) {
                    e.label = None;
                }
                e
            })
            .collect();
        Manifest { entries, base_dir: self.base_dir.clone() }
    }
}

/// Loads the waveform behind a manifest entry, resolving `path#k` fragments
/// by 1-second segmentation.
pub fn load_utterance(base_dir: &Path, path: &str) -> Result<Waveform> {
    match path.split_once('#') {
        None => load_wav(base_dir.join(path)),
        Some((file, frag)) => {
            let k: usize = frag
                .parse()
                .map_err(|_| Error::Parse(format!("bad segment fragment in '{path}'")))?;
            let w = load_wav(base_dir.join(file))?;
            let segs = segment(&w, 1.0)?;
            segs.into_iter().nth(k).ok_or_else(|| {
                Error::Domain(format!("segment {k} out of range for '{file}'"))
            })
        }
    }
}

/// Writes `utterance_id,path,label,split` CSV; label -1 means unlabeled.
pub fn write_manifest(path: impl AsRef<Path>, manifest: &Manifest) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path.as_ref()).map_err(csv_err)?;
    wtr.write_record(["utterance_id", "path", "label", "split"])
        .map_err(csv_err)?;
    for e in &manifest.entries {
        let label = e.label.map_or_else(|| "-1".to_string(), |l| l.to_string());
        wtr.write_record([&e.utterance_id, &e.path, &label, e.split.as_str()])
            .map_err(csv_err)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Reads a manifest CSV; relative paths resolve against the CSV's directory.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path).map_err(csv_err)?;
    {
        let headers = rdr.headers().map_err(csv_err)?;
        let expected = ["utterance_id", "path", "label", "split"];
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err(Error::Parse(format!(
                "{}: expected header {:?}, got {:?}",
                path.display(),
                expected.join(","),
                headers
            )));
        }
    }
    let mut entries = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(csv_err)?;
        if record.len() != 4 {
            return Err(Error::Parse(format!(
                "{}: expected 4 fields, got {}",
                path.display(),
                record.len()
            )));
        }
        let label: i64 = record[2]
            .parse()
            .map_err(|_| Error::Parse(format!("{}: bad label '{}'", path.display(), &record[2])))?;
        let label = if label < 0 { None } else { Some(label as usize) };
        entries.push(ManifestEntry {
            utterance_id: record[0].to_string(),
            path: record[1].to_string(),
            label,
            split: Split::parse(&record[3])?,
        });
    }
    let base_dir = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
    Ok(Manifest { entries, base_dir })
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse(format!("CSV error: {other:?}")),
    }
}

/// FNV-1a based 80/10/10 split assignment, a pure function of the
/// utterance id.
fn hash_split(utterance_id: &str) -> Split {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in utterance_id.as_bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    match h % 100 {
        0..=79 => Split::Train,
        80..=89 => Split::Dev,
        _ => Split::Eval,
    }
}

/// Builds a manifest from a Speech-Commands-style directory: one folder per
/// word, `_background_noise_` recordings segmented into 1-second `silence`
/// entries. The ten command words map to classes 0-9, other words to
/// `unknown` (10), noise segments to `silence` (11).
///
/// Splits come from `validation_list.txt` / `testing_list.txt` when present
/// (entries listed there go to dev / eval), otherwise from an id hash.
pub fn ingest_speech_commands(root_dir: impl AsRef<Path>) -> Result<Manifest> {
    let root = root_dir.as_ref();
    if !root.is_dir() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{} is not a directory", root.display()),
        )));
    }
    let read_list = |name: &str| -> Result<HashSet<String>> {
        let p = root.join(name);
        if !p.exists() {
            return Ok(HashSet::new());
        }
        let text = std::fs::read_to_string(&p)?;
        Ok(text.lines().map(|l| l.trim().to_string()).filter(|l| !l.is_empty()).collect())
    };
    let dev_list = read_list("validation_list.txt")?;
    let eval_list = read_list("testing_list.txt")?;
    let lists_present = !dev_list.is_empty() || !eval_list.is_empty();
    let assign = |id: &str| -> Split {
        if lists_present {
            if dev_list.contains(id) {
                Split::Dev
            } else if eval_list.contains(id) {
                Split::Eval
            } else {
                Split::Train
            }
        } else {
            hash_split(id)
        }
    };

    let mut dirs: Vec<String> = Vec::new();
    for entry in std::fs::read_dir(root)? {
        let entry = entry?;
        if entry.file_type()?.is_dir() {
            dirs.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    dirs.sort();

    let mut entries = Vec::new();
    for dir in &dirs {
        let word_label = if dir == "_background_noise_" {
            None
        } else if dir.starts_with('_') {
            continue;
        } else {
            Some(
                COMMAND_WORDS
                    .iter()
                    .position(|w| w == dir)
                    .unwrap_or(UNKNOWN_CLASS),
            )
        };
        let mut files: Vec<String> = std::fs::read_dir(root.join(dir))?
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|f| f.ends_with(".wav"))
            .collect();
        files.sort();
        if files.is_empty() {
            eprintln!("warning: class folder '{dir}' contains no WAV files");
            continue;
        }
        for file in files {
            let rel = format!("{dir}/{file}");
            match word_label {
                Some(label) => {
                    entries.push(ManifestEntry {
                        utterance_id: rel.clone(),
                        path: rel.clone(),
                        label: Some(label),
                        split: assign(&rel),
                    });
                }
                None => {
                    // Background noise: one silence entry per 1 s segment.
                    let w = load_wav(root.join(&rel))?;
                    let n_segments = segment(&w, 1.0)?.len();
                    for k in 0..n_segments {
                        let id = format!("{rel}#{k}");
                        entries.push(ManifestEntry {
                            utterance_id: id.clone(),
                            path: id.clone(),
                            label: Some(SILENCE_CLASS),
                            split: if lists_present { hash_split(&id) } else { assign(&id) },
                        });
                    }
                }
            }
        }
    }
    Ok(Manifest { entries, base_dir: root.to_path_buf() })
}
