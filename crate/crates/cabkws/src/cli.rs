//! Command-line front end.
//!
//! Subcommands cover the full experiment loop: `synth-data` and `augment`
//! for corpus work, `featurize` for one-off feature extraction, and
//! `pretrain`, `finetune`, `eval`, `gradcheck`, and `sweep` for training.
//! The training family reads a JSON [`RunConfig`] (`--config`, optional,
//! every field has a default) and accepts dotted-path overrides such as
//! `--train.seed=7` or `--model.temperature=0.07` anywhere on the command
//! line, so single-knob ablations need no config-file churn.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage or
//! configuration errors. All randomness flows from seeds in the config or
//! flags; wall-clock time only names default run directories.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::audio::{
    fbank, load_wav, mix_noise, speed_perturb, volume_perturb, write_fbank, write_wav,
    AugmentConfig, FbankConfig,
};
use crate::data::{read_manifest, synth_dataset, BatchBuilder, Split, SynthSpec};
use crate::error::{Error, Result};
use crate::model::{load_checkpoint, ModelConfig};
use crate::train::{
    evaluate, finetune, grad_check, pretrain, step_sweep, EvalReport, TrainConfig, SWEEP_FILE,
};

/// Where the dataset lives, how to synthesize it when absent, and how
/// waveforms become feature matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Directory holding `manifest.csv` and the WAVs it references.
    /// Defaults to `data`.
    #[serde(default = "default_data_dir")]
    pub dir: PathBuf,
    /// When `dir` has no manifest, generate the synthetic corpus there
    /// before training. Defaults to true.
    #[serde(default = "default_synth_if_missing")]
    pub synth_if_missing: bool,
    /// Parameters for the synthetic corpus generator.
    #[serde(default)]
    pub synth: SynthSpec,
    /// Keep at most this many labeled train utterances per class, drawn by
    /// a seeded shuffle; unset keeps everything. Defaults to unset.
    #[serde(default)]
    pub label_budget_per_class: Option<usize>,
    /// Seed for the label-budget draw. Defaults to 0.
    #[serde(default)]
    pub label_budget_seed: u64,
    /// Log-mel filterbank extraction settings.
    #[serde(default)]
    pub fbank: FbankConfig,
}

fn default_data_dir() -> PathBuf {
    PathBuf::from("data")
}

fn default_synth_if_missing() -> bool {
    true
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: default_data_dir(),
            synth_if_missing: default_synth_if_missing(),
            synth: SynthSpec::default(),
            label_budget_per_class: None,
            label_budget_seed: 0,
            fbank: FbankConfig::default(),
        }
    }
}

/// Top-level experiment configuration: one JSON document with `model`,
/// `train`, `data`, and `augment` sections.
///
/// Every field has a default, so `{}` is a complete config. Unknown keys
/// anywhere in the document are rejected, and parse → serialize → parse is
/// the identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub augment: AugmentConfig,
}

#[derive(Parser, Debug)]
#[command(name = "cabkws", version, about, disable_help_subcommand = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic keyword corpus and its manifest.
    SynthData(SynthDataArgs),
    /// Apply speed, volume, and optional noise augmentation to one WAV.
    Augment(AugmentArgs),
    /// Extract log-mel filterbank features from one WAV.
    Featurize(FeaturizeArgs),
    /// Pretrain the encoder on unlabeled paired views.
    Pretrain(RunArgs),
    /// Fine-tune a classifier, optionally from a pretrained checkpoint.
    Finetune(FinetuneArgs),
    /// Score a checkpoint on a dataset split and print accuracy as JSON.
    Eval(EvalArgs),
    /// Compare analytic gradients against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Train a grid of pretrain-step counts and seeds and tabulate accuracy.
    Sweep(SweepArgs),
}

#[derive(Args, Debug)]
struct SynthDataArgs {
    /// Output directory for the WAVs, manifest.csv, and manifest_meta.json.
    #[arg(long)]
    out: PathBuf,
    /// Generator seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Labeled train utterances per class.
    #[arg(long)]
    per_class: usize,
    /// Number of keyword classes.
    #[arg(long, default_value_t = 12)]
    classes: usize,
    /// Dev utterances per class.
    #[arg(long, default_value_t = 25)]
    dev_per_class: usize,
    /// Eval utterances per class.
    #[arg(long, default_value_t = 25)]
    eval_per_class: usize,
}

#[derive(Args, Debug)]
struct AugmentArgs {
    /// Input WAV path.
    #[arg(long = "in")]
    input: PathBuf,
    /// Speed factor; the output duration is the input's divided by this.
    #[arg(long)]
    speed: f64,
    /// Amplitude scale factor.
    #[arg(long)]
    volume: f64,
    /// Noise WAV to mix in after speed and volume; requires --snr.
    #[arg(long)]
    noise: Option<PathBuf>,
    /// Target signal-to-noise ratio in dB; requires --noise.
    #[arg(long)]
    snr: Option<f64>,
    /// Seed fixing which window of the noise file is mixed in.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output WAV path (16-bit PCM).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct FeaturizeArgs {
    /// Input WAV path.
    #[arg(long = "in")]
    input: PathBuf,
    /// Output feature-matrix path.
    #[arg(long)]
    out: PathBuf,
    /// Config JSON supplying the filterbank settings (data.fbank section).
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Config JSON; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory; defaults to runs/<command>_<unix-seconds>_seed<seed>.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Pretrained checkpoint to initialize from; the classification head is
    /// freshly drawn either way.
    #[arg(long)]
    init_from: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Config JSON naming the dataset to score on.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint to score.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset split to score: train, dev, or eval.
    #[arg(long, default_value = "eval")]
    split: String,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Config JSON; train.seed fixes the parameter and probe draws.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory to write gradcheck_report.json into, besides stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Coordinates to probe per objective.
    #[arg(long, default_value_t = 500)]
    coords_per_objective: usize,
    /// Check the configured full-size model instead of the reduced one.
    #[arg(long)]
    full: bool,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// Config JSON; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Sweep directory; defaults to runs/sweep_<unix-seconds>_seed<seed>.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Pretraining step counts, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "0,250,1000")]
    pretrain_steps: Vec<usize>,
    /// Seeds, comma separated; each count is trained once per seed.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
}

/// Parses argv and runs one subcommand, then exits.
pub fn run() -> ! {
    let mut args: Vec<String> = Vec::new();
    let mut overrides: Vec<String> = Vec::new();
    for (i, arg) in std::env::args().enumerate() {
        if i > 0 && is_override(&arg) {
            overrides.push(arg);
        } else {
            args.push(arg);
        }
    }
    let cli = Cli::parse_from(args);
    match dispatch(cli.command, &overrides) {
        Ok(()) => std::process::exit(0),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}

fn dispatch(command: Command, overrides: &[String]) -> Result<()> {
    match command {
        Command::SynthData(a) => {
            reject_overrides("synth-data", overrides)?;
            cmd_synth_data(a)
        }
        Command::Augment(a) => {
            reject_overrides("augment", overrides)?;
            cmd_augment(a)
        }
        Command::Featurize(a) => cmd_featurize(a, overrides),
        Command::Pretrain(a) => cmd_pretrain(a, overrides),
        Command::Finetune(a) => cmd_finetune(a, overrides),
        Command::Eval(a) => cmd_eval(a, overrides),
        Command::Gradcheck(a) => cmd_gradcheck(a, overrides),
        Command::Sweep(a) => cmd_sweep(a, overrides),
    }
}

fn reject_overrides(cmd: &str, overrides: &[String]) -> Result<()> {
    match overrides.first() {
        Some(ov) => Err(Error::Config(format!(
            "{cmd} does not read a config, so override '{ov}' has no effect"
        ))),
        None => Ok(()),
    }
}

/// True when an argv token is a dotted-path config override like
/// `--train.seed=7`. Plain flags (`--speed=2.0`) have no dot and stay with
/// the argument parser.
fn is_override(arg: &str) -> bool {
    let Some(body) = arg.strip_prefix("--") else {
        return false;
    };
    let Some((path, _)) = body.split_once('=') else {
        return false;
    };
    path.contains('.')
        && path.split('.').all(|seg| {
            !seg.is_empty() && seg.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
        })
}

/// Applies one `--section.key=value` token to the JSON document. The value
/// is parsed as JSON when possible and falls back to a string, so
/// `--train.seed=7`, `--model.kernel=[3,3]`, and `--data.dir=corpus` all
/// work without quoting. Misspelled keys surface when the merged document
/// is re-parsed with unknown keys rejected.
fn apply_override(doc: &mut Value, token: &str) -> Result<()> {
    let body = token.strip_prefix("--").unwrap_or(token);
    let (path, raw) = body.split_once('=').ok_or_else(|| {
        Error::Config(format!("override '{token}' must look like --section.key=value"))
    })?;
    let value: Value =
        serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut segments: Vec<&str> = path.split('.').collect();
    let last = segments.pop().expect("split_once guarantees a nonempty path");
    let mut node = doc;
    for (i, seg) in segments.iter().enumerate() {
        let map = node.as_object_mut().ok_or_else(|| {
            Error::Config(format!(
                "override '{token}' descends into non-object '{}'",
                segments[..i].join(".")
            ))
        })?;
        node = map
            .entry((*seg).to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    let map = node.as_object_mut().ok_or_else(|| {
        Error::Config(format!(
            "override '{token}' descends into non-object '{}'",
            segments.join(".")
        ))
    })?;
    map.insert(last.to_string(), value);
    Ok(())
}

/// Reads `path` (or starts from `{}` when absent), applies dotted
/// overrides, and re-parses the merged document so unknown keys are
/// rejected wherever they appear.
pub fn load_run_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut doc: Value = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| {
                Error::Config(format!("cannot read config '{}': {e}", p.display()))
            })?;
            serde_json::from_str(&text).map_err(|e| {
                Error::Config(format!("config '{}' is not valid JSON: {e}", p.display()))
            })?
        }
        None => Value::Object(Default::default()),
    };
    for ov in overrides {
        apply_override(&mut doc, ov)?;
    }
    let cfg: RunConfig = serde_json::from_value(doc)
        .map_err(|e| Error::Config(format!("invalid config: {e}")))?;
    cfg.model.validate()?;
    cfg.train.validate()?;
    Ok(cfg)
}

/// Creates `dir` if needed and probes that files can be created inside it,
/// so a bad output argument fails as a usage error instead of midway
/// through a run.
fn ensure_writable_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| {
        Error::Config(format!("cannot create output directory '{}': {e}", dir.display()))
    })?;
    let probe = dir.join(".write_probe");
    fs::write(&probe, b"").map_err(|e| {
        Error::Config(format!("output directory '{}' is not writable: {e}", dir.display()))
    })?;
    let _ = fs::remove_file(&probe);
    Ok(())
}

/// Returns the run directory, creating it. Without an explicit path the
/// directory is named by wall-clock seconds plus the training seed; the
/// timestamp only names the directory and never feeds any random draw.
fn resolve_out_dir(out: Option<PathBuf>, command: &str, seed: u64) -> Result<PathBuf> {
    let dir = match out {
        Some(d) => d,
        None => {
            let secs = SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0);
            PathBuf::from("runs").join(format!("{command}_{secs}_seed{seed}"))
        }
    };
    ensure_writable_dir(&dir)?;
    Ok(dir)
}

/// Records the fully merged config next to the artifacts it produced.
fn persist_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(cfg).map_err(|e| Error::Parse(e.to_string()))?;
    fs::write(dir.join("config.json"), text + "\n")?;
    Ok(())
}

/// Loads (or synthesizes) the dataset named by the config and wires up a
/// batch builder whose feature shape matches `model`.
fn build_builder(cfg: &RunConfig, model: &ModelConfig) -> Result<BatchBuilder> {
    if cfg.data.fbank.n_mels != model.input_mels {
        return Err(Error::Config(format!(
            "data.fbank.n_mels = {} but the model expects {} mel bins",
            cfg.data.fbank.n_mels, model.input_mels
        )));
    }
    let manifest_path = cfg.data.dir.join("manifest.csv");
    let manifest = if manifest_path.exists() {
        read_manifest(&manifest_path)?
    } else if cfg.data.synth_if_missing {
        eprintln!("no manifest at {}, synthesizing corpus", manifest_path.display());
        synth_dataset(&cfg.data.synth, &cfg.data.dir)?
    } else {
        return Err(Error::Config(format!(
            "no manifest at '{}' and data.synth_if_missing is false",
            manifest_path.display()
        )));
    };
    manifest.validate(model.n_classes)?;
    let manifest = match cfg.data.label_budget_per_class {
        Some(k) => manifest.with_label_budget(k, cfg.data.label_budget_seed),
        None => manifest,
    };
    BatchBuilder::new(manifest, cfg.data.fbank.clone(), cfg.augment.clone(), model.input_frames)
}

fn cmd_synth_data(a: SynthDataArgs) -> Result<()> {
    let spec = SynthSpec {
        n_classes: a.classes,
        train_per_class: a.per_class,
        dev_per_class: a.dev_per_class,
        eval_per_class: a.eval_per_class,
        seed: a.seed,
    };
    spec.validate()?;
    ensure_writable_dir(&a.out)?;
    let manifest = synth_dataset(&spec, &a.out)?;
    println!("manifest: {}", a.out.join("manifest.csv").display());
    for split in [Split::Train, Split::Dev, Split::Eval] {
        println!("{}: {} utterances", split.as_str(), manifest.split_entries(split).len());
    }
    Ok(())
}

/// Applies augmentations in the fixed order speed, then volume, then noise.
fn cmd_augment(a: AugmentArgs) -> Result<()> {
    if !(a.speed.is_finite() && a.speed > 0.0) {
        return Err(Error::Config(format!(
            "--speed must be a positive finite factor, got {}",
            a.speed
        )));
    }
    if !(a.volume.is_finite() && a.volume >= 0.0) {
        return Err(Error::Config(format!(
            "--volume must be a non-negative finite factor, got {}",
            a.volume
        )));
    }
    let mix = match (&a.noise, a.snr) {
        (Some(p), Some(snr)) if snr.is_finite() => Some((p.clone(), snr)),
        (Some(_), Some(snr)) => {
            return Err(Error::Config(format!("--snr must be finite, got {snr}")))
        }
        (Some(_), None) => return Err(Error::Config("--noise requires --snr".into())),
        (None, Some(_)) => return Err(Error::Config("--snr requires --noise".into())),
        (None, None) => None,
    };
    let w = load_wav(&a.input)?;
    let w = speed_perturb(&w, a.speed)?;
    let w = volume_perturb(&w, a.volume)?;
    let w = match mix {
        Some((path, snr)) => {
            let noise = load_wav(&path)?;
            mix_noise(&w, &noise, snr, a.seed)?
        }
        None => w,
    };
    write_wav(&a.out, &w)?;
    println!("wrote {} ({:.3} s)", a.out.display(), w.duration_secs());
    Ok(())
}

fn cmd_featurize(a: FeaturizeArgs, overrides: &[String]) -> Result<()> {
    let cfg = load_run_config(a.config.as_deref(), overrides)?;
    let w = load_wav(&a.input)?;
    let fb = fbank(&w, &cfg.data.fbank)?;
    write_fbank(&a.out, &fb)?;
    println!("wrote {} ({} frames x {} mels)", a.out.display(), fb.n_frames(), fb.n_mels());
    Ok(())
}

fn cmd_pretrain(a: RunArgs, overrides: &[String]) -> Result<()> {
    let cfg = load_run_config(a.config.as_deref(), overrides)?;
    let out_dir = resolve_out_dir(a.out, "pretrain", cfg.train.seed)?;
    persist_config(&cfg, &out_dir)?;
    let builder = build_builder(&cfg, &cfg.model)?;
    let outcome = pretrain(&builder, &cfg.model, &cfg.train, &out_dir)?;
    println!("metrics: {}", outcome.metrics_path.display());
    println!("final checkpoint: {}", outcome.final_checkpoint.display());
    println!("final l_ul: {:.6}", outcome.final_l_ul);
    Ok(())
}

fn cmd_finetune(a: FinetuneArgs, overrides: &[String]) -> Result<()> {
    let cfg = load_run_config(a.run.config.as_deref(), overrides)?;
    let out_dir = resolve_out_dir(a.run.out, "finetune", cfg.train.seed)?;
    persist_config(&cfg, &out_dir)?;
    let builder = build_builder(&cfg, &cfg.model)?;
    let outcome = finetune(&builder, &cfg.model, &cfg.train, a.init_from.as_deref(), &out_dir)?;
    println!("metrics: {}", outcome.metrics_path.display());
    println!("summary: {}", outcome.summary_path.display());
    println!("best dev accuracy: {:.4} at step {}", outcome.best_dev_acc, outcome.best_step);
    Ok(())
}

/// What `eval` prints: one JSON object on one line.
#[derive(Debug, Serialize, Deserialize)]
pub struct EvalOutput {
    pub accuracy: f64,
    pub n: usize,
    pub split: String,
    pub checkpoint: PathBuf,
    pub confusion: Vec<Vec<usize>>,
}

fn cmd_eval(a: EvalArgs, overrides: &[String]) -> Result<()> {
    let cfg = load_run_config(a.config.as_deref(), overrides)?;
    let split = Split::parse(&a.split).map_err(|_| {
        Error::Config(format!("--split must be train, dev, or eval, got '{}'", a.split))
    })?;
    let params = load_checkpoint(&a.checkpoint)?;
    let builder = build_builder(&cfg, &params.config)?;
    let EvalReport { accuracy, n, confusion } = evaluate(&params, &builder, split)?;
    let out = EvalOutput { accuracy, n, split: a.split, checkpoint: a.checkpoint, confusion };
    let json = serde_json::to_string(&out).map_err(|e| Error::Parse(e.to_string()))?;
    println!("{json}");
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs, overrides: &[String]) -> Result<()> {
    let cfg = load_run_config(a.config.as_deref(), overrides)?;
    let model_cfg = if a.full { cfg.model.clone() } else { ModelConfig::reduced() };
    let report = grad_check(&model_cfg, cfg.train.seed, a.coords_per_objective)?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Parse(e.to_string()))?;
    if let Some(out) = &a.out {
        ensure_writable_dir(out)?;
        fs::write(out.join("gradcheck_report.json"), format!("{json}\n"))?;
    }
    println!("{json}");
    if !report.passed {
        let uncovered = report
            .objectives
            .iter()
            .flat_map(|o| o.tensors.iter())
            .filter(|t| t.coords == 0)
            .count();
        if uncovered > 0 {
            return Err(Error::Domain(format!(
                "gradient check failed: {uncovered} tensor entries were never probed; \
                 raise --coords-per-objective to at least the tensor count"
            )));
        }
        let worst = report
            .objectives
            .iter()
            .map(|o| o.max_rel_err)
            .fold(0.0, f64::max);
        return Err(Error::Domain(format!(
            "gradient check failed: max relative error {worst:.3e} exceeds {}",
            report.tolerance
        )));
    }
    Ok(())
}

fn cmd_sweep(a: SweepArgs, overrides: &[String]) -> Result<()> {
    let cfg = load_run_config(a.config.as_deref(), overrides)?;
    let out_dir = resolve_out_dir(a.out, "sweep", cfg.train.seed)?;
    persist_config(&cfg, &out_dir)?;
    let builder = build_builder(&cfg, &cfg.model)?;
    let rows = step_sweep(&builder, &cfg.model, &cfg.train, &a.pretrain_steps, &a.seeds, &out_dir)?;
    for row in &rows {
        println!(
            "pretrain {:>6} steps: mean eval accuracy {:.4} over {} seeds",
            row.pretrain_steps,
            row.mean_accuracy,
            row.seeds.len()
        );
    }
    println!("table: {}", out_dir.join(SWEEP_FILE).display());
    Ok(())
}
