//! Command implementations behind the `superocr` binary.
//!
//! Every command is a function of its config file, flags and input files.
//! Each output directory carries `artifacts.tsv`, the SHA-256 of every
//! file the commands wrote there.

pub mod config;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::net::TcpListener;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

pub use config::{ExperimentConfig, Split};

use crate::canvas::read_pnm;
use crate::decoder::{decode, Classifier, DecodeConfig};
use crate::edgesim::{quantize_model, DeviceClassifier, QuantNetwork, StreamChannel, DeviceServer};
use crate::error::{Error, Result};
use crate::eval::{emit_report, evaluate_subsets};
use crate::nn::Network;
use crate::oracles::OracleClassifier;
use crate::supergen::{build_training_set, meter_reading, SampleArchive};
use crate::taskgen::{gen_split, read_dataset, write_dataset, LabeledScene, Preset};
use crate::train::{checkpoint_load, checkpoint_save, CurveLog, Trainer};

pub const ARTIFACTS: &str = "artifacts.tsv";

#[derive(Debug, Parser)]
#[command(name = "superocr", version, about = "Detection-free fixed-length OCR experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a labeled scene dataset.
    Gen(GenArgs),
    /// Expand a dataset into prefix training samples.
    Expand(ExpandArgs),
    /// Train a network on a sample archive.
    Train(TrainArgs),
    /// Decode scenes into strings.
    Decode(DecodeArgs),
    /// Evaluate on one or more subset datasets.
    Eval(EvalArgs),
    /// Build an int8 device model from a checkpoint.
    Quantize(QuantizeArgs),
    /// Serve a device model over TCP.
    ServeDevice(ServeArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Scene count; defaults to the config size of the split.
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long, default_value = "clean")]
    pub subset: String,
    #[arg(long, default_value = "train")]
    pub split: String,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ExpandArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Dataset directories; their samples are concatenated in order.
    #[arg(long, required = true)]
    pub dataset: Vec<PathBuf>,
    /// Output archive file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub samples: PathBuf,
    /// Validation archive; enables best-model selection.
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, conflicts_with_all = ["oracle", "qmodel"])]
    pub checkpoint: Option<PathBuf>,
    /// Ground-truth classifier; requires a dataset.
    #[arg(long)]
    pub oracle: bool,
    /// Quantized model; runs in-process unless `--device` is given.
    #[arg(long, conflicts_with = "oracle")]
    pub qmodel: Option<PathBuf>,
    /// Device endpoint `host:port`; the host half comes from `--qmodel`.
    #[arg(long, requires = "qmodel")]
    pub device: Option<String>,
    #[arg(long, conflicts_with = "image")]
    pub dataset: Option<PathBuf>,
    /// A single scene image (PGM/PPM).
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Append the watermeter reading column.
    #[arg(long)]
    pub meter: bool,
    /// Predictions file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, conflicts_with_all = ["oracle", "qmodel"])]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub oracle: bool,
    #[arg(long, conflicts_with = "oracle")]
    pub qmodel: Option<PathBuf>,
    /// `name=DIR`, repeatable.
    #[arg(long = "subset", required = true)]
    pub subsets: Vec<String>,
    /// Training curve to chart alongside the metrics.
    #[arg(long)]
    pub curves: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Sample archive; the first `calib_samples` canvases calibrate.
    #[arg(long)]
    pub calib: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub qmodel: PathBuf,
    #[arg(long, default_value = "127.0.0.1:7878")]
    pub bind: String,
    /// Exit after this many connections.
    #[arg(long)]
    pub max_connections: Option<usize>,
}

/// Run one parsed command, logging progress to stderr.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(a) => cmd_gen(&a).map(|h| println!("{h}")),
        Command::Expand(a) => cmd_expand(&a).map(|h| println!("{h}")),
        Command::Train(a) => cmd_train(&a),
        Command::Decode(a) => cmd_decode(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Quantize(a) => cmd_quantize(&a).map(|h| println!("{h}")),
        Command::ServeDevice(a) => cmd_serve_device(&a),
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
        cfg.optim.seed = s;
    }
    Ok(cfg)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

/// Record `files` (inside `dir`) in `dir/artifacts.tsv`, replacing stale
/// entries and keeping the list sorted by path.
pub fn record_artifacts(dir: &Path, files: &[PathBuf]) -> Result<()> {
    let manifest = dir.join(ARTIFACTS);
    let mut entries = BTreeMap::new();
    if let Ok(text) = std::fs::read_to_string(&manifest) {
        for line in text.lines() {
            if let Some((p, h)) = line.split_once('\t') {
                entries.insert(p.to_string(), h.to_string());
            }
        }
    }
    for f in files {
        let rel = f.strip_prefix(dir).unwrap_or(f).to_string_lossy().replace('\\', "/");
        entries.insert(rel, sha256_file(f)?);
    }
    let mut out = String::new();
    for (p, h) in &entries {
        let _ = writeln!(out, "{p}\t{h}");
    }
    std::fs::write(manifest, out)?;
    Ok(())
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

/// Writes the dataset and returns its hash.
pub fn cmd_gen(a: &GenArgs) -> Result<String> {
    let cfg = load_config(&a.config, a.seed)?;
    let preset = Preset::parse(&a.subset)?;
    let split = Split::parse(&a.split)?;
    let count = a.count.unwrap_or(match split {
        Split::Train => cfg.train_scenes,
        Split::Val => cfg.val_scenes,
        Split::Test => cfg.test_scenes,
    });
    let scenes = gen_split(&cfg.task(preset), count, split.offset())?;
    let hash = write_dataset(&a.out, &scenes)?;
    std::fs::write(a.out.join("config.txt"), cfg.to_text())?;
    eprintln!("wrote {count} {} scenes ({}) to {}", a.subset, a.split, a.out.display());
    Ok(hash)
}

/// Writes the sample archive and returns its hash.
pub fn cmd_expand(a: &ExpandArgs) -> Result<String> {
    let cfg = load_config(&a.config, None)?;
    let alpha = cfg.alphabet()?;
    let layout = cfg.layout()?;
    let font = crate::canvas::GlyphFont::builtin(&alpha);
    let mut scenes = Vec::new();
    for d in &a.dataset {
        scenes.extend(read_dataset(d)?);
    }
    let archive = build_training_set(&scenes, &layout, &font, &alpha)?;
    if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let hash = archive.save(&a.out)?;
    record_artifacts(&parent_dir(&a.out), &[a.out.clone()])?;
    eprintln!("{} scenes -> {} samples", scenes.len(), archive.len());
    Ok(hash)
}

/// Writes `model.socm` (best on validation, else last), `last.socm` and
/// `curves.csv`. On failure the last good model goes to `last_good.socm`.
pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = load_config(&a.config, a.seed)?;
    let archive = SampleArchive::load(&a.samples)?;
    let val = a.val.as_deref().map(SampleArchive::load).transpose()?;
    std::fs::create_dir_all(&a.out)?;
    let mut trainer = Trainer::new(cfg.network()?, cfg.optim.clone(), &archive)?;
    let progress = |p: &crate::train::CurvePoint| {
        let val = p.val_acc.map(|v| format!(" val {v:.4}")).unwrap_or_default();
        eprintln!("iter {} loss {:.4} lr {:.3e}{val}", p.iter, p.loss, p.lr);
    };
    if let Err(e) = trainer.advance(val.as_ref(), progress) {
        let path = a.out.join("last_good.socm");
        checkpoint_save(trainer.network(), &path)?;
        trainer.curve().save(&a.out.join("curves.csv"))?;
        record_artifacts(&a.out, &[path.clone(), a.out.join("curves.csv")])?;
        eprintln!("training stopped: {e}; last good model saved to {}", path.display());
        return Err(e);
    }
    let outcome = trainer.finish();
    let files = [a.out.join("model.socm"), a.out.join("last.socm"), a.out.join("curves.csv")];
    checkpoint_save(&outcome.best, &files[0])?;
    checkpoint_save(&outcome.last, &files[1])?;
    outcome.curve.save(&files[2])?;
    std::fs::write(a.out.join("config.txt"), cfg.to_text())?;
    record_artifacts(&a.out, &[files[0].clone(), files[1].clone(), files[2].clone(), a.out.join("config.txt")])?;
    eprintln!("trained {} iterations; best validation accuracy {:?}", outcome.iterations, outcome.best_val_acc);
    Ok(())
}

enum Model {
    Float(Network),
    Quant(QuantNetwork),
    Oracle,
}

fn load_model(checkpoint: Option<&Path>, qmodel: Option<&Path>, oracle: bool) -> Result<Model> {
    match (checkpoint, qmodel, oracle) {
        (Some(c), None, false) => Ok(Model::Float(checkpoint_load(c)?)),
        (None, Some(q), false) => Ok(Model::Quant(QuantNetwork::load(q)?)),
        (None, None, true) => Ok(Model::Oracle),
        _ => Err(Error::invalid("give exactly one of --checkpoint, --qmodel or --oracle")),
    }
}

fn classifier<'a>(model: &'a Model, scenes: &[LabeledScene], cfg: &DecodeConfig) -> Box<dyn Classifier + 'a> {
    match model {
        Model::Float(n) => Box::new(n),
        Model::Quant(q) => Box::new(q.clone()),
        Model::Oracle => Box::new(OracleClassifier::new(cfg.alphabet.clone(), scenes)),
    }
}

/// One output line: `<scene_id> TAB <prediction> [TAB <reading>]`.
pub fn prediction_line(scene_id: u64, prediction: &[char], cfg: &DecodeConfig, meter: bool) -> Result<String> {
    let mut line = format!("{scene_id:016x}\t{}", prediction.iter().collect::<String>());
    if meter {
        let classes = cfg.alphabet.encode(prediction)?;
        line.push('\t');
        line.push_str(&meter_reading(&classes)?);
    }
    Ok(line)
}

pub fn cmd_decode(a: &DecodeArgs) -> Result<()> {
    let cfg = load_config(&a.config, None)?;
    let dcfg = cfg.decode_config()?;
    let scenes = match (&a.dataset, &a.image) {
        (Some(d), None) => read_dataset(d)?,
        (None, Some(p)) => {
            if a.oracle {
                return Err(Error::invalid("--oracle needs a labeled --dataset"));
            }
            vec![LabeledScene { image: read_pnm(p)?, label: Vec::new(), scene_id: 0 }]
        }
        _ => return Err(Error::invalid("give exactly one of --dataset or --image")),
    };
    let model = load_model(a.checkpoint.as_deref(), a.qmodel.as_deref(), a.oracle)?;
    let mut clf: Box<dyn Classifier + '_> = match (&a.device, &model) {
        (Some(addr), Model::Quant(q)) => Box::new(DeviceClassifier::new(StreamChannel::connect(addr)?, q.head.clone())),
        (Some(_), _) => return Err(Error::invalid("--device needs --qmodel for the host half")),
        (None, _) => classifier(&model, &scenes, &dcfg),
    };
    let mut out = String::new();
    for s in &scenes {
        let pred = decode(&s.image, s.scene_id, clf.as_mut(), &dcfg).map_err(|e| e.in_scene(s.scene_id))?;
        out.push_str(&prediction_line(s.scene_id, &pred, &dcfg, a.meter)?);
        out.push('\n');
    }
    match &a.out {
        Some(p) => {
            let dir = parent_dir(p);
            std::fs::create_dir_all(&dir)?;
            std::fs::write(p, &out)?;
            record_artifacts(&dir, &[p.clone()])?;
        }
        None => std::io::stdout().write_all(out.as_bytes())?,
    }
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let cfg = load_config(&a.config, None)?;
    let dcfg = cfg.decode_config()?;
    let mut subsets = Vec::new();
    for spec in &a.subsets {
        let (name, dir) = spec
            .split_once('=')
            .ok_or_else(|| Error::invalid(format!("--subset expects name=DIR, got {spec:?}")))?;
        subsets.push((name.to_string(), read_dataset(Path::new(dir))?));
    }
    let model = load_model(a.checkpoint.as_deref(), a.qmodel.as_deref(), a.oracle)?;
    let all: Vec<LabeledScene> = subsets.iter().flat_map(|(_, s)| s.iter().cloned()).collect();
    let (result, _) = evaluate_subsets(|| Ok(classifier(&model, &all, &dcfg)), &subsets, &dcfg)?;
    let curve = match &a.curves {
        Some(p) => CurveLog::load(p)?,
        None => CurveLog::default(),
    };
    let files = emit_report(&result, &curve, &a.out)?;
    record_artifacts(&a.out, &files)?;
    eprint!("{}", result.metrics_csv());
    Ok(())
}

/// Writes the quantized model and returns its hash.
pub fn cmd_quantize(a: &QuantizeArgs) -> Result<String> {
    let cfg = load_config(&a.config, None)?;
    let net = checkpoint_load(&a.checkpoint)?;
    let calib = SampleArchive::load(&a.calib)?;
    let images: Vec<_> = calib.samples.iter().take(cfg.calib_samples).map(|s| s.image.clone()).collect();
    let q = quantize_model(&net, &images)?;
    let dir = parent_dir(&a.out);
    std::fs::create_dir_all(&dir)?;
    q.save(&a.out)?;
    record_artifacts(&dir, &[a.out.clone()])?;
    sha256_file(&a.out)
}

pub fn cmd_serve_device(a: &ServeArgs) -> Result<()> {
    let q = QuantNetwork::load(&a.qmodel)?;
    let listener = TcpListener::bind(&a.bind).map_err(|e| Error::Transport(format!("cannot bind {}: {e}", a.bind)))?;
    let addr = listener.local_addr().map_err(|e| Error::Transport(e.to_string()))?;
    eprintln!("device listening on {addr}");
    DeviceServer::new(q.device).serve_tcp(listener, a.max_connections)
}
