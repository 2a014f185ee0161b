//! Command-line surface. `main.rs` only parses arguments and maps errors to
//! exit codes; everything else lives here so the test suites can reach it.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::thread;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::checkpoint::{Artifact, Checkpoint};
use crate::config::RunConfig;
use crate::dataset::synthetic::{generate_synthetic, toy_glove, Signal, SyntheticSpec, DEFAULT_DIM};
use crate::dataset::{filter_and_label, load_jsonl, save_jsonl, LoadMode, QualityDataset, COMPONENT_LABELS};
use crate::embeddings::{ComponentEmbeddings, GloveTable};
use crate::error::{Error, Result};
use crate::features::{EasyWords, FeatureExtractor, HeuristicChecker, WordLists, FEATURE_NAMES};
use crate::models::{ModelKind, RatingModel};
use crate::pipeline::{prepare_splits, pretrain_qdqe, run_model, PreparedSplits};
use crate::qdqe::{triple_accuracy, triples_for, QdqeEncoder};
use crate::training::{
    build_examples, classify_extremes, evaluate, predict_examples, qdqe_items, rating_histogram, Example,
    HISTOGRAM_WIDTH,
};

pub const EXIT_CODES: &str = "\
Exit codes:
  0  success
  1  internal error
  2  usage error: unknown flag, missing or invalid argument
  3  a file could not be read or written
  4  invalid input: schema violation, malformed JSON or CSV, empty dataset, bad checkpoint
  5  training diverged (non-finite loss)
  6  configuration or dependency error (e.g. deepqr without an encoder checkpoint)";

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidArgument(_) => 2,
        Error::Io { .. } => 3,
        Error::Parse { .. }
        | Error::Validation(_)
        | Error::EmptyDataset(_)
        | Error::Checkpoint(_)
        | Error::Json(_)
        | Error::Csv(_) => 4,
        Error::Diverged { .. } => 5,
        Error::Config(_) => 6,
        _ => 1,
    }
}

#[derive(Debug, Parser)]
#[command(name = "qrate", version, about = "Rate the quality of multiple-choice questions", after_help = EXIT_CODES)]
pub struct Cli {
    /// JSON run configuration; flags take precedence over its values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset with a planted rating signal and matching word vectors.
    GenSynthetic(GenArgs),
    /// Write the 18 explicit features of every question as CSV.
    ExtractFeatures(ExtractArgs),
    /// Contrastively pre-train the question encoder used by deepqr.
    QdqePretrain(PretrainArgs),
    /// Train a rating model and score it on the held-out split.
    Train(TrainArgs),
    /// Score a checkpoint on one split of a dataset.
    Evaluate(EvaluateArgs),
    /// Predict ratings for (possibly unlabelled) questions.
    Predict(PredictArgs),
    /// Write the 7x7 component attention of each question as CSV.
    ExportAttention(ExportAttentionArgs),
    /// Write the component embeddings of each question as CSV.
    ExportEmbeddings(ExportEmbeddingsArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// length-linear, correlation or vocabulary-split.
    #[arg(long)]
    pub signal: Signal,
    #[arg(long, default_value_t = 500)]
    pub n: usize,
    #[arg(long, default_value_t = 2021)]
    pub seed: u64,
    /// Standard deviation of the label noise.
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    /// Width of the generated word vectors.
    #[arg(long, default_value_t = DEFAULT_DIM)]
    pub dim: usize,
    /// Output JSONL file.
    #[arg(long)]
    pub out: PathBuf,
    /// Word-vector output; defaults to `<out>.glove.txt` next to the dataset.
    #[arg(long)]
    pub glove_out: Option<PathBuf>,
}

/// Inputs shared by every command that reads a dataset.
#[derive(Debug, Args, Default)]
pub struct DataArgs {
    /// Question file (JSONL). `train` accepts several.
    #[arg(long = "dataset", value_name = "FILE")]
    pub datasets: Vec<PathBuf>,
    /// Word vectors in GloVe text format.
    #[arg(long)]
    pub glove: Option<PathBuf>,
    /// Drop questions with fewer ratings than this.
    #[arg(long)]
    pub min_ratings: Option<usize>,
    /// Seed for the split and all initialisation.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Embedding width; must match the word vectors when both are given.
    #[arg(long)]
    pub d_em: Option<usize>,
    /// Easy-word list for the Spache index, one word per line.
    #[arg(long)]
    pub spache_list: Option<PathBuf>,
    /// Familiar-word list for the Dale-Chall index.
    #[arg(long)]
    pub dale_chall_list: Option<PathBuf>,
    /// Skip malformed lines instead of failing.
    #[arg(long)]
    pub lenient: bool,
}

impl DataArgs {
    fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        match self.datasets.as_slice() {
            [] => {}
            [one] => cfg.dataset = Some(one.clone()),
            _ => return Err(Error::InvalidArgument("this command takes a single --dataset".into())),
        }
        self.apply_shared(cfg);
        Ok(())
    }

    fn apply_shared(&self, cfg: &mut RunConfig) {
        set(&mut cfg.glove, self.glove.clone().map(Some));
        set(&mut cfg.min_ratings, self.min_ratings);
        set(&mut cfg.seed, self.seed);
        set(&mut cfg.d_em, self.d_em.map(Some));
        set(&mut cfg.spache_list, self.spache_list.clone().map(Some));
        set(&mut cfg.dale_chall_list, self.dale_chall_list.clone().map(Some));
        cfg.lenient |= self.lenient;
    }
}

#[derive(Debug, Args, Default)]
pub struct OutputArgs {
    /// Root for timestamped run directories.
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Write into this directory instead of a timestamped one.
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Keep every question, not only those with enough ratings.
    #[arg(long)]
    pub all: bool,
    /// Output CSV; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub output: OutputArgs,
    /// Questions taken from each end of the rating order for training triples.
    #[arg(long)]
    pub c: Option<usize>,
    /// The same for validation triples.
    #[arg(long)]
    pub c_val: Option<usize>,
    /// InfoNCE temperature.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Encoder training epochs (default 10).
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Adam step size (default 1e-3).
    #[arg(long, visible_alias = "lr")]
    pub learning_rate: Option<f64>,
    /// Epochs between learning-rate decays (default 3).
    #[arg(long)]
    pub step_size: Option<usize>,
    /// Learning-rate decay factor (default 0.7).
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Dropout probability (default 0.5).
    #[arg(long)]
    pub dropout: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub output: OutputArgs,
    /// edf-solo, edf-enriched, sf, combined or deepqr.
    #[arg(long)]
    pub model: Option<ModelKind>,
    /// Encoder from `qdqe-pretrain`; required for deepqr.
    #[arg(long)]
    pub qdqe_checkpoint: Option<PathBuf>,
    /// Keep training the encoder instead of freezing it.
    #[arg(long)]
    pub qdqe_finetune: bool,
    /// Train on every --dataset concurrently.
    #[arg(long)]
    pub parallel_datasets: bool,
    /// Training epochs (default 50).
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Mini-batch size (default 16).
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Adam step size (default 1e-3).
    #[arg(long, visible_alias = "lr")]
    pub learning_rate: Option<f64>,
    /// Epochs between learning-rate decays (default 3).
    #[arg(long)]
    pub step_size: Option<usize>,
    /// Learning-rate decay factor (default 0.7).
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Dropout probability (default 0.5).
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Width of the correlation projection (default 7).
    #[arg(long)]
    pub d_scqc: Option<usize>,
    /// Width of the feature encoder (default 16).
    #[arg(long)]
    pub d_sf: Option<usize>,
    /// Start the output bias at the mean training label.
    #[arg(long, value_name = "BOOL")]
    pub init_bias_to_mean: Option<bool>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitName {
    Train,
    Val,
    Test,
    All,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Rating-model checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitName,
    /// Also write the result JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Output CSV; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportAttentionArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Directory receiving one `<id>.csv` per question.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExportEmbeddingsArgs {
    /// Rating-model or encoder checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Output CSV; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

/// Defaults, then `base` (a checkpoint's echoed config), then the config
/// file, then flags (applied by the caller).
fn layered(base: Option<&Value>, file: Option<&Path>) -> Result<RunConfig> {
    let mut merged = RunConfig::default().to_json();
    let mut overlay = |v: &Value| {
        if let (Value::Object(dst), Value::Object(src)) = (&mut merged, v) {
            for (k, v) in src {
                dst.insert(k.clone(), v.clone());
            }
        }
    };
    if let Some(b) = base {
        overlay(b);
    }
    if let Some(path) = file {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let v: Value = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if !v.is_object() {
            return Err(Error::Config(format!("{}: expected a JSON object", path.display())));
        }
        overlay(&v);
    }
    serde_json::from_value(merged).map_err(|e| Error::Config(e.to_string()))
}

fn load_dataset(path: &Path, cfg: &RunConfig) -> Result<QualityDataset> {
    let mode = if cfg.lenient { LoadMode::Lenient } else { LoadMode::Strict };
    let report = load_jsonl(path, mode)?;
    if !report.skipped.is_empty() {
        log::warn!("{}: skipped {} malformed lines", path.display(), report.skipped.len());
    }
    Ok(report.dataset)
}

fn dataset_path(cfg: &RunConfig) -> Result<&Path> {
    cfg.dataset
        .as_deref()
        .ok_or_else(|| Error::InvalidArgument("--dataset is required".into()))
}

fn extractor(cfg: &RunConfig) -> Result<FeatureExtractor> {
    let list = |path: &Option<PathBuf>, fallback: fn() -> EasyWords| match path {
        Some(p) => EasyWords::load(p),
        None => Ok(fallback()),
    };
    let lists = WordLists {
        dale_chall: list(&cfg.dale_chall_list, EasyWords::dale_chall)?,
        spache: list(&cfg.spache_list, EasyWords::spache)?,
    };
    Ok(FeatureExtractor::new(Box::new(HeuristicChecker), lists))
}

fn load_glove(cfg: &RunConfig, required_by: Option<&str>) -> Result<Option<GloveTable>> {
    match (&cfg.glove, required_by) {
        (Some(p), _) => {
            let g = GloveTable::load(p)?;
            if let Some(d) = cfg.d_em {
                if d != g.dim() {
                    return Err(Error::Config(format!(
                        "d_em = {d} but {} has width {} after padding",
                        p.display(),
                        g.dim()
                    )));
                }
            }
            Ok(Some(g))
        }
        (None, Some(who)) => Err(Error::Config(format!("{who} needs word vectors; pass --glove"))),
        (None, None) => Ok(None),
    }
}

/// Width used when no word vectors are loaded (EDF-only models never read it).
const PLACEHOLDER_WIDTH: usize = 4;

fn embedding_width(cfg: &RunConfig, glove: Option<&GloveTable>) -> usize {
    glove.map(GloveTable::dim).or(cfg.d_em).unwrap_or(PLACEHOLDER_WIDTH)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "dataset".into())
}

/// `<output_dir>/<dataset>/<name>/<timestamp>`, or the explicit override.
fn run_directory(cfg: &RunConfig, output: &OutputArgs, dataset: &Path, name: &str, multi: bool) -> Result<PathBuf> {
    let dir = match &output.run_dir {
        Some(d) if multi => d.join(stem(dataset)),
        Some(d) => d.clone(),
        None => {
            let base = cfg.output_dir.join(stem(dataset)).join(name);
            let ts = chrono::Local::now().format("%Y%m%d-%H%M%S%.3f").to_string();
            let mut dir = base.join(&ts);
            let mut k = 1;
            while dir.exists() {
                dir = base.join(format!("{ts}-{k}"));
                k += 1;
            }
            dir
        }
    };
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Sidecar next to a free-standing output file: `<file>.meta.json`.
fn write_sidecar(path: &Path, meta: Value) -> Result<()> {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    write_json(&path.with_file_name(name), &meta)
}

fn csv_writer(out: Option<&Path>) -> Result<csv::Writer<Box<dyn Write>>> {
    let sink: Box<dyn Write> = match out {
        Some(p) => Box::new(io::BufWriter::new(fs::File::create(p).map_err(|e| Error::io(p, e))?)),
        None => Box::new(io::stdout().lock()),
    };
    Ok(csv::Writer::from_writer(sink))
}

fn num(v: f64) -> String {
    format!("{v}")
}

/// File-name-safe version of a question id.
fn safe_name(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect()
}

pub fn run(cli: Cli) -> Result<()> {
    let file = cli.config.as_deref();
    match cli.command {
        Command::GenSynthetic(a) => gen_synthetic(a),
        Command::ExtractFeatures(a) => extract_features(a, file),
        Command::QdqePretrain(a) => qdqe_pretrain(a, file),
        Command::Train(a) => train(a, file),
        Command::Evaluate(a) => evaluate_cmd(a, file),
        Command::Predict(a) => predict(a, file),
        Command::ExportAttention(a) => export_attention(a, file),
        Command::ExportEmbeddings(a) => export_embeddings(a, file),
    }
}

fn gen_synthetic(a: GenArgs) -> Result<()> {
    let spec = SyntheticSpec::new(a.signal, a.n).with_noise(a.noise).with_dim(a.dim);
    let ds = generate_synthetic(&spec, a.seed)?;
    save_jsonl(&ds, &a.out)?;
    let glove_out = a.glove_out.unwrap_or_else(|| a.out.with_extension("glove.txt"));
    toy_glove(a.dim)?.save(&glove_out)?;
    write_sidecar(&a.out, json!({ "seed": a.seed, "spec": spec, "glove": glove_out }))?;
    println!("{}", a.out.display());
    println!("{}", glove_out.display());
    Ok(())
}

fn extract_features(a: ExtractArgs, file: Option<&Path>) -> Result<()> {
    let mut cfg = layered(None, file)?;
    a.data.apply(&mut cfg)?;
    cfg.validate()?;
    let mut ds = load_dataset(dataset_path(&cfg)?, &cfg)?;
    if !a.all {
        ds = filter_and_label(&ds, cfg.min_ratings)?;
    }
    let ex = extractor(&cfg)?;
    let mut w = csv_writer(a.out.as_deref())?;
    let mut header = vec!["id", "label"];
    header.extend(FEATURE_NAMES);
    w.write_record(&header)?;
    for r in &ds.records {
        let edf = ex.extract(r)?.to_array();
        let mut row = vec![r.id.clone(), r.label().map(num).unwrap_or_default()];
        row.extend(edf.iter().map(|&v| num(v)));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(a.out.clone().unwrap_or_default(), e))?;
    if let Some(out) = &a.out {
        write_sidecar(out, json!({ "seed": cfg.seed, "filtered": !a.all, "config": cfg.to_json() }))?;
    }
    Ok(())
}

fn qdqe_pretrain(a: PretrainArgs, file: Option<&Path>) -> Result<()> {
    let mut cfg = layered(None, file)?;
    a.data.apply(&mut cfg)?;
    set(&mut cfg.output_dir, a.output.output_dir.clone());
    set(&mut cfg.c, a.c);
    set(&mut cfg.c_val, a.c_val);
    set(&mut cfg.tau, a.tau);
    set(&mut cfg.qdqe_epochs, a.epochs);
    set(&mut cfg.learning_rate, a.learning_rate);
    set(&mut cfg.step_size, a.step_size);
    set(&mut cfg.gamma, a.gamma);
    set(&mut cfg.dropout, a.dropout);
    cfg.validate()?;

    let path = dataset_path(&cfg)?.to_path_buf();
    let glove = load_glove(&cfg, Some("qdqe-pretrain"))?;
    let ds = load_dataset(&path, &cfg)?;
    let d_em = embedding_width(&cfg, glove.as_ref());
    let splits = prepare_splits(&ds, cfg.min_ratings, &extractor(&cfg)?, glove.as_ref(), d_em, cfg.seed)?;
    let qcfg = cfg.qdqe_config(d_em);
    let (encoder, report) = pretrain_qdqe(&splits, &qcfg, cfg.seed)?;

    // Held-out check on the test split with the validation triple budget.
    let test = qdqe_items(&splits.test);
    let c_test = cfg.c_val.min(test.len().saturating_sub(1) / 2);
    let held_out = if c_test > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(3));
        let set = triples_for(&test, c_test, &mut rng)?;
        let (accuracy, gap) = triple_accuracy(&encoder, &test, &set)?;
        json!({ "c": c_test, "triples": set.len(), "accuracy": accuracy, "mean_gap": gap })
    } else {
        Value::Null
    };

    let dir = run_directory(&cfg, &a.output, &path, "qdqe", false)?;
    let ckpt_path = dir.join("encoder.json");
    Checkpoint::from_encoder(&encoder, cfg.seed, cfg.to_json()).save(&ckpt_path)?;
    write_json(&dir.join("config.json"), &cfg)?;
    write_json(
        &dir.join("report.json"),
        &json!({ "seed": cfg.seed, "report": report, "test_triples": held_out, "config": cfg.to_json() }),
    )?;
    println!("{}", ckpt_path.display());
    Ok(())
}

fn train(a: TrainArgs, file: Option<&Path>) -> Result<()> {
    let mut cfg = layered(None, file)?;
    a.data.apply_shared(&mut cfg);
    set(&mut cfg.output_dir, a.output.output_dir.clone());
    set(&mut cfg.model, a.model);
    set(&mut cfg.qdqe_checkpoint, a.qdqe_checkpoint.clone().map(Some));
    cfg.qdqe_finetune |= a.qdqe_finetune;
    set(&mut cfg.epochs, a.epochs);
    set(&mut cfg.batch_size, a.batch_size);
    set(&mut cfg.learning_rate, a.learning_rate);
    set(&mut cfg.step_size, a.step_size);
    set(&mut cfg.gamma, a.gamma);
    set(&mut cfg.dropout, a.dropout);
    set(&mut cfg.d_scqc, a.d_scqc);
    set(&mut cfg.d_sf, a.d_sf);
    set(&mut cfg.init_bias_to_mean, a.init_bias_to_mean);
    cfg.validate()?;

    let datasets = if a.data.datasets.is_empty() {
        vec![dataset_path(&cfg)?.to_path_buf()]
    } else {
        a.data.datasets.clone()
    };
    if cfg.model == ModelKind::DeepQr && cfg.qdqe_checkpoint.is_none() {
        return Err(Error::Config(
            "deepqr needs a pre-trained encoder: run `qrate qdqe-pretrain` first and pass its encoder.json via --qdqe-checkpoint"
                .into(),
        ));
    }
    let multi = datasets.len() > 1;
    let job = |path: &PathBuf| {
        let mut cfg = cfg.clone();
        cfg.dataset = Some(path.clone());
        train_one(&cfg, &a.output, multi)
    };
    let results: Vec<Result<PathBuf>> = if a.parallel_datasets && multi {
        thread::scope(|s| {
            let handles: Vec<_> = datasets.iter().map(|p| s.spawn(move || job(p))).collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::Config("training thread panicked".into()))))
                .collect()
        })
    } else {
        datasets.iter().map(job).collect()
    };
    let mut first_err = None;
    for r in results {
        match r {
            Ok(dir) => println!("{}", dir.display()),
            Err(e) => {
                if multi {
                    log::error!("{e}");
                }
                first_err.get_or_insert(e);
            }
        }
    }
    first_err.map_or(Ok(()), Err)
}

fn load_encoder(cfg: &RunConfig) -> Result<Option<QdqeEncoder>> {
    match (cfg.model, &cfg.qdqe_checkpoint) {
        (ModelKind::DeepQr, Some(p)) => Ok(Some(Checkpoint::load(p)?.to_encoder()?)),
        _ => Ok(None),
    }
}

fn train_one(cfg: &RunConfig, output: &OutputArgs, multi: bool) -> Result<PathBuf> {
    let path = dataset_path(cfg)?;
    let kind = cfg.model;
    let encoder = load_encoder(cfg)?;
    let glove = load_glove(cfg, kind.uses_embeddings().then_some(kind.name()))?;
    let d_em = embedding_width(cfg, glove.as_ref());
    if let Some(enc) = &encoder {
        if enc.config().d != d_em {
            return Err(Error::Config(format!(
                "encoder width {} does not match the word vectors ({d_em})",
                enc.config().d
            )));
        }
    }
    let ds = load_dataset(path, cfg)?;
    let splits = prepare_splits(&ds, cfg.min_ratings, &extractor(cfg)?, glove.as_ref(), d_em, cfg.seed)?;
    let (model, mut outcome) = run_model(&splits, cfg.model_config(kind, d_em), encoder.as_ref(), &cfg.train_config())?;
    outcome.report.config = cfg.to_json();

    let dir = run_directory(cfg, output, path, kind.name(), multi)?;
    Checkpoint::from_model(&model, cfg.seed, cfg.to_json()).save(&dir.join("checkpoint.json"))?;
    write_json(&dir.join("config.json"), cfg)?;
    write_json(&dir.join("report.json"), &outcome.report)?;
    let table = outcome.report.to_table();
    fs::write(dir.join("report.txt"), &table).map_err(|e| Error::io(dir.join("report.txt"), e))?;

    let pred_path = dir.join("predictions.csv");
    let mut w = csv_writer(Some(&pred_path))?;
    w.write_record(["id", "label", "prediction"])?;
    for (ex, p) in splits.test.iter().zip(&outcome.test_predictions) {
        w.write_record([ex.id.clone(), num(ex.label), num(*p)])?;
    }
    w.flush().map_err(|e| Error::io(&pred_path, e))?;

    let labels: Vec<f64> = splits.test.iter().map(|e| e.label).collect();
    write_json(
        &dir.join("histogram.json"),
        &json!({
            "seed": cfg.seed,
            "bin_width": HISTOGRAM_WIDTH,
            "labels": rating_histogram(&labels),
            "predictions": rating_histogram(&outcome.test_predictions),
            "config": cfg.to_json(),
        }),
    )?;
    log::info!("{}", table);
    Ok(dir)
}

/// Effective configuration for commands that start from a checkpoint.
fn checkpoint_config(ckpt: &Checkpoint, data: &DataArgs, file: Option<&Path>) -> Result<RunConfig> {
    let base = ckpt.config.is_object().then_some(&ckpt.config);
    let mut cfg = layered(base, file)?;
    data.apply(&mut cfg)?;
    cfg.validate()?;
    Ok(cfg)
}

fn model_glove(model: &RatingModel, cfg: &RunConfig) -> Result<Option<GloveTable>> {
    let kind = model.kind();
    let glove = load_glove(cfg, kind.uses_embeddings().then_some(kind.name()))?;
    if let Some(g) = &glove {
        if kind.uses_embeddings() && g.dim() != model.config().d_em {
            return Err(Error::Config(format!(
                "checkpoint expects {}-wide embeddings, word vectors have {}",
                model.config().d_em,
                g.dim()
            )));
        }
    }
    Ok(glove)
}

fn unfiltered_examples(cfg: &RunConfig, glove: Option<&GloveTable>, d_em: usize) -> Result<Vec<Example>> {
    let ds = load_dataset(dataset_path(cfg)?, cfg)?;
    build_examples(&ds.records, &extractor(cfg)?, glove, d_em)
}

fn evaluate_cmd(a: EvaluateArgs, file: Option<&Path>) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let model = ckpt.to_model()?;
    let cfg = checkpoint_config(&ckpt, &a.data, file)?;
    let glove = model_glove(&model, &cfg)?;
    let ds = load_dataset(dataset_path(&cfg)?, &cfg)?;
    let PreparedSplits {
        train,
        val,
        test,
        label_mean,
        label_std,
    } = prepare_splits(&ds, cfg.min_ratings, &extractor(&cfg)?, glove.as_ref(), model.config().d_em, cfg.seed)?;
    let examples = match a.split {
        SplitName::Train => train,
        SplitName::Val => val,
        SplitName::Test => test,
        SplitName::All => [train, val, test].concat(),
    };
    if examples.is_empty() {
        return Err(Error::EmptyDataset("the selected split is empty".into()));
    }
    let preds = predict_examples(&model, &examples)?;
    let labels: Vec<f64> = examples.iter().map(|e| e.label).collect();
    let metrics = evaluate(&preds, &labels)?;
    let extremes = if label_std > 0.0 {
        Some(classify_extremes(&preds, &labels, label_mean, label_std)?)
    } else {
        None
    };
    let result = json!({
        "model": model.kind().name(),
        "split": format!("{:?}", a.split).to_lowercase(),
        "n": examples.len(),
        "mse": metrics.mse,
        "acc": metrics.acc,
        "extremes": extremes,
        "label_mean": label_mean,
        "label_std": label_std,
        "seed": cfg.seed,
        "config": cfg.to_json(),
    });
    if let Some(out) = &a.out {
        write_json(out, &result)?;
    }
    println!("{}", serde_json::to_string_pretty(&result)?);
    Ok(())
}

fn predict(a: PredictArgs, file: Option<&Path>) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let model = ckpt.to_model()?;
    let cfg = checkpoint_config(&ckpt, &a.data, file)?;
    let glove = model_glove(&model, &cfg)?;
    let examples = unfiltered_examples(&cfg, glove.as_ref(), model.config().d_em)?;
    let preds = predict_examples(&model, &examples)?;
    let mut w = csv_writer(a.out.as_deref())?;
    w.write_record(["id", "prediction"])?;
    for (ex, p) in examples.iter().zip(&preds) {
        w.write_record([ex.id.clone(), num(*p)])?;
    }
    w.flush().map_err(|e| Error::io(a.out.clone().unwrap_or_default(), e))?;
    if let Some(out) = &a.out {
        write_sidecar(out, json!({ "seed": cfg.seed, "checkpoint": a.checkpoint, "config": cfg.to_json() }))?;
    }
    Ok(())
}

fn export_attention(a: ExportAttentionArgs, file: Option<&Path>) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let model = ckpt.to_model()?;
    if !model.kind().uses_scqc() {
        return Err(Error::Config(format!(
            "{} has no component attention; use edf-enriched, combined or deepqr",
            model.kind()
        )));
    }
    let cfg = checkpoint_config(&ckpt, &a.data, file)?;
    let glove = model_glove(&model, &cfg)?;
    let examples = unfiltered_examples(&cfg, glove.as_ref(), model.config().d_em)?;
    fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    for ex in &examples {
        let co = model
            .attention(&ex.input)?
            .ok_or_else(|| Error::Config("model produced no attention".into()))?;
        let path = a.out_dir.join(format!("{}.csv", safe_name(&ex.id)));
        let mut w = csv_writer(Some(&path))?;
        let mut header = vec![""];
        header.extend(COMPONENT_LABELS);
        w.write_record(&header)?;
        for (i, label) in COMPONENT_LABELS.iter().enumerate() {
            let mut row = vec![label.to_string()];
            row.extend(co.data()[i * 7..(i + 1) * 7].iter().map(|&v| num(v)));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    write_json(
        &a.out_dir.join("config.json"),
        &json!({ "seed": cfg.seed, "checkpoint": a.checkpoint, "questions": examples.len(), "config": cfg.to_json() }),
    )?;
    Ok(())
}

fn export_embeddings(a: ExportEmbeddingsArgs, file: Option<&Path>) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let cfg = checkpoint_config(&ckpt, &a.data, file)?;
    let rows: Vec<(String, ComponentEmbeddings)> = match ckpt.artifact {
        Artifact::RatingModel => {
            let model = ckpt.to_model()?;
            if !model.kind().uses_embeddings() {
                return Err(Error::Config(format!("{} does not use embeddings", model.kind())));
            }
            let glove = model_glove(&model, &cfg)?;
            unfiltered_examples(&cfg, glove.as_ref(), model.config().d_em)?
                .into_iter()
                .map(|ex| Ok((ex.id.clone(), model.component_embeddings(&ex.input)?)))
                .collect::<Result<_>>()?
        }
        Artifact::QdqeEncoder => {
            let enc = ckpt.to_encoder()?;
            let glove = load_glove(&cfg, Some("export-embeddings"))?;
            unfiltered_examples(&cfg, glove.as_ref(), enc.config().d)?
                .into_iter()
                .map(|ex| Ok((ex.id.clone(), enc.component_embeddings(&ex.input.re)?)))
                .collect::<Result<_>>()?
        }
    };
    let mut w = csv_writer(a.out.as_deref())?;
    let d = rows.first().map_or(0, |(_, e)| e.dim());
    let mut header = vec!["id".to_string(), "component".to_string()];
    header.extend((0..d).map(|k| format!("e{k}")));
    w.write_record(&header)?;
    for (id, emb) in &rows {
        for (i, label) in COMPONENT_LABELS.iter().enumerate() {
            let mut row = vec![id.clone(), label.to_string()];
            row.extend(emb.row(i).iter().map(|&v| num(v)));
            w.write_record(&row)?;
        }
    }
    w.flush().map_err(|e| Error::io(a.out.clone().unwrap_or_default(), e))?;
    if let Some(out) = &a.out {
        write_sidecar(out, json!({ "seed": cfg.seed, "checkpoint": a.checkpoint, "config": cfg.to_json() }))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn command_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn layering_order() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.json");
        fs::write(&file, r#"{"epochs": 7, "gamma": 0.5}"#).unwrap();
        let base = json!({"epochs": 3, "seed": 9});
        let cfg = layered(Some(&base), Some(&file)).unwrap();
        assert_eq!((cfg.epochs, cfg.seed, cfg.gamma, cfg.batch_size), (7, 9, 0.5, 16));
        fs::write(&file, r#"{"epoch": 7}"#).unwrap();
        assert!(matches!(layered(None, Some(&file)), Err(Error::Config(_))));
    }

    #[test]
    fn exit_codes_are_distinct_per_category() {
        let io = Error::io("x", io::Error::from(io::ErrorKind::NotFound));
        let parse = Error::Parse {
            path: "x".into(),
            line: 1,
            message: "bad".into(),
        };
        let codes = [
            exit_code(&Error::InvalidArgument("a".into())),
            exit_code(&io),
            exit_code(&parse),
            exit_code(&Error::Diverged {
                epoch: 0,
                batch: 0,
                loss: f64::NAN,
            }),
            exit_code(&Error::Config("c".into())),
        ];
        assert_eq!(codes, [2, 3, 4, 5, 6]);
    }

    #[test]
    fn safe_names() {
        assert_eq!(safe_name("q-1/2 x"), "q-1_2_x");
    }
}
