//! Command-line front end: argument parsing, run configuration and the
//! subcommand drivers.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::baselines::{one_hot_inputs, train_forest, Cnn, CnnConfig, Forest, ForestConfig, Lstm, LstmConfig};
use crate::dataset::{
    dedup_fragments, fragment, fragments_to_dataset, greedy_cluster, split_clusters, FragmentLength, PartitionManifest,
    Split, Thresholds, DEFAULT_SPLIT_RATIO, FRAGMENT_LENGTHS, THRESHOLD_SWEEP,
};
use crate::error::{Error, ErrorKind, Result};
use crate::features::kmer_frequencies;
use crate::metrics::{EvaluationReport, Protocol, REPORT_SCHEMA};
use crate::model::checkpoint::{Checkpoint, CHECKPOINT_FORMAT_VERSION, CHECKPOINT_MAGIC};
use crate::model::{
    embed, few_shot_curve, fit, predict, pretrain_masked, zero_shot_classify, Classifier, ModelConfig,
    Transformer, TrainOutcome, TrainingPlan, DEFAULT_SHOTS,
};
use crate::report::{load_reports, write_bundle, AXIS_FRAGMENT_LENGTH, AXIS_THRESHOLD, TABLE_METRICS};
use crate::seqio::{self, Dataset, LabelManifest, LabelOptions, DATASET_FASTA, DATASET_LABELS};
use crate::synth::{
    generate_composition_dataset, generate_family_dataset, generate_motif_dataset, CompositionSpec, FamilySpec,
    SyntheticSpec,
};
use crate::tokenizer::{self, TokenSequence, TOKEN_STREAM_MAGIC};

/// Relative output paths are resolved under this directory when set.
pub const OUTPUT_ROOT_ENV: &str = "GENOLM_OUTPUT_ROOT";

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_RUNTIME: i32 = 4;

pub const MODEL_CHECKPOINT: &str = "model.ckpt";
pub const FOREST_FILE: &str = "model.forest.json";
pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Parser)]
#[command(name = "genolm", about = "Genomic language-model toolkit", disable_version_flag = true)]
pub struct Cli {
    /// Print toolkit and file-format versions.
    #[arg(long)]
    pub version: bool,

    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = ArgAction::Count, global = true)]
    pub verbose: u8,

    /// Directory that relative output paths are resolved against.
    #[arg(long, env = OUTPUT_ROOT_ENV, global = true)]
    pub output_root: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Read FASTA files and a label manifest into a dataset directory.
    Ingest(IngestArgs),
    /// Generate a synthetic labelled dataset.
    Synth(SynthArgs),
    /// Cluster a dataset and assign whole clusters to train/test.
    Split(SplitArgs),
    /// Cut a dataset into fixed-length fragments.
    Fragment(FragmentArgs),
    /// Masked-token pretraining of the transformer.
    Pretrain(RunArgs),
    /// Train a classifier and score it on the test split.
    Train(RunArgs),
    /// Score a saved model on a dataset.
    Evaluate(EvaluateArgs),
    /// Cluster transformer embeddings and score the best label mapping.
    Zeroshot(RunArgs),
    /// Fine-tune on n examples per class for each requested n.
    Fewshot(RunArgs),
    /// Aggregate report files into CSV tables and SVG charts.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long, required = true, num_args = 1..)]
    pub fasta: Vec<PathBuf>,
    /// Two-column `id<TAB>label` manifest.
    #[arg(long)]
    pub labels: PathBuf,
    /// Keep records labelled in their FASTA header when the manifest lacks them.
    #[arg(long)]
    pub header_labels: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthKind {
    Motif,
    Family,
    Composition,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_enum, default_value = "motif")]
    pub kind: SynthKind,
    /// Generator spec as TOML or JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a spec field, e.g. `--set num_sequences=500`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, default_value_t = 0.8)]
    pub identity: f64,
    /// Defaults to the identity threshold.
    #[arg(long)]
    pub coverage: Option<f64>,
    #[arg(long, default_value_t = crate::dataset::similarity::DEFAULT_K)]
    pub k: usize,
    #[arg(long, default_value_t = DEFAULT_SPLIT_RATIO)]
    pub ratio: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Comma-separated thresholds; writes one manifest per value into `--out`.
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    pub sweep: Option<Vec<f64>>,
    /// Manifest file, or a directory with `--sweep`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FragmentArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Window length in bp (`150`, `5k`) or `whole`.
    #[arg(long)]
    pub length: Option<FragmentLength>,
    /// Every standard length plus whole genomes, each in its own directory.
    #[arg(long)]
    pub all_lengths: bool,
    /// Drop near-duplicate fragments at this identity/coverage threshold.
    #[arg(long)]
    pub dedup: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    #[default]
    Transformer,
    Cnn,
    Lstm,
    Forest,
}

impl ModelKind {
    fn name(self) -> &'static str {
        match self {
            ModelKind::Transformer => "transformer",
            ModelKind::Cnn => "cnn",
            ModelKind::Lstm => "lstm",
            ModelKind::Forest => "forest",
        }
    }
}

/// Flags shared by the training-style subcommands. Anything given here wins
/// over the config file.
#[derive(Debug, Args, Default)]
pub struct RunArgs {
    /// Run configuration (TOML or JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override any config field by dotted path, e.g. `--set plan.max_epochs=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Starting checkpoint (pretrained transformer or trained model).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub model: Option<ModelKind>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// `model.ckpt` or `model.forest.json` written by `train`.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    pub subset: Subset,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Subset {
    Train,
    Test,
    All,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(required = true)]
    pub reports: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub metrics: Option<Vec<String>>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Declarative description of a training, evaluation or sweep run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub split: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub output: PathBuf,
    pub model: ModelKind,
    pub transformer: ModelConfig,
    pub cnn: CnnConfig,
    pub lstm: LstmConfig,
    pub forest: ForestConfig,
    pub plan: TrainingPlan,
    /// Share of the training split held back for early stopping.
    pub validation_fraction: f64,
    pub freeze_backbone: bool,
    pub freeze_embeddings: bool,
    pub shots: Vec<usize>,
    /// Master seed, copied into every component.
    pub seed: u64,
    /// Optional sweep coordinate copied into reports, e.g. `{axis, value}`.
    pub sweep: Option<crate::report::SweepPoint>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: None,
            split: None,
            checkpoint: None,
            output: PathBuf::from("runs/default"),
            model: ModelKind::Transformer,
            transformer: ModelConfig::default(),
            cnn: CnnConfig::default(),
            lstm: LstmConfig::default(),
            forest: ForestConfig::default(),
            plan: TrainingPlan::default(),
            validation_fraction: 0.1,
            freeze_backbone: false,
            freeze_embeddings: false,
            shots: DEFAULT_SHOTS.to_vec(),
            seed: 0,
            sweep: None,
        }
    }
}

impl RunConfig {
    /// Loads a config file (or defaults), applies `--set` overrides and the
    /// dedicated flags, then propagates the master seed.
    pub fn resolve(args: &RunArgs) -> Result<Self> {
        let mut value = serde_json::to_value(RunConfig::default())?;
        if let Some(p) = &args.config {
            merge_into(&mut value, read_structured(p)?, "")?;
        }
        apply_overrides(&mut value, &args.set)?;
        let mut cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::invalid(format!("run config: {e}")))?;
        if let Some(p) = &args.dataset {
            cfg.dataset = Some(p.clone());
        }
        if let Some(p) = &args.split {
            cfg.split = Some(p.clone());
        }
        if let Some(p) = &args.checkpoint {
            cfg.checkpoint = Some(p.clone());
        }
        if let Some(m) = args.model {
            cfg.model = m;
        }
        if let Some(s) = args.seed {
            cfg.seed = s;
        }
        if let Some(o) = &args.out {
            cfg.output = o.clone();
        }
        cfg.plan.seed = cfg.seed;
        cfg.transformer.seed = cfg.seed;
        cfg.cnn.seed = cfg.seed;
        cfg.lstm.seed = cfg.seed;
        cfg.forest.seed = cfg.seed;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for p in [&self.dataset, &self.split, &self.checkpoint].into_iter().flatten() {
            if !p.exists() {
                return Err(Error::invalid(format!("path does not exist: {}", p.display())));
            }
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::invalid("validation_fraction must be in (0, 1)"));
        }
        if self.shots.is_empty() || self.shots.windows(2).any(|w| w[0] >= w[1]) || self.shots[0] == 0 {
            return Err(Error::invalid("shots must be positive and strictly ascending"));
        }
        self.plan.validate()
    }

    fn require_dataset(&self) -> Result<&Path> {
        self.dataset.as_deref().ok_or_else(|| Error::invalid("no dataset given (use --dataset)"))
    }
}

fn read_structured(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let is_json = path.extension().is_some_and(|e| e == "json") || text.trim_start().starts_with('{');
    if is_json {
        Ok(serde_json::from_str(&text)?)
    } else {
        let t: toml::Value =
            toml::from_str(&text).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
        Ok(serde_json::to_value(t)?)
    }
}

/// Deep-merges `patch` over `base`. Keys absent from a populated table in
/// `base` are rejected so that typos surface instead of being ignored.
pub fn merge_into(base: &mut Value, patch: Value, path: &str) -> Result<()> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) if !b.is_empty() => {
            for (k, v) in p {
                let here = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) => merge_into(slot, v, &here)?,
                    None => return Err(Error::invalid(format!("unknown config key `{here}`"))),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

/// Applies `a.b.c=value` overrides. Values are parsed as JSON when possible
/// and kept as strings otherwise.
pub fn apply_overrides(root: &mut Value, sets: &[String]) -> Result<()> {
    let schema = root.clone();
    for s in sets {
        let (key, raw) = s
            .split_once('=')
            .ok_or_else(|| Error::invalid(format!("override `{s}` is not KEY=VALUE")))?;
        let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut cur = &mut *root;
        let mut known = Some(&schema);
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            if !cur.is_object() {
                if cur.is_null() {
                    *cur = Value::Object(Default::default());
                } else {
                    return Err(Error::invalid(format!("override `{key}`: `{part}` is not inside a table")));
                }
            }
            let map = cur.as_object_mut().unwrap();
            // Tables that start out null (optional sections) accept any key;
            // the typed deserialisation afterwards has the final word.
            if let Some(Value::Object(k)) = known {
                known = k.get(*part);
                if known.is_none() {
                    return Err(Error::invalid(format!("override `{key}`: unknown key `{part}`")));
                }
            } else {
                known = None;
            }
            if i + 1 == parts.len() {
                map.insert(part.to_string(), parsed.clone());
                break;
            }
            cur = map.entry(part.to_string()).or_insert(Value::Null);
        }
    }
    Ok(())
}

/// A failure together with the pipeline stage it happened in.
#[derive(Debug)]
pub struct CliError {
    pub stage: Option<&'static str>,
    pub error: Error,
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match (self.error.kind(), self.stage) {
            (ErrorKind::DataConstraint, _) => EXIT_DATA,
            (ErrorKind::Runtime, _) | (_, Some(_)) => EXIT_RUNTIME,
            (ErrorKind::Input, None) => EXIT_INPUT,
        }
    }
}

impl From<Error> for CliError {
    fn from(error: Error) -> Self {
        CliError { stage: None, error }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.stage {
            Some(s) => write!(f, "stage `{s}` failed: {}", self.error),
            None => write!(f, "{}", self.error),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn stage<T>(name: &'static str, r: Result<T>) -> CliResult<T> {
    r.map_err(|error| CliError { stage: Some(name), error })
}

pub fn version_text() -> String {
    format!(
        "genolm {}\ncheckpoint {} (v{})\ntoken-stream {}\nreport {}\nforest {}\ntokenizer vocabulary {} tokens\n",
        env!("CARGO_PKG_VERSION"),
        String::from_utf8_lossy(CHECKPOINT_MAGIC),
        CHECKPOINT_FORMAT_VERSION,
        String::from_utf8_lossy(TOKEN_STREAM_MAGIC),
        REPORT_SCHEMA,
        crate::baselines::forest::FOREST_FORMAT,
        tokenizer::VOCAB_SIZE,
    )
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    if cli.version {
        print!("{}", version_text());
        return EXIT_OK;
    }
    let Some(cmd) = cli.command else {
        eprintln!("error: no subcommand given (see --help)");
        return EXIT_INPUT;
    };
    let ctx = Context {
        root: cli.output_root,
    };
    match dispatch(&ctx, cmd) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

struct Context {
    root: Option<PathBuf>,
}

impl Context {
    fn out(&self, p: &Path) -> PathBuf {
        match &self.root {
            Some(r) if p.is_relative() => r.join(p),
            _ => p.to_path_buf(),
        }
    }
}

fn dispatch(ctx: &Context, cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Ingest(a) => cmd_ingest(ctx, &a),
        Command::Synth(a) => cmd_synth(ctx, &a),
        Command::Split(a) => cmd_split(ctx, &a),
        Command::Fragment(a) => cmd_fragment(ctx, &a),
        Command::Pretrain(a) => cmd_pretrain(ctx, &a),
        Command::Train(a) => cmd_train(ctx, &a),
        Command::Evaluate(a) => cmd_evaluate(ctx, &a),
        Command::Zeroshot(a) => cmd_zeroshot(ctx, &a),
        Command::Fewshot(a) => cmd_fewshot(ctx, &a),
        Command::Report(a) => cmd_report(ctx, &a),
    }
}

fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(format!("creating {}", p.display()), e))
}

fn write_file(p: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
        mkdir(parent)?;
    }
    std::fs::write(p, bytes).map_err(|e| Error::io(format!("writing {}", p.display()), e))
}

fn write_json<T: Serialize>(p: &Path, v: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    write_file(p, s)
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn file_fingerprint(p: &Path) -> Result<String> {
    let bytes = std::fs::read(p).map_err(|e| Error::io(format!("reading {}", p.display()), e))?;
    Ok(sha256_hex(&bytes))
}

/// Content hash over a dataset directory's FASTA and label files.
pub fn dataset_fingerprint(dir: &Path) -> Result<String> {
    let mut h = Sha256::new();
    for name in [DATASET_FASTA, DATASET_LABELS] {
        let p = dir.join(name);
        let bytes = std::fs::read(&p).map_err(|e| Error::io(format!("reading {}", p.display()), e))?;
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

fn timestamp() -> String {
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    format!("unix:{secs}")
}

#[derive(Serialize)]
struct IngestSummary {
    records: usize,
    labelled: usize,
    dropped: usize,
    task: seqio::Task,
    total_bp: u64,
    min_length: usize,
    max_length: usize,
    label_counts: BTreeMap<String, usize>,
    length_histogram: Vec<(String, usize)>,
}

fn summarize(ds: &Dataset, stats: seqio::LabelStats) -> IngestSummary {
    let lengths: Vec<usize> = ds.records.iter().map(|r| r.length_bp()).collect();
    let mut label_counts = BTreeMap::new();
    for r in &ds.records {
        if let Some(l) = &r.label {
            *label_counts.entry(l.clone()).or_insert(0) += 1;
        }
    }
    let edges = FRAGMENT_LENGTHS;
    let mut hist: Vec<(String, usize)> = Vec::new();
    hist.push((format!("<{}", edges[0]), 0));
    for w in edges.windows(2) {
        hist.push((format!("{}-{}", w[0], w[1] - 1), 0));
    }
    hist.push((format!(">={}", edges[edges.len() - 1]), 0));
    for &l in &lengths {
        let bin = edges.iter().take_while(|&&e| l >= e).count();
        hist[bin].1 += 1;
    }
    IngestSummary {
        records: ds.len(),
        labelled: stats.labelled,
        dropped: stats.dropped,
        task: ds.task,
        total_bp: lengths.iter().map(|&l| l as u64).sum(),
        min_length: lengths.iter().copied().min().unwrap_or(0),
        max_length: lengths.iter().copied().max().unwrap_or(0),
        label_counts,
        length_histogram: hist,
    }
}

fn cmd_ingest(ctx: &Context, a: &IngestArgs) -> CliResult<()> {
    for p in a.fasta.iter().chain(std::iter::once(&a.labels)) {
        if !p.exists() {
            return Err(Error::invalid(format!("input not found: {}", p.display())).into());
        }
    }
    let manifest = LabelManifest::read(&a.labels)?;
    let records = seqio::read_fasta_files(&a.fasta)?;
    let opts = LabelOptions {
        header_fallback: a.header_labels,
    };
    let (ds, stats) = seqio::attach_labels(records.into_iter().map(Ok), &manifest, opts)?;
    let out = ctx.out(&a.out);
    seqio::write_dataset(&out, &ds)?;
    let summary = summarize(&ds, stats);
    write_json(&out.join("summary.json"), &summary)?;
    println!("{}", serde_json::to_string_pretty(&summary).map_err(Error::from)?);
    Ok(())
}

fn cmd_synth(ctx: &Context, a: &SynthArgs) -> CliResult<()> {
    let mut value = match a.kind {
        SynthKind::Motif => serde_json::to_value(SyntheticSpec::default()),
        SynthKind::Family => serde_json::to_value(FamilySpec::default()),
        SynthKind::Composition => serde_json::to_value(CompositionSpec::default()),
    }
    .map_err(Error::from)?;
    if let Some(p) = &a.config {
        merge_into(&mut value, read_structured(p)?, "")?;
    }
    apply_overrides(&mut value, &a.set)?;
    if let Some(seed) = a.seed {
        value["seed"] = json!(seed);
    }
    let bad = |e: serde_json::Error| Error::invalid(format!("synthetic spec: {e}"));
    let (ds, spec_json) = match a.kind {
        SynthKind::Motif => {
            let spec: SyntheticSpec = serde_json::from_value(value).map_err(bad)?;
            let (ds, motifs) = generate_motif_dataset(&spec)?;
            (ds, json!({ "kind": "motif", "spec": spec, "motifs": motifs }))
        }
        SynthKind::Family => {
            let spec: FamilySpec = serde_json::from_value(value).map_err(bad)?;
            (generate_family_dataset(&spec)?, json!({ "kind": "family", "spec": spec }))
        }
        SynthKind::Composition => {
            let spec: CompositionSpec = serde_json::from_value(value).map_err(bad)?;
            (generate_composition_dataset(&spec)?, json!({ "kind": "composition", "spec": spec }))
        }
    };
    let out = ctx.out(&a.out);
    seqio::write_dataset(&out, &ds)?;
    write_json(&out.join("spec.json"), &spec_json)?;
    println!("wrote {} records to {}", ds.len(), out.display());
    Ok(())
}

/// File name suffix for a sweep threshold: 0.8 -> `mmseq80`.
pub fn sweep_suffix(tau: f64) -> String {
    format!("mmseq{}", (tau * 100.0).round() as i64)
}

fn cmd_split(ctx: &Context, a: &SplitArgs) -> CliResult<()> {
    let ds = seqio::read_dataset(&a.dataset)?;
    let run = |identity: f64| -> Result<PartitionManifest> {
        let t = Thresholds::new(identity, a.coverage.unwrap_or(identity), a.k)?;
        let m = greedy_cluster(&ds.records, t)?;
        split_clusters(&m, a.ratio, a.seed)
    };
    let out = ctx.out(&a.out);
    match &a.sweep {
        Some(taus) => {
            let taus = if taus.is_empty() { THRESHOLD_SWEEP.to_vec() } else { taus.clone() };
            mkdir(&out)?;
            for tau in taus {
                let m = run(tau)?;
                let p = out.join(format!("split_{}.tsv", sweep_suffix(tau)));
                write_file(&p, m.to_tsv())?;
                println!("{}: {} clusters, train fraction {:.3}", p.display(), m.num_clusters(), m.train_fraction());
            }
        }
        None => {
            let m = run(a.identity)?;
            write_file(&out, m.to_tsv())?;
            println!("{}: {} clusters, train fraction {:.3}", out.display(), m.num_clusters(), m.train_fraction());
        }
    }
    Ok(())
}

fn cmd_fragment(ctx: &Context, a: &FragmentArgs) -> CliResult<()> {
    let ds = seqio::read_dataset(&a.dataset)?;
    let lengths: Vec<FragmentLength> = if a.all_lengths {
        FRAGMENT_LENGTHS
            .iter()
            .map(|&n| FragmentLength::Bp(n))
            .chain(std::iter::once(FragmentLength::WholeGenome))
            .collect()
    } else {
        vec![a.length.ok_or_else(|| Error::invalid("give --length or --all-lengths"))?]
    };
    let out = ctx.out(&a.out);
    for len in lengths {
        let mut frags = fragment(&ds, len)?;
        if let Some(tau) = a.dedup {
            frags = dedup_fragments(&frags, Thresholds::uniform(tau)?)?;
        }
        let dir = if a.all_lengths { out.join(format!("len_{len}")) } else { out.clone() };
        let fds = fragments_to_dataset(&frags, &ds);
        seqio::write_dataset(&dir, &fds)?;
        write_json(
            &dir.join("fragments.json"),
            &json!({ "length": len.to_string(), "fragments": frags.len(), "source": a.dataset, "dedup": a.dedup }),
        )?;
        println!("{}: {} fragments", dir.display(), frags.len());
    }
    Ok(())
}

/// Loaded dataset with class indices against its full label set.
struct Labelled {
    dataset: Dataset,
    labels: Vec<usize>,
}

fn labelled(ds: Dataset, label_set: &[String]) -> Result<Labelled> {
    let labels = ds
        .records
        .iter()
        .map(|r| {
            let l = r.label.as_deref().ok_or_else(|| Error::invalid(format!("record `{}` has no label", r.id)))?;
            label_set
                .iter()
                .position(|x| x == l)
                .ok_or_else(|| Error::invalid(format!("label `{l}` of `{}` unknown to the model", r.id)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Labelled { dataset: ds, labels })
}

fn load_splits(cfg: &RunConfig) -> Result<(Dataset, Dataset, Dataset)> {
    let full = seqio::read_dataset(cfg.require_dataset()?)?;
    if full.label_set.len() < 2 {
        return Err(Error::invalid("dataset needs at least two labelled classes"));
    }
    let split = cfg.split.as_ref().ok_or_else(|| Error::invalid("no split manifest given (use --split)"))?;
    let manifest = PartitionManifest::read(split)?;
    let (train, test) = manifest.partition(&full)?;
    Ok((full, train, test))
}

/// Deterministic hold-out of `fraction` of the training records.
fn carve_validation(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::invalid("training split needs at least two records"));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f00d));
    let nv = ((n as f64 * fraction).round() as usize).clamp(1, n - 1);
    let mut val = idx[..nv].to_vec();
    let mut train = idx[nv..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    Ok((train, val))
}

fn tokens_of(ds: &Dataset, context: usize) -> Result<Vec<TokenSequence>> {
    ds.records.iter().map(|r| tokenizer::encode(&r.sequence, Some(context))).collect()
}

fn pick<T: Clone>(xs: &[T], labels: &[usize], idx: &[usize]) -> Vec<(T, usize)> {
    idx.iter().map(|&i| (xs[i].clone(), labels[i])).collect()
}

fn base_report(model: &str, protocol: Protocol, labels: &[String], truth: &[usize], pred: &[usize], probs: &[Vec<f64>]) -> Result<EvaluationReport> {
    EvaluationReport::new(model, protocol, labels.to_vec(), truth, pred, probs)
}

fn finish_report(mut r: EvaluationReport, cfg: &RunConfig, model_file: Option<&Path>, extra: Value) -> Result<EvaluationReport> {
    r.dataset_fingerprint = match &cfg.dataset {
        Some(d) => dataset_fingerprint(d)?,
        None => String::new(),
    };
    r.model_fingerprint = match model_file {
        Some(p) => file_fingerprint(p)?,
        None => String::new(),
    };
    let mut run_config = serde_json::to_value(cfg)?;
    if let Some(s) = &cfg.split {
        run_config["split_fingerprint"] = json!(file_fingerprint(s)?);
    }
    r.run_config = run_config;
    let mut extra = if extra.is_null() { json!({}) } else { extra };
    if let Some(s) = &cfg.sweep {
        extra["sweep"] = serde_json::to_value(s)?;
    }
    r.extra = extra;
    r.timestamp = Some(timestamp());
    Ok(r)
}

fn outcome_json(o: &TrainOutcome) -> Value {
    json!({
        "steps": o.steps,
        "epochs_run": o.epochs_run,
        "stopped_early": o.stopped_early,
        "best_step": o.best_step,
        "best_val_loss": o.best_val_loss,
    })
}

fn save_trace(dir: &Path, o: &TrainOutcome) -> Result<()> {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut csv = String::from("step,epoch,train_loss,val_loss,val_accuracy\n");
    for p in &o.trace {
        csv.push_str(&format!("{},{},{},{},{}\n", p.step, p.epoch, p.train_loss, opt(p.val_loss), opt(p.val_accuracy)));
    }
    write_file(&dir.join("train_trace.csv"), csv)
}

fn label_metadata(labels: &[String], stage: &str) -> Value {
    json!({ "labels": labels, "stage": stage })
}

fn metadata_labels(ck: &Checkpoint) -> Option<Vec<String>> {
    ck.metadata.get("labels").and_then(|v| serde_json::from_value(v.clone()).ok())
}

/// Transformer to start from: a checkpoint given in the config (with a fresh
/// head sized to the task) or a new model.
fn base_transformer(cfg: &RunConfig, num_labels: usize) -> Result<Transformer> {
    let mut m = match &cfg.checkpoint {
        Some(p) => Transformer::load(p)?.with_new_head(num_labels, cfg.seed)?,
        None => Transformer::new(ModelConfig {
            num_labels,
            ..cfg.transformer.clone()
        })?,
    };
    m.frozen_backbone = cfg.freeze_backbone;
    m.frozen_embeddings = cfg.freeze_embeddings;
    Ok(m)
}

fn fit_and_score<C: Classifier>(
    model: &mut C,
    inputs: &[C::Input],
    train_labels: &[usize],
    tr: &[usize],
    va: &[usize],
    test_inputs: &[C::Input],
    plan: &TrainingPlan,
) -> CliResult<(TrainOutcome, Vec<usize>, Vec<Vec<f64>>)>
where
    C::Input: Clone,
{
    let train = pick(inputs, train_labels, tr);
    let val = pick(inputs, train_labels, va);
    let outcome = stage("fine-tune", fit(model, &train, &val, plan))?;
    let refs: Vec<&C::Input> = test_inputs.iter().collect();
    let (pred, probs) = stage("predict", predict(model, &refs, 64))?;
    Ok((outcome, pred, probs))
}

fn cmd_train(ctx: &Context, a: &RunArgs) -> CliResult<()> {
    let cfg = RunConfig::resolve(a)?;
    cfg.validate()?;
    let (full, train, test) = load_splits(&cfg)?;
    if test.is_empty() {
        return Err(Error::SingleCluster.into());
    }
    let label_set = full.label_set.clone();
    let k = label_set.len();
    let tr_l = labelled(train, &label_set)?;
    let te_l = labelled(test, &label_set)?;
    let (tr, va) = carve_validation(tr_l.labels.len(), cfg.validation_fraction, cfg.seed)?;
    let out = ctx.out(&cfg.output);
    mkdir(&out)?;

    let (model_file, pred, probs, extra) = match cfg.model {
        ModelKind::Transformer => {
            let mut m = stage("init", base_transformer(&cfg, k))?;
            let ctxlen = m.config.context_tokens;
            let x = tokens_of(&tr_l.dataset, ctxlen)?;
            let xt = tokens_of(&te_l.dataset, ctxlen)?;
            let (o, pred, probs) = fit_and_score(&mut m, &x, &tr_l.labels, &tr, &va, &xt, &cfg.plan)?;
            save_trace(&out, &o)?;
            let mut ck = m.to_checkpoint(None)?;
            ck.metadata = label_metadata(&label_set, "fine-tune");
            let p = out.join(MODEL_CHECKPOINT);
            ck.save(&p)?;
            (p, pred, probs, json!({ "training": outcome_json(&o) }))
        }
        ModelKind::Cnn | ModelKind::Lstm => {
            let fixed = if cfg.model == ModelKind::Cnn { cfg.cnn.fixed_length } else { cfg.lstm.fixed_length };
            let x = one_hot_inputs(tr_l.dataset.records.iter().map(|r| r.sequence.as_str()), fixed);
            let xt = one_hot_inputs(te_l.dataset.records.iter().map(|r| r.sequence.as_str()), fixed);
            let (o, pred, probs, mut ck) = if cfg.model == ModelKind::Cnn {
                let mut m = stage("init", Cnn::new(CnnConfig { num_labels: k, ..cfg.cnn.clone() }))?;
                let (o, p, pr) = fit_and_score(&mut m, &x, &tr_l.labels, &tr, &va, &xt, &cfg.plan)?;
                (o, p, pr, m.to_checkpoint()?)
            } else {
                let mut m = stage("init", Lstm::new(LstmConfig { num_labels: k, ..cfg.lstm.clone() }))?;
                let (o, p, pr) = fit_and_score(&mut m, &x, &tr_l.labels, &tr, &va, &xt, &cfg.plan)?;
                (o, p, pr, m.to_checkpoint()?)
            };
            save_trace(&out, &o)?;
            ck.metadata = label_metadata(&label_set, "train");
            let p = out.join(MODEL_CHECKPOINT);
            ck.save(&p)?;
            (p, pred, probs, json!({ "training": outcome_json(&o) }))
        }
        ModelKind::Forest => {
            // Forests need no early stopping, so the validation share is kept
            // for training.
            let x: Vec<Vec<f64>> = tr_l.dataset.records.iter().map(|r| kmer_frequencies(&r.sequence).values).collect();
            let xt: Vec<Vec<f64>> = te_l.dataset.records.iter().map(|r| kmer_frequencies(&r.sequence).values).collect();
            let mut f = stage("train-forest", train_forest(&x, &tr_l.labels, k, &cfg.forest))?;
            f.labels = label_set.clone();
            let (pred, probs) = stage("predict", f.predict(&xt))?;
            let p = out.join(FOREST_FILE);
            f.save(&p)?;
            (p, pred, probs, json!({}))
        }
    };
    let r = base_report(cfg.model.name(), Protocol::Standard, &label_set, &te_l.labels, &pred, &probs)?;
    let r = finish_report(r, &cfg, Some(&model_file), extra)?;
    write_json(&out.join(REPORT_FILE), &r)?;
    write_json(&out.join("run_config.json"), &cfg)?;
    println!(
        "{}: accuracy {:.4} f1 {:.4} mcc {:.4}",
        out.join(REPORT_FILE).display(),
        r.metrics.accuracy,
        r.metrics.f1,
        r.metrics.mcc
    );
    Ok(())
}

fn cmd_pretrain(ctx: &Context, a: &RunArgs) -> CliResult<()> {
    let cfg = RunConfig::resolve(a)?;
    cfg.validate()?;
    let dir = cfg.require_dataset()?;
    let records: Vec<seqio::SequenceRecord> = seqio::parse_fasta(dir.join(DATASET_FASTA))?.collect::<Result<_>>()?;
    let records = match &cfg.split {
        Some(s) => {
            let m = PartitionManifest::read(s)?;
            records
                .into_iter()
                .filter(|r| m.split_of_record(&r.id) == Some(Split::Train))
                .collect()
        }
        None => records,
    };
    let mut model = match &cfg.checkpoint {
        Some(p) => Transformer::load(p)?,
        None => Transformer::new(cfg.transformer.clone())?,
    };
    let corpus: Vec<TokenSequence> = records
        .iter()
        .map(|r| tokenizer::encode(&r.sequence, Some(model.config.context_tokens)))
        .collect::<Result<_>>()?;
    let outcome = stage("pretrain", pretrain_masked(&mut model, &corpus, &cfg.plan))?;
    let out = ctx.out(&cfg.output);
    mkdir(&out)?;
    let mut ck = model.to_checkpoint(Some(outcome.optimizer))?;
    ck.metadata = json!({ "stage": "pretrain", "corpus_records": corpus.len() });
    ck.save(&out.join(MODEL_CHECKPOINT))?;
    let mut csv = String::from("step,loss\n");
    for (s, l) in &outcome.losses {
        csv.push_str(&format!("{s},{l}\n"));
    }
    write_file(&out.join("pretrain_loss.csv"), csv)?;
    write_json(&out.join("run_config.json"), &cfg)?;
    if let Some((s, l)) = outcome.losses.last() {
        println!("pretrained {s} steps, final loss {l:.4}");
    }
    Ok(())
}

/// A trained model of any kind, as written by `train`.
pub enum LoadedModel {
    Transformer(Transformer),
    Cnn(Cnn),
    Lstm(Lstm),
    Forest(Forest),
}

impl LoadedModel {
    pub fn load(path: &Path) -> Result<(Self, Vec<String>)> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if bytes.starts_with(CHECKPOINT_MAGIC) {
            let ck = Checkpoint::from_bytes(&bytes)?;
            let labels = metadata_labels(&ck)
                .ok_or_else(|| Error::Format(format!("{}: checkpoint carries no label names", path.display())))?;
            let m = match ck.kind.as_str() {
                crate::model::TRANSFORMER_KIND => LoadedModel::Transformer(Transformer::from_checkpoint(&ck)?),
                crate::baselines::neural::CNN_KIND => LoadedModel::Cnn(Cnn::from_checkpoint(&ck)?),
                crate::baselines::neural::LSTM_KIND => LoadedModel::Lstm(Lstm::from_checkpoint(&ck)?),
                other => return Err(Error::Format(format!("unknown checkpoint kind `{other}`"))),
            };
            Ok((m, labels))
        } else {
            let f = Forest::load(path)?;
            if f.labels.is_empty() {
                return Err(Error::Format(format!("{}: forest carries no label names", path.display())));
            }
            let labels = f.labels.clone();
            Ok((LoadedModel::Forest(f), labels))
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LoadedModel::Transformer(_) => "transformer",
            LoadedModel::Cnn(_) => "cnn",
            LoadedModel::Lstm(_) => "lstm",
            LoadedModel::Forest(_) => "forest",
        }
    }

    pub fn predict(&self, ds: &Dataset) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
        let seqs = || ds.records.iter().map(|r| r.sequence.as_str());
        match self {
            LoadedModel::Transformer(m) => {
                let x = tokens_of(ds, m.config.context_tokens)?;
                predict(m, &x.iter().collect::<Vec<_>>(), 64)
            }
            LoadedModel::Cnn(m) => {
                let x = one_hot_inputs(seqs(), m.config.fixed_length);
                predict(m, &x.iter().collect::<Vec<_>>(), 64)
            }
            LoadedModel::Lstm(m) => {
                let x = one_hot_inputs(seqs(), m.config.fixed_length);
                predict(m, &x.iter().collect::<Vec<_>>(), 64)
            }
            LoadedModel::Forest(f) => {
                let x: Vec<Vec<f64>> = seqs().map(|s| kmer_frequencies(s).values).collect();
                f.predict(&x)
            }
        }
    }
}

fn cmd_evaluate(ctx: &Context, a: &EvaluateArgs) -> CliResult<()> {
    let (model, labels) = LoadedModel::load(&a.model)?;
    let full = seqio::read_dataset(&a.dataset)?;
    let ds = match (&a.split, a.subset) {
        (_, Subset::All) | (None, _) => full,
        (Some(s), subset) => {
            let (train, test) = PartitionManifest::read(s)?.partition(&full)?;
            if subset == Subset::Train { train } else { test }
        }
    };
    if ds.is_empty() {
        return Err(Error::invalid("nothing to evaluate: the selected subset is empty").into());
    }
    let l = labelled(ds, &labels)?;
    let (pred, probs) = stage("predict", model.predict(&l.dataset))?;
    let cfg = RunConfig {
        dataset: Some(a.dataset.clone()),
        split: a.split.clone(),
        checkpoint: Some(a.model.clone()),
        output: a.out.clone(),
        ..RunConfig::default()
    };
    let r = base_report(model.name(), Protocol::Standard, &labels, &l.labels, &pred, &probs)?;
    let r = finish_report(r, &cfg, Some(&a.model), json!({ "subset": format!("{:?}", a.subset).to_lowercase() }))?;
    let out = ctx.out(&a.out);
    write_json(&out.join(REPORT_FILE), &r)?;
    println!("accuracy {:.4} f1 {:.4} mcc {:.4}", r.metrics.accuracy, r.metrics.f1, r.metrics.mcc);
    Ok(())
}

fn cmd_zeroshot(ctx: &Context, a: &RunArgs) -> CliResult<()> {
    let cfg = RunConfig::resolve(a)?;
    cfg.validate()?;
    let full = seqio::read_dataset(cfg.require_dataset()?)?;
    let label_set = full.label_set.clone();
    let ds = match &cfg.split {
        Some(s) => PartitionManifest::read(s)?.partition(&full)?.1,
        None => full,
    };
    let l = labelled(ds, &label_set)?;
    let model = match &cfg.checkpoint {
        Some(p) => Transformer::load(p)?,
        None => Transformer::new(cfg.transformer.clone())?,
    };
    let x = tokens_of(&l.dataset, model.config.context_tokens)?;
    let emb = stage("embed", embed(&model, &x, 64))?;
    let z = stage("cluster", zero_shot_classify(&emb, label_set.len(), &l.labels, cfg.seed))?;
    // Cluster membership as one-hot scores: AUC is still defined, if coarse.
    let probs: Vec<Vec<f64>> = z
        .predictions
        .iter()
        .map(|&p| (0..label_set.len()).map(|c| if c == p { 1.0 } else { 0.0 }).collect())
        .collect();
    let mapping: BTreeMap<String, String> = z
        .mapping
        .iter()
        .enumerate()
        .map(|(c, &lab)| (format!("cluster_{c}"), label_set[lab].clone()))
        .collect();
    let r = base_report("transformer", Protocol::ZeroShot, &label_set, &l.labels, &z.predictions, &probs)?;
    let extra = json!({ "mapping": mapping, "degenerate": z.degenerate });
    let r = finish_report(r, &cfg, cfg.checkpoint.as_deref(), extra)?;
    let out = ctx.out(&cfg.output);
    write_json(&out.join(REPORT_FILE), &r)?;
    println!("zero-shot f1 {:.4}", r.metrics.f1);
    Ok(())
}

fn cmd_fewshot(ctx: &Context, a: &RunArgs) -> CliResult<()> {
    let cfg = RunConfig::resolve(a)?;
    cfg.validate()?;
    let (full, train, test) = load_splits(&cfg)?;
    let label_set = full.label_set.clone();
    let pool = labelled(train, &label_set)?;
    let te = labelled(test, &label_set)?;
    if te.labels.is_empty() {
        return Err(Error::SingleCluster.into());
    }
    let base = stage("init", base_transformer(&cfg, label_set.len()))?;
    let ctxlen = base.config.context_tokens;
    let xp: Vec<(TokenSequence, usize)> = tokens_of(&pool.dataset, ctxlen)?.into_iter().zip(pool.labels).collect();
    let xt: Vec<(TokenSequence, usize)> = tokens_of(&te.dataset, ctxlen)?.into_iter().zip(te.labels).collect();
    let points = stage("few-shot", few_shot_curve(&base, &xp, &xt, &cfg.shots, &label_set, &cfg.plan))?;
    let out = ctx.out(&cfg.output);
    mkdir(&out)?;
    let mut csv = String::from("shots,accuracy,f1,mcc,auc_roc,balanced_accuracy\n");
    for p in &points {
        let r = EvaluationReport {
            schema: REPORT_SCHEMA.into(),
            model: "transformer".into(),
            protocol: Protocol::FewShot { shots: p.shots },
            labels: label_set.clone(),
            metrics: p.metrics.clone(),
            averaging: crate::metrics::Averaging::for_classes(label_set.len().max(2)),
            confusion: p.confusion.clone(),
            dataset_fingerprint: String::new(),
            model_fingerprint: String::new(),
            run_config: Value::Null,
            extra: Value::Null,
            timestamp: None,
        };
        let r = finish_report(r, &cfg, cfg.checkpoint.as_deref(), json!({}))?;
        write_json(&out.join(format!("fewshot_n{}.json", p.shots)), &r)?;
        let m = &p.metrics;
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            p.shots,
            m.accuracy,
            m.f1,
            m.mcc,
            m.auc_roc.map(|v| v.to_string()).unwrap_or_default(),
            m.balanced_accuracy
        ));
    }
    write_file(&out.join("fewshot.csv"), csv)?;
    println!("few-shot: {} rows written to {}", points.len(), out.display());
    Ok(())
}

fn cmd_report(ctx: &Context, a: &ReportArgs) -> CliResult<()> {
    let reports = load_reports(&a.reports)?;
    let metrics: Vec<String> = a
        .metrics
        .clone()
        .unwrap_or_else(|| TABLE_METRICS.iter().map(|s| s.to_string()).collect());
    for m in &metrics {
        if !crate::metrics::METRIC_NAMES.contains(&m.as_str()) {
            return Err(Error::invalid(format!("unknown metric `{m}`")).into());
        }
    }
    let refs: Vec<&str> = metrics.iter().map(String::as_str).collect();
    let files = write_bundle(&reports, &refs, &ctx.out(&a.out))?;
    let mut stdout = std::io::stdout().lock();
    for f in files {
        let _ = writeln!(stdout, "{}", f.display());
    }
    Ok(())
}

/// Sweep coordinate for a fragment length run, for use in run configs.
pub fn fragment_sweep(len: usize) -> crate::report::SweepPoint {
    crate::report::SweepPoint {
        axis: AXIS_FRAGMENT_LENGTH.into(),
        value: len as f64,
    }
}

/// Sweep coordinate for a threshold run (percent, as in `mmseq80`).
pub fn threshold_sweep(tau: f64) -> crate::report::SweepPoint {
    crate::report::SweepPoint {
        axis: AXIS_THRESHOLD.into(),
        value: (tau * 100.0).round(),
    }
}
