//! Subcommand implementations.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::Args;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use neuscrape_core::checkpoint::{load_checkpoint, save_checkpoint, MetricsSnapshot};
use neuscrape_core::corpus::{read_labeled_corpus, write_labeled_corpus, CorpusRecord};
use neuscrape_core::eval::{
    self, baseline_density, baseline_keep_all, extract_primary, EvalReport, Extraction,
};
use neuscrape_core::model::{ModelConfig, NodePredictor};
use neuscrape_core::quant::{load_quantized, quantize_model, save_quantized, QuantMode};
use neuscrape_core::synth::{generate_synthetic_corpus, SyntheticSpec};
use neuscrape_core::tokenizer::TokenizerConfig;
use neuscrape_core::train::TrainConfig;
use neuscrape_core::LabeledDocument;

/// `--workers`, overridable by `NEUSCRAPE_THREADS`.
fn resolve_workers(cli_value: Option<usize>) -> usize {
    if let Ok(v) = std::env::var("NEUSCRAPE_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            if n >= 1 {
                return n;
            }
        }
    }
    cli_value
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .max(1)
}

fn worker_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .context("building worker pool")
}

/// Load a model file by magic bytes: float checkpoint ("NSCP") or
/// quantized model ("NSQ8").
fn load_any_model(path: &Path) -> Result<Box<dyn NodePredictor>> {
    let mut magic = [0u8; 4];
    File::open(path)
        .and_then(|mut f| f.read_exact(&mut magic))
        .with_context(|| format!("reading {}", path.display()))?;
    match &magic {
        b"NSCP" => {
            let (model, _) = load_checkpoint::<f32>(path)?;
            Ok(Box::new(model))
        }
        b"NSQ8" => Ok(Box::new(load_quantized(path)?)),
        other => bail!(
            "{}: unknown model format (magic {:02x?})",
            path.display(),
            other
        ),
    }
}

fn read_corpus_records(path: &Path) -> Result<Vec<CorpusRecord>> {
    let reader = BufReader::new(
        File::open(path).with_context(|| format!("opening corpus {}", path.display()))?,
    );
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CorpusRecord = serde_json::from_str(&line)
            .with_context(|| format!("{}:{}: bad corpus record", path.display(), i + 1))?;
        records.push(rec);
    }
    Ok(records)
}

// ---------------------------------------------------------------------------
// scrape
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct ScrapeArgs {
    /// HTML files to scrape (one document per file).
    pub inputs: Vec<PathBuf>,
    /// JSONL corpus with {"doc_id", "html"} records.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Model file (float checkpoint or quantized).
    #[arg(long)]
    pub model: PathBuf,
    /// Primary-content probability threshold.
    #[arg(long, default_value_t = eval::DEFAULT_THRESHOLD)]
    pub threshold: f32,
    /// Worker threads (default: all cores; NEUSCRAPE_THREADS overrides).
    #[arg(long)]
    pub workers: Option<usize>,
    /// Output JSONL path (default: stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also dump every retained node as debug JSONL
    /// ({"doc_id","node_id","kind","tag","depth","text"}).
    #[arg(long)]
    pub dump_nodes: Option<PathBuf>,
}

pub fn scrape(args: ScrapeArgs) -> Result<()> {
    let model = load_any_model(&args.model)?;
    let records = gather_records(&args.corpus, &args.inputs)?;
    if records.is_empty() {
        bail!("no input documents");
    }
    let workers = resolve_workers(args.workers);
    let pool = worker_pool(workers)?;

    // one document per task; output preserves input order at any worker count
    type ScrapeResult = std::result::Result<(Extraction, Vec<neuscrape_core::dom::NodeRecord>), String>;
    let dump = args.dump_nodes.is_some();
    let results: Vec<ScrapeResult> = pool.install(|| {
        records
            .par_iter()
            .map(|rec| {
                let extraction =
                    extract_primary(&rec.doc_id, &rec.html, model.as_ref(), args.threshold)
                        .map_err(|e| format!("{}: {e}", rec.doc_id))?;
                let nodes = if dump {
                    let tree = neuscrape_core::dom::parse_html(&rec.html)
                        .map_err(|e| format!("{}: {e}", rec.doc_id))?;
                    neuscrape_core::dom::build_node_sequence(&tree)
                        .iter()
                        .map(|n| neuscrape_core::dom::NodeRecord::from_node(&rec.doc_id, n))
                        .collect()
                } else {
                    Vec::new()
                };
                Ok((extraction, nodes))
            })
            .collect()
    });

    let mut out: Box<dyn Write> = match &args.out {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(std::io::stdout().lock()),
    };
    let mut node_dump: Option<BufWriter<File>> = match &args.dump_nodes {
        Some(p) => Some(BufWriter::new(File::create(p)?)),
        None => None,
    };
    let mut skipped = 0usize;
    for result in &results {
        match result {
            Ok((extraction, nodes)) => {
                serde_json::to_writer(&mut out, extraction)?;
                out.write_all(b"\n")?;
                if let Some(w) = &mut node_dump {
                    for record in nodes {
                        serde_json::to_writer(&mut *w, record)?;
                        w.write_all(b"\n")?;
                    }
                }
            }
            Err(msg) => {
                skipped += 1;
                eprintln!("skip: {msg}");
            }
        }
    }
    out.flush()?;
    if let Some(w) = &mut node_dump {
        w.flush()?;
    }
    eprintln!(
        "scrape: {} records, {} skipped, workers={}",
        results.len(),
        skipped,
        workers
    );
    Ok(())
}

fn gather_records(corpus: &Option<PathBuf>, inputs: &[PathBuf]) -> Result<Vec<CorpusRecord>> {
    let mut records = Vec::new();
    if let Some(path) = corpus {
        records.extend(read_corpus_records(path)?);
    }
    for path in inputs {
        let html = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        records.push(CorpusRecord {
            doc_id: path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| path.display().to_string()),
            url: None,
            html: String::from_utf8_lossy(&html).into_owned(),
        });
    }
    Ok(records)
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

/// Optional JSON config file: `{"model": {...}, "tokenizer": {...},
/// "train": {...}}`, any subset of sections.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct TrainFileConfig {
    model: Option<ModelConfig>,
    tokenizer: Option<TokenizerConfig>,
    train: Option<TrainConfig>,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Labeled JSONL corpus.
    #[arg(long)]
    pub corpus: PathBuf,
    /// JSON config file overriding the desk-scale defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Validation fraction (splits by doc_id).
    #[arg(long)]
    pub val_frac: Option<f64>,
    /// Training seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Output checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch JSONL log path (default: `<out>.log.jsonl`).
    #[arg(long)]
    pub log: Option<PathBuf>,
}

pub fn train(args: TrainArgs) -> Result<()> {
    let file_cfg: TrainFileConfig = match &args.config {
        Some(p) => serde_json::from_reader(
            File::open(p).with_context(|| format!("opening config {}", p.display()))?,
        )
        .with_context(|| format!("parsing config {}", p.display()))?,
        None => TrainFileConfig::default(),
    };
    let mcfg = file_cfg.model.unwrap_or_else(ModelConfig::desk_scale);
    let tok = file_cfg.tokenizer.unwrap_or_default();
    let mut tcfg = file_cfg.train.unwrap_or_default();
    if let Some(v) = args.val_frac {
        tcfg.val_frac = v;
    }
    if let Some(s) = args.seed {
        tcfg.seed = s;
    }
    if let Some(e) = args.epochs {
        tcfg.epochs = e;
    }

    let corpus = read_labeled_corpus(&args.corpus)?;
    eprintln!(
        "train: {} documents, d_node={} d_model={} layers={} heads={} epochs={} batch={}",
        corpus.len(),
        mcfg.d_node,
        mcfg.d_model,
        mcfg.n_layers,
        mcfg.n_heads,
        tcfg.epochs,
        tcfg.batch_size
    );
    let started = Instant::now();
    let outcome = neuscrape_core::train::train::<f32>(&corpus, mcfg, tok, &tcfg)?;
    eprintln!(
        "train: best epoch {} val_f1_primary {:.4} ({:.1}s)",
        outcome.best_epoch,
        outcome.best_val_f1,
        started.elapsed().as_secs_f64()
    );

    let log_path = args
        .log
        .clone()
        .unwrap_or_else(|| args.out.with_extension("log.jsonl"));
    let mut log = BufWriter::new(File::create(&log_path)?);
    for entry in &outcome.logs {
        serde_json::to_writer(&mut log, entry)?;
        log.write_all(b"\n")?;
    }
    log.flush()?;

    let metrics = MetricsSnapshot {
        epoch: Some(outcome.best_epoch),
        train_loss: outcome.logs.last().map(|l| l.train_loss),
        val_f1_primary: Some(outcome.best_val_f1),
    };
    save_checkpoint(&outcome.model, &args.out, tcfg.seed, metrics)?;
    eprintln!("train: wrote {} and {}", args.out.display(), log_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum EvalMode {
    Node,
    Containment,
}

#[derive(Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum BaselineExtractor {
    #[value(alias = "keep_all")]
    KeepAll,
    Density,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Labeled JSONL corpus.
    #[arg(long, alias = "corpus-with-labels")]
    pub corpus: PathBuf,
    /// Model file; mutually exclusive with --extractor.
    #[arg(long, conflicts_with = "extractor")]
    pub model: Option<PathBuf>,
    /// Rule-based baseline extractor.
    #[arg(long, value_enum)]
    pub extractor: Option<BaselineExtractor>,
    /// Scoring mode: node-level ids or text containment.
    #[arg(long, value_enum, default_value = "node")]
    pub mode: EvalMode,
    /// Primary probability threshold (model extractor only).
    #[arg(long, default_value_t = eval::DEFAULT_THRESHOLD)]
    pub threshold: f32,
    /// Minimum words per kept node (density baseline).
    #[arg(long, default_value_t = eval::DEFAULT_MIN_WORDS)]
    pub min_words: usize,
    /// Maximum anchor-text fraction (density baseline).
    #[arg(long, default_value_t = eval::DEFAULT_MAX_LINK_DENSITY)]
    pub max_link_density: f64,
    /// Macro-average per-document metrics instead of pooling node counts.
    #[arg(long)]
    pub macro_average: bool,
    /// Output path for the report JSON (default: stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let corpus = read_labeled_corpus(&args.corpus)?;
    if corpus.is_empty() {
        bail!("corpus is empty");
    }
    let model = match (&args.model, &args.extractor) {
        (Some(path), None) => Some(load_any_model(path)?),
        (None, Some(_)) => None,
        (None, None) => bail!("pass either --model or --extractor"),
        (Some(_), Some(_)) => unreachable!("clap conflicts_with"),
    };

    let mut reports = Vec::new();
    let mut doc_errors = 0usize;
    for doc in &corpus {
        let extraction = match run_extractor(doc, &model, &args) {
            Ok(e) => e,
            Err(e) => {
                doc_errors += 1;
                eprintln!("eval: {}: {e}", doc.doc_id);
                continue;
            }
        };
        let report = match args.mode {
            EvalMode::Node => eval::node_level_report(doc, &extraction),
            EvalMode::Containment => eval::containment_report(doc, &extraction),
        };
        match report {
            Ok(r) => reports.push(r),
            Err(e) => {
                doc_errors += 1;
                eprintln!("eval: {}: {e}", doc.doc_id);
            }
        }
    }
    if reports.is_empty() {
        bail!("no documents could be evaluated ({doc_errors} errors)");
    }
    if doc_errors > 0 {
        eprintln!("eval: {doc_errors} documents skipped");
    }

    let report = if args.macro_average {
        macro_average(&reports)
    } else {
        EvalReport::merged(reports)
    };
    write_json(&args.out, &report)
}

fn run_extractor(
    doc: &LabeledDocument,
    model: &Option<Box<dyn NodePredictor>>,
    args: &EvalArgs,
) -> neuscrape_core::Result<Extraction> {
    match (model, args.extractor) {
        (Some(m), _) => extract_primary(&doc.doc_id, &doc.html, m.as_ref(), args.threshold),
        (None, Some(BaselineExtractor::KeepAll)) => baseline_keep_all(&doc.doc_id, &doc.html),
        (None, Some(BaselineExtractor::Density)) => {
            baseline_density(&doc.doc_id, &doc.html, args.min_words, args.max_link_density)
        }
        (None, None) => unreachable!("validated in eval()"),
    }
}

fn macro_average(reports: &[EvalReport]) -> EvalReport {
    let n = reports.len() as f64;
    let mut merged = EvalReport::merged(reports.iter().cloned());
    merged.accuracy = reports.iter().map(|r| r.accuracy).sum::<f64>() / n;
    merged.precision = reports.iter().map(|r| r.precision).sum::<f64>() / n;
    merged.recall = reports.iter().map(|r| r.recall).sum::<f64>() / n;
    merged.f1 = reports.iter().map(|r| r.f1).sum::<f64>() / n;
    merged
}

fn write_json<T: Serialize>(out: &Option<PathBuf>, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value)?;
    match out {
        Some(p) => std::fs::write(p, json + "\n")?,
        None => println!("{json}"),
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum BenchQuant {
    None,
    Signed8,
    Unsigned8,
}

#[derive(Debug, Serialize)]
pub struct BenchReport {
    pub pages_evaluated: usize,
    pub mean_ms_per_page: f64,
    pub median_ms_per_page: f64,
    pub p95_ms_per_page: f64,
    pub throughput_pages_per_s: f64,
    pub workers: usize,
    pub quantization_mode: String,
}

#[derive(Args)]
pub struct BenchArgs {
    /// JSONL corpus to scrape.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Float checkpoint to benchmark.
    #[arg(long)]
    pub model: PathBuf,
    /// Quantize the model before timing.
    #[arg(long, value_enum, default_value = "none")]
    pub quantize: BenchQuant,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long, default_value_t = eval::DEFAULT_THRESHOLD)]
    pub threshold: f32,
    /// Output path for the report JSON (default: stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn bench(args: BenchArgs) -> Result<()> {
    let records = read_corpus_records(&args.corpus)?;
    if records.is_empty() {
        bail!("bench corpus has no pages");
    }
    let (model, mode_name): (Box<dyn NodePredictor>, &str) = match args.quantize {
        BenchQuant::None => (load_any_model(&args.model)?, "none"),
        BenchQuant::Signed8 => {
            let (m, _) = load_checkpoint::<f32>(&args.model)?;
            (
                Box::new(quantize_model(&m, QuantMode::Signed8)),
                "signed8",
            )
        }
        BenchQuant::Unsigned8 => {
            let (m, _) = load_checkpoint::<f32>(&args.model)?;
            (
                Box::new(quantize_model(&m, QuantMode::Unsigned8)),
                "unsigned8",
            )
        }
    };
    let workers = resolve_workers(args.workers);
    let report = run_bench(&records, model.as_ref(), args.threshold, workers, mode_name)?;
    write_json(&args.out, &report)
}

pub fn run_bench(
    records: &[CorpusRecord],
    model: &dyn NodePredictor,
    threshold: f32,
    workers: usize,
    mode_name: &str,
) -> Result<BenchReport> {
    let pool = worker_pool(workers)?;

    // warmup pass, excluded from timing
    for rec in records.iter().take(5.min(records.len())) {
        let _ = extract_primary(&rec.doc_id, &rec.html, model, threshold);
    }

    let wall = Instant::now();
    let durations: Vec<f64> = pool.install(|| {
        records
            .par_iter()
            .map(|rec| {
                let t0 = Instant::now();
                let _ = extract_primary(&rec.doc_id, &rec.html, model, threshold);
                t0.elapsed().as_secs_f64() * 1e3
            })
            .collect()
    });
    let wall_s = wall.elapsed().as_secs_f64();

    let mut sorted = durations.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pct = |q: f64| -> f64 {
        let idx = ((sorted.len() as f64 - 1.0) * q).round() as usize;
        sorted[idx]
    };
    Ok(BenchReport {
        pages_evaluated: durations.len(),
        mean_ms_per_page: durations.iter().sum::<f64>() / durations.len() as f64,
        median_ms_per_page: pct(0.5),
        p95_ms_per_page: pct(0.95),
        throughput_pages_per_s: durations.len() as f64 / wall_s,
        workers,
        quantization_mode: mode_name.to_string(),
    })
}

// ---------------------------------------------------------------------------
// gen
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct GenArgs {
    /// Generation spec JSON (defaults used when omitted).
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Override the number of pages.
    #[arg(long)]
    pub pages: Option<usize>,
    /// Override the generation seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output labeled corpus JSONL.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn gen(args: GenArgs) -> Result<()> {
    let mut spec: SyntheticSpec = match &args.spec {
        Some(p) => serde_json::from_reader(
            File::open(p).with_context(|| format!("opening spec {}", p.display()))?,
        )
        .with_context(|| format!("parsing spec {}", p.display()))?,
        None => SyntheticSpec::default(),
    };
    if let Some(n) = args.pages {
        spec.n_pages = n;
    }
    if let Some(s) = args.seed {
        spec.seed = s;
    }
    let corpus = generate_synthetic_corpus(&spec);
    write_labeled_corpus(&args.out, &corpus)?;
    eprintln!("gen: wrote {} pages to {}", corpus.len(), args.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// quantize
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct QuantizeArgs {
    /// Float checkpoint to quantize.
    #[arg(long)]
    pub model: PathBuf,
    /// Target integer type.
    #[arg(long, default_value = "signed8")]
    pub mode: QuantMode,
    /// Output quantized model path.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn quantize(args: QuantizeArgs) -> Result<()> {
    let (model, _) = load_checkpoint::<f32>(&args.model)?;
    let qm = quantize_model(&model, args.mode);
    save_quantized(&qm, &args.out)?;
    let before = std::fs::metadata(&args.model)?.len();
    let after = std::fs::metadata(&args.out)?.len();
    eprintln!(
        "quantize: {} ({:.1} MiB) -> {} ({:.1} MiB, {})",
        args.model.display(),
        before as f64 / (1024.0 * 1024.0),
        args.out.display(),
        after as f64 / (1024.0 * 1024.0),
        args.mode
    );
    Ok(())
}
