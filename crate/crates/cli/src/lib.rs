//! The `naa` command line.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage errors.

use std::ffi::OsString;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use naa_core::evaluation::{evaluate_generation, evaluate_intent, evaluate_retrieval, pairs_to_fixtures, EvalReport};
use naa_core::generation::{load_qa_records, preprocess_msmarco_lines, train_generator, GenTrainConfig, QARecord};
use naa_core::intent::{
    index_examples, load_intent_model, load_labeled, train_domain_gate, train_intent_classifier, IntentLabelSet,
    IntentModel, IntentTrainConfig, GENERAL_LABEL,
};
use naa_core::pipeline::{answer_query, Components, OodStore, PipelineConfig};
use naa_core::retrieval::{
    build_index, load_kb, train_bi_encoder, train_cross_encoder, BiEncoderTrainConfig, ChunkingConfig,
    CrossEncoderTrainConfig, Similarity, TrainingPair,
};
use naa_core::util::read_jsonl;
use naa_service::ServiceState;
use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "naa", version, about = "Agent assistant: intents, retrieval and grounded drafts")]
pub struct Cli {
    /// Pipeline config (TOML). Falls back to $NAA_CONFIG.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory that checkpoint names resolve under. Overrides the config.
    #[arg(long, global = true)]
    pub model_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Chunk and embed a knowledge base into an index directory.
    Ingest(IngestArgs),
    #[command(subcommand)]
    Train(TrainCommand),
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Run one query through the pipeline and print the result as JSON.
    Query {
        text: String,
    },
    /// Start the HTTP service.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: SocketAddr,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SimilarityArg {
    Dot,
    Cosine,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// JSON-lines KB of documents or QA pairs.
    #[arg(long)]
    pub kb: PathBuf,
    #[arg(long)]
    pub encoder: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "dot")]
    pub similarity: SimilarityArg,
    #[arg(long, default_value_t = 3)]
    pub sentences: usize,
    #[arg(long, default_value_t = 0)]
    pub overlap: usize,
    /// Strip markup and normalize text before chunking.
    #[arg(long)]
    pub clean: bool,
}

/// Overrides applied on top of the trainer's defaults or `--params`.
#[derive(Debug, Args, Default)]
pub struct HyperArgs {
    /// TOML file with the full trainer configuration.
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum TrainCommand {
    /// Two-class domain gate from `{"text","label"}` lines labelled `general`
    /// or the positive label.
    Gate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        positive_label: String,
        #[arg(long)]
        encoder: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        hyper: HyperArgs,
    },
    /// Intent classifier from `{"text","label"}` lines.
    Intent {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        encoder: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        freeze_encoder: bool,
        #[command(flatten)]
        hyper: HyperArgs,
    },
    /// Contrastive bi-encoder fine-tune on `{"question","passage"}` lines.
    BiEncoder {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        encoder: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        hyper: HyperArgs,
    },
    /// In-batch cross-encoder fine-tune on `{"question","passage"}` lines.
    CrossEncoder {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        scorer: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        hyper: HyperArgs,
    },
    /// Multi-task generator fine-tune on QA records.
    Generator {
        #[arg(long)]
        data: PathBuf,
        /// Input is raw MSMARCO lines rather than QA records.
        #[arg(long)]
        msmarco: bool,
        #[arg(long)]
        generator: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        hyper: HyperArgs,
    },
}

#[derive(Debug, Subcommand)]
pub enum EvalCommand {
    /// MRR and MAP over `{"question","passage"}` lines.
    Retrieval {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        encoder: String,
        #[arg(long)]
        reranker: Option<String>,
        #[arg(long, default_value_t = 10)]
        pool: usize,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Token F1, BLEU-1 and ROUGE on QA records.
    Generation {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        generator: String,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Macro-F1 and accuracy of a saved intent model.
    Intent {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

/// Parses `argv` (program name first) and runs it. Output goes to the
/// given writers so callers can capture it.
pub fn run_cli<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            // Help and version requests are not errors.
            if code == 0 {
                let _ = write!(out, "{text}");
            } else {
                let _ = write!(err, "{text}");
            }
            return if code == 0 { 0 } else { 2 };
        }
    };
    match execute(cli, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e:#}");
            1
        }
    }
}

fn config(cli: &Cli) -> anyhow::Result<PipelineConfig> {
    let mut cfg = PipelineConfig::from_env(cli.config.as_deref())?;
    if let Some(d) = &cli.model_dir {
        cfg.model_dir = Some(d.clone());
    }
    Ok(cfg)
}

fn execute(cli: Cli, out: &mut dyn Write) -> anyhow::Result<i32> {
    let cfg = config(&cli)?;
    match cli.command {
        Command::Ingest(a) => ingest(&cfg, &a, out),
        Command::Train(t) => train(&cfg, t, out),
        Command::Eval(e) => eval(&cfg, e, out),
        Command::Query { text } => query(&cfg, &text, out),
        Command::Serve { bind } => serve(cfg, bind),
    }
}

fn ingest(cfg: &PipelineConfig, a: &IngestArgs, out: &mut dyn Write) -> anyhow::Result<i32> {
    let kb = load_kb(&a.kb).with_context(|| format!("loading KB {}", a.kb.display()))?;
    let chunking = ChunkingConfig {
        sentences_per_passage: a.sentences,
        overlap: a.overlap,
        clean: a.clean,
    };
    let passages = kb.passages(&chunking)?;
    let encoder = cfg.registry().load_encoder(&a.encoder)?;
    let similarity = match a.similarity {
        SimilarityArg::Dot => Similarity::Dot,
        SimilarityArg::Cosine => Similarity::Cosine,
    };
    let index = build_index(passages, encoder.as_ref(), similarity)?;
    index.save(&a.out)?;
    writeln!(out, "{}", serde_json::json!({"passages": index.len(), "dim": index.dim(), "out": a.out}))?;
    Ok(0)
}

fn hyper<T: DeserializeOwned + Default>(h: &HyperArgs) -> anyhow::Result<T> {
    match &h.params {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?)
        }
        None => Ok(T::default()),
    }
}

fn intent_config(h: &HyperArgs) -> anyhow::Result<IntentTrainConfig> {
    let mut c: IntentTrainConfig = hyper(h)?;
    c.epochs = h.epochs.unwrap_or(c.epochs);
    c.learning_rate = h.lr.unwrap_or(c.learning_rate);
    c.batch_size = h.batch_size.unwrap_or(c.batch_size);
    c.seed = h.seed.unwrap_or(c.seed);
    Ok(c)
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

fn read_pairs(path: &Path) -> anyhow::Result<Vec<TrainingPair>> {
    read_jsonl(path).with_context(|| format!("reading pairs {}", path.display()))
}

fn train(cfg: &PipelineConfig, cmd: TrainCommand, out: &mut dyn Write) -> anyhow::Result<i32> {
    let registry = cfg.registry();
    match cmd {
        TrainCommand::Gate {
            data,
            positive_label,
            encoder,
            out: dir,
            hyper: h,
        } => {
            let rows = load_labeled(&data)?;
            let (mut pos, mut neg) = (Vec::new(), Vec::new());
            for r in rows {
                if r.label == positive_label {
                    pos.push(r.text);
                } else if r.label == GENERAL_LABEL {
                    neg.push(r.text);
                } else {
                    bail!("label `{}` is neither `{GENERAL_LABEL}` nor `{positive_label}`", r.label);
                }
            }
            let enc = registry.load_encoder(&encoder)?;
            let (gate, report) = train_domain_gate(&pos, &neg, &positive_label, enc.as_ref(), &intent_config(&h)?)?;
            gate.save(&dir)?;
            write_json(&dir.join("train_report.json"), &report)?;
            writeln!(out, "{}", serde_json::to_string(&report)?)?;
        }
        TrainCommand::Intent {
            data,
            encoder,
            out: dir,
            freeze_encoder,
            hyper: h,
        } => {
            let rows = load_labeled(&data)?;
            let labels = IntentLabelSet::from_examples(&rows)?;
            let examples = index_examples(&rows, &labels)?;
            let enc = registry.load_encoder(&encoder)?;
            let mut c = intent_config(&h)?;
            c.freeze_encoder |= freeze_encoder;
            let (clf, report) = train_intent_classifier(&examples, labels, enc.as_ref(), &c)?;
            clf.save(&dir)?;
            write_json(&dir.join("train_report.json"), &report)?;
            writeln!(out, "{}", serde_json::to_string(&report)?)?;
        }
        TrainCommand::BiEncoder {
            pairs,
            encoder,
            out: dir,
            hyper: h,
        } => {
            let mut c: BiEncoderTrainConfig = hyper(&h)?;
            c.epochs = h.epochs.unwrap_or(c.epochs);
            c.learning_rate = h.lr.unwrap_or(c.learning_rate);
            c.mnrl.batch_size = h.batch_size.unwrap_or(c.mnrl.batch_size);
            c.seed = h.seed.unwrap_or(c.seed);
            let enc = registry.load_encoder(&encoder)?;
            let (trained, log) = train_bi_encoder(&read_pairs(&pairs)?, enc.as_ref(), &c)?;
            trained.save(&dir)?;
            write_json(&dir.join("train_log.json"), &log)?;
            writeln!(out, "{}", serde_json::json!({"epoch_losses": log.epoch_losses}))?;
        }
        TrainCommand::CrossEncoder {
            pairs,
            scorer,
            out: dir,
            hyper: h,
        } => {
            let mut c: CrossEncoderTrainConfig = hyper(&h)?;
            c.epochs = h.epochs.unwrap_or(c.epochs);
            c.learning_rate = h.lr.unwrap_or(c.learning_rate);
            c.batch_size = h.batch_size.unwrap_or(c.batch_size);
            c.seed = h.seed.unwrap_or(c.seed);
            let s = registry.load_pair_scorer(&scorer)?;
            let (trained, log) = train_cross_encoder(&read_pairs(&pairs)?, s.as_ref(), &c)?;
            trained.save(&dir)?;
            write_json(&dir.join("train_log.json"), &log)?;
            writeln!(out, "{}", serde_json::json!({"epoch_losses": log.epoch_losses}))?;
        }
        TrainCommand::Generator {
            data,
            msmarco,
            generator,
            out: dir,
            hyper: h,
        } => {
            let records: Vec<QARecord> = if msmarco {
                let text = std::fs::read_to_string(&data).with_context(|| format!("reading {}", data.display()))?;
                let (records, stats) = preprocess_msmarco_lines(text.lines());
                tracing::info!(?stats, "msmarco preprocessing");
                records
            } else {
                load_qa_records(&data)?
            };
            let mut c: GenTrainConfig = hyper(&h)?;
            c.epochs = h.epochs.unwrap_or(c.epochs);
            c.lr = h.lr.unwrap_or(c.lr);
            c.batch = h.batch_size.unwrap_or(c.batch);
            c.seed = h.seed.unwrap_or(c.seed);
            let lm = registry.load_generator(&generator)?;
            let (trained, log) = train_generator(&records, lm.as_ref(), &c)?;
            trained.save(&dir)?;
            write_json(&dir.join("train_log.json"), &log)?;
            writeln!(
                out,
                "{}",
                serde_json::json!({"records": records.len(), "epoch_losses": log.epoch_losses, "updates": log.updates})
            )?;
        }
    }
    Ok(0)
}

fn report(r: &EvalReport, path: Option<&Path>, out: &mut dyn Write) -> anyhow::Result<i32> {
    if let Some(p) = path {
        r.write(p)?;
    }
    writeln!(out, "{}", r.to_json())?;
    Ok(0)
}

fn eval(cfg: &PipelineConfig, cmd: EvalCommand, out: &mut dyn Write) -> anyhow::Result<i32> {
    let registry = cfg.registry();
    match cmd {
        EvalCommand::Retrieval {
            pairs,
            encoder,
            reranker,
            pool,
            report: path,
        } => {
            let (passages, fixtures) = pairs_to_fixtures(&read_pairs(&pairs)?);
            let enc = registry.load_encoder(&encoder)?;
            let index = build_index(passages, enc.as_ref(), Similarity::Dot)?;
            let rr = reranker.map(|n| registry.load_pair_scorer(&n)).transpose()?;
            let r = evaluate_retrieval(&index, enc.as_ref(), rr.as_deref(), &fixtures, pool)?;
            report(&r, path.as_deref(), out)
        }
        EvalCommand::Generation {
            data,
            generator,
            report: path,
        } => {
            let records = load_qa_records(&data)?;
            let lm = registry.load_generator(&generator)?;
            let r = evaluate_generation(lm.as_ref(), &records, &cfg.decoding, &cfg.layout)?;
            report(&r, path.as_deref(), out)
        }
        EvalCommand::Intent {
            data,
            model,
            report: path,
        } => {
            let m: Arc<dyn IntentModel> = load_intent_model(&model, &registry)?;
            let examples = index_examples(&load_labeled(&data)?, m.labels())?;
            let r = evaluate_intent(m.as_ref(), &examples)?;
            report(&r, path.as_deref(), out)
        }
    }
}

fn query(cfg: &PipelineConfig, text: &str, out: &mut dyn Write) -> anyhow::Result<i32> {
    let components = Components::load(cfg);
    let ood = OodStore::open(cfg.stores.ood_path.as_deref())?;
    let result = answer_query(text, &components, cfg, &ood)?;
    writeln!(out, "{}", serde_json::to_string_pretty(&result)?)?;
    match &result.error {
        None => Ok(0),
        Some(e) => bail!("{} stage failed: {}", e.stage, e.message),
    }
}

fn serve(cfg: PipelineConfig, bind: SocketAddr) -> anyhow::Result<i32> {
    let state = Arc::new(ServiceState::from_config(cfg)?);
    let health = state.components.health(&state.config);
    tracing::info!(status = ?health.status, missing = ?health.missing, "components loaded");
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(naa_service::serve(state, bind))?;
    Ok(0)
}

/// JSON log lines on stderr, filtered by `RUST_LOG` (default `info`).
pub fn init_logging() {
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info"));
    let _ = tracing_subscriber::fmt()
        .json()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .try_init();
}
