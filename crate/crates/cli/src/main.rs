use std::io::{IsTerminal, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use objseek_core::encoder::{EmbeddingFile, Encoder, EncoderSpec};
use objseek_core::eval::{
    cumulative_tp_curve, curve_csv, zero_shot_classify, Journal, PromptTemplate, QueryLog,
};
use objseek_core::pipeline::{self, PipelineOptions};
use objseek_core::synth::STREET_CLASSES;
use objseek_core::{run_query, ClassLabel, EmbeddingVector, Index, Query, SearchMode};
use objseek_service::{AppState, SearchHit, ServiceOptions};

const DEFAULT_DIM: usize = 512;

#[derive(Parser)]
#[command(name = "objseek", version, about = "Object-level image search")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Crop, encode and index every new image in a directory.
    Ingest(IngestArgs),
    /// Rank images for a (class, text) query.
    Search(SearchArgs),
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Run the HTTP API.
    Serve(ServeArgs),
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    annotations: PathBuf,
    /// toy, remote:URL or file:PATH
    #[arg(long, default_value = "toy")]
    encoder: EncoderSpec,
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    with_full_image: bool,
    #[arg(long, default_value_t = default_workers())]
    workers: usize,
    /// Class set of a new index; defaults to 19 street-scene classes.
    #[arg(long, value_delimiter = ',')]
    classes: Vec<String>,
    /// Embedding dimension for toy and remote encoders.
    #[arg(long)]
    dim: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Table,
    Csv,
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    class: String,
    #[arg(long)]
    query: String,
    #[arg(long, default_value_t = 100)]
    k: usize,
    #[arg(long, default_value = "object")]
    mode: SearchMode,
    #[arg(long, value_enum, default_value = "table")]
    format: Format,
    /// Text encoder; inferred from the index when omitted.
    #[arg(long)]
    encoder: Option<EncoderSpec>,
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Cumulative true positives over the ranking of a judged query, as CSV.
    Curve(CurveArgs),
    /// Zero-shot classification of precomputed image embeddings.
    Classify(ClassifyArgs),
}

#[derive(Args)]
struct CurveArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    judgments: PathBuf,
    #[arg(long)]
    query_id: String,
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long)]
    encoder: Option<EncoderSpec>,
}

#[derive(Args)]
struct ClassifyArgs {
    #[arg(long)]
    embeddings: PathBuf,
    /// One label per line.
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, default_value = "{label}")]
    template: String,
    /// One true label per line, in the order of the embedding file.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long, default_value = "toy")]
    encoder: EncoderSpec,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, env = "OBJSEEK_INDEX")]
    index: PathBuf,
    #[arg(long, env = "OBJSEEK_PORT", default_value_t = 8080)]
    port: u16,
    #[arg(long, env = "OBJSEEK_BIND", default_value = "127.0.0.1")]
    bind: String,
    /// Text encoder; inferred from the index when omitted.
    #[arg(long, env = "OBJSEEK_ENCODER")]
    encoder: Option<EncoderSpec>,
    /// Answer text queries with the built-in toy encoder.
    #[arg(long, env = "OBJSEEK_TOY", conflicts_with = "encoder")]
    toy: bool,
    /// Annotation directory used to regenerate object crops.
    #[arg(long, env = "OBJSEEK_ANNOTATIONS")]
    annotations: Option<PathBuf>,
    #[arg(long, env = "OBJSEEK_JUDGMENTS", default_value = "judgments.jsonl")]
    judgments: PathBuf,
    /// Require `Authorization: Bearer <token>` on API calls.
    #[arg(long, env = "OBJSEEK_TOKEN", hide_env_values = true)]
    token: Option<String>,
    /// Static files served outside /v1, such as the web UI.
    #[arg(long, env = "OBJSEEK_STATIC")]
    static_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    crop_cache: usize,
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Ingest(a) => ingest(a),
        Command::Search(a) => search(a),
        Command::Eval(EvalCommand::Curve(a)) => curve(a),
        Command::Eval(EvalCommand::Classify(a)) => classify(a),
        Command::Serve(a) => serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let query_error = e
                .downcast_ref::<objseek_core::Error>()
                .is_some_and(objseek_core::Error::is_query_error);
            ExitCode::from(if query_error { 2 } else { 1 })
        }
    }
}

fn index_exists(path: &Path) -> bool {
    path.join("manifest.json").is_file()
}

fn load_index(path: &Path) -> Result<Index> {
    Index::load(path).with_context(|| format!("loading index {}", path.display()))
}

/// The encoder that answers text queries for `index`.
fn query_encoder(index: &Index, spec: Option<EncoderSpec>) -> Result<Box<dyn Encoder>> {
    let spec = match spec.or_else(|| EncoderSpec::for_index(index.encoder())) {
        Some(s) => s,
        None => bail!(
            "index was built with `{}`; pass --encoder to choose a text encoder",
            index.encoder().encoder_id
        ),
    };
    Ok(spec.open(index.dim())?)
}

fn ingest(a: IngestArgs) -> Result<()> {
    let existing = index_exists(&a.index).then(|| load_index(&a.index)).transpose()?;
    let dim = a
        .dim
        .or_else(|| existing.as_ref().map(Index::dim))
        .unwrap_or(DEFAULT_DIM);
    let encoder = a.encoder.open(dim)?;
    let mut index = match existing {
        Some(index) => {
            if !a.classes.is_empty() {
                log::warn!("--classes ignored: {} already exists", a.index.display());
            }
            index
        }
        None => {
            let names: Vec<String> = if a.classes.is_empty() {
                STREET_CLASSES.iter().map(|s| s.to_string()).collect()
            } else {
                a.classes.clone()
            };
            let classes = names
                .iter()
                .map(|c| ClassLabel::new(c.trim()))
                .collect::<objseek_core::Result<Vec<_>>>()?;
            Index::new(encoder.descriptor().clone(), classes)?
        }
    };
    let opts = PipelineOptions {
        with_full_image: a.with_full_image,
        workers: a.workers,
    };
    let report = pipeline::ingest_directory(&mut index, encoder.as_ref(), &a.images, &a.annotations, &opts);
    // Persist whatever was committed, even when a later image failed.
    index
        .persist(&a.index)
        .with_context(|| format!("writing index {}", a.index.display()))?;
    let report = report?;
    for w in &report.warnings {
        log::warn!("{w}");
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn search(a: SearchArgs) -> Result<()> {
    let index = load_index(&a.index)?;
    let encoder = query_encoder(&index, a.encoder)?;
    let query = Query::new(ClassLabel::new(a.class.as_str())?, a.query.as_str())?;
    let outcome = run_query(&index, encoder.as_ref(), &query, a.k, a.mode)?;
    let hits = SearchHit::from_results(&index, &outcome.results);
    let mut out = std::io::stdout().lock();
    match a.format {
        Format::Json => writeln!(out, "{}", serde_json::to_string(&hits)?)?,
        Format::Csv => {
            writeln!(out, "rank,image_id,score,best_object_index,x,y,width,height")?;
            for (i, h) in hits.iter().enumerate() {
                let obj = h.best_object_index.map(|j| j.to_string()).unwrap_or_default();
                let b = h
                    .bbox
                    .map(|b| format!("{},{},{},{}", b.x, b.y, b.width, b.height))
                    .unwrap_or_else(|| ",,,".into());
                writeln!(out, "{},{},{},{obj},{b}", i + 1, csv_field(h.image_id.as_str()), h.score)?;
            }
        }
        Format::Table => write_table(&mut out, &hits)?,
    }
    if outcome.exhausted && a.k > 0 {
        log::info!("only {} of {} requested images matched", hits.len(), a.k);
    }
    Ok(())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

fn use_color() -> bool {
    std::env::var_os("NO_COLOR").is_none_or(|v| v.is_empty()) && std::io::stdout().is_terminal()
}

fn write_table(out: &mut impl Write, hits: &[SearchHit]) -> Result<()> {
    let width = hits.iter().map(|h| h.image_id.as_str().len()).max().unwrap_or(0).max(8);
    let header = format!("{:>5}  {:<width$}  {:>9}  {:>6}  bbox", "rank", "image_id", "score", "object");
    if use_color() {
        writeln!(out, "\x1b[1m{header}\x1b[0m")?;
    } else {
        writeln!(out, "{header}")?;
    }
    for (i, h) in hits.iter().enumerate() {
        let obj = h.best_object_index.map(|j| j.to_string()).unwrap_or_else(|| "-".into());
        let bbox = h
            .bbox
            .map(|b| format!("{}x{}+{}+{}", b.width, b.height, b.x, b.y))
            .unwrap_or_else(|| "-".into());
        writeln!(
            out,
            "{:>5}  {:<width$}  {:>9.6}  {:>6}  {bbox}",
            i + 1,
            h.image_id.as_str(),
            h.score,
            obj
        )?;
    }
    Ok(())
}

fn curve(a: CurveArgs) -> Result<()> {
    let queries = QueryLog::replay(&QueryLog::beside(&a.judgments))?;
    let Some(record) = queries.get(&a.query_id) else {
        bail!(
            "query `{}` is not in {}; run it through the service first",
            a.query_id,
            QueryLog::beside(&a.judgments).display()
        );
    };
    let judgments = Journal::replay(&a.judgments)?;
    let index = load_index(&a.index)?;
    let encoder = query_encoder(&index, a.encoder)?;
    let query = Query::new(ClassLabel::new(record.class.as_str())?, record.text.as_str())?;
    let ranked = run_query(&index, encoder.as_ref(), &query, a.n, record.mode)?;
    let ids: Vec<_> = ranked.results.into_iter().map(|r| r.image_id).collect();
    print!("{}", curve_csv(&cumulative_tp_curve(&ids, &judgments, &a.query_id, a.n)));
    Ok(())
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_owned)
        .collect())
}

fn classify(a: ClassifyArgs) -> Result<()> {
    let file = EmbeddingFile::read(&a.embeddings)?;
    let labels = read_lines(&a.labels)?;
    let template = PromptTemplate::new(a.template)?;
    let encoder = a.encoder.open(file.dim)?;
    let items = file
        .entries
        .iter()
        .map(|(key, v)| EmbeddingVector::from_raw(v).with_context(|| format!("embedding `{key}`")))
        .collect::<Result<Vec<_>>>()?;
    let truth = match &a.truth {
        Some(path) => {
            let names = read_lines(path)?;
            if names.len() != items.len() {
                bail!("{} has {} labels for {} embeddings", path.display(), names.len(), items.len());
            }
            let idx = names
                .iter()
                .map(|n| match labels.iter().position(|l| l == n) {
                    Some(i) => Ok(i),
                    None => bail!("true label `{n}` is not in {}", a.labels.display()),
                })
                .collect::<Result<Vec<_>>>()?;
            Some(idx)
        }
        None => None,
    };
    let result = zero_shot_classify(encoder.as_ref(), &items, &labels, &template, truth.as_deref())?;
    let assignments: Vec<serde_json::Value> = file
        .entries
        .iter()
        .zip(&result.assignments)
        .map(|((key, _), &l)| serde_json::json!({ "key": key, "label": labels[l] }))
        .collect();
    let body = serde_json::json!({
        "template": template.as_str(),
        "items": items.len(),
        "accuracy": result.accuracy,
        "assignments": assignments,
    });
    println!("{}", serde_json::to_string_pretty(&body)?);
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let index = load_index(&a.index)?;
    let spec = if a.toy { Some(EncoderSpec::Toy) } else { a.encoder.clone() };
    let encoder: Option<Arc<dyn Encoder>> = match query_encoder(&index, spec) {
        Ok(e) => Some(Arc::from(e)),
        Err(e) => {
            log::warn!("search disabled: {e:#}");
            None
        }
    };
    let options = ServiceOptions {
        annotations_dir: a.annotations,
        journal_path: a.judgments,
        bearer_token: a.token,
        crop_cache_entries: a.crop_cache,
    };
    let state = Arc::new(AppState::new(index, encoder, options)?);
    let app = objseek_service::router(state, a.static_dir.as_deref());
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind((a.bind.as_str(), a.port))
            .await
            .with_context(|| format!("binding {}:{}", a.bind, a.port))?;
        eprintln!("listening on http://{}/v1", listener.local_addr()?);
        objseek_service::serve(listener, app).await?;
        Ok(())
    })
}
