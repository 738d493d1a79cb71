//! The `gaterag` command line: build an index, run a pipeline mode over a
//! query set, score traces, sweep the uncertainty threshold and inspect gold
//! document ranks.
//!
//! Settings resolve as flag > `GATERAG_*` environment variable > config
//! file. Every command checks its input files before any backend is
//! contacted, and writes its output atomically.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use gaterag::config::Config;
use gaterag::corpus::{load_corpus, load_queries, to_jsonl, validate_gold_ids, ChunkLookup, DocChunk, QueryItem};
use gaterag::embed::{embed_texts, Embedder};
use gaterag::eval::{gold_rank_report, score_traces, sweep_report, EvalReport, SweepRow};
use gaterag::fsutil::write_atomic;
use gaterag::index::FlatIndex;
use gaterag::pipeline::{Pipeline, PipelineMode, QueryTrace, RunConfig};
use gaterag::{Error, ErrorCategory, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Parser)]
#[command(name = "gaterag", version, about = "Uncertainty-gated dual-path retrieval for question answering")]
pub struct Cli {
    /// Validate inputs and print the plan without calling any backend.
    #[arg(long, global = true)]
    pub dry_run: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Embed a corpus and write an index directory.
    Index(IndexArgs),
    /// Run one pipeline mode over a query set and write traces.
    Run(RunArgs),
    /// Score a traces file against its queries.
    Eval(EvalArgs),
    /// Run a gated mode at several thresholds against a no-retrieval baseline.
    Sweep(SweepArgs),
    /// Histogram of gold-document ranks under query-only retrieval.
    GoldRank(GoldRankArgs),
}

#[derive(Debug, Args)]
pub struct IndexArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
    /// Embedder settings; the built-in hashing embedder when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub queries: PathBuf,
    /// One of: no_retrieval, standard_rag, llm_judge, hyde, q2d, cot, dtr,
    /// dtr_no_ugt, dtr_no_dpr, fixed_mix(Q,P).
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub config: PathBuf,
    /// Traces output (JSON Lines).
    #[arg(long)]
    pub out: PathBuf,
    /// Index directory; overrides `index_dir` in the config.
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long)]
    pub u_threshold: Option<f64>,
    #[arg(long)]
    pub width: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub traces: PathBuf,
    #[arg(long)]
    pub queries: PathBuf,
    /// Report output (JSON).
    #[arg(long)]
    pub out: PathBuf,
    /// Also write a tab-separated summary here.
    #[arg(long)]
    pub tsv: Option<PathBuf>,
    /// Report mean per-document gold coverage next to any-hit recall.
    #[arg(long)]
    pub per_doc_recall: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub queries: PathBuf,
    /// Comma-separated, e.g. `0.001,0.005,0.01`.
    #[arg(long)]
    pub thresholds: String,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub index: Option<PathBuf>,
    /// Gated mode to sweep; defaults to the config's mode.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub tsv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GoldRankArgs {
    #[arg(long)]
    pub queries: PathBuf,
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Embedder settings; must match the ones used to build the index.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Process exit code for an error category.
pub fn exit_code(category: ErrorCategory) -> i32 {
    match category {
        ErrorCategory::Usage => 2,
        ErrorCategory::Config => 3,
        ErrorCategory::Data => 4,
        ErrorCategory::Backend => 5,
    }
}

/// `error: <category>: <message>` on one line.
pub fn error_line(e: &Error) -> String {
    let msg: String = e
        .to_string()
        .chars()
        .map(|c| if c == '\n' || c == '\r' { ' ' } else { c })
        .collect();
    format!("error: {}: {msg}", e.category().as_str())
}

/// Runs one command. `env` supplies `GATERAG_*` overrides; human-readable
/// output goes to `out`.
pub fn execute(cli: Cli, env: &dyn Fn(&str) -> Option<String>, out: &mut dyn Write) -> Result<()> {
    let dry = cli.dry_run;
    match cli.command {
        Command::Index(a) => index(a, dry, env, out),
        Command::Run(a) => run(a, dry, env, out),
        Command::Eval(a) => eval(a, dry, out),
        Command::Sweep(a) => sweep(a, dry, env, out),
        Command::GoldRank(a) => gold_rank(a, dry, env, out),
    }
}

fn say(out: &mut dyn Write, text: impl AsRef<str>) {
    // Losing console output is not worth failing the command over.
    let _ = writeln!(out, "{}", text.as_ref());
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, format!("{what} not found")),
        })
    }
}

fn load_config(path: Option<&Path>, env: &dyn Fn(&str) -> Option<String>) -> Result<Config> {
    let mut cfg = match path {
        Some(p) => {
            require_file(p, "config file")?;
            Config::load(p)?
        }
        None => Config::default(),
    };
    cfg.apply_env(env)?;
    Ok(cfg)
}

fn parse_mode(s: &str) -> Result<PipelineMode> {
    s.parse()
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value)
        .map(|mut s| {
            s.push('\n');
            s
        })
        .map_err(|e| Error::Contract(format!("serializing output: {e}")))
}

// ---------------------------------------------------------------------------
// Index directories

const INDEX_FILE: &str = "index.bin";
const CORPUS_FILE: &str = "corpus.jsonl";
const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    embedder: String,
    dim: usize,
    docs: usize,
}

struct IndexDir {
    index: FlatIndex,
    chunks: Vec<DocChunk>,
    manifest: Manifest,
}

impl IndexDir {
    fn check(dir: &Path) -> Result<()> {
        for f in [INDEX_FILE, CORPUS_FILE, MANIFEST_FILE] {
            require_file(&dir.join(f), "index file")?;
        }
        Ok(())
    }

    fn load(dir: &Path) -> Result<Self> {
        Self::check(dir)?;
        let mpath = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: mpath.clone(),
            line: e.line(),
            message: e.to_string(),
        })?;
        let index = FlatIndex::load(&dir.join(INDEX_FILE))?;
        if index.dim() != manifest.dim || index.len() != manifest.docs {
            return Err(Error::Integrity(format!(
                "{}: manifest says {} docs of dim {}, snapshot holds {} of dim {}",
                dir.display(),
                manifest.docs,
                manifest.dim,
                index.len(),
                index.dim()
            )));
        }
        let chunks = load_corpus(&dir.join(CORPUS_FILE))?;
        Ok(Self {
            index,
            chunks,
            manifest,
        })
    }

    /// The index must have been built by the embedder about to probe it.
    fn check_embedder(&self, embedder: &dyn Embedder) -> Result<()> {
        if embedder.id() != self.manifest.embedder {
            return Err(Error::Config(format!(
                "index was built with embedder {:?} but the configuration gives {:?}",
                self.manifest.embedder,
                embedder.id()
            )));
        }
        Ok(())
    }
}

fn index(
    a: IndexArgs,
    dry: bool,
    env: &dyn Fn(&str) -> Option<String>,
    out: &mut dyn Write,
) -> Result<()> {
    require_file(&a.corpus, "corpus")?;
    let cfg = load_config(a.config.as_deref(), env)?;
    cfg.validate_embedder()?;
    for f in cfg.input_files() {
        require_file(&f, "input file")?;
    }
    let chunks = load_corpus(&a.corpus)?;
    let embedder = cfg.build_embedder()?;
    if dry {
        say(out, "plan: index");
        say(out, format!("  corpus: {} docs from {}", chunks.len(), a.corpus.display()));
        say(out, format!("  embedder: {}", embedder.id()));
        say(out, format!("  output: {}", a.out.display()));
        say(out, "dry run: no backend calls made");
        return Ok(());
    }
    let cache = cfg.open_embedding_cache()?;
    let texts: Vec<String> = chunks.iter().map(|c| c.text.clone()).collect();
    let vectors = embed_texts(&texts, embedder.as_ref(), &cache, cfg.embed_options())?;
    let idx = FlatIndex::build(&chunks, &vectors)?;

    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let manifest = Manifest {
        embedder: embedder.id().to_string(),
        dim: idx.dim(),
        docs: idx.len(),
    };
    write_atomic(&a.out.join(CORPUS_FILE), to_jsonl(&chunks)?.as_bytes())?;
    idx.save(&a.out.join(INDEX_FILE))?;
    write_atomic(&a.out.join(MANIFEST_FILE), to_json(&manifest)?.as_bytes())?;
    say(
        out,
        format!("indexed {} docs (dim {}) into {}", idx.len(), idx.dim(), a.out.display()),
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// Pipeline commands

struct Prepared {
    cfg: Config,
    queries: Vec<QueryItem>,
    index_dir: PathBuf,
    dir: IndexDir,
    embedder: Box<dyn Embedder>,
}

/// Resolves settings and loads every local input. Touches no backend.
fn prepare(
    config: &Path,
    queries: &Path,
    index_flag: Option<&Path>,
    env: &dyn Fn(&str) -> Option<String>,
    apply_flags: impl FnOnce(&mut Config) -> Result<()>,
) -> Result<Prepared> {
    require_file(queries, "queries file")?;
    let mut cfg = load_config(Some(config), env)?;
    apply_flags(&mut cfg)?;
    cfg.validate()?;
    let index_dir = index_flag
        .map(Path::to_path_buf)
        .or_else(|| cfg.index_dir.clone())
        .ok_or_else(|| Error::Usage("no index: pass --index or set index_dir in the config".into()))?;
    IndexDir::check(&index_dir)?;
    for f in cfg.input_files() {
        require_file(&f, "input file")?;
    }
    let queries = load_queries(queries)?;
    let dir = IndexDir::load(&index_dir)?;
    validate_gold_ids(&queries, &dir.chunks)?;
    let embedder = cfg.build_embedder()?;
    dir.check_embedder(embedder.as_ref())?;
    Ok(Prepared {
        cfg,
        queries,
        index_dir,
        dir,
        embedder,
    })
}

fn describe_generator(cfg: &Config) -> String {
    let g = &cfg.generator;
    match (&g.endpoint, &g.script) {
        (Some(url), _) if cfg.uses_network() && g.kind == gaterag::config::GeneratorKind::Http => {
            format!("http {url} model {}", g.model.as_deref().unwrap_or("?"))
        }
        (_, Some(script)) => format!("mock script {}", script.display()),
        _ => "unconfigured".into(),
    }
}

fn print_plan(out: &mut dyn Write, command: &str, p: &Prepared, rc: &RunConfig, output: &Path) {
    say(out, format!("plan: {command}"));
    say(out, format!("  mode: {}", rc.mode));
    say(out, format!("  queries: {}", p.queries.len()));
    say(
        out,
        format!(
            "  index: {} docs, dim {} ({})",
            p.dir.index.len(),
            p.dir.index.dim(),
            p.index_dir.display()
        ),
    );
    say(out, format!("  embedder: {}", p.embedder.id()));
    say(out, format!("  generator: {}", describe_generator(&p.cfg)));
    say(
        out,
        format!(
            "  u_threshold: {}  n_per_path: {}  k_final: {}  width: {}",
            rc.u_threshold, rc.n_per_path, rc.k_final, rc.width
        ),
    );
    say(out, format!("  output: {}", output.display()));
}

fn build_pipeline(p: Prepared) -> Result<(Pipeline, Config, Vec<QueryItem>)> {
    let gateway = p.cfg.build_gateway()?;
    let cache = p.cfg.open_embedding_cache()?;
    let pipeline = Pipeline::new(
        p.dir.index,
        ChunkLookup::new(p.dir.chunks),
        p.embedder,
        cache,
        gateway,
    )?
    .with_embed_options(p.cfg.embed_options());
    Ok((pipeline, p.cfg, p.queries))
}

/// Turns per-query failures into a command failure, after the complete
/// traces have been written.
fn failures(traces: &[QueryTrace]) -> Result<()> {
    let failed: Vec<&QueryTrace> = traces.iter().filter(|t| t.error.is_some()).collect();
    let Some(first) = failed.first() else { return Ok(()) };
    let err = first.error.as_ref().expect("filtered");
    let msg = format!(
        "{} of {} queries failed; first {}: {}",
        failed.len(),
        traces.len(),
        first.query_id,
        err.message
    );
    Err(match err.category.as_str() {
        "backend" => Error::Generation(msg),
        "config" => Error::Config(msg),
        "usage" => Error::Usage(msg),
        _ => Error::Integrity(msg),
    })
}

fn run(
    a: RunArgs,
    dry: bool,
    env: &dyn Fn(&str) -> Option<String>,
    out: &mut dyn Write,
) -> Result<()> {
    let mode = a.mode.as_deref().map(parse_mode).transpose()?;
    let p = prepare(&a.config, &a.queries, a.index.as_deref(), env, |cfg| {
        if let Some(m) = mode {
            cfg.mode = m;
        }
        if let Some(t) = a.u_threshold {
            cfg.u_threshold = t;
        }
        if let Some(w) = a.width {
            cfg.width = w;
        }
        Ok(())
    })?;
    let rc = p.cfg.run_config();
    if dry {
        print_plan(out, "run", &p, &rc, &a.out);
        say(out, "dry run: no backend calls made");
        return Ok(());
    }
    let (pipeline, _, queries) = build_pipeline(p)?;
    let traces = pipeline.run_batch(&queries, &rc);
    write_atomic(&a.out, to_jsonl(&traces)?.as_bytes())?;
    let triggered = traces.iter().filter(|t| t.triggered).count();
    say(
        out,
        format!(
            "{} traces ({} retrieved) written to {}",
            traces.len(),
            triggered,
            a.out.display()
        ),
    );
    failures(&traces)
}

fn read_traces(path: &Path) -> Result<Vec<QueryTrace>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    summary: &'a EvalReport,
    records: &'a [gaterag::eval::EvalRecord],
}

fn eval(a: EvalArgs, dry: bool, out: &mut dyn Write) -> Result<()> {
    require_file(&a.traces, "traces file")?;
    require_file(&a.queries, "queries file")?;
    let traces = read_traces(&a.traces)?;
    let queries = load_queries(&a.queries)?;
    let records = score_traces(&traces, &queries)?;
    if dry {
        say(out, "plan: eval");
        say(out, format!("  traces: {} from {}", traces.len(), a.traces.display()));
        say(out, format!("  queries: {}", queries.len()));
        say(out, format!("  output: {}", a.out.display()));
        say(out, "dry run: no backend calls made");
        return Ok(());
    }
    let mode = traces.first().map(|t| t.mode).filter(|m| traces.iter().all(|t| t.mode == *m));
    let report = EvalReport::from_records(mode, &records, a.per_doc_recall);
    write_atomic(
        &a.out,
        to_json(&EvalOutput {
            summary: &report,
            records: &records,
        })?
        .as_bytes(),
    )?;
    if let Some(tsv) = &a.tsv {
        write_atomic(tsv, report.to_tsv().as_bytes())?;
    }
    let _ = write!(out, "{}", report.to_tsv());
    Ok(())
}

fn parse_thresholds(s: &str) -> Result<Vec<f64>> {
    let values: Vec<f64> = s
        .split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| Error::Usage(format!("bad threshold {t:?} in --thresholds")))
        })
        .collect::<Result<_>>()?;
    if values.is_empty() {
        return Err(Error::Usage("--thresholds is empty".into()));
    }
    if let Some(bad) = values.iter().find(|t| t.is_nan() || **t < 0.0) {
        return Err(Error::Usage(format!("threshold {bad} must be non-negative")));
    }
    Ok(values)
}

#[derive(Serialize)]
struct SweepOutput {
    mode: PipelineMode,
    baseline: EvalReport,
    per_threshold: Vec<SweepRow>,
}

fn sweep(
    a: SweepArgs,
    dry: bool,
    env: &dyn Fn(&str) -> Option<String>,
    out: &mut dyn Write,
) -> Result<()> {
    let thresholds = parse_thresholds(&a.thresholds)?;
    let mode = a.mode.as_deref().map(parse_mode).transpose()?;
    let p = prepare(&a.config, &a.queries, a.index.as_deref(), env, |cfg| {
        if let Some(m) = mode {
            cfg.mode = m;
        }
        Ok(())
    })?;
    let rc = p.cfg.run_config();
    if !matches!(
        rc.mode,
        PipelineMode::Dtr | PipelineMode::DtrNoDpr | PipelineMode::FixedMix { .. }
    ) {
        return Err(Error::Usage(format!(
            "sweep needs a gated mode (dtr, dtr_no_dpr, fixed_mix), got {}",
            rc.mode
        )));
    }
    if dry {
        print_plan(out, "sweep", &p, &rc, &a.out);
        let list: Vec<String> = thresholds.iter().map(f64::to_string).collect();
        say(out, format!("  thresholds: {}", list.join(", ")));
        say(out, "dry run: no backend calls made");
        return Ok(());
    }
    let (pipeline, _, queries) = build_pipeline(p)?;
    let baseline_traces = pipeline.run_batch(&queries, &rc.with_mode(PipelineMode::NoRetrieval));
    failures(&baseline_traces)?;
    let baseline = score_traces(&baseline_traces, &queries)?;
    let mut by_threshold = Vec::with_capacity(thresholds.len());
    for &t in &thresholds {
        let mut c = rc;
        c.u_threshold = t;
        let traces = pipeline.run_batch(&queries, &c);
        failures(&traces)?;
        by_threshold.push((t, traces));
    }
    let rows = sweep_report(&by_threshold, &queries, &baseline)?;
    let mut baseline_report = EvalReport::from_records(Some(PipelineMode::NoRetrieval), &baseline, false);
    baseline_report.per_threshold = Some(rows.clone());
    let tsv = baseline_report.to_tsv();
    write_atomic(
        &a.out,
        to_json(&SweepOutput {
            mode: rc.mode,
            baseline: EvalReport {
                per_threshold: None,
                ..baseline_report
            },
            per_threshold: rows,
        })?
        .as_bytes(),
    )?;
    if let Some(path) = &a.tsv {
        write_atomic(path, tsv.as_bytes())?;
    }
    let _ = write!(out, "{tsv}");
    Ok(())
}

fn gold_rank(
    a: GoldRankArgs,
    dry: bool,
    env: &dyn Fn(&str) -> Option<String>,
    out: &mut dyn Write,
) -> Result<()> {
    require_file(&a.queries, "queries file")?;
    IndexDir::check(&a.index)?;
    let cfg = load_config(a.config.as_deref(), env)?;
    cfg.validate_embedder()?;
    for f in cfg.input_files() {
        require_file(&f, "input file")?;
    }
    let queries = load_queries(&a.queries)?;
    let dir = IndexDir::load(&a.index)?;
    let embedder = cfg.build_embedder()?;
    dir.check_embedder(embedder.as_ref())?;
    if dry {
        say(out, "plan: gold-rank");
        say(out, format!("  queries: {}", queries.len()));
        say(out, format!("  index: {} docs ({})", dir.index.len(), a.index.display()));
        say(out, format!("  embedder: {}", embedder.id()));
        say(out, format!("  output: {}", a.out.display()));
        say(out, "dry run: no backend calls made");
        return Ok(());
    }
    let cache = cfg.open_embedding_cache()?;
    let texts: Vec<String> = queries.iter().map(|q| q.question.clone()).collect();
    let q_vecs = embed_texts(&texts, embedder.as_ref(), &cache, cfg.embed_options())?;
    let report = gold_rank_report(&dir.index, &queries, &q_vecs)?;
    write_atomic(&a.out, to_json(&report)?.as_bytes())?;
    say(
        out,
        format!(
            "rank 1-3: {}  4-10: {}  11-20: {}  20+: {}  skipped: {}",
            report.rank_1_3, report.rank_4_10, report.rank_11_20, report.rank_over_20, report.skipped
        ),
    );
    Ok(())
}
