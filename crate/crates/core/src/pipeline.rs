//! Per-query orchestration for the gated dual-path engine and every
//! comparison mode.
//!
//! Each query yields one [`QueryTrace`] recording what was generated, what
//! was retrieved and how many calls each component received. Failures are
//! recorded in the trace; a batch never drops a query.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::config::MaxTokens;
use crate::corpus::{ChunkLookup, DocChunk, QueryItem};
use crate::embed::{embed_texts, EmbedOptions, Embedder, EmbeddingCache};
use crate::error::{Error, Result};
use crate::generate::{render_prompt, Gateway, GenerationRequest, GenerationResult, TemplateKind};
use crate::index::{FlatIndex, Hit, UnitVector};
use crate::select::{self, PathHits, ScoredDoc};
use crate::uncertainty::{decide, uncertainty, UncertaintyScore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PipelineMode {
    NoRetrieval,
    StandardRag,
    LlmJudge,
    Hyde,
    Q2d,
    Cot,
    Dtr,
    DtrNoUgt,
    DtrNoDpr,
    FixedMix { q_count: usize, p_count: usize },
}

impl PipelineMode {
    pub const NAMES: [&'static str; 10] = [
        "no_retrieval",
        "standard_rag",
        "llm_judge",
        "hyde",
        "q2d",
        "cot",
        "dtr",
        "dtr_no_ugt",
        "dtr_no_dpr",
        "fixed_mix(a,b)",
    ];
}

impl fmt::Display for PipelineMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PipelineMode::NoRetrieval => f.write_str("no_retrieval"),
            PipelineMode::StandardRag => f.write_str("standard_rag"),
            PipelineMode::LlmJudge => f.write_str("llm_judge"),
            PipelineMode::Hyde => f.write_str("hyde"),
            PipelineMode::Q2d => f.write_str("q2d"),
            PipelineMode::Cot => f.write_str("cot"),
            PipelineMode::Dtr => f.write_str("dtr"),
            PipelineMode::DtrNoUgt => f.write_str("dtr_no_ugt"),
            PipelineMode::DtrNoDpr => f.write_str("dtr_no_dpr"),
            PipelineMode::FixedMix { q_count, p_count } => {
                write!(f, "fixed_mix({q_count},{p_count})")
            }
        }
    }
}

impl FromStr for PipelineMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let mode = match s {
            "no_retrieval" => PipelineMode::NoRetrieval,
            "standard_rag" => PipelineMode::StandardRag,
            "llm_judge" => PipelineMode::LlmJudge,
            "hyde" => PipelineMode::Hyde,
            "q2d" => PipelineMode::Q2d,
            "cot" => PipelineMode::Cot,
            "dtr" => PipelineMode::Dtr,
            "dtr_no_ugt" => PipelineMode::DtrNoUgt,
            "dtr_no_dpr" => PipelineMode::DtrNoDpr,
            _ => {
                let counts = s
                    .strip_prefix("fixed_mix(")
                    .and_then(|r| r.strip_suffix(')'))
                    .and_then(|inner| inner.split_once(','))
                    .and_then(|(a, b)| Some((a.trim().parse().ok()?, b.trim().parse().ok()?)));
                match counts {
                    Some((q_count, p_count)) => PipelineMode::FixedMix { q_count, p_count },
                    None => {
                        return Err(Error::Usage(format!(
                            "unknown mode {s:?}; valid modes: {}",
                            PipelineMode::NAMES.join(", ")
                        )))
                    }
                }
            }
        };
        Ok(mode)
    }
}

impl Serialize for PipelineMode {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PipelineMode {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunConfig {
    pub mode: PipelineMode,
    /// Retrieval fires when uncertainty is strictly above this. `-inf`
    /// opens the gate unconditionally.
    pub u_threshold: f64,
    pub n_per_path: usize,
    pub k_final: usize,
    pub width: usize,
    pub max_tokens: MaxTokens,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: PipelineMode::Dtr,
            u_threshold: 0.001,
            n_per_path: 5,
            k_final: 3,
            width: 1,
            max_tokens: MaxTokens::default(),
        }
    }
}

impl RunConfig {
    pub fn with_mode(mut self, mode: PipelineMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_per_path == 0 || self.k_final == 0 {
            return Err(Error::Config("n_per_path and k_final must be at least 1".into()));
        }
        if self.width == 0 {
            return Err(Error::Config("width must be at least 1".into()));
        }
        if self.u_threshold.is_nan()
            || (self.u_threshold < 0.0 && self.u_threshold != f64::NEG_INFINITY)
        {
            return Err(Error::Config(format!(
                "u_threshold must be >= 0 (or -inf), got {}",
                self.u_threshold
            )));
        }
        if let PipelineMode::FixedMix { q_count, p_count } = self.mode {
            if q_count + p_count != self.k_final {
                return Err(Error::Config(format!(
                    "fixed_mix({q_count},{p_count}) needs k_final = {}, got {}",
                    q_count + p_count,
                    self.k_final
                )));
            }
        }
        Ok(())
    }
}

/// Call counters for one query, in a fixed component order.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CallLog {
    pub generate_answer: u32,
    pub generate_pseudo_context: u32,
    pub generate_judge: u32,
    pub embed: u32,
    pub search: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallCount {
    pub component: String,
    pub count: u32,
}

impl CallLog {
    pub fn entries(&self) -> Vec<CallCount> {
        [
            ("generate_answer", self.generate_answer),
            ("generate_pseudo_context", self.generate_pseudo_context),
            ("generate_judge", self.generate_judge),
            ("embed", self.embed),
            ("search", self.search),
        ]
        .into_iter()
        .map(|(c, n)| CallCount {
            component: c.to_string(),
            count: n,
        })
        .collect()
    }
}

/// How the passages in the final prompt were chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionTrace {
    /// Doc ids in final-prompt order.
    pub passages: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub query_hits: Vec<Hit>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pseudo_hits: Vec<Hit>,
    /// Joint-scored union, best first; empty when no rescoring ran.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub candidates: Vec<ScoredDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_pseudo_angle: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceError {
    pub category: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryTrace {
    pub query_id: String,
    pub mode: PipelineMode,
    pub parametric_answer: Option<String>,
    pub u: Option<UncertaintyScore>,
    pub triggered: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge_verdict: Option<String>,
    pub pseudo_context: Option<String>,
    pub selection: Option<SelectionTrace>,
    pub final_answer: String,
    pub call_log: Vec<CallCount>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<TraceError>,
}

impl QueryTrace {
    pub fn calls(&self, component: &str) -> u32 {
        self.call_log
            .iter()
            .find(|c| c.component == component)
            .map_or(0, |c| c.count)
    }
}

pub const FLAG_NO_LOGPROBS: &str = "no_logprobs_forced_retrieval";
pub const FLAG_EMPTY_PSEUDO: &str = "empty_pseudo_context_query_only";
pub const FLAG_JUDGE_UNPARSED: &str = "judge_unparsed_retrieve";

/// Parses a judge reply. `None` when it starts with neither yes nor no.
pub fn parse_judge(reply: &str) -> Option<bool> {
    let first = reply
        .split(|c: char| !c.is_alphanumeric())
        .find(|t| !t.is_empty())?
        .to_lowercase();
    match first.as_str() {
        "yes" => Some(true),
        "no" => Some(false),
        _ => None,
    }
}

/// Everything a run needs: the index, its chunks, an embedder and a
/// generator. Safe to share across worker threads.
pub struct Pipeline {
    index: FlatIndex,
    chunks: ChunkLookup,
    embedder: Box<dyn Embedder>,
    embed_cache: EmbeddingCache,
    embed_opts: EmbedOptions,
    gateway: Gateway,
}

struct QueryRun<'a> {
    query: &'a QueryItem,
    cfg: &'a RunConfig,
    calls: CallLog,
    trace: QueryTrace,
}

impl Pipeline {
    pub fn new(
        index: FlatIndex,
        chunks: ChunkLookup,
        embedder: Box<dyn Embedder>,
        embed_cache: EmbeddingCache,
        gateway: Gateway,
    ) -> Result<Self> {
        for id in index.ids() {
            if chunks.get(id).is_none() {
                return Err(Error::Integrity(format!(
                    "index doc {id:?} has no chunk in the corpus"
                )));
            }
        }
        Ok(Self {
            index,
            chunks,
            embedder,
            embed_cache,
            embed_opts: EmbedOptions::default(),
            gateway,
        })
    }

    pub fn with_embed_options(mut self, opts: EmbedOptions) -> Self {
        self.embed_opts = opts;
        self
    }

    pub fn index(&self) -> &FlatIndex {
        &self.index
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    pub fn run_query(&self, query: &QueryItem, cfg: &RunConfig) -> QueryTrace {
        let mut run = QueryRun {
            query,
            cfg,
            calls: CallLog::default(),
            trace: QueryTrace {
                query_id: query.id.clone(),
                mode: cfg.mode,
                parametric_answer: None,
                u: None,
                triggered: false,
                judge_verdict: None,
                pseudo_context: None,
                selection: None,
                final_answer: String::new(),
                call_log: Vec::new(),
                flags: Vec::new(),
                error: None,
            },
        };
        let outcome = cfg.validate().and_then(|_| self.dispatch(&mut run));
        if let Err(e) = outcome {
            tracing::warn!(query = %query.id, error = %e, "query failed");
            run.trace.error = Some(TraceError {
                category: e.category().as_str().to_string(),
                message: e.to_string(),
            });
        }
        run.trace.call_log = run.calls.entries();
        run.trace
    }

    /// Runs every query, up to `cfg.width` at a time. Output order matches
    /// input order.
    pub fn run_batch(&self, queries: &[QueryItem], cfg: &RunConfig) -> Vec<QueryTrace> {
        if queries.is_empty() {
            return Vec::new();
        }
        let slots: Mutex<Vec<Option<QueryTrace>>> = Mutex::new(vec![None; queries.len()]);
        let next = AtomicUsize::new(0);
        let workers = cfg.width.max(1).min(queries.len());
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(q) = queries.get(i) else { break };
                    let trace = self.run_query(q, cfg);
                    slots.lock().expect("slots lock")[i] = Some(trace);
                });
            }
        });
        slots
            .into_inner()
            .expect("slots lock")
            .into_iter()
            .map(|t| t.expect("every query ran"))
            .collect()
    }

    fn dispatch(&self, run: &mut QueryRun<'_>) -> Result<()> {
        match run.cfg.mode {
            PipelineMode::NoRetrieval => {
                let answer = self.parametric(run)?;
                run.trace.final_answer = answer;
                Ok(())
            }
            PipelineMode::StandardRag => {
                run.trace.triggered = true;
                self.query_only(run)
            }
            PipelineMode::LlmJudge => self.judge(run),
            PipelineMode::Hyde => {
                run.trace.triggered = true;
                let pseudo = self.expand(run, TemplateKind::PseudoContext)?;
                if pseudo.trim().is_empty() {
                    run.trace.flags.push(FLAG_EMPTY_PSEUDO.into());
                    return self.query_only(run);
                }
                let probe = self.embed_one(run, &pseudo)?;
                self.single_probe(run, &probe)
            }
            PipelineMode::Q2d | PipelineMode::Cot => {
                run.trace.triggered = true;
                let kind = if run.cfg.mode == PipelineMode::Q2d {
                    TemplateKind::PseudoContext
                } else {
                    TemplateKind::Cot
                };
                let expansion = self.expand(run, kind)?;
                let signal = format!("{}\n{}", run.query.question, expansion);
                let probe = self.embed_one(run, &signal)?;
                self.single_probe(run, &probe)
            }
            PipelineMode::Dtr | PipelineMode::DtrNoDpr | PipelineMode::FixedMix { .. } => {
                if !self.gate(run)? {
                    return Ok(());
                }
                if run.cfg.mode == PipelineMode::DtrNoDpr {
                    return self.query_only(run);
                }
                self.dual_path(run)
            }
            PipelineMode::DtrNoUgt => {
                run.trace.triggered = true;
                self.dual_path(run)
            }
        }
    }

    fn generate(
        &self,
        run: &mut QueryRun<'_>,
        kind: TemplateKind,
        passages: Option<&[DocChunk]>,
    ) -> Result<GenerationResult> {
        let prompt = render_prompt(kind, &run.query.question, passages)?;
        let mt = &run.cfg.max_tokens;
        let request = match kind {
            TemplateKind::AnswerNoRetrieval | TemplateKind::AnswerWithRetrieval => {
                run.calls.generate_answer += 1;
                GenerationRequest::new(prompt, mt.answer)
            }
            TemplateKind::PseudoContext => {
                run.calls.generate_pseudo_context += 1;
                GenerationRequest::new(prompt, mt.pseudo_context).without_logprobs()
            }
            TemplateKind::Cot => {
                run.calls.generate_pseudo_context += 1;
                GenerationRequest::new(prompt, mt.cot).without_logprobs()
            }
            TemplateKind::Judge => {
                run.calls.generate_judge += 1;
                GenerationRequest::new(prompt, mt.judge).without_logprobs()
            }
        };
        self.gateway.generate(&request)
    }

    /// Answers without retrieval and records the answer's uncertainty.
    fn parametric(&self, run: &mut QueryRun<'_>) -> Result<String> {
        let result = self.generate(run, TemplateKind::AnswerNoRetrieval, None)?;
        run.trace.u = match uncertainty(&result) {
            Ok(u) => Some(u),
            Err(Error::UndefinedUncertainty) => None,
            Err(e) => return Err(e),
        };
        run.trace.parametric_answer = Some(result.text.clone());
        Ok(result.text)
    }

    /// Returns whether to retrieve. On bypass the parametric answer is
    /// already the final answer.
    fn gate(&self, run: &mut QueryRun<'_>) -> Result<bool> {
        if run.cfg.u_threshold == f64::NEG_INFINITY {
            run.trace.triggered = true;
            return Ok(true);
        }
        let answer = self.parametric(run)?;
        let retrieve = match run.trace.u {
            Some(u) => decide(u, run.cfg.u_threshold).retrieve,
            None => {
                run.trace.flags.push(FLAG_NO_LOGPROBS.into());
                true
            }
        };
        run.trace.triggered = retrieve;
        if !retrieve {
            run.trace.final_answer = answer;
        }
        Ok(retrieve)
    }

    fn judge(&self, run: &mut QueryRun<'_>) -> Result<()> {
        let reply = self.generate(run, TemplateKind::Judge, None)?;
        let verdict = parse_judge(&reply.text);
        run.trace.judge_verdict = Some(reply.text);
        let retrieve = verdict.unwrap_or_else(|| {
            run.trace.flags.push(FLAG_JUDGE_UNPARSED.into());
            true
        });
        run.trace.triggered = retrieve;
        if retrieve {
            self.query_only(run)
        } else {
            run.trace.final_answer = self.parametric(run)?;
            Ok(())
        }
    }

    fn expand(&self, run: &mut QueryRun<'_>, kind: TemplateKind) -> Result<String> {
        let text = self.generate(run, kind, None)?.text;
        run.trace.pseudo_context = Some(text.clone());
        Ok(text)
    }

    fn embed(&self, run: &mut QueryRun<'_>, texts: &[String]) -> Result<Vec<UnitVector>> {
        run.calls.embed += texts.len() as u32;
        embed_texts(texts, self.embedder.as_ref(), &self.embed_cache, self.embed_opts)
    }

    fn embed_one(&self, run: &mut QueryRun<'_>, text: &str) -> Result<UnitVector> {
        Ok(self.embed(run, &[text.to_string()])?.remove(0))
    }

    fn search(&self, run: &mut QueryRun<'_>, probe: &UnitVector, n: usize) -> Result<Vec<Hit>> {
        run.calls.search += 1;
        self.index.search(probe, n)
    }

    fn chunks_for(&self, ids: &[String]) -> Result<Vec<DocChunk>> {
        ids.iter()
            .map(|id| {
                self.chunks
                    .get(id)
                    .cloned()
                    .ok_or_else(|| Error::Integrity(format!("doc {id:?} missing from corpus")))
            })
            .collect()
    }

    fn answer_with(&self, run: &mut QueryRun<'_>, selection: SelectionTrace) -> Result<()> {
        let passages = self.chunks_for(&selection.passages)?;
        run.trace.selection = Some(selection);
        let result = self.generate(run, TemplateKind::AnswerWithRetrieval, Some(&passages))?;
        run.trace.final_answer = result.text;
        Ok(())
    }

    /// Top-`k` by the query embedding alone.
    fn query_only(&self, run: &mut QueryRun<'_>) -> Result<()> {
        let q = self.embed_one(run, &run.query.question.clone())?;
        self.single_probe(run, &q)
    }

    fn single_probe(&self, run: &mut QueryRun<'_>, probe: &UnitVector) -> Result<()> {
        let hits = self.search(run, probe, run.cfg.k_final)?;
        let selection = SelectionTrace {
            passages: hits.iter().map(|h| h.doc_id.clone()).collect(),
            query_hits: hits,
            pseudo_hits: Vec::new(),
            candidates: Vec::new(),
            query_pseudo_angle: None,
        };
        self.answer_with(run, selection)
    }

    /// Pseudo-context, both searches, then joint rescoring (or the fixed
    /// split for `fixed_mix`).
    fn dual_path(&self, run: &mut QueryRun<'_>) -> Result<()> {
        let pseudo = self.expand(run, TemplateKind::PseudoContext)?;
        if pseudo.trim().is_empty() {
            run.trace.flags.push(FLAG_EMPTY_PSEUDO.into());
            return self.query_only(run);
        }
        let vecs = self.embed(run, &[run.query.question.clone(), pseudo])?;
        let (q, p) = (&vecs[0], &vecs[1]);
        let n = run.cfg.n_per_path;
        let paths = PathHits {
            query: self.search(run, q, n)?,
            pseudo: self.search(run, p, n)?,
        };
        let angle = Some(q.dot(p).clamp(-1.0, 1.0).acos());
        let selection = match run.cfg.mode {
            PipelineMode::FixedMix { q_count, p_count } => SelectionTrace {
                passages: select::fixed_mix(&paths, q_count, p_count),
                query_hits: paths.query,
                pseudo_hits: paths.pseudo,
                candidates: Vec::new(),
                query_pseudo_angle: angle,
            },
            _ => {
                let result = select::select(&self.chunks, paths, q, p, run.cfg.k_final, &self.index)?;
                SelectionTrace {
                    passages: result.selected.into_iter().map(|c| c.id).collect(),
                    query_hits: result.paths.query,
                    pseudo_hits: result.paths.pseudo,
                    candidates: result.candidates,
                    query_pseudo_angle: Some(result.query_pseudo_angle),
                }
            }
        };
        self.answer_with(run, selection)
    }
}

/// Fraction of traces that retrieved.
pub fn trigger_ratio(traces: &[QueryTrace]) -> f64 {
    if traces.is_empty() {
        return 0.0;
    }
    traces.iter().filter(|t| t.triggered).count() as f64 / traces.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_names_round_trip() {
        for name in [
            "no_retrieval",
            "standard_rag",
            "llm_judge",
            "hyde",
            "q2d",
            "cot",
            "dtr",
            "dtr_no_ugt",
            "dtr_no_dpr",
            "fixed_mix(2,1)",
        ] {
            let mode: PipelineMode = name.parse().unwrap();
            assert_eq!(mode.to_string(), name);
        }
        assert_eq!(
            "fixed_mix( 1 , 2 )".parse::<PipelineMode>().unwrap(),
            PipelineMode::FixedMix { q_count: 1, p_count: 2 }
        );
    }

    #[test]
    fn unknown_mode_lists_valid_ones() {
        let err = "dtr2".parse::<PipelineMode>().unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
        assert!(err.to_string().contains("dtr_no_ugt"));
    }

    #[test]
    fn fixed_mix_must_sum_to_k() {
        let cfg = RunConfig::default().with_mode(PipelineMode::FixedMix { q_count: 2, p_count: 2 });
        assert!(cfg.validate().is_err());
        let cfg = RunConfig::default().with_mode(PipelineMode::FixedMix { q_count: 2, p_count: 1 });
        cfg.validate().unwrap();
    }

    #[test]
    fn threshold_must_be_non_negative_or_neg_inf() {
        let mut cfg = RunConfig {
            u_threshold: -0.5,
            ..RunConfig::default()
        };
        assert!(cfg.validate().is_err());
        cfg.u_threshold = f64::NEG_INFINITY;
        cfg.validate().unwrap();
    }

    #[test]
    fn judge_parsing() {
        assert_eq!(parse_judge("Yes."), Some(true));
        assert_eq!(parse_judge("  no, it can be answered"), Some(false));
        assert_eq!(parse_judge("NO"), Some(false));
        assert_eq!(parse_judge("Maybe"), None);
        assert_eq!(parse_judge(""), None);
        assert_eq!(parse_judge("Nope"), None);
    }

    #[test]
    fn ratio_counts_triggered() {
        let mk = |t| QueryTrace {
            query_id: "q".into(),
            mode: PipelineMode::Dtr,
            parametric_answer: None,
            u: None,
            triggered: t,
            judge_verdict: None,
            pseudo_context: None,
            selection: None,
            final_answer: String::new(),
            call_log: vec![],
            flags: vec![],
            error: None,
        };
        let traces: Vec<_> = (0..10).map(|i| mk(i < 4)).collect();
        assert!((trigger_ratio(&traces) - 0.4).abs() < 1e-12);
        assert_eq!(trigger_ratio(&[]), 0.0);
    }
}
