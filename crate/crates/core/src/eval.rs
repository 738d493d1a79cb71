//! Answer scoring, retrieval recall and threshold-sweep reports.
//!
//! EM and F1 follow the SQuAD conventions: both sides are lowercased,
//! stripped of ASCII punctuation and of the articles "a", "an", "the", and
//! whitespace-collapsed before comparison. F1 is the token-multiset overlap
//! F-measure, maximized over gold answers.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize, Serializer};

use crate::corpus::QueryItem;
use crate::error::{Error, Result};
use crate::index::{FlatIndex, UnitVector};
use crate::pipeline::{trigger_ratio, PipelineMode, QueryTrace};

pub fn normalize_answer(text: &str) -> String {
    let lowered: String = text
        .to_lowercase()
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect();

    // Drop articles that stand as whole words (regex `\b(a|an|the)\b`).
    let is_word = |c: char| c.is_alphanumeric() || c == '_';
    let mut no_articles = String::with_capacity(lowered.len());
    let mut word = String::new();
    let flush = |word: &mut String, out: &mut String| {
        if !matches!(word.as_str(), "a" | "an" | "the") {
            out.push_str(word);
        } else {
            out.push(' ');
        }
        word.clear();
    };
    for c in lowered.chars() {
        if is_word(c) {
            word.push(c);
        } else {
            flush(&mut word, &mut no_articles);
            no_articles.push(c);
        }
    }
    flush(&mut word, &mut no_articles);

    no_articles.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn token_f1(pred: &[&str], gold: &[&str]) -> f64 {
    if pred.is_empty() || gold.is_empty() {
        return if pred.is_empty() && gold.is_empty() { 1.0 } else { 0.0 };
    }
    let mut counts: HashMap<&str, i64> = HashMap::new();
    for t in gold {
        *counts.entry(t).or_default() += 1;
    }
    let mut same = 0i64;
    for t in pred {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                same += 1;
            }
        }
    }
    if same == 0 {
        return 0.0;
    }
    let precision = same as f64 / pred.len() as f64;
    let recall = same as f64 / gold.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// `(em, f1)` of `prediction` against the best-matching gold answer.
pub fn em_f1(prediction: &str, golds: &[String]) -> Result<(u8, f64)> {
    if golds.is_empty() {
        return Err(Error::Contract("em_f1 needs at least one gold answer".into()));
    }
    let pred = normalize_answer(prediction);
    let pred_tokens: Vec<&str> = pred.split_whitespace().collect();
    let mut em = 0u8;
    let mut f1 = 0.0f64;
    for g in golds {
        let gold = normalize_answer(g);
        if gold == pred {
            em = 1;
        }
        let gold_tokens: Vec<&str> = gold.split_whitespace().collect();
        f1 = f1.max(token_f1(&pred_tokens, &gold_tokens));
    }
    Ok((em, f1))
}

/// Whether any gold doc is among the final passages. `None` when the query
/// did not retrieve.
pub fn recall_at_k(trace: &QueryTrace, gold_doc_ids: &[String]) -> Option<bool> {
    let sel = trace.selection.as_ref()?;
    Some(gold_doc_ids.iter().any(|g| sel.passages.contains(g)))
}

/// Fraction of gold docs among the final passages. `None` when the query
/// did not retrieve or has no gold docs.
pub fn gold_coverage(trace: &QueryTrace, gold_doc_ids: &[String]) -> Option<f64> {
    let sel = trace.selection.as_ref()?;
    let golds: HashSet<&String> = gold_doc_ids.iter().collect();
    if golds.is_empty() {
        return None;
    }
    let found = golds.iter().filter(|g| sel.passages.contains(g)).count();
    Some(found as f64 / golds.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub query_id: String,
    pub em: u8,
    pub f1: f64,
    pub triggered: bool,
    pub u_value: Option<f64>,
    pub gold_hit_at_k: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_coverage: Option<f64>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub failed: bool,
}

/// Scores each trace against its query. Every trace must name a query.
pub fn score_traces(traces: &[QueryTrace], queries: &[QueryItem]) -> Result<Vec<EvalRecord>> {
    let by_id: HashMap<&str, &QueryItem> = queries.iter().map(|q| (q.id.as_str(), q)).collect();
    traces
        .iter()
        .map(|t| {
            let q = by_id.get(t.query_id.as_str()).ok_or_else(|| {
                Error::Contract(format!("trace for unknown query {:?}", t.query_id))
            })?;
            let (em, f1) = em_f1(&t.final_answer, &q.gold_answers)
                .map_err(|_| Error::Contract(format!("query {:?} has no gold answers", q.id)))?;
            let golds = q.gold_doc_ids.as_deref().filter(|g| !g.is_empty());
            Ok(EvalRecord {
                query_id: t.query_id.clone(),
                em,
                f1,
                triggered: t.triggered,
                u_value: t.u.map(|u| u.value),
                gold_hit_at_k: golds.and_then(|g| recall_at_k(t, g)),
                gold_coverage: golds.and_then(|g| gold_coverage(t, g)),
                failed: t.error.is_some(),
            })
        })
        .collect()
}

fn pct<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_f64(round2(*v))
}

fn opt_pct<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(v) => s.serialize_some(&round2(*v)),
        None => s.serialize_none(),
    }
}

pub fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// One row of a threshold sweep. All values are percentages.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub threshold: f64,
    #[serde(serialize_with = "pct")]
    pub avg_em: f64,
    #[serde(serialize_with = "pct")]
    pub avg_f1: f64,
    #[serde(serialize_with = "pct")]
    pub trigger_ratio: f64,
    /// `avg_em − avg_em(no retrieval)`, in points.
    #[serde(serialize_with = "pct")]
    pub improvement_vs_no_retrieval: f64,
    /// Share of queries whose uncertainty is at most the threshold.
    #[serde(serialize_with = "pct")]
    pub query_ratio: f64,
    /// No-retrieval EM over the queries counted by `query_ratio`.
    #[serde(serialize_with = "opt_pct")]
    pub parametric_em_within: Option<f64>,
}

/// Aggregate scores. Percentages are kept at full precision and written
/// with two decimals.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub mode: Option<PipelineMode>,
    pub queries: usize,
    pub failed: usize,
    #[serde(serialize_with = "pct")]
    pub avg_em: f64,
    #[serde(serialize_with = "pct")]
    pub avg_f1: f64,
    #[serde(serialize_with = "pct")]
    pub trigger_ratio: f64,
    #[serde(serialize_with = "opt_pct")]
    pub recall_at_k: Option<f64>,
    #[serde(serialize_with = "opt_pct", skip_serializing_if = "Option::is_none")]
    pub recall_per_doc: Option<f64>,
    pub recall_denominator: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_threshold: Option<Vec<SweepRow>>,
}

impl EvalReport {
    /// `per_doc` additionally reports mean gold-document coverage.
    pub fn from_records(mode: Option<PipelineMode>, records: &[EvalRecord], per_doc: bool) -> Self {
        let n = records.len();
        let retrieved: Vec<&EvalRecord> =
            records.iter().filter(|r| r.gold_hit_at_k.is_some()).collect();
        Self {
            mode,
            queries: n,
            failed: records.iter().filter(|r| r.failed).count(),
            avg_em: 100.0 * mean(records.iter().map(|r| f64::from(r.em))).unwrap_or(0.0),
            avg_f1: 100.0 * mean(records.iter().map(|r| r.f1)).unwrap_or(0.0),
            trigger_ratio: 100.0
                * mean(records.iter().map(|r| if r.triggered { 1.0 } else { 0.0 })).unwrap_or(0.0),
            recall_at_k: mean(
                retrieved
                    .iter()
                    .map(|r| if r.gold_hit_at_k == Some(true) { 1.0 } else { 0.0 }),
            )
            .map(|v| 100.0 * v),
            recall_per_doc: if per_doc {
                mean(records.iter().filter_map(|r| r.gold_coverage)).map(|v| 100.0 * v)
            } else {
                None
            },
            recall_denominator: retrieved.len(),
            per_threshold: None,
        }
    }

    /// Tab-separated one-row table with a header line.
    pub fn to_tsv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.2}")).unwrap_or_default();
        let mut out = String::from("mode\tqueries\tavg_em\tavg_f1\ttrigger_ratio\trecall_at_k\n");
        out.push_str(&format!(
            "{}\t{}\t{:.2}\t{:.2}\t{:.2}\t{}\n",
            self.mode.map(|m| m.to_string()).unwrap_or_default(),
            self.queries,
            self.avg_em,
            self.avg_f1,
            self.trigger_ratio,
            opt(self.recall_at_k)
        ));
        if let Some(rows) = &self.per_threshold {
            out.push_str("\nthreshold\tavg_em\tavg_f1\ttrigger_ratio\timprovement\tquery_ratio\tparametric_em_within\n");
            for r in rows {
                out.push_str(&format!(
                    "{}\t{:.2}\t{:.2}\t{:.2}\t{:.2}\t{:.2}\t{}\n",
                    r.threshold,
                    r.avg_em,
                    r.avg_f1,
                    r.trigger_ratio,
                    r.improvement_vs_no_retrieval,
                    r.query_ratio,
                    opt(r.parametric_em_within)
                ));
            }
        }
        out
    }
}

fn sorted_ids<'a>(ids: impl Iterator<Item = &'a str>) -> Vec<&'a str> {
    let mut v: Vec<&str> = ids.collect();
    v.sort_unstable();
    v
}

/// Builds per-threshold rows. Every trace list and the baseline must cover
/// the same query set. Uncertainty for the query ratio comes from the
/// baseline records; queries without one count as above every threshold.
pub fn sweep_report(
    traces_by_threshold: &[(f64, Vec<QueryTrace>)],
    queries: &[QueryItem],
    baseline_no_retrieval: &[EvalRecord],
) -> Result<Vec<SweepRow>> {
    let base_ids = sorted_ids(baseline_no_retrieval.iter().map(|r| r.query_id.as_str()));
    let base_em = 100.0
        * mean(baseline_no_retrieval.iter().map(|r| f64::from(r.em))).unwrap_or(0.0);
    let mut rows = Vec::with_capacity(traces_by_threshold.len());
    for (threshold, traces) in traces_by_threshold {
        let ids = sorted_ids(traces.iter().map(|t| t.query_id.as_str()));
        if ids != base_ids {
            return Err(Error::Contract(format!(
                "query set at threshold {threshold} differs from the baseline"
            )));
        }
        let records = score_traces(traces, queries)?;
        let report = EvalReport::from_records(None, &records, false);
        let within: Vec<&EvalRecord> = baseline_no_retrieval
            .iter()
            .filter(|r| r.u_value.is_some_and(|u| u <= *threshold))
            .collect();
        rows.push(SweepRow {
            threshold: *threshold,
            avg_em: report.avg_em,
            avg_f1: report.avg_f1,
            trigger_ratio: 100.0 * trigger_ratio(traces),
            improvement_vs_no_retrieval: report.avg_em - base_em,
            query_ratio: if base_ids.is_empty() {
                0.0
            } else {
                100.0 * within.len() as f64 / base_ids.len() as f64
            },
            parametric_em_within: mean(within.iter().map(|r| f64::from(r.em))).map(|v| 100.0 * v),
        });
    }
    Ok(rows)
}

/// Histogram of the best gold-document rank under full query-vector
/// ranking.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GoldRankReport {
    pub rank_1_3: usize,
    pub rank_4_10: usize,
    pub rank_11_20: usize,
    pub rank_over_20: usize,
    /// Queries without gold ids, or whose gold ids are all missing from the
    /// index.
    pub skipped: usize,
    /// `(query_id, best 1-based rank)` for every ranked query.
    pub ranks: Vec<(String, usize)>,
}

pub fn gold_rank_report(
    index: &FlatIndex,
    queries: &[QueryItem],
    q_vecs: &[UnitVector],
) -> Result<GoldRankReport> {
    if queries.len() != q_vecs.len() {
        return Err(Error::Contract(format!(
            "{} queries but {} query vectors",
            queries.len(),
            q_vecs.len()
        )));
    }
    let mut report = GoldRankReport::default();
    for (q, v) in queries.iter().zip(q_vecs) {
        let golds: HashSet<&str> = q
            .gold_doc_ids
            .iter()
            .flatten()
            .map(String::as_str)
            .collect();
        if golds.is_empty() {
            report.skipped += 1;
            continue;
        }
        let ranking = index.search(v, index.len())?;
        let Some(pos) = ranking.iter().position(|h| golds.contains(h.doc_id.as_str())) else {
            report.skipped += 1;
            continue;
        };
        let rank = pos + 1;
        match rank {
            1..=3 => report.rank_1_3 += 1,
            4..=10 => report.rank_4_10 += 1,
            11..=20 => report.rank_11_20 += 1,
            _ => report.rank_over_20 += 1,
        }
        report.ranks.push((q.id.clone(), rank));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::SelectionTrace;

    fn golds(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn normalization_steps() {
        assert_eq!(normalize_answer("The Eiffel Tower!"), "eiffel tower");
        assert_eq!(normalize_answer(""), "");
        assert_eq!(normalize_answer("A  an the"), "");
        assert_eq!(normalize_answer("theater"), "theater");
        assert_eq!(normalize_answer("a1 b"), "a1 b");
    }

    #[test]
    fn em_and_f1() {
        assert_eq!(em_f1("Paris", &golds(&["Paris"])).unwrap(), (1, 1.0));
        let (em, f1) = em_f1("Barack Obama", &golds(&["Obama"])).unwrap();
        assert_eq!(em, 0);
        assert!((f1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(em_f1("the Eiffel Tower", &golds(&["Eiffel Tower"])).unwrap(), (1, 1.0));
        assert!(em_f1("x", &[]).is_err());
    }

    #[test]
    fn empty_normalized_answers() {
        assert_eq!(em_f1("The", &golds(&["a"])).unwrap(), (1, 1.0));
        assert_eq!(em_f1("", &golds(&["Paris"])).unwrap(), (0, 0.0));
    }

    fn trace(id: &str, passages: Option<&[&str]>, triggered: bool) -> QueryTrace {
        QueryTrace {
            query_id: id.into(),
            mode: PipelineMode::Dtr,
            parametric_answer: None,
            u: None,
            triggered,
            judge_verdict: None,
            pseudo_context: None,
            selection: passages.map(|p| SelectionTrace {
                passages: golds(p),
                query_hits: vec![],
                pseudo_hits: vec![],
                candidates: vec![],
                query_pseudo_angle: None,
            }),
            final_answer: "x".into(),
            call_log: vec![],
            flags: vec![],
            error: None,
        }
    }

    #[test]
    fn recall_any_hit() {
        let t = trace("q", Some(&["a", "b", "c"]), true);
        assert_eq!(recall_at_k(&t, &golds(&["c", "d"])), Some(true));
        assert_eq!(recall_at_k(&t, &golds(&["d"])), Some(false));
        assert_eq!(gold_coverage(&t, &golds(&["c", "d"])), Some(0.5));
        assert_eq!(recall_at_k(&trace("q", None, false), &golds(&["a"])), None);
    }

    #[test]
    fn bypassed_queries_leave_recall_denominator() {
        let queries: Vec<QueryItem> = ["q1", "q2", "q3"]
            .iter()
            .map(|id| QueryItem {
                id: id.to_string(),
                question: "?".into(),
                gold_answers: golds(&["x"]),
                gold_doc_ids: Some(golds(&["g"])),
            })
            .collect();
        let traces = vec![
            trace("q1", Some(&["g", "b"]), true),
            trace("q2", Some(&["a", "b"]), true),
            trace("q3", None, false),
        ];
        let records = score_traces(&traces, &queries).unwrap();
        let report = EvalReport::from_records(Some(PipelineMode::Dtr), &records, false);
        assert_eq!(report.recall_denominator, 2);
        assert_eq!(report.recall_at_k, Some(50.0));
        assert!((report.trigger_ratio - 200.0 / 3.0).abs() < 1e-9);
        assert_eq!(report.avg_em, 100.0);
    }

    #[test]
    fn percentages_serialize_with_two_decimals() {
        let r = EvalReport {
            mode: None,
            queries: 3,
            failed: 0,
            avg_em: 200.0 / 3.0,
            avg_f1: 100.0 / 3.0,
            trigger_ratio: 0.0,
            recall_at_k: None,
            recall_per_doc: None,
            recall_denominator: 0,
            per_threshold: None,
        };
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"avg_em\":66.67"), "{json}");
        assert!(json.contains("\"avg_f1\":33.33"), "{json}");
    }
}
