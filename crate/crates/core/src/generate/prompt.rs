//! Prompt templates for every generation the pipeline issues.
//!
//! Bodies use two placeholders, `{question}` and `{passages}`. Substitution
//! is a single left-to-right pass, so placeholder-like text inside a
//! question or passage is copied through untouched.

use serde::{Deserialize, Serialize};

use crate::corpus::DocChunk;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateKind {
    AnswerNoRetrieval,
    AnswerWithRetrieval,
    PseudoContext,
    Cot,
    Judge,
}

impl TemplateKind {
    pub const ALL: [TemplateKind; 5] = [
        TemplateKind::AnswerNoRetrieval,
        TemplateKind::AnswerWithRetrieval,
        TemplateKind::PseudoContext,
        TemplateKind::Cot,
        TemplateKind::Judge,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateKind::AnswerNoRetrieval => "answer_no_retrieval",
            TemplateKind::AnswerWithRetrieval => "answer_with_retrieval",
            TemplateKind::PseudoContext => "pseudo_context",
            TemplateKind::Cot => "cot",
            TemplateKind::Judge => "judge",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptTemplate {
    pub kind: TemplateKind,
    pub body: &'static str,
}

const QUESTION: &str = "{question}";
const PASSAGES: &str = "{passages}";

impl PromptTemplate {
    pub fn for_kind(kind: TemplateKind) -> Self {
        let body = match kind {
            TemplateKind::AnswerNoRetrieval => {
                "{question}\nAnswer the question using a single word or phrase."
            }
            TemplateKind::AnswerWithRetrieval => {
                "{question}\n{passages}\nAnswer the question based on the above context using a single word or phrase."
            }
            TemplateKind::PseudoContext => "{question}\nWrite a passage to answer this question.",
            TemplateKind::Cot => {
                "Answer the following question:\n{question}\nGive the rationale before answering"
            }
            TemplateKind::Judge => {
                "{question}\nDetermine whether external information is needed to answer the question accurately.\nRespond with \"Yes\" if additional information is required, or \"No\" if the question can be answered without it."
            }
        };
        Self { kind, body }
    }

    fn render(&self, question: &str, passages: &str) -> String {
        let mut out = String::with_capacity(self.body.len() + question.len() + passages.len());
        let mut rest = self.body;
        while let Some(pos) = rest.find('{') {
            out.push_str(&rest[..pos]);
            let tail = &rest[pos..];
            if let Some(after) = tail.strip_prefix(QUESTION) {
                out.push_str(question);
                rest = after;
            } else if let Some(after) = tail.strip_prefix(PASSAGES) {
                out.push_str(passages);
                rest = after;
            } else {
                out.push('{');
                rest = &tail[1..];
            }
        }
        out.push_str(rest);
        out
    }
}

/// One passage block: the chunk text, as stored.
fn passage_block(chunk: &DocChunk) -> &str {
    chunk.text.trim_end()
}

/// Renders the prompt for `kind`. `passages` must be present and non-empty
/// exactly when `kind` is [`TemplateKind::AnswerWithRetrieval`]; they are
/// laid out in the order given, one block per line.
pub fn render_prompt(
    kind: TemplateKind,
    question: &str,
    passages: Option<&[DocChunk]>,
) -> Result<String> {
    if question.trim().is_empty() {
        return Err(Error::Template("question is empty".into()));
    }
    let joined = match (kind, passages) {
        (TemplateKind::AnswerWithRetrieval, Some(ps)) if !ps.is_empty() => ps
            .iter()
            .map(passage_block)
            .collect::<Vec<_>>()
            .join("\n"),
        (TemplateKind::AnswerWithRetrieval, _) => {
            return Err(Error::Template(
                "answer_with_retrieval needs at least one passage".into(),
            ))
        }
        (_, Some(_)) => {
            return Err(Error::Template(format!(
                "{} does not take passages",
                kind.as_str()
            )))
        }
        (_, None) => String::new(),
    };
    Ok(PromptTemplate::for_kind(kind).render(question, &joined))
}
