//! OpenAI-compatible completion clients (`/completions` and
//! `/chat/completions`) with token logprobs.

use serde::{Deserialize, Serialize};

use super::{FinishReason, GenerationRequest, GenerationResult, Generator, TokenLogprob};
use crate::error::{Error, Result};
use crate::http::HttpClient;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WireApi {
    Completions,
    Chat,
}

#[derive(Debug)]
pub struct HttpGenerator {
    client: HttpClient,
    model: String,
    api: WireApi,
    id: String,
    /// Multiplier applied to wire logprobs; 1.0 for natural-log backends,
    /// ln 10 for backends that report base-10 values.
    logprob_scale: f64,
    eos_tokens: Vec<String>,
}

impl HttpGenerator {
    pub fn new(client: HttpClient, model: impl Into<String>, api: WireApi) -> Self {
        let model = model.into();
        let id = format!("http:{}#{}", client.url(), model);
        Self {
            client,
            model,
            api,
            id,
            logprob_scale: 1.0,
            eos_tokens: default_eos_tokens(),
        }
    }

    pub fn with_base10_logprobs(mut self) -> Self {
        self.logprob_scale = std::f64::consts::LN_10;
        self
    }

    pub fn with_eos_tokens(mut self, eos: Vec<String>) -> Self {
        self.eos_tokens = eos;
        self
    }
}

pub fn default_eos_tokens() -> Vec<String> {
    ["<|im_end|>", "<|endoftext|>", "</s>", "<|eot_id|>"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

#[derive(Serialize)]
struct CompletionsBody<'a> {
    model: &'a str,
    prompt: &'a str,
    max_tokens: u32,
    temperature: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    logprobs: Option<u32>,
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatBody<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 1],
    max_tokens: u32,
    temperature: f64,
    logprobs: bool,
}

#[derive(Deserialize)]
struct CompletionsResponse {
    choices: Vec<CompletionChoice>,
}

#[derive(Deserialize)]
struct CompletionChoice {
    text: String,
    #[serde(default)]
    finish_reason: Option<String>,
    #[serde(default)]
    logprobs: Option<CompletionLogprobs>,
}

#[derive(Deserialize)]
struct CompletionLogprobs {
    #[serde(default)]
    tokens: Vec<String>,
    #[serde(default)]
    token_logprobs: Vec<Option<f64>>,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatReply,
    #[serde(default)]
    finish_reason: Option<String>,
    #[serde(default)]
    logprobs: Option<ChatLogprobs>,
}

#[derive(Deserialize)]
struct ChatReply {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct ChatLogprobs {
    #[serde(default)]
    content: Option<Vec<ChatTokenLogprob>>,
}

#[derive(Deserialize)]
struct ChatTokenLogprob {
    token: String,
    logprob: f64,
}

fn finish_reason(raw: Option<&str>) -> FinishReason {
    match raw {
        None | Some("stop") | Some("eos") | Some("stop_sequence") => FinishReason::Stop,
        Some("length") => FinishReason::Length,
        Some(_) => FinishReason::Error,
    }
}

impl HttpGenerator {
    fn assemble(
        &self,
        text: String,
        raw: Vec<(String, f64)>,
        finish: Option<&str>,
    ) -> GenerationResult {
        let mut tokens: Vec<TokenLogprob> = raw
            .into_iter()
            .map(|(token, lp)| TokenLogprob {
                token,
                logprob: lp * self.logprob_scale,
            })
            .collect();
        if tokens
            .last()
            .is_some_and(|t| self.eos_tokens.iter().any(|e| e == &t.token))
        {
            tokens.pop();
        }
        GenerationResult {
            text,
            token_logprobs: tokens,
            finish_reason: finish_reason(finish),
        }
    }
}

impl Generator for HttpGenerator {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, req: &GenerationRequest) -> Result<GenerationResult> {
        match self.api {
            WireApi::Completions => {
                let resp: CompletionsResponse = self
                    .client
                    .post_json(&CompletionsBody {
                        model: &self.model,
                        prompt: &req.prompt,
                        max_tokens: req.max_tokens,
                        temperature: req.temperature,
                        logprobs: req.want_logprobs.then_some(1),
                    })
                    .map_err(Error::Generation)?;
                let choice = resp
                    .choices
                    .into_iter()
                    .next()
                    .ok_or_else(|| Error::Generation("response has no choices".into()))?;
                let raw = match choice.logprobs {
                    Some(lp) => lp
                        .tokens
                        .into_iter()
                        .zip(lp.token_logprobs)
                        .filter_map(|(t, v)| v.map(|v| (t, v)))
                        .collect(),
                    None => Vec::new(),
                };
                Ok(self.assemble(choice.text, raw, choice.finish_reason.as_deref()))
            }
            WireApi::Chat => {
                let resp: ChatResponse = self
                    .client
                    .post_json(&ChatBody {
                        model: &self.model,
                        messages: [ChatMessage {
                            role: "user",
                            content: &req.prompt,
                        }],
                        max_tokens: req.max_tokens,
                        temperature: req.temperature,
                        logprobs: req.want_logprobs,
                    })
                    .map_err(Error::Generation)?;
                let choice = resp
                    .choices
                    .into_iter()
                    .next()
                    .ok_or_else(|| Error::Generation("response has no choices".into()))?;
                let raw = choice
                    .logprobs
                    .and_then(|l| l.content)
                    .unwrap_or_default()
                    .into_iter()
                    .map(|t| (t.token, t.logprob))
                    .collect();
                Ok(self.assemble(
                    choice.message.content.unwrap_or_default(),
                    raw,
                    choice.finish_reason.as_deref(),
                ))
            }
        }
    }
}
