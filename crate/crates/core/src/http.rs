//! Blocking JSON-over-HTTP with retries, shared by the embedder and
//! generator clients.

use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug, Clone)]
pub struct HttpSettings {
    pub url: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    pub max_retries: u32,
    pub backoff: Duration,
}

#[derive(Debug)]
pub struct HttpClient {
    agent: ureq::Agent,
    settings: HttpSettings,
}

impl HttpClient {
    pub fn new(settings: HttpSettings) -> Self {
        let agent = ureq::AgentBuilder::new().timeout(settings.timeout).build();
        Self { agent, settings }
    }

    pub fn url(&self) -> &str {
        &self.settings.url
    }

    /// POSTs `body` and decodes the response. Transport failures, 429 and
    /// 5xx are retried up to `max_retries` times with doubling backoff;
    /// other statuses fail immediately.
    pub fn post_json<B: Serialize, R: DeserializeOwned>(&self, body: &B) -> Result<R, String> {
        let mut delay = self.settings.backoff;
        let mut attempt = 0u32;
        loop {
            let mut req = self
                .agent
                .post(&self.settings.url)
                .set("Content-Type", "application/json");
            if let Some(key) = &self.settings.api_key {
                req = req.set("Authorization", &format!("Bearer {key}"));
            }
            let err = match req.send_json(body) {
                Ok(resp) => {
                    return resp
                        .into_json::<R>()
                        .map_err(|e| format!("malformed response from {}: {e}", self.settings.url));
                }
                Err(ureq::Error::Status(code, resp)) => {
                    let body = resp.into_string().unwrap_or_default();
                    let msg = format!("HTTP {code} from {}: {}", self.settings.url, truncate(&body));
                    if code != 429 && code < 500 {
                        return Err(msg);
                    }
                    msg
                }
                Err(ureq::Error::Transport(t)) => {
                    format!("transport error talking to {}: {t}", self.settings.url)
                }
            };
            if attempt >= self.settings.max_retries {
                return Err(format!("{err} (gave up after {} attempts)", attempt + 1));
            }
            attempt += 1;
            tracing::warn!(attempt, error = %err, "retrying request");
            std::thread::sleep(delay);
            delay = delay.saturating_mul(2);
        }
    }
}

fn truncate(s: &str) -> &str {
    match s.char_indices().nth(200) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}
