//! Run configuration: a TOML file, overridable by `GATERAG_*` environment
//! variables (and by CLI flags, applied by the caller afterwards).
//!
//! ```toml
//! mode = "dtr"
//! u_threshold = 0.001
//! n_per_path = 5
//! k_final = 3
//! width = 4
//! index_dir = "idx"
//!
//! [generator]
//! kind = "http"            # or "mock" with script = "mock.jsonl"
//! endpoint = "http://127.0.0.1:8000/v1/completions"
//! model = "my-instruct-model"
//!
//! [embedder]
//! kind = "http"            # or "hashing" / "scripted"
//! endpoint = "http://127.0.0.1:8001/v1/embeddings"
//! model = "my-embedding-model"
//!
//! [max_tokens]
//! answer = 32
//! ```
//!
//! Relative paths are resolved against the directory holding the file.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::embed::{EmbedOptions, Embedder, EmbeddingCache, HashingEmbedder, HttpEmbedder, ScriptedEmbedder};
use crate::error::{Error, Result};
use crate::generate::{Gateway, GenerationCache, HttpGenerator, MockGenerator, WireApi};
use crate::http::{HttpClient, HttpSettings};
use crate::pipeline::{PipelineMode, RunConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    #[default]
    Mock,
    Http,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    #[default]
    Hashing,
    Scripted,
    Http,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum LogprobBase {
    #[default]
    #[serde(rename = "e")]
    Natural,
    #[serde(rename = "10")]
    Ten,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub kind: GeneratorKind,
    pub script: Option<PathBuf>,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub api_key: Option<String>,
    pub api: WireApi,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub logprob_base: LogprobBase,
    pub eos_tokens: Option<Vec<String>>,
    pub cache: Option<PathBuf>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            kind: GeneratorKind::Mock,
            script: None,
            endpoint: None,
            model: None,
            api_key: None,
            api: WireApi::Completions,
            timeout_secs: 120,
            max_retries: 3,
            logprob_base: LogprobBase::Natural,
            eos_tokens: None,
            cache: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedderConfig {
    pub kind: EmbedderKind,
    pub dim: usize,
    pub script: Option<PathBuf>,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub api_key: Option<String>,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub batch_size: usize,
    pub max_in_flight: usize,
    pub cache: Option<PathBuf>,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            kind: EmbedderKind::Hashing,
            dim: 256,
            script: None,
            endpoint: None,
            model: None,
            api_key: None,
            timeout_secs: 60,
            max_retries: 3,
            batch_size: 32,
            max_in_flight: 4,
            cache: None,
        }
    }
}

/// Generation budget per prompt kind.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaxTokens {
    pub answer: u32,
    pub pseudo_context: u32,
    pub cot: u32,
    pub judge: u32,
}

impl Default for MaxTokens {
    fn default() -> Self {
        Self {
            answer: 32,
            pseudo_context: 256,
            cot: 256,
            judge: 8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub mode: PipelineMode,
    pub u_threshold: f64,
    pub n_per_path: usize,
    pub k_final: usize,
    pub width: usize,
    pub index_dir: Option<PathBuf>,
    pub generator: GeneratorConfig,
    pub embedder: EmbedderConfig,
    pub max_tokens: MaxTokens,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            mode: PipelineMode::Dtr,
            u_threshold: 0.001,
            n_per_path: 5,
            k_final: 3,
            width: 4,
            index_dir: None,
            generator: GeneratorConfig::default(),
            embedder: EmbedderConfig::default(),
            max_tokens: MaxTokens::default(),
        }
    }
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl Config {
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: Config =
            toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        resolve(base_dir, &mut cfg.index_dir);
        resolve(base_dir, &mut cfg.generator.script);
        resolve(base_dir, &mut cfg.generator.cache);
        resolve(base_dir, &mut cfg.embedder.script);
        resolve(base_dir, &mut cfg.embedder.cache);
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_str(&text, base).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Applies `GATERAG_*` overrides read through `var`.
    pub fn apply_env(&mut self, var: impl Fn(&str) -> Option<String>) -> Result<()> {
        fn parse<T: std::str::FromStr>(name: &str, v: String) -> Result<T> {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("{name}={v:?} is not valid")))
        }
        if let Some(v) = var("GATERAG_MODE") {
            self.mode = parse("GATERAG_MODE", v)?;
        }
        if let Some(v) = var("GATERAG_U_THRESHOLD") {
            self.u_threshold = parse("GATERAG_U_THRESHOLD", v)?;
        }
        if let Some(v) = var("GATERAG_N_PER_PATH") {
            self.n_per_path = parse("GATERAG_N_PER_PATH", v)?;
        }
        if let Some(v) = var("GATERAG_K_FINAL") {
            self.k_final = parse("GATERAG_K_FINAL", v)?;
        }
        if let Some(v) = var("GATERAG_WIDTH") {
            self.width = parse("GATERAG_WIDTH", v)?;
        }
        let set = |slot: &mut Option<String>, name: &str| {
            if let Some(v) = var(name) {
                *slot = Some(v);
            }
        };
        set(&mut self.generator.endpoint, "GATERAG_GENERATOR_ENDPOINT");
        set(&mut self.generator.model, "GATERAG_GENERATOR_MODEL");
        set(&mut self.generator.api_key, "GATERAG_API_KEY");
        set(&mut self.embedder.endpoint, "GATERAG_EMBEDDER_ENDPOINT");
        set(&mut self.embedder.model, "GATERAG_EMBEDDER_MODEL");
        set(&mut self.embedder.api_key, "GATERAG_EMBEDDER_API_KEY");
        Ok(())
    }

    pub fn run_config(&self) -> RunConfig {
        RunConfig {
            mode: self.mode,
            u_threshold: self.u_threshold,
            n_per_path: self.n_per_path,
            k_final: self.k_final,
            width: self.width,
            max_tokens: self.max_tokens,
        }
    }

    /// Checks everything except file existence and reachability.
    pub fn validate(&self) -> Result<()> {
        self.run_config().validate()?;
        self.validate_embedder()?;
        match self.generator.kind {
            GeneratorKind::Mock if self.generator.script.is_none() => Err(Error::Config(
                "generator.kind = \"mock\" needs generator.script".into(),
            )),
            GeneratorKind::Http if self.generator.endpoint.is_none() => Err(Error::Config(
                "generator.kind = \"http\" needs generator.endpoint".into(),
            )),
            GeneratorKind::Http if self.generator.model.is_none() => Err(Error::Config(
                "generator.kind = \"http\" needs generator.model".into(),
            )),
            _ => Ok(()),
        }
    }

    pub fn validate_embedder(&self) -> Result<()> {
        let e = &self.embedder;
        match e.kind {
            EmbedderKind::Hashing if e.dim == 0 => {
                Err(Error::Config("embedder.dim must be positive".into()))
            }
            EmbedderKind::Scripted if e.script.is_none() => Err(Error::Config(
                "embedder.kind = \"scripted\" needs embedder.script".into(),
            )),
            EmbedderKind::Http if e.endpoint.is_none() => Err(Error::Config(
                "embedder.kind = \"http\" needs embedder.endpoint".into(),
            )),
            EmbedderKind::Http if e.model.is_none() => Err(Error::Config(
                "embedder.kind = \"http\" needs embedder.model".into(),
            )),
            _ => Ok(()),
        }
    }

    /// Local files this configuration reads.
    pub fn input_files(&self) -> Vec<PathBuf> {
        let mut files = Vec::new();
        if self.generator.kind == GeneratorKind::Mock {
            files.extend(self.generator.script.clone());
        }
        if self.embedder.kind == EmbedderKind::Scripted {
            files.extend(self.embedder.script.clone());
        }
        files
    }

    pub fn uses_network(&self) -> bool {
        self.generator.kind == GeneratorKind::Http || self.embedder.kind == EmbedderKind::Http
    }

    pub fn embed_options(&self) -> EmbedOptions {
        EmbedOptions {
            batch_size: self.embedder.batch_size.max(1),
            max_in_flight: self.embedder.max_in_flight.max(1),
        }
    }

    pub fn build_embedder(&self) -> Result<Box<dyn Embedder>> {
        self.validate_embedder()?;
        let e = &self.embedder;
        Ok(match e.kind {
            EmbedderKind::Hashing => Box::new(HashingEmbedder::new(e.dim)),
            EmbedderKind::Scripted => {
                Box::new(ScriptedEmbedder::load(e.script.as_deref().expect("validated"))?)
            }
            EmbedderKind::Http => Box::new(HttpEmbedder::new(
                HttpClient::new(HttpSettings {
                    url: e.endpoint.clone().expect("validated"),
                    api_key: e.api_key.clone(),
                    timeout: Duration::from_secs(e.timeout_secs),
                    max_retries: e.max_retries,
                    backoff: Duration::from_millis(250),
                }),
                e.model.clone().expect("validated"),
            )),
        })
    }

    pub fn open_embedding_cache(&self) -> Result<EmbeddingCache> {
        match &self.embedder.cache {
            Some(p) => EmbeddingCache::open(p),
            None => Ok(EmbeddingCache::in_memory()),
        }
    }

    pub fn build_gateway(&self) -> Result<Gateway> {
        self.validate()?;
        let g = &self.generator;
        let cache = match &g.cache {
            Some(p) => GenerationCache::open(p)?,
            None => GenerationCache::in_memory(),
        };
        let backend: Box<dyn crate::generate::Generator> = match g.kind {
            GeneratorKind::Mock => {
                Box::new(MockGenerator::load(g.script.as_deref().expect("validated"))?)
            }
            GeneratorKind::Http => {
                let mut gen = HttpGenerator::new(
                    HttpClient::new(HttpSettings {
                        url: g.endpoint.clone().expect("validated"),
                        api_key: g.api_key.clone(),
                        timeout: Duration::from_secs(g.timeout_secs),
                        max_retries: g.max_retries,
                        backoff: Duration::from_millis(500),
                    }),
                    g.model.clone().expect("validated"),
                    g.api,
                );
                if g.logprob_base == LogprobBase::Ten {
                    gen = gen.with_base10_logprobs();
                }
                if let Some(eos) = &g.eos_tokens {
                    gen = gen.with_eos_tokens(eos.clone());
                }
                Box::new(gen)
            }
        };
        Ok(Gateway::new(backend, cache))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn defaults() {
        let c = Config::default();
        assert_eq!(c.n_per_path, 5);
        assert_eq!(c.k_final, 3);
        assert_eq!(c.mode, PipelineMode::Dtr);
    }

    #[test]
    fn parses_and_resolves_paths() {
        let cfg = Config::from_toml_str(
            r#"
mode = "fixed_mix(2,1)"
u_threshold = 0.005
[generator]
kind = "mock"
script = "mock.jsonl"
[embedder]
kind = "hashing"
dim = 64
"#,
            Path::new("/etc/gr"),
        )
        .unwrap();
        assert_eq!(cfg.mode, PipelineMode::FixedMix { q_count: 2, p_count: 1 });
        assert_eq!(cfg.generator.script.as_deref(), Some(Path::new("/etc/gr/mock.jsonl")));
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        assert!(matches!(
            Config::from_toml_str("nonsense = 1", Path::new(".")),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn env_overrides_file() {
        let mut cfg = Config::from_toml_str("u_threshold = 0.01", Path::new(".")).unwrap();
        let env: HashMap<&str, &str> = [
            ("GATERAG_U_THRESHOLD", "0.005"),
            ("GATERAG_GENERATOR_ENDPOINT", "http://x/v1/completions"),
        ]
        .into_iter()
        .collect();
        cfg.apply_env(|k| env.get(k).map(|v| v.to_string())).unwrap();
        assert_eq!(cfg.u_threshold, 0.005);
        assert_eq!(cfg.generator.endpoint.as_deref(), Some("http://x/v1/completions"));
        assert!(cfg
            .apply_env(|k| (k == "GATERAG_K_FINAL").then(|| "three".to_string()))
            .is_err());
    }

    #[test]
    fn http_generator_needs_endpoint() {
        let cfg = Config::from_toml_str(
            "[generator]\nkind = \"http\"\nmodel = \"m\"",
            Path::new("."),
        )
        .unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
