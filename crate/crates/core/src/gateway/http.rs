use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use super::{
    check_candidates, distribution_or_uniform, split_confidence, Gateway, GatewayError, Generation,
    GenerationRequest, DEFAULT_CONFIDENCE,
};
use crate::entropy::Distribution;

const CONFIDENCE_SUFFIX: &str =
    "\n\nGive your answer, then on the last line a confidence between 0 and 1.";

#[derive(Debug, Clone, PartialEq)]
pub struct HttpConfig {
    /// Server root; endpoints are appended as `/v1/...`.
    pub base: String,
    pub api_key: Option<String>,
    pub model: String,
    pub embed_model: String,
    pub timeout: Duration,
    /// Extra attempts after the first, on 5xx replies and timeouts only.
    pub retries: u32,
    pub backoff: Duration,
}

impl HttpConfig {
    pub fn new(base: impl Into<String>, model: impl Into<String>, embed_model: impl Into<String>) -> Self {
        Self {
            base: base.into(),
            api_key: None,
            model: model.into(),
            embed_model: embed_model.into(),
            timeout: Duration::from_secs(30),
            retries: 2,
            backoff: Duration::from_millis(500),
        }
    }

    /// Read `SCOPEX_API_BASE`, `SCOPEX_API_KEY`, `SCOPEX_MODEL` and `SCOPEX_EMBED_MODEL`.
    pub fn from_env() -> Result<Self, GatewayError> {
        let var = |name: &str| std::env::var(name).ok().filter(|v| !v.is_empty());
        let base = var("SCOPEX_API_BASE")
            .ok_or_else(|| GatewayError::Config("SCOPEX_API_BASE is not set".into()))?;
        let model = var("SCOPEX_MODEL").unwrap_or_else(|| "gpt-4o-mini".into());
        let embed_model = var("SCOPEX_EMBED_MODEL").unwrap_or_else(|| "text-embedding-3-small".into());
        let mut config = Self::new(base, model, embed_model);
        config.api_key = var("SCOPEX_API_KEY");
        Ok(config)
    }
}

/// Client for an OpenAI-compatible server.
#[derive(Debug)]
pub struct HttpBackend {
    config: HttpConfig,
    client: reqwest::blocking::Client,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingData>,
}

#[derive(Deserialize)]
struct EmbeddingData {
    embedding: Vec<f64>,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| GatewayError::Config(e.to_string()))?;
        Ok(Self { config, client })
    }

    fn url(&self, path: &str) -> String {
        format!("{}/v1/{path}", self.config.base.trim_end_matches('/'))
    }

    pub fn chat_body(&self, request: &GenerationRequest) -> serde_json::Value {
        json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        })
    }

    pub fn embedding_body(&self, text: &str) -> serde_json::Value {
        json!({"model": self.config.embed_model, "input": text})
    }

    fn post(&self, path: &str, body: &serde_json::Value) -> Result<String, GatewayError> {
        let url = self.url(path);
        let mut attempt = 0;
        loop {
            let mut req = self.client.post(&url).json(body);
            if let Some(key) = &self.config.api_key {
                req = req.bearer_auth(key);
            }
            let retryable = match req.send() {
                Ok(resp) => {
                    let status = resp.status();
                    let text = resp.text().map_err(|e| GatewayError::Backend {
                        status: Some(status.as_u16()),
                        message: e.to_string(),
                    })?;
                    if status.is_success() {
                        return Ok(text);
                    }
                    let err = GatewayError::Backend {
                        status: Some(status.as_u16()),
                        message: text,
                    };
                    if !status.is_server_error() {
                        return Err(err);
                    }
                    err
                }
                Err(e) if e.is_timeout() => GatewayError::Backend {
                    status: None,
                    message: format!("timeout: {e}"),
                },
                Err(e) => {
                    return Err(GatewayError::Backend {
                        status: None,
                        message: e.to_string(),
                    })
                }
            };
            if attempt >= self.config.retries {
                return Err(retryable);
            }
            std::thread::sleep(self.config.backoff * 2u32.pow(attempt));
            attempt += 1;
        }
    }

    fn chat(&self, request: &GenerationRequest) -> Result<String, GatewayError> {
        let raw = self.post("chat/completions", &self.chat_body(request))?;
        let parsed: ChatResponse = serde_json::from_str(&raw).map_err(|e| GatewayError::Parse {
            message: e.to_string(),
            raw: raw.clone(),
        })?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or(GatewayError::Parse {
                message: "reply has no choices".into(),
                raw,
            })
    }
}

/// Extract one score per candidate from a reply holding a JSON array.
pub(crate) fn parse_scores(raw: &str, expected: usize) -> Result<Vec<f64>, GatewayError> {
    let parse_err = |message: &str| GatewayError::Parse {
        message: message.to_string(),
        raw: raw.to_string(),
    };
    let start = raw.find('[').ok_or_else(|| parse_err("no JSON array in reply"))?;
    let end = raw.rfind(']').ok_or_else(|| parse_err("no JSON array in reply"))?;
    if end < start {
        return Err(parse_err("no JSON array in reply"));
    }
    let scores: Vec<f64> =
        serde_json::from_str(&raw[start..=end]).map_err(|e| parse_err(&e.to_string()))?;
    if scores.len() != expected {
        return Err(parse_err(&format!("expected {expected} scores, got {}", scores.len())));
    }
    if scores.iter().any(|s| !s.is_finite() || *s < 0.0) {
        return Err(parse_err("scores must be nonnegative numbers"));
    }
    Ok(scores)
}

impl Gateway for HttpBackend {
    fn generate(&self, request: &GenerationRequest) -> Result<Generation, GatewayError> {
        request.validate()?;
        let mut asked = request.clone();
        asked.prompt.push_str(CONFIDENCE_SUFFIX);
        let reply = self.chat(&asked)?;
        let (text, confidence) = split_confidence(&reply);
        Ok(Generation {
            text,
            confidence: confidence.unwrap_or(DEFAULT_CONFIDENCE),
            confidence_parsed: confidence.is_some(),
        })
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, GatewayError> {
        if text.trim().is_empty() {
            return Err(GatewayError::InvalidInput("empty text".into()));
        }
        let raw = self.post("embeddings", &self.embedding_body(text))?;
        let parsed: EmbeddingResponse = serde_json::from_str(&raw).map_err(|e| GatewayError::Parse {
            message: e.to_string(),
            raw: raw.clone(),
        })?;
        let vector = parsed
            .data
            .into_iter()
            .next()
            .map(|d| d.embedding)
            .ok_or(GatewayError::Parse {
                message: "reply has no embedding".into(),
                raw,
            })?;
        let norm = vector.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(GatewayError::Backend {
                status: None,
                message: "backend returned a zero or non-finite embedding".into(),
            });
        }
        Ok(vector.into_iter().map(|v| v / norm).collect())
    }

    fn candidate_distribution(
        &self,
        prompt: &str,
        candidates: &[String],
    ) -> Result<Distribution, GatewayError> {
        check_candidates(candidates)?;
        let listing: String = candidates
            .iter()
            .enumerate()
            .map(|(i, c)| format!("{}. {c}\n", i + 1))
            .collect();
        let scoring = format!(
            "{prompt}\n\nScore how likely each candidate answer is correct, from 0 to 100.\n{listing}\
             Reply with only a JSON array of {} numbers in the same order.",
            candidates.len()
        );
        let reply = self.chat(&GenerationRequest::new(scoring))?;
        distribution_or_uniform(candidates, parse_scores(&reply, candidates.len())?)
    }
}
