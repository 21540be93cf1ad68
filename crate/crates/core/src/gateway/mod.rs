//! Uniform contract for text generation, embeddings and candidate scoring.
//!
//! Two backends implement [`Gateway`]: [`ScriptedBackend`], a deterministic
//! rule table for offline runs, and [`HttpBackend`], which speaks the
//! OpenAI-compatible chat-completions and embeddings wire format.

mod http;
mod scripted;

pub use http::{HttpBackend, HttpConfig};
pub use scripted::{DistributionRule, ScriptedBackend, ScriptedBackendConfig, ScriptedRule, Weights};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::entropy::Distribution;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GatewayError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("no scripted rule matches prompt: {0}")]
    NoRule(String),
    #[error("backend request failed{}: {message}", status.map(|s| format!(" (status {s})")).unwrap_or_default())]
    Backend { status: Option<u16>, message: String },
    #[error("could not parse backend reply: {message}; raw reply: {raw}")]
    Parse { message: String, raw: String },
    #[error("backend configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    pub max_tokens: u32,
    pub temperature: f64,
}

impl GenerationRequest {
    pub fn new(prompt: impl Into<String>) -> Self {
        Self {
            prompt: prompt.into(),
            max_tokens: 512,
            temperature: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.prompt.trim().is_empty() {
            return Err(GatewayError::InvalidInput("empty prompt".into()));
        }
        if self.max_tokens == 0 {
            return Err(GatewayError::InvalidInput("max_tokens must be positive".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(GatewayError::InvalidInput("temperature must be >= 0".into()));
        }
        Ok(())
    }
}

/// A generated reply with the backend's confidence in it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub text: String,
    pub confidence: f64,
    /// False when the confidence could not be read from the reply and
    /// [`DEFAULT_CONFIDENCE`] was substituted.
    pub confidence_parsed: bool,
}

/// Confidence assumed when a reply carries no readable self-report.
pub const DEFAULT_CONFIDENCE: f64 = 0.5;

pub trait Gateway: Send + Sync {
    fn generate(&self, request: &GenerationRequest) -> Result<Generation, GatewayError>;

    /// Unit-norm embedding of `text`.
    fn embed(&self, text: &str) -> Result<Vec<f64>, GatewayError>;

    /// Probability the model assigns to each candidate answer of `prompt`.
    fn candidate_distribution(
        &self,
        prompt: &str,
        candidates: &[String],
    ) -> Result<Distribution, GatewayError>;
}

pub(crate) fn check_candidates(candidates: &[String]) -> Result<(), GatewayError> {
    if candidates.len() < 2 {
        return Err(GatewayError::InvalidInput(
            "at least two candidates are required".into(),
        ));
    }
    Ok(())
}

/// Build a distribution over `candidates`, falling back to uniform when no
/// weight is positive.
pub(crate) fn distribution_or_uniform(
    candidates: &[String],
    weights: Vec<f64>,
) -> Result<Distribution, GatewayError> {
    let weights = if weights.iter().any(|w| *w > 0.0) {
        weights
    } else {
        vec![1.0; candidates.len()]
    };
    Distribution::new(candidates.to_vec(), weights)
        .map_err(|e| GatewayError::InvalidInput(e.to_string()))
}

/// Split a self-reported confidence off the last line of a reply.
///
/// Accepts a bare number or forms like `confidence: 0.8` / `Confidence 80%`.
/// Returns the answer text without that line and the parsed value, if any.
pub fn split_confidence(reply: &str) -> (String, Option<f64>) {
    let trimmed = reply.trim_end();
    let (body, last) = match trimmed.rfind('\n') {
        Some(i) => (&trimmed[..i], trimmed[i + 1..].trim()),
        None => ("", trimmed.trim()),
    };
    let lowered = last.to_lowercase();
    let value = lowered
        .strip_prefix("confidence")
        .unwrap_or(&lowered)
        .trim_start_matches([':', '=', ' '])
        .trim();
    let (number, percent) = match value.strip_suffix('%') {
        Some(v) => (v.trim(), true),
        None => (value, false),
    };
    match number.parse::<f64>() {
        Ok(v) if v.is_finite() => {
            let v = if percent || v > 1.0 { v / 100.0 } else { v };
            if (0.0..=1.0).contains(&v) && !body.trim().is_empty() {
                (body.trim().to_string(), Some(v))
            } else {
                (trimmed.trim().to_string(), None)
            }
        }
        _ => (trimmed.trim().to_string(), None),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confidence_suffix_forms() {
        assert_eq!(
            split_confidence("Paris\nconfidence: 0.9"),
            ("Paris".to_string(), Some(0.9))
        );
        assert_eq!(
            split_confidence("Paris is the capital.\n\n85%\n"),
            ("Paris is the capital.".to_string(), Some(0.85))
        );
        assert_eq!(split_confidence("Paris\n0.4"), ("Paris".to_string(), Some(0.4)));
        assert_eq!(split_confidence("just an answer"), ("just an answer".to_string(), None));
        assert_eq!(split_confidence("0.7"), ("0.7".to_string(), None));
        assert_eq!(split_confidence("a\n250"), ("a\n250".to_string(), None));
    }

    #[test]
    fn request_validation() {
        assert!(GenerationRequest::new("  ").validate().is_err());
        assert!(GenerationRequest::new("hi").validate().is_ok());
        let mut r = GenerationRequest::new("hi");
        r.temperature = -1.0;
        assert!(r.validate().is_err());
    }
}
