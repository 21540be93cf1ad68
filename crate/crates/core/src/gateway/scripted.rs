use std::path::Path;
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, StandardNormal};
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{check_candidates, distribution_or_uniform, Gateway, GatewayError, Generation, GenerationRequest};
use crate::entropy::Distribution;
use crate::text::normalize;

/// One prompt → reply rule. `pattern` is a substring unless `regex` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedRule {
    pub pattern: String,
    pub response: String,
    pub confidence: f64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub regex: bool,
}

/// Candidate weights: positional, or keyed by candidate text (missing
/// candidates weigh zero).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Weights {
    Positional(Vec<f64>),
    Keyed(serde_json::Map<String, serde_json::Value>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistributionRule {
    pub pattern: String,
    pub weights: Weights,
}

/// Rule table for [`ScriptedBackend`]. In JSON, `distributions` is an
/// object from prompt substring to weights; keys are tried in file order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedBackendConfig {
    #[serde(default)]
    pub rules: Vec<ScriptedRule>,
    #[serde(default)]
    pub embedding_seed: u64,
    pub embedding_dim: usize,
    #[serde(default, with = "ordered_rules")]
    pub distributions: Vec<DistributionRule>,
}

mod ordered_rules {
    use super::{DistributionRule, Weights};
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(rules: &[DistributionRule], s: S) -> Result<S::Ok, S::Error> {
        let mut map = serde_json::Map::new();
        for rule in rules {
            map.insert(
                rule.pattern.clone(),
                serde_json::to_value(&rule.weights).map_err(serde::ser::Error::custom)?,
            );
        }
        map.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<DistributionRule>, D::Error> {
        let map = serde_json::Map::deserialize(d)?;
        map.into_iter()
            .map(|(pattern, value)| {
                let weights: Weights =
                    serde_json::from_value(value).map_err(serde::de::Error::custom)?;
                Ok(DistributionRule { pattern, weights })
            })
            .collect()
    }
}

enum Matcher {
    Substring(String),
    Regex(Regex),
}

impl Matcher {
    fn is_match(&self, prompt: &str) -> bool {
        match self {
            Matcher::Substring(s) => prompt.contains(s.as_str()),
            Matcher::Regex(r) => r.is_match(prompt),
        }
    }
}

/// Deterministic offline backend: replies come from the first matching
/// rule and embeddings from a seeded hash of the normalized text.
pub struct ScriptedBackend {
    config: ScriptedBackendConfig,
    matchers: Vec<Matcher>,
    calls: Mutex<Vec<String>>,
}

impl std::fmt::Debug for ScriptedBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ScriptedBackend")
            .field("config", &self.config)
            .finish_non_exhaustive()
    }
}

impl ScriptedBackend {
    pub fn new(config: ScriptedBackendConfig) -> Result<Self, GatewayError> {
        if config.embedding_dim == 0 {
            return Err(GatewayError::Config("embedding_dim must be positive".into()));
        }
        let matchers = config
            .rules
            .iter()
            .map(|rule| {
                if rule.regex {
                    Regex::new(&rule.pattern)
                        .map(Matcher::Regex)
                        .map_err(|e| GatewayError::Config(format!("bad rule regex {:?}: {e}", rule.pattern)))
                } else {
                    Ok(Matcher::Substring(rule.pattern.clone()))
                }
            })
            .collect::<Result<_, _>>()?;
        if let Some(rule) = config.rules.iter().find(|r| !(0.0..=1.0).contains(&r.confidence)) {
            return Err(GatewayError::Config(format!(
                "rule {:?} has confidence outside [0,1]",
                rule.pattern
            )));
        }
        Ok(Self {
            config,
            matchers,
            calls: Mutex::new(Vec::new()),
        })
    }

    pub fn from_json(json: &str) -> Result<Self, GatewayError> {
        let config = serde_json::from_str(json).map_err(|e| GatewayError::Config(e.to_string()))?;
        Self::new(config)
    }

    pub fn from_file(path: &Path) -> Result<Self, GatewayError> {
        let json = std::fs::read_to_string(path)
            .map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&json)
    }

    pub fn config(&self) -> &ScriptedBackendConfig {
        &self.config
    }

    /// Prompts passed to [`Gateway::generate`], in call order.
    pub fn calls(&self) -> Vec<String> {
        self.calls.lock().expect("call log poisoned").clone()
    }

    pub fn clear_calls(&self) {
        self.calls.lock().expect("call log poisoned").clear();
    }
}

impl Gateway for ScriptedBackend {
    fn generate(&self, request: &GenerationRequest) -> Result<Generation, GatewayError> {
        request.validate()?;
        self.calls
            .lock()
            .expect("call log poisoned")
            .push(request.prompt.clone());
        let idx = self
            .matchers
            .iter()
            .position(|m| m.is_match(&request.prompt))
            .ok_or_else(|| GatewayError::NoRule(request.prompt.clone()))?;
        let rule = &self.config.rules[idx];
        Ok(Generation {
            text: rule.response.clone(),
            confidence: rule.confidence,
            confidence_parsed: true,
        })
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, GatewayError> {
        let normalized = normalize(text);
        if normalized.is_empty() {
            return Err(GatewayError::InvalidInput("empty text".into()));
        }
        let mut hasher = Sha256::new();
        hasher.update(self.config.embedding_seed.to_le_bytes());
        hasher.update(normalized.as_bytes());
        let seed: [u8; 32] = hasher.finalize().into();
        let mut rng = ChaCha8Rng::from_seed(seed);
        let raw: Vec<f64> = (0..self.config.embedding_dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            // measure-zero; any unit vector keeps the contract
            let mut unit = vec![0.0; raw.len()];
            unit[0] = 1.0;
            return Ok(unit);
        }
        Ok(raw.into_iter().map(|v| v / norm).collect())
    }

    fn candidate_distribution(
        &self,
        prompt: &str,
        candidates: &[String],
    ) -> Result<Distribution, GatewayError> {
        check_candidates(candidates)?;
        let rule = self
            .config
            .distributions
            .iter()
            .find(|r| prompt.contains(r.pattern.as_str()))
            .ok_or_else(|| GatewayError::NoRule(prompt.to_string()))?;
        let weights = match &rule.weights {
            Weights::Positional(w) => {
                if w.len() != candidates.len() {
                    return Err(GatewayError::InvalidInput(format!(
                        "scripted distribution has {} weights for {} candidates",
                        w.len(),
                        candidates.len()
                    )));
                }
                w.clone()
            }
            Weights::Keyed(map) => candidates
                .iter()
                .map(|c| map.get(c).and_then(serde_json::Value::as_f64).unwrap_or(0.0))
                .collect(),
        };
        distribution_or_uniform(candidates, weights)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn backend() -> ScriptedBackend {
        ScriptedBackend::from_json(
            r#"{
                "rules": [
                    {"pattern": "capital of", "response": "Paris", "confidence": 0.9},
                    {"pattern": "^why\\b", "response": "because", "confidence": 0.3, "regex": true}
                ],
                "embedding_seed": 11,
                "embedding_dim": 8,
                "distributions": {
                    "zero": [0, 0],
                    "weather": [3, 1],
                    "city": {"Paris": 3, "Lyon": 1}
                }
            }"#,
        )
        .unwrap()
    }

    fn cands(items: &[&str]) -> Vec<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn first_matching_rule_wins() {
        let b = backend();
        let g = b.generate(&GenerationRequest::new("what is the capital of France")).unwrap();
        assert_eq!((g.text.as_str(), g.confidence), ("Paris", 0.9));
        let g = b.generate(&GenerationRequest::new("why capital of?")).unwrap();
        assert_eq!(g.text, "Paris");
        let g = b.generate(&GenerationRequest::new("why not")).unwrap();
        assert_eq!(g.text, "because");
    }

    #[test]
    fn unmatched_and_empty_prompts_fail() {
        let b = backend();
        assert!(matches!(
            b.generate(&GenerationRequest::new("hello")),
            Err(GatewayError::NoRule(_))
        ));
        assert!(matches!(
            b.generate(&GenerationRequest::new("")),
            Err(GatewayError::InvalidInput(_))
        ));
        // the empty prompt is rejected before it reaches the rule table
        assert_eq!(b.calls(), vec!["hello".to_string()]);
    }

    #[test]
    fn embeddings_are_deterministic_unit_vectors() {
        let b = backend();
        let a = b.embed("A  B").unwrap();
        assert_eq!(a, b.embed("a b").unwrap());
        assert_eq!(a.len(), 8);
        for text in ["a", "bridge", "why is the bridge unconnected?", "x y z"] {
            let v = b.embed(text).unwrap();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9);
        }
        assert_ne!(b.embed("a").unwrap(), b.embed("b").unwrap());
        assert!(b.embed("  ").is_err());
    }

    #[test]
    fn scripted_distributions() {
        let b = backend();
        let d = b.candidate_distribution("weather today", &cands(&["sun", "rain"])).unwrap();
        assert_eq!(d.probabilities(), vec![0.75, 0.25]);
        let d = b.candidate_distribution("zero", &cands(&["a", "b"])).unwrap();
        assert_eq!(d.probabilities(), vec![0.5, 0.5]);
        assert!(b.candidate_distribution("weather", &cands(&["only"])).is_err());
    }

    #[test]
    fn keyed_distribution_follows_candidate_permutation() {
        let b = backend();
        let forward = b.candidate_distribution("city", &cands(&["Paris", "Lyon"])).unwrap();
        let reversed = b.candidate_distribution("city", &cands(&["Lyon", "Paris"])).unwrap();
        assert_eq!(forward.probability_of("Paris"), reversed.probability_of("Paris"));
        assert_eq!(forward.probability_of("Lyon"), reversed.probability_of("Lyon"));
        assert_eq!(forward.probability_of("Paris"), Some(0.75));
    }

    #[test]
    fn config_round_trips_through_json() {
        let b = backend();
        let json = serde_json::to_string(b.config()).unwrap();
        let again = ScriptedBackend::from_json(&json).unwrap();
        assert_eq!(again.config(), b.config());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(ScriptedBackend::from_json(r#"{"embedding_dim": 0}"#).is_err());
        assert!(ScriptedBackend::from_json(
            r#"{"embedding_dim": 2, "rules": [{"pattern": "(", "response": "", "confidence": 0.1, "regex": true}]}"#
        )
        .is_err());
        assert!(ScriptedBackend::from_json(
            r#"{"embedding_dim": 2, "rules": [{"pattern": "a", "response": "", "confidence": 1.5}]}"#
        )
        .is_err());
    }
}
