//! Prompt templates, loaded from JSON with `{name}` placeholders.

use std::path::Path;

use serde::{Deserialize, Serialize};

const DEFAULT_TEMPLATES: &str = include_str!("../templates/default.json");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Templates {
    pub vertical: String,
    pub horizontal: String,
    pub generalize: String,
    pub scatter: String,
    pub predict_future: String,
    pub intuition: String,
    pub reuse: String,
    pub extended: String,
    pub borrow: String,
    pub active_changes: String,
    pub active_solution: String,
    pub critique: String,
    pub improve_step: String,
    pub predictive_score: String,
}

impl Default for Templates {
    fn default() -> Self {
        serde_json::from_str(DEFAULT_TEMPLATES).expect("bundled templates are valid")
    }
}

impl Templates {
    /// Parse a template map; keys it leaves out keep their bundled text.
    pub fn from_json(json: &str) -> Result<Self, serde_json::Error> {
        let mut merged = serde_json::to_value(Self::default())?;
        let overrides: serde_json::Map<String, serde_json::Value> = serde_json::from_str(json)?;
        let target = merged.as_object_mut().expect("templates serialize to an object");
        for (key, value) in overrides {
            if !target.contains_key(&key) {
                return Err(serde::de::Error::custom(format!("unknown template key {key:?}")));
            }
            target.insert(key, value);
        }
        serde_json::from_value(merged)
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let json = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::from_json(&json).map_err(|e| format!("{}: {e}", path.display()))
    }
}
