//! Decoupled question/solution methods with embedding-distance retrieval.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{Gateway, GatewayError};
use crate::text::{method_id, normalize};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StoreError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("embedding dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("degenerate embedding: zero norm")]
    DegenerateEmbedding,
    #[error("method not found: {0}")]
    NotFound(String),
    #[error("gateway error: {0}")]
    Gateway(#[from] GatewayError),
    #[error("store file {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Origin {
    Authored,
    GeneralizedFrom(String),
    ImprovedFrom(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Method {
    pub id: String,
    pub question: String,
    pub solution: String,
    pub steps: Vec<String>,
    pub embedding: Vec<f64>,
    #[serde(default)]
    pub tags: BTreeSet<String>,
    #[serde(default)]
    pub applicability: BTreeSet<String>,
    pub origin: Origin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatchedOn {
    OriginalQuestion,
    ExtendedQuestion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalHit {
    pub method_id: String,
    pub distance: f64,
    pub matched_on: MatchedOn,
}

/// Cosine similarity of two nonzero vectors of equal dimension.
pub fn similarity(a: &[f64], b: &[f64]) -> Result<f64, StoreError> {
    if a.len() != b.len() {
        return Err(StoreError::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(StoreError::DegenerateEmbedding);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// `1 − similarity(a, b)`, in `[0, 2]`.
pub fn distance(a: &[f64], b: &[f64]) -> Result<f64, StoreError> {
    Ok(1.0 - similarity(a, b)?)
}

fn unit(embedding: Vec<f64>, dim: usize) -> Result<Vec<f64>, StoreError> {
    if embedding.len() != dim {
        return Err(StoreError::DimensionMismatch {
            expected: dim,
            actual: embedding.len(),
        });
    }
    let norm = embedding.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(StoreError::DegenerateEmbedding);
    }
    Ok(embedding.into_iter().map(|x| x / norm).collect())
}

fn compact(text: &str) -> String {
    text.chars().filter(|c| !c.is_whitespace()).collect()
}

#[derive(Serialize, Deserialize)]
struct Header {
    dim: usize,
}

/// In-memory method collection with a fixed embedding dimension.
///
/// Methods are keyed by content hash, so re-adding the same question and
/// solution is a no-op and iteration order is the id order.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodStore {
    dim: usize,
    methods: BTreeMap<String, Method>,
}

impl MethodStore {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            methods: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.methods.len()
    }

    pub fn is_empty(&self) -> bool {
        self.methods.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Method> {
        self.methods.get(id)
    }

    pub fn methods(&self) -> impl Iterator<Item = &Method> {
        self.methods.values()
    }

    /// Store a method, embedding its question through `gateway`.
    pub fn add_method(
        &mut self,
        question: &str,
        solution: &str,
        steps: Option<Vec<String>>,
        gateway: &dyn Gateway,
    ) -> Result<String, StoreError> {
        let (question, solution, steps) = Self::validate(question, solution, steps)?;
        let id = method_id(&question, &solution);
        if self.methods.contains_key(&id) {
            return Ok(id);
        }
        let embedding = gateway.embed(&question)?;
        self.insert(id, question, solution, steps, embedding, Origin::Authored)
    }

    /// Store a method with a caller-supplied embedding.
    pub fn add_with_embedding(
        &mut self,
        question: &str,
        solution: &str,
        steps: Option<Vec<String>>,
        embedding: Vec<f64>,
        origin: Origin,
    ) -> Result<String, StoreError> {
        let (question, solution, steps) = Self::validate(question, solution, steps)?;
        let id = method_id(&question, &solution);
        if self.methods.contains_key(&id) {
            return Ok(id);
        }
        self.insert(id, question, solution, steps, embedding, origin)
    }

    fn validate(
        question: &str,
        solution: &str,
        steps: Option<Vec<String>>,
    ) -> Result<(String, String, Vec<String>), StoreError> {
        if normalize(question).is_empty() {
            return Err(StoreError::InvalidInput("empty question".into()));
        }
        if normalize(solution).is_empty() {
            return Err(StoreError::InvalidInput("empty solution".into()));
        }
        let steps = match steps {
            None => vec![solution.trim().to_string()],
            Some(steps) if steps.is_empty() => vec![solution.trim().to_string()],
            Some(steps) => {
                let steps: Vec<String> = steps.iter().map(|s| s.trim().to_string()).collect();
                if steps.iter().any(String::is_empty) {
                    return Err(StoreError::InvalidInput("empty step".into()));
                }
                if compact(&steps.concat()) != compact(solution) {
                    return Err(StoreError::InvalidInput(
                        "steps do not reconstruct the solution".into(),
                    ));
                }
                steps
            }
        };
        Ok((question.trim().to_string(), solution.trim().to_string(), steps))
    }

    fn insert(
        &mut self,
        id: String,
        question: String,
        solution: String,
        steps: Vec<String>,
        embedding: Vec<f64>,
        origin: Origin,
    ) -> Result<String, StoreError> {
        let embedding = unit(embedding, self.dim)?;
        self.methods.insert(
            id.clone(),
            Method {
                id: id.clone(),
                question,
                solution,
                steps,
                embedding,
                tags: BTreeSet::new(),
                applicability: BTreeSet::new(),
                origin,
            },
        );
        Ok(id)
    }

    /// Up to `k` methods nearest to `query`, ascending by distance then id.
    pub fn retrieve_nearest(
        &self,
        query: &[f64],
        k: usize,
        max_distance: Option<f64>,
        matched_on: MatchedOn,
    ) -> Result<Vec<RetrievalHit>, StoreError> {
        if k == 0 {
            return Err(StoreError::InvalidInput("k must be at least 1".into()));
        }
        if self.methods.is_empty() {
            return Ok(Vec::new());
        }
        if query.len() != self.dim {
            return Err(StoreError::DimensionMismatch {
                expected: self.dim,
                actual: query.len(),
            });
        }
        let mut hits = self
            .methods
            .values()
            .map(|m| {
                Ok(RetrievalHit {
                    method_id: m.id.clone(),
                    distance: distance(query, &m.embedding)?.clamp(0.0, 2.0),
                    matched_on,
                })
            })
            .collect::<Result<Vec<_>, StoreError>>()?;
        if let Some(max) = max_distance {
            hits.retain(|h| h.distance <= max);
        }
        hits.sort_by(|a, b| {
            a.distance
                .total_cmp(&b.distance)
                .then_with(|| a.method_id.cmp(&b.method_id))
        });
        hits.truncate(k);
        Ok(hits)
    }

    /// Embed `text` and retrieve against it.
    pub fn retrieve_text(
        &self,
        text: &str,
        k: usize,
        max_distance: Option<f64>,
        matched_on: MatchedOn,
        gateway: &dyn Gateway,
    ) -> Result<Vec<RetrievalHit>, StoreError> {
        let query = gateway.embed(text)?;
        self.retrieve_nearest(&query, k, max_distance, matched_on)
    }

    /// Mark `question_id` as solvable by `method_id`. Idempotent.
    pub fn record_applicability(
        &mut self,
        method_id: &str,
        question_id: &str,
    ) -> Result<&Method, StoreError> {
        let method = self
            .methods
            .get_mut(method_id)
            .ok_or_else(|| StoreError::NotFound(method_id.to_string()))?;
        method.applicability.insert(question_id.to_string());
        Ok(method)
    }

    pub fn add_tag(&mut self, method_id: &str, tag: &str) -> Result<(), StoreError> {
        self.methods
            .get_mut(method_id)
            .ok_or_else(|| StoreError::NotFound(method_id.to_string()))?
            .tags
            .insert(tag.to_string());
        Ok(())
    }

    /// Ids of methods registered as applicable to `question_id`.
    pub fn methods_for(&self, question_id: &str) -> BTreeSet<String> {
        self.methods
            .values()
            .filter(|m| m.applicability.contains(question_id))
            .map(|m| m.id.clone())
            .collect()
    }

    /// Write the header line then one method per line, in id order.
    pub fn save(&self, path: &Path) -> Result<(), StoreError> {
        let io = |e: std::io::Error| StoreError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        let mut out = Vec::new();
        serde_json::to_writer(&mut out, &Header { dim: self.dim }).expect("header serializes");
        out.push(b'\n');
        for method in self.methods.values() {
            serde_json::to_writer(&mut out, method).expect("method serializes");
            out.push(b'\n');
        }
        let mut file = fs::File::create(path).map_err(io)?;
        file.write_all(&out).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, StoreError> {
        let err = |message: String| StoreError::Io {
            path: path.display().to_string(),
            message,
        };
        let file = fs::File::open(path).map_err(|e| err(e.to_string()))?;
        let mut lines = BufReader::new(file).lines();
        let header = lines
            .next()
            .ok_or_else(|| err("missing header line".into()))?
            .map_err(|e| err(e.to_string()))?;
        let header: Header =
            serde_json::from_str(&header).map_err(|e| err(format!("bad header: {e}")))?;
        let mut store = Self::new(header.dim);
        for (n, line) in lines.enumerate() {
            let line = line.map_err(|e| err(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let method: Method =
                serde_json::from_str(&line).map_err(|e| err(format!("line {}: {e}", n + 2)))?;
            if method.embedding.len() != store.dim {
                return Err(StoreError::DimensionMismatch {
                    expected: store.dim,
                    actual: method.embedding.len(),
                });
            }
            store.methods.insert(method.id.clone(), method);
        }
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::ScriptedBackend;

    fn gateway(dim: usize) -> ScriptedBackend {
        ScriptedBackend::from_json(&format!(r#"{{"embedding_dim": {dim}, "embedding_seed": 3}}"#)).unwrap()
    }

    fn axis(dim: usize, i: usize, sign: f64) -> Vec<f64> {
        let mut v = vec![0.0; dim];
        v[i] = sign;
        v
    }

    #[test]
    fn add_is_idempotent_and_content_addressed() {
        let gw = gateway(8);
        let mut store = MethodStore::new(8);
        let a = store
            .add_method("why is the bridge unconnected?", "inspect wider context", None, &gw)
            .unwrap();
        let b = store
            .add_method("Why is the  bridge unconnected?", "inspect wider context", None, &gw)
            .unwrap();
        assert_eq!(a, b);
        assert_eq!(store.len(), 1);
        let m = store.get(&a).unwrap();
        assert_eq!(m.steps, vec!["inspect wider context".to_string()]);
        let norm: f64 = m.embedding.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn same_question_different_solutions_get_distinct_ids() {
        let gw = gateway(4);
        let mut store = MethodStore::new(4);
        let inputs = [("q", "s1"), ("q", "s2"), ("q2", "s1")];
        let ids: BTreeSet<String> = inputs
            .iter()
            .map(|(q, s)| store.add_method(q, s, None, &gw).unwrap())
            .collect();
        assert_eq!(ids.len(), inputs.len());
    }

    #[test]
    fn empty_fields_are_rejected() {
        let gw = gateway(4);
        let mut store = MethodStore::new(4);
        assert!(matches!(
            store.add_method("", "x", None, &gw),
            Err(StoreError::InvalidInput(_))
        ));
        assert!(matches!(
            store.add_method("q", "  \n", None, &gw),
            Err(StoreError::InvalidInput(_))
        ));
    }

    #[test]
    fn steps_must_reconstruct_solution() {
        let mut store = MethodStore::new(2);
        let steps = vec!["look left".to_string(), "look right".to_string()];
        assert!(store
            .add_with_embedding("q", "look left\nlook right", Some(steps), vec![1.0, 0.0], Origin::Authored)
            .is_ok());
        let wrong = vec!["look up".to_string()];
        assert!(matches!(
            store.add_with_embedding("q", "look down", Some(wrong), vec![1.0, 0.0], Origin::Authored),
            Err(StoreError::InvalidInput(_))
        ));
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let gw = gateway(4);
        let mut store = MethodStore::new(6);
        assert_eq!(
            store.add_method("q", "s", None, &gw),
            Err(StoreError::DimensionMismatch { expected: 6, actual: 4 })
        );
    }

    #[test]
    fn similarity_fixtures() {
        let e0 = axis(3, 0, 1.0);
        assert_eq!(similarity(&e0, &e0).unwrap(), 1.0);
        assert_eq!(distance(&e0, &e0).unwrap(), 0.0);
        assert_eq!(similarity(&e0, &axis(3, 1, 1.0)).unwrap(), 0.0);
        assert_eq!(distance(&e0, &axis(3, 1, 1.0)).unwrap(), 1.0);
        assert_eq!(similarity(&e0, &axis(3, 0, -1.0)).unwrap(), -1.0);
        assert_eq!(distance(&e0, &axis(3, 0, -1.0)).unwrap(), 2.0);
        assert_eq!(similarity(&e0, &[0.0; 3]), Err(StoreError::DegenerateEmbedding));
        assert!(matches!(
            similarity(&e0, &[1.0, 0.0]),
            Err(StoreError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn retrieval_fixtures() {
        let gw = gateway(8);
        let mut store = MethodStore::new(8);
        assert!(store
            .retrieve_text("anything", 3, None, MatchedOn::OriginalQuestion, &gw)
            .unwrap()
            .is_empty());
        let id = store.add_method("why is the sky blue", "rayleigh", None, &gw).unwrap();
        let hits = store
            .retrieve_text("why is the sky blue", 1, None, MatchedOn::OriginalQuestion, &gw)
            .unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].method_id, id);
        assert!(hits[0].distance.abs() < 1e-12);
        let none = store
            .retrieve_text("something unrelated", 5, Some(0.1), MatchedOn::OriginalQuestion, &gw)
            .unwrap();
        assert!(none.is_empty());
        assert!(store
            .retrieve_nearest(&[1.0; 8], 0, None, MatchedOn::OriginalQuestion)
            .is_err());
    }

    #[test]
    fn retrieval_ties_break_by_id() {
        let mut store = MethodStore::new(2);
        let a = store
            .add_with_embedding("a", "s", None, vec![0.0, 1.0], Origin::Authored)
            .unwrap();
        let b = store
            .add_with_embedding("b", "s", None, vec![0.0, -1.0], Origin::Authored)
            .unwrap();
        let hits = store
            .retrieve_nearest(&[1.0, 0.0], 2, None, MatchedOn::OriginalQuestion)
            .unwrap();
        let mut expected = vec![a, b];
        expected.sort();
        assert_eq!(
            hits.iter().map(|h| h.method_id.clone()).collect::<Vec<_>>(),
            expected
        );
    }

    #[test]
    fn applicability_grows_idempotently() {
        let mut store = MethodStore::new(2);
        let id = store
            .add_with_embedding("q", "s", None, vec![1.0, 1.0], Origin::Authored)
            .unwrap();
        assert!(store.get(&id).unwrap().applicability.is_empty());
        store.record_applicability(&id, "q-1").unwrap();
        assert_eq!(store.record_applicability(&id, "q-1").unwrap().applicability.len(), 1);
        for i in 2..=5 {
            store.record_applicability(&id, &format!("q-{i}")).unwrap();
        }
        assert_eq!(store.get(&id).unwrap().applicability.len(), 5);
        assert_eq!(
            store.record_applicability("m-missing", "q"),
            Err(StoreError::NotFound("m-missing".into()))
        );
        assert_eq!(store.methods_for("q-3"), BTreeSet::from([id]));
    }

    #[test]
    fn save_and_load_round_trip() {
        let gw = gateway(5);
        let mut store = MethodStore::new(5);
        let id = store
            .add_method("q one", "a then b", Some(vec!["a then".into(), "b".into()]), &gw)
            .unwrap();
        store.add_method("q two", "c", None, &gw).unwrap();
        store.record_applicability(&id, "q-x").unwrap();
        store.add_tag(&id, "bridge").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("methods.jsonl");
        store.save(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("{\"dim\":5}\n"));
        assert_eq!(text.lines().count(), 3);
        assert_eq!(MethodStore::load(&path).unwrap(), store);
    }
}
