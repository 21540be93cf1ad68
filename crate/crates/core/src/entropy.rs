//! Entropy of extension: Shannon entropy over extension contributions,
//! method-coverage entropy, entropy gain, mutual information, joint-entropy
//! independence, network entropy and KL information gain.
//!
//! All quantities are in bits.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::extension::ExtendedQuestion;
use crate::gateway::{Gateway, GatewayError};
use crate::method_store::Method;

/// Absolute tolerance for identities (normalization, equalities).
pub const IDENTITY_TOL: f64 = 1e-9;
/// Tolerance of the additivity test used by [`independence_check`].
pub const INDEPENDENCE_TOL: f64 = 1e-6;
/// Floor added to every extension's novel-coverage count.
pub const COVERAGE_EPSILON: f64 = 1e-6;
/// Mass given to zero cells of the reference distribution in [`kl_divergence`].
pub const KL_SMOOTHING: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EntropyError {
    #[error("degenerate distribution: {0}")]
    Degenerate(String),
    #[error("outcome mismatch between distributions")]
    OutcomeMismatch,
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("network entropy bound violated: combined {combined} < max per-tree {max_per_tree}")]
    BoundViolated { combined: f64, max_per_tree: f64 },
    #[error("gateway error: {0}")]
    Gateway(#[from] GatewayError),
}

/// Finite nonnegative weights over named outcomes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    outcomes: Vec<String>,
    weights: Vec<f64>,
}

impl Distribution {
    pub fn new(outcomes: Vec<String>, weights: Vec<f64>) -> Result<Self, EntropyError> {
        if outcomes.len() != weights.len() {
            return Err(EntropyError::InvalidInput(format!(
                "{} outcomes but {} weights",
                outcomes.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(EntropyError::InvalidInput(
                "weights must be finite and nonnegative".into(),
            ));
        }
        if !weights.iter().any(|w| *w > 0.0) {
            return Err(EntropyError::Degenerate("no positive weight".into()));
        }
        let unique: BTreeSet<&String> = outcomes.iter().collect();
        if unique.len() != outcomes.len() {
            return Err(EntropyError::InvalidInput("duplicate outcome".into()));
        }
        Ok(Self { outcomes, weights })
    }

    /// Outcomes labelled `0..n`.
    pub fn from_weights(weights: &[f64]) -> Result<Self, EntropyError> {
        Self::new(
            (0..weights.len()).map(|i| i.to_string()).collect(),
            weights.to_vec(),
        )
    }

    pub fn uniform(outcomes: Vec<String>) -> Result<Self, EntropyError> {
        let n = outcomes.len();
        Self::new(outcomes, vec![1.0; n])
    }

    pub fn outcomes(&self) -> &[String] {
        &self.outcomes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.outcomes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outcomes.is_empty()
    }

    pub fn probabilities(&self) -> Vec<f64> {
        let total: f64 = self.weights.iter().sum();
        self.weights.iter().map(|w| w / total).collect()
    }

    pub fn probability_of(&self, outcome: &str) -> Option<f64> {
        let idx = self.outcomes.iter().position(|o| o == outcome)?;
        Some(self.probabilities()[idx])
    }
}

/// Shannon entropy of a probability vector; `0·log 0 := 0`.
fn entropy_of_probs(probs: impl IntoIterator<Item = f64>) -> f64 {
    let h: f64 = probs
        .into_iter()
        .filter(|p| *p > 0.0)
        .map(|p| -p * p.log2())
        .sum();
    h.max(0.0)
}

pub fn entropy(d: &Distribution) -> f64 {
    entropy_of_probs(d.probabilities())
}

/// One extension's identity for weighting purposes.
pub trait ExtensionIdentity {
    fn extension_id(&self) -> &str;
}

impl ExtensionIdentity for String {
    fn extension_id(&self) -> &str {
        self
    }
}

impl ExtensionIdentity for &str {
    fn extension_id(&self) -> &str {
        self
    }
}

/// Contribution weights of extensions, in list order: each extension's
/// weight is the number of questions it covers that no earlier extension
/// covered, plus [`COVERAGE_EPSILON`]. Extensions absent from `coverage`
/// cover nothing.
pub fn extension_weights<E: ExtensionIdentity>(
    extensions: &[E],
    coverage: &BTreeMap<String, BTreeSet<String>>,
) -> Result<Distribution, EntropyError> {
    if extensions.is_empty() {
        return Err(EntropyError::Degenerate("no extensions".into()));
    }
    let ids: BTreeSet<&str> = extensions.iter().map(|e| e.extension_id()).collect();
    if let Some(stray) = coverage.keys().find(|k| !ids.contains(k.as_str())) {
        return Err(EntropyError::InvalidInput(format!(
            "coverage key {stray} is not a listed extension"
        )));
    }
    let mut seen: BTreeSet<&str> = BTreeSet::new();
    let mut outcomes = Vec::with_capacity(extensions.len());
    let mut weights = Vec::with_capacity(extensions.len());
    for ext in extensions {
        let id = ext.extension_id();
        let mut novel = 0usize;
        if let Some(questions) = coverage.get(id) {
            for q in questions {
                if seen.insert(q.as_str()) {
                    novel += 1;
                }
            }
        }
        outcomes.push(id.to_string());
        weights.push(novel as f64 + COVERAGE_EPSILON);
    }
    Distribution::new(outcomes, weights)
}

/// Entropy of the questions a method solves, under uniform `p(q|m)`.
pub fn coverage_entropy(method: &Method) -> Result<f64, EntropyError> {
    uniform_set_entropy(method.applicability.len())
}

fn uniform_set_entropy(size: usize) -> Result<f64, EntropyError> {
    if size == 0 {
        return Err(EntropyError::Degenerate("empty question set".into()));
    }
    Ok((size as f64).log2())
}

/// Uniform-entropy gain of extending `base` with `added`.
pub fn entropy_gain(
    base: &BTreeSet<String>,
    added: &BTreeSet<String>,
) -> Result<f64, EntropyError> {
    let before = uniform_set_entropy(base.len())?;
    let union = base.union(added).count();
    let after = uniform_set_entropy(union)?;
    Ok((after - before).max(0.0))
}

/// Two-variable table of nonnegative masses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointTable {
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    pub cells: Vec<Vec<f64>>,
}

impl JointTable {
    pub fn new(rows: Vec<String>, cols: Vec<String>, cells: Vec<Vec<f64>>) -> Result<Self, EntropyError> {
        if cells.len() != rows.len() || cells.iter().any(|r| r.len() != cols.len()) {
            return Err(EntropyError::InvalidInput("table shape does not match labels".into()));
        }
        if cells.iter().flatten().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(EntropyError::InvalidInput("cells must be finite and nonnegative".into()));
        }
        if !cells.iter().flatten().any(|c| *c > 0.0) {
            return Err(EntropyError::Degenerate("table has no mass".into()));
        }
        Ok(Self { rows, cols, cells })
    }

    /// Rows and columns labelled by index.
    pub fn from_cells(cells: Vec<Vec<f64>>) -> Result<Self, EntropyError> {
        let rows = (0..cells.len()).map(|i| format!("r{i}")).collect();
        let width = cells.first().map_or(0, Vec::len);
        let cols = (0..width).map(|j| format!("c{j}")).collect();
        Self::new(rows, cols, cells)
    }

    fn total(&self) -> f64 {
        self.cells.iter().flatten().sum()
    }

    pub fn row_marginal(&self) -> Vec<f64> {
        let t = self.total();
        self.cells.iter().map(|r| r.iter().sum::<f64>() / t).collect()
    }

    pub fn col_marginal(&self) -> Vec<f64> {
        let t = self.total();
        (0..self.cols.len())
            .map(|j| self.cells.iter().map(|r| r[j]).sum::<f64>() / t)
            .collect()
    }
}

pub fn joint_entropy(joint: &JointTable) -> f64 {
    let t = joint.total();
    entropy_of_probs(joint.cells.iter().flatten().map(|c| c / t))
}

pub fn row_entropy(joint: &JointTable) -> f64 {
    entropy_of_probs(joint.row_marginal())
}

pub fn col_entropy(joint: &JointTable) -> f64 {
    entropy_of_probs(joint.col_marginal())
}

/// `I = H(row) + H(col) − H(joint)`, clamped at zero.
pub fn mutual_information(joint: &JointTable) -> f64 {
    (row_entropy(joint) + col_entropy(joint) - joint_entropy(joint)).max(0.0)
}

/// True iff the joint entropy is additive in the marginals.
pub fn independence_check(joint: &JointTable) -> bool {
    (joint_entropy(joint) - row_entropy(joint) - col_entropy(joint)).abs() <= INDEPENDENCE_TOL
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NetworkEntropy {
    pub combined: f64,
    pub per_tree: Vec<f64>,
}

/// Entropy of the union of extension sets against the entropy of each set.
///
/// The union is ordered set by set (ids sorted within a set) and
/// deduplicated, so novel coverage is credited to the first set listing it.
pub fn network_entropy(
    sets: &[BTreeSet<String>],
    coverage: &BTreeMap<String, BTreeSet<String>>,
) -> Result<NetworkEntropy, EntropyError> {
    if sets.is_empty() {
        return Err(EntropyError::Degenerate("no extension sets".into()));
    }
    let mut union: Vec<&String> = Vec::new();
    let mut seen = BTreeSet::new();
    for set in sets {
        for id in set {
            if seen.insert(id) {
                union.push(id);
            }
        }
    }
    let combined = entropy(&extension_weights(&union, &restrict(coverage, &seen))?);
    let mut per_tree = Vec::with_capacity(sets.len());
    for set in sets {
        if set.is_empty() {
            per_tree.push(0.0);
            continue;
        }
        let ids: Vec<&String> = set.iter().collect();
        let keys: BTreeSet<&String> = set.iter().collect();
        per_tree.push(entropy(&extension_weights(&ids, &restrict(coverage, &keys))?));
    }
    let max_per_tree = per_tree.iter().cloned().fold(0.0, f64::max);
    if combined < max_per_tree - IDENTITY_TOL {
        return Err(EntropyError::BoundViolated {
            combined,
            max_per_tree,
        });
    }
    Ok(NetworkEntropy { combined, per_tree })
}

impl ExtensionIdentity for &String {
    fn extension_id(&self) -> &str {
        self
    }
}

fn restrict(
    coverage: &BTreeMap<String, BTreeSet<String>>,
    keep: &BTreeSet<&String>,
) -> BTreeMap<String, BTreeSet<String>> {
    coverage
        .iter()
        .filter(|(k, _)| keep.contains(k))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect()
}

/// `KL(p ‖ q)` in bits. Outcomes are matched by name, so the value does not
/// depend on the order in which either distribution lists them. When `q`
/// has zero mass where `p` does not, its zero cells receive
/// [`KL_SMOOTHING`] and `q` is renormalized.
pub fn kl_divergence(p: &Distribution, q: &Distribution) -> Result<f64, EntropyError> {
    if p.len() != q.len() {
        return Err(EntropyError::OutcomeMismatch);
    }
    let q_index: BTreeMap<&str, usize> = q
        .outcomes()
        .iter()
        .enumerate()
        .map(|(i, o)| (o.as_str(), i))
        .collect();
    let aligned: Vec<(f64, usize)> = p
        .outcomes()
        .iter()
        .zip(p.probabilities())
        .map(|(outcome, pv)| {
            q_index
                .get(outcome.as_str())
                .map(|qi| (pv, *qi))
                .ok_or(EntropyError::OutcomeMismatch)
        })
        .collect::<Result<_, _>>()?;
    let mut q_probs = q.probabilities();
    if aligned.iter().any(|(pv, qi)| *pv > 0.0 && q_probs[*qi] == 0.0) {
        for v in q_probs.iter_mut().filter(|v| **v == 0.0) {
            *v = KL_SMOOTHING;
        }
        let total: f64 = q_probs.iter().sum();
        q_probs.iter_mut().for_each(|v| *v /= total);
    }
    let kl: f64 = aligned
        .iter()
        .filter(|(pv, _)| *pv > 0.0)
        .map(|(pv, qi)| pv * (pv / q_probs[*qi]).log2())
        .sum();
    Ok(kl.max(0.0))
}

/// Information contributed by explicit extension: the divergence of the
/// candidate-answer distribution given the extended prompt from the one
/// given the original prompt. Both gateway calls are issued concurrently.
pub fn information_gain(
    question: &str,
    extended: &ExtendedQuestion,
    candidates: &[String],
    gateway: &dyn Gateway,
) -> Result<f64, EntropyError> {
    if candidates.len() < 2 {
        return Err(EntropyError::InvalidInput(
            "at least two candidate answers are required".into(),
        ));
    }
    let (original, widened) = std::thread::scope(|s| {
        let original = s.spawn(|| gateway.candidate_distribution(question, candidates));
        let widened = gateway.candidate_distribution(&extended.composed, candidates);
        (original.join().expect("distribution worker panicked"), widened)
    });
    kl_divergence(&widened?, &original?)
}

/// Per-extension probabilities, entropy, and stepwise coverage gains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    pub probabilities: BTreeMap<String, f64>,
    pub entropy_bits: f64,
    pub gains: Vec<Gain>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gain {
    pub id: String,
    pub delta: f64,
}

/// Build an [`EntropyReport`] for an ordered list of `(extension id, covered questions)`.
///
/// Each gain is the uniform-entropy increase of the cumulative covered set
/// when that extension is added; the first extension's gain is measured
/// from an empty set (its own `log2 |Q|`).
pub fn entropy_report(extensions: &[(String, BTreeSet<String>)]) -> Result<EntropyReport, EntropyError> {
    let ids: Vec<&String> = extensions.iter().map(|(id, _)| id).collect();
    let coverage: BTreeMap<String, BTreeSet<String>> = extensions.iter().cloned().collect();
    if coverage.len() != extensions.len() {
        return Err(EntropyError::InvalidInput("duplicate extension id".into()));
    }
    let dist = extension_weights(&ids, &coverage)?;
    let entropy_bits = entropy(&dist);
    let probabilities = dist
        .outcomes()
        .iter()
        .cloned()
        .zip(dist.probabilities())
        .collect();
    let mut covered = BTreeSet::new();
    let mut gains = Vec::with_capacity(extensions.len());
    for (id, questions) in extensions {
        let delta = if covered.is_empty() {
            if questions.is_empty() {
                0.0
            } else {
                uniform_set_entropy(questions.len())?
            }
        } else {
            entropy_gain(&covered, questions)?
        };
        covered.extend(questions.iter().cloned());
        gains.push(Gain {
            id: id.clone(),
            delta,
        });
    }
    Ok(EntropyReport {
        probabilities,
        entropy_bits,
        gains,
    })
}
