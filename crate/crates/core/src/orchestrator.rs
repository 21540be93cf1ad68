//! Layered answering pipeline: intuition, method reuse, scope extension,
//! then distance-based borrowing. Also the two-call difference-based
//! active step and step-change method improvement.

use std::collections::BTreeSet;
use std::sync::Mutex;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::entropy::Distribution;
use crate::extension::{compose, Extension, ExtensionEngine, ExtensionError, ExtensionKind};
use crate::gateway::{Gateway, GatewayError, Generation, GenerationRequest};
use crate::method_store::{MatchedOn, Method, MethodStore, Origin, RetrievalHit, StoreError};
use crate::templates::Templates;
use crate::text::{parse_list, question_id, render};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OrchestratorError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("{stage}: {source}")]
    Gateway {
        stage: String,
        #[source]
        source: GatewayError,
        /// Trace up to the failing stage, when answering.
        partial: Option<Box<ReasoningTrace>>,
    },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Extension(#[from] ExtensionError),
    #[error("method not found: {0}")]
    NotFound(String),
    #[error("invalid strategy: {0}")]
    InvalidStrategy(String),
    #[error("no feedback: {0}")]
    NoFeedback(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Intuition,
    MethodReuse,
    ScopeExtension,
    Borrowing,
}

impl Stage {
    pub const ORDER: [Stage; 4] = [Stage::Intuition, Stage::MethodReuse, Stage::ScopeExtension, Stage::Borrowing];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Outcome {
    Intuition,
    MethodReuse,
    ScopeExtended,
    Borrowed,
    Unresolved,
}

impl Outcome {
    fn of(stage: Stage) -> Self {
        match stage {
            Stage::Intuition => Outcome::Intuition,
            Stage::MethodReuse => Outcome::MethodReuse,
            Stage::ScopeExtension => Outcome::ScopeExtended,
            Stage::Borrowing => Outcome::Borrowed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub prompts_issued: Vec<String>,
    pub responses: Vec<String>,
    pub decision: String,
    pub confidence: f64,
    #[serde(default)]
    pub accepted: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub hits: Vec<RetrievalHit>,
    /// Which representation retrieval embedded.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matched_on: Option<MatchedOn>,
    /// Set when a reply's confidence could not be read and a default was used.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub confidence_defaulted: bool,
}

impl StageRecord {
    fn new(stage: Stage) -> Self {
        Self {
            stage,
            prompts_issued: Vec::new(),
            responses: Vec::new(),
            decision: String::new(),
            confidence: 0.0,
            accepted: false,
            hits: Vec::new(),
            matched_on: None,
            confidence_defaulted: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningTrace {
    pub question: String,
    pub stages: Vec<StageRecord>,
    pub final_answer: String,
    pub outcome: Outcome,
    /// Extension kinds stage 3 was configured to try, in order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub extension_order: Vec<ExtensionKind>,
    /// Extensions stage 3 actually applied.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub extensions: Vec<Extension>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extended_question: Option<String>,
}

impl ReasoningTrace {
    /// Stage order is a prefix of the pipeline and the outcome names the
    /// last stage, which is the only accepted one.
    pub fn is_well_formed(&self) -> bool {
        if self.stages.is_empty() || self.stages.len() > Stage::ORDER.len() {
            return false;
        }
        if self.stages.iter().zip(Stage::ORDER).any(|(r, s)| r.stage != s) {
            return false;
        }
        if self
            .stages
            .iter()
            .any(|r| r.prompts_issued.len() != r.responses.len() || !(0.0..=1.0).contains(&r.confidence))
        {
            return false;
        }
        let accepted: Vec<&StageRecord> = self.stages.iter().filter(|r| r.accepted).collect();
        match (self.outcome, accepted.as_slice()) {
            (Outcome::Unresolved, []) => true,
            (outcome, [only]) => {
                std::ptr::eq(*only, self.stages.last().expect("non-empty")) && Outcome::of(only.stage) == outcome
            }
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrchestratorConfig {
    /// Minimum confidence to accept a generated answer.
    pub intuition_threshold: f64,
    /// Maximum distance for direct method reuse (τ).
    pub reuse_threshold: f64,
    /// Methods borrowed in the last stage.
    pub borrow_k: usize,
    pub extension_order: Vec<ExtensionKind>,
    /// Parallel questions requested by horizontal extension.
    pub horizontal_n: usize,
    pub max_stages: usize,
}

impl Default for OrchestratorConfig {
    fn default() -> Self {
        Self {
            intuition_threshold: 0.75,
            reuse_threshold: 0.25,
            borrow_k: 3,
            extension_order: vec![
                ExtensionKind::Vertical,
                ExtensionKind::Horizontal,
                ExtensionKind::Temporal,
                ExtensionKind::Spatial,
            ],
            horizontal_n: 3,
            max_stages: 4,
        }
    }
}

impl OrchestratorConfig {
    pub fn validate(&self) -> Result<(), OrchestratorError> {
        if !(0.0..=1.0).contains(&self.intuition_threshold) {
            return Err(OrchestratorError::InvalidInput("intuition threshold must be in [0,1]".into()));
        }
        if !(0.0..=2.0).contains(&self.reuse_threshold) {
            return Err(OrchestratorError::InvalidInput("reuse threshold must be in [0,2]".into()));
        }
        if self.borrow_k == 0 || self.horizontal_n == 0 || self.max_stages == 0 {
            return Err(OrchestratorError::InvalidInput(
                "borrow k, horizontal n and max stages must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Caller-supplied material for temporal and spatial extension.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AskContext {
    #[serde(default)]
    pub history: Vec<String>,
    #[serde(default)]
    pub future: Vec<String>,
    #[serde(default)]
    pub wider_context: Option<String>,
}

/// Gateway wrapper that records every successful generation.
struct Recorder<'a> {
    inner: &'a dyn Gateway,
    log: Mutex<Vec<(String, Generation)>>,
}

impl<'a> Recorder<'a> {
    fn new(inner: &'a dyn Gateway) -> Self {
        Self {
            inner,
            log: Mutex::new(Vec::new()),
        }
    }

    fn drain_into(&self, record: &mut StageRecord) {
        for (prompt, generation) in self.log.lock().expect("recorder poisoned").drain(..) {
            record.prompts_issued.push(prompt);
            record.responses.push(generation.text);
            record.confidence_defaulted |= !generation.confidence_parsed;
        }
    }
}

impl Gateway for Recorder<'_> {
    fn generate(&self, request: &GenerationRequest) -> Result<Generation, GatewayError> {
        let generation = self.inner.generate(request)?;
        self.log
            .lock()
            .expect("recorder poisoned")
            .push((request.prompt.clone(), generation.clone()));
        Ok(generation)
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, GatewayError> {
        self.inner.embed(text)
    }

    fn candidate_distribution(&self, prompt: &str, candidates: &[String]) -> Result<Distribution, GatewayError> {
        self.inner.candidate_distribution(prompt, candidates)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActiveStep {
    pub changes: Vec<String>,
    pub action: String,
    /// The change-identification prompt, then the solution prompt.
    pub prompts: Vec<String>,
    pub responses: Vec<String>,
}

/// Action used when no relevant change was detected or the model proposes none.
pub const DEFAULT_ACTION: &str = "maintain";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Exactly one step changes.
    Minimal,
    /// Some but not all steps change.
    Partial,
    /// Every step changes.
    Complete,
}

impl std::str::FromStr for Strategy {
    type Err = OrchestratorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "minimal" => Ok(Strategy::Minimal),
            "partial" => Ok(Strategy::Partial),
            "complete" => Ok(Strategy::Complete),
            other => Err(OrchestratorError::InvalidStrategy(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvaluatorKind {
    Empirical,
    Predictive,
}

/// How improvement candidates are scored.
pub enum Evaluator<'a> {
    /// Ask the model to estimate success without running anything.
    Predictive,
    /// Caller-run test returning a pass rate in `[0, 1]` for the new steps.
    Empirical(&'a dyn Fn(&[String]) -> f64),
}

impl Evaluator<'_> {
    fn kind(&self) -> EvaluatorKind {
        match self {
            Evaluator::Predictive => EvaluatorKind::Predictive,
            Evaluator::Empirical(_) => EvaluatorKind::Empirical,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImprovementCandidate {
    pub base_method: String,
    pub strategy: Strategy,
    pub changed_steps: BTreeSet<usize>,
    pub new_steps: Vec<String>,
    pub score: f64,
    pub evaluator: EvaluatorKind,
}

/// Draw the step indices one improvement trial will change.
pub fn draw_changed_steps(
    strategy: Strategy,
    step_count: usize,
    rng: &mut impl Rng,
) -> Result<BTreeSet<usize>, OrchestratorError> {
    if step_count == 0 {
        return Err(OrchestratorError::InvalidStrategy("method has no steps".into()));
    }
    Ok(match strategy {
        Strategy::Minimal => BTreeSet::from([rng.gen_range(0..step_count)]),
        Strategy::Partial => {
            if step_count < 2 {
                return Err(OrchestratorError::InvalidStrategy(
                    "partial change needs at least two steps".into(),
                ));
            }
            let size = rng.gen_range(1..step_count);
            sample(rng, step_count, size).into_iter().collect()
        }
        Strategy::Complete => (0..step_count).collect(),
    })
}

fn numbered(steps: &[String]) -> String {
    steps
        .iter()
        .enumerate()
        .map(|(i, s)| format!("{}. {s}", i + 1))
        .collect::<Vec<_>>()
        .join("\n")
}

/// First number in a reply, read as a probability (values above 1 as percentages).
fn parse_score(reply: &str) -> Option<f64> {
    let token = reply
        .split(|c: char| !(c.is_ascii_digit() || c == '.'))
        .find(|t| !t.is_empty() && t.parse::<f64>().is_ok())?;
    let value: f64 = token.parse().ok()?;
    let value = if value > 1.0 { value / 100.0 } else { value };
    (0.0..=1.0).contains(&value).then_some(value)
}

fn is_no_change(items: &[String]) -> bool {
    match items {
        [] => true,
        [only] => {
            let t = only.trim().trim_end_matches('.').to_lowercase();
            matches!(t.as_str(), "no change" | "no changes" | "none" | "nothing changed")
        }
        _ => false,
    }
}

pub struct Orchestrator {
    pub engine: ExtensionEngine,
    pub config: OrchestratorConfig,
}

impl Orchestrator {
    pub fn new(templates: Templates, config: OrchestratorConfig) -> Result<Self, OrchestratorError> {
        config.validate()?;
        Ok(Self {
            engine: ExtensionEngine::new(templates),
            config,
        })
    }

    fn templates(&self) -> &Templates {
        &self.engine.templates
    }

    /// Run the answering pipeline, stopping at the first accepted stage.
    ///
    /// Successful reuse or borrowing records the question as solvable by the
    /// methods used; failures leave the store untouched.
    pub fn answer(
        &self,
        question: &str,
        context: &AskContext,
        store: &mut MethodStore,
        gateway: &dyn Gateway,
    ) -> Result<ReasoningTrace, OrchestratorError> {
        if question.trim().is_empty() {
            return Err(OrchestratorError::InvalidInput("empty question".into()));
        }
        let mut trace = ReasoningTrace {
            question: question.to_string(),
            stages: Vec::new(),
            final_answer: String::new(),
            outcome: Outcome::Unresolved,
            extension_order: self.config.extension_order.clone(),
            extensions: Vec::new(),
            extended_question: None,
        };
        let recorder = Recorder::new(gateway);
        let qid = question_id(question);
        let mut best: Option<(f64, String)> = None;

        for stage in Stage::ORDER.into_iter().take(self.config.max_stages) {
            let mut record = StageRecord::new(stage);
            let result = match stage {
                Stage::Intuition => self.intuition(question, &recorder, &mut record),
                Stage::MethodReuse => self.reuse(question, store, &recorder, &mut record),
                Stage::ScopeExtension => self.extend(question, context, store, &recorder, &mut record, &mut trace),
                Stage::Borrowing => self.borrow(question, store, &recorder, &mut record, &trace),
            };
            recorder.drain_into(&mut record);
            let answer = match result {
                Ok(answer) => answer,
                Err(err) => {
                    trace.stages.push(record);
                    return Err(match err {
                        OrchestratorError::Gateway { stage, source, .. } => OrchestratorError::Gateway {
                            stage,
                            source,
                            partial: Some(Box::new(trace)),
                        },
                        other => other,
                    });
                }
            };
            if let Some(text) = answer {
                let better = best.as_ref().is_none_or(|(c, _)| record.confidence > *c);
                if better {
                    best = Some((record.confidence, text.clone()));
                }
                if record.accepted {
                    for hit in &record.hits {
                        store.record_applicability(&hit.method_id, &qid)?;
                    }
                    trace.final_answer = text;
                    trace.outcome = Outcome::of(stage);
                    trace.stages.push(record);
                    return Ok(trace);
                }
            }
            trace.stages.push(record);
        }
        trace.final_answer = best.map(|(_, text)| text).unwrap_or_default();
        Ok(trace)
    }

    fn generate(&self, gateway: &dyn Gateway, stage: &str, prompt: String) -> Result<Generation, OrchestratorError> {
        gateway
            .generate(&GenerationRequest::new(prompt))
            .map_err(|source| OrchestratorError::Gateway {
                stage: stage.to_string(),
                source,
                partial: None,
            })
    }

    fn embed(&self, gateway: &dyn Gateway, stage: &str, text: &str) -> Result<Vec<f64>, OrchestratorError> {
        gateway.embed(text).map_err(|source| OrchestratorError::Gateway {
            stage: stage.to_string(),
            source,
            partial: None,
        })
    }

    fn intuition(
        &self,
        question: &str,
        gateway: &dyn Gateway,
        record: &mut StageRecord,
    ) -> Result<Option<String>, OrchestratorError> {
        let prompt = render(&self.templates().intuition, &[("question", question)]);
        let g = self.generate(gateway, "intuition", prompt)?;
        record.confidence = g.confidence;
        let text = g.text.trim().to_string();
        if text.is_empty() {
            record.decision = "empty direct answer".into();
            return Ok(None);
        }
        record.accepted = g.confidence >= self.config.intuition_threshold;
        record.decision = format!(
            "confidence {:.3} {} threshold {:.3}",
            g.confidence,
            if record.accepted { ">=" } else { "<" },
            self.config.intuition_threshold
        );
        Ok(Some(text))
    }

    fn reuse(
        &self,
        question: &str,
        store: &MethodStore,
        gateway: &dyn Gateway,
        record: &mut StageRecord,
    ) -> Result<Option<String>, OrchestratorError> {
        record.matched_on = Some(MatchedOn::OriginalQuestion);
        if store.is_empty() {
            record.decision = "method store is empty".into();
            return Ok(None);
        }
        let query = self.embed(gateway, "method-reuse", question)?;
        let hits = store.retrieve_nearest(&query, 1, None, MatchedOn::OriginalQuestion)?;
        let Some(best) = hits.into_iter().next() else {
            record.decision = "no candidate method".into();
            return Ok(None);
        };
        if best.distance > self.config.reuse_threshold {
            record.decision = format!(
                "nearest method {} at distance {:.4} > tau {:.3}",
                best.method_id, best.distance, self.config.reuse_threshold
            );
            return Ok(None);
        }
        let method = store.get(&best.method_id).expect("hit refers to a stored method");
        let prompt = render(
            &self.templates().reuse,
            &[
                ("question", question),
                ("method_question", &method.question),
                ("solution", &method.solution),
                ("steps", &numbered(&method.steps)),
            ],
        );
        let g = self.generate(gateway, "method-reuse", prompt)?;
        record.confidence = g.confidence;
        let text = g.text.trim().to_string();
        record.decision = format!(
            "reused {} at distance {:.4} <= tau {:.3}",
            best.method_id, best.distance, self.config.reuse_threshold
        );
        record.hits.push(best);
        if text.is_empty() {
            record.decision.push_str("; empty answer");
            return Ok(None);
        }
        record.accepted = true;
        Ok(Some(text))
    }

    fn extend(
        &self,
        question: &str,
        context: &AskContext,
        store: &mut MethodStore,
        gateway: &dyn Gateway,
        record: &mut StageRecord,
        trace: &mut ReasoningTrace,
    ) -> Result<Option<String>, OrchestratorError> {
        let mut notes = Vec::new();
        let mut applied = Vec::new();
        for kind in &self.config.extension_order {
            let attempt = match kind {
                ExtensionKind::Vertical => self.engine.extend_vertical(question, gateway),
                ExtensionKind::Horizontal => self.engine.extend_horizontal(question, gateway, self.config.horizontal_n),
                ExtensionKind::Generalization => self
                    .engine
                    .generalize(question, gateway, store)
                    .and_then(|g| ExtensionEngine::generalization_extension(question, &g)),
                ExtensionKind::Temporal => {
                    if context.history.is_empty() && context.future.is_empty() {
                        notes.push("temporal: no history or future supplied".to_string());
                        continue;
                    }
                    self.engine.extend_temporal(question, &context.history, &context.future)
                }
                ExtensionKind::Spatial => match &context.wider_context {
                    Some(wider) => self.engine.extend_spatial(question, wider),
                    None => {
                        notes.push("spatial: no wider context supplied".to_string());
                        continue;
                    }
                },
                ExtensionKind::Scatter | ExtensionKind::Dynamic(_) => {
                    notes.push(format!("{kind}: not applied while answering"));
                    continue;
                }
            };
            match attempt {
                Ok(ext) => {
                    notes.push(format!("{kind}: applied"));
                    applied.push(ext);
                }
                Err(ExtensionError::Gateway { stage, source }) => {
                    return Err(OrchestratorError::Gateway {
                        stage: format!("scope-extension/{stage}"),
                        source,
                        partial: None,
                    })
                }
                Err(err) => notes.push(format!("{kind}: {err}")),
            }
        }
        if applied.is_empty() {
            notes.push("no extension applied".into());
            record.decision = notes.join("; ");
            return Ok(None);
        }
        let extended = compose(question, &applied);
        trace.extended_question = Some(extended.composed.clone());
        trace.extensions = applied;
        let prompt = render(&self.templates().extended, &[("question", &extended.composed)]);
        let g = self.generate(gateway, "scope-extension", prompt)?;
        record.confidence = g.confidence;
        let text = g.text.trim().to_string();
        record.accepted = !text.is_empty() && g.confidence >= self.config.intuition_threshold;
        notes.push(format!(
            "extended answer confidence {:.3} {} threshold {:.3}",
            g.confidence,
            if record.accepted { ">=" } else { "<" },
            self.config.intuition_threshold
        ));
        record.decision = notes.join("; ");
        Ok((!text.is_empty()).then_some(text))
    }

    fn borrow(
        &self,
        question: &str,
        store: &MethodStore,
        gateway: &dyn Gateway,
        record: &mut StageRecord,
        trace: &ReasoningTrace,
    ) -> Result<Option<String>, OrchestratorError> {
        let (representation, matched_on) = match &trace.extended_question {
            Some(extended) => (extended.as_str(), MatchedOn::ExtendedQuestion),
            None => (question, MatchedOn::OriginalQuestion),
        };
        record.matched_on = Some(matched_on);
        if store.is_empty() {
            record.decision = "no methods to borrow".into();
            return Ok(None);
        }
        let query = self.embed(gateway, "borrowing", representation)?;
        let hits = store.retrieve_nearest(&query, self.config.borrow_k, None, matched_on)?;
        let methods: Vec<&Method> = hits
            .iter()
            .map(|h| store.get(&h.method_id).expect("hit refers to a stored method"))
            .collect();
        let listing = methods
            .iter()
            .zip(&hits)
            .map(|(m, h)| format!("- from \"{}\" (distance {:.4}):\n{}", m.question, h.distance, numbered(&m.steps)))
            .collect::<Vec<_>>()
            .join("\n");
        let prompt = render(
            &self.templates().borrow,
            &[("question", representation), ("methods", &listing)],
        );
        let g = self.generate(gateway, "borrowing", prompt)?;
        record.confidence = g.confidence;
        record.hits = hits;
        let text = g.text.trim().to_string();
        record.accepted = !text.is_empty() && g.confidence >= self.config.intuition_threshold;
        record.decision = format!(
            "borrowed {} method(s) by distance on the {} question; confidence {:.3} {} threshold {:.3}",
            record.hits.len(),
            if matched_on == MatchedOn::ExtendedQuestion { "extended" } else { "original" },
            g.confidence,
            if record.accepted { ">=" } else { "<" },
            self.config.intuition_threshold
        );
        Ok((!text.is_empty()).then_some(text))
    }

    /// Difference-based prompting: first ask what changed between the two
    /// states, then ask for an action focused on those changes.
    pub fn active_step(
        &self,
        goal: &str,
        previous_state: &str,
        current_state: &str,
        gateway: &dyn Gateway,
    ) -> Result<ActiveStep, OrchestratorError> {
        if goal.trim().is_empty() {
            return Err(OrchestratorError::InvalidInput("empty goal".into()));
        }
        let first = render(
            &self.templates().active_changes,
            &[("goal", goal), ("previous", previous_state), ("current", current_state)],
        );
        let changes_reply = self.generate(gateway, "active-step/changes", first.clone())?;
        let mut changes = parse_list(&changes_reply.text);
        if is_no_change(&changes) {
            changes.clear();
        }
        let listed = if changes.is_empty() {
            "(none)".to_string()
        } else {
            changes.iter().map(|c| format!("- {c}")).collect::<Vec<_>>().join("\n")
        };
        let second = render(
            &self.templates().active_solution,
            &[("goal", goal), ("current", current_state), ("changes", &listed)],
        );
        let solution = self.generate(gateway, "active-step/solution", second.clone())?;
        let proposed = solution.text.trim();
        let action = if changes.is_empty() || proposed.is_empty() {
            DEFAULT_ACTION.to_string()
        } else {
            proposed.to_string()
        };
        Ok(ActiveStep {
            changes,
            action,
            prompts: vec![first, second],
            responses: vec![changes_reply.text, solution.text],
        })
    }

    /// Whole-method critique.
    pub fn critique_method(
        &self,
        store: &MethodStore,
        method_id: &str,
        gateway: &dyn Gateway,
    ) -> Result<String, OrchestratorError> {
        let method = store
            .get(method_id)
            .ok_or_else(|| OrchestratorError::NotFound(method_id.to_string()))?;
        let prompt = render(
            &self.templates().critique,
            &[("question", &method.question), ("steps", &numbered(&method.steps))],
        );
        let critique = self.generate(gateway, "critique", prompt)?.text.trim().to_string();
        if critique.is_empty() {
            return Err(OrchestratorError::NoFeedback(format!("empty critique for {method_id}")));
        }
        Ok(critique)
    }

    /// Generate `trials` step-change candidates for a method, scored and
    /// sorted best first (ties by changed-step indices).
    #[allow(clippy::too_many_arguments)]
    pub fn improve_method(
        &self,
        store: &MethodStore,
        method_id: &str,
        strategy: Strategy,
        evaluator: Evaluator<'_>,
        trials: usize,
        seed: u64,
        gateway: &dyn Gateway,
    ) -> Result<Vec<ImprovementCandidate>, OrchestratorError> {
        let method = store
            .get(method_id)
            .ok_or_else(|| OrchestratorError::NotFound(method_id.to_string()))?;
        if trials == 0 {
            return Err(OrchestratorError::InvalidInput("trials must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut candidates = Vec::with_capacity(trials);
        for _ in 0..trials {
            let changed = draw_changed_steps(strategy, method.steps.len(), &mut rng)?;
            let mut new_steps = method.steps.clone();
            for &index in &changed {
                let prompt = render(
                    &self.templates().improve_step,
                    &[
                        ("question", &method.question),
                        ("steps", &numbered(&method.steps)),
                        ("index", &(index + 1).to_string()),
                        ("step", &method.steps[index]),
                    ],
                );
                let replacement = self.generate(gateway, "improve/step", prompt)?.text.trim().to_string();
                if replacement.is_empty() {
                    return Err(OrchestratorError::NoFeedback(format!("no replacement for step {}", index + 1)));
                }
                new_steps[index] = replacement;
            }
            let score = match &evaluator {
                Evaluator::Predictive => {
                    let prompt = render(
                        &self.templates().predictive_score,
                        &[("question", &method.question), ("steps", &numbered(&new_steps))],
                    );
                    let reply = self.generate(gateway, "improve/score", prompt)?.text;
                    parse_score(&reply).ok_or_else(|| OrchestratorError::Gateway {
                        stage: "improve/score".into(),
                        source: GatewayError::Parse {
                            message: "expected a score between 0 and 1".into(),
                            raw: reply.clone(),
                        },
                        partial: None,
                    })?
                }
                Evaluator::Empirical(test) => {
                    let rate = test(&new_steps);
                    if !(0.0..=1.0).contains(&rate) {
                        return Err(OrchestratorError::InvalidInput(format!(
                            "empirical pass rate {rate} outside [0,1]"
                        )));
                    }
                    rate
                }
            };
            candidates.push(ImprovementCandidate {
                base_method: method.id.clone(),
                strategy,
                changed_steps: changed,
                new_steps,
                score,
                evaluator: evaluator.kind(),
            });
        }
        candidates.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then_with(|| a.changed_steps.iter().cmp(b.changed_steps.iter()))
        });
        Ok(candidates)
    }

    /// Store a candidate's steps as a new method derived from its base.
    pub fn adopt_candidate(
        &self,
        store: &mut MethodStore,
        candidate: &ImprovementCandidate,
    ) -> Result<String, OrchestratorError> {
        let base = store
            .get(&candidate.base_method)
            .ok_or_else(|| OrchestratorError::NotFound(candidate.base_method.clone()))?
            .clone();
        let id = store.add_with_embedding(
            &base.question,
            &candidate.new_steps.join("\n"),
            Some(candidate.new_steps.clone()),
            base.embedding.clone(),
            Origin::ImprovedFrom(base.id.clone()),
        )?;
        for q in &base.applicability {
            store.record_applicability(&id, q)?;
        }
        Ok(id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::ScriptedBackend;

    fn orchestrator() -> Orchestrator {
        Orchestrator::new(Templates::default(), OrchestratorConfig::default()).unwrap()
    }

    fn backend(rules: &str) -> ScriptedBackend {
        ScriptedBackend::from_json(&format!(r#"{{"embedding_dim": 8, "embedding_seed": 5, "rules": [{rules}]}}"#)).unwrap()
    }

    fn three_step_store() -> (MethodStore, String) {
        let mut store = MethodStore::new(2);
        let id = store
            .add_with_embedding(
                "how to cross the river",
                "find bridge\nwalk over\ncheck footing",
                Some(vec!["find bridge".into(), "walk over".into(), "check footing".into()]),
                vec![1.0, 0.0],
                Origin::Authored,
            )
            .unwrap();
        (store, id)
    }

    #[test]
    fn high_confidence_intuition_stops_immediately() {
        let gw = backend(r#"{"pattern": "Answer the question directly", "response": "Paris", "confidence": 0.9}"#);
        let mut store = MethodStore::new(8);
        let trace = orchestrator()
            .answer("capital of France?", &AskContext::default(), &mut store, &gw)
            .unwrap();
        assert_eq!(trace.stages.len(), 1);
        assert_eq!(trace.outcome, Outcome::Intuition);
        assert_eq!(trace.final_answer, "Paris");
        assert!(trace.is_well_formed());
    }

    #[test]
    fn exact_method_is_reused() {
        let gw = backend(
            r#"{"pattern": "Answer the question directly", "response": "not sure", "confidence": 0.2},
               {"pattern": "applying the method", "response": "look at the wider area", "confidence": 0.6}"#,
        );
        let mut store = MethodStore::new(8);
        let q = "why is the bridge unconnected?";
        let id = store.add_method(q, "inspect wider context", None, &gw).unwrap();
        let trace = orchestrator().answer(q, &AskContext::default(), &mut store, &gw).unwrap();
        assert_eq!(trace.outcome, Outcome::MethodReuse);
        assert_eq!(trace.stages.len(), 2);
        assert!(trace.stages[1].hits[0].distance.abs() < 1e-12);
        assert!(trace.is_well_formed());
        assert!(store.get(&id).unwrap().applicability.contains(&question_id(q)));
    }

    #[test]
    fn exhaustion_records_all_stages() {
        let gw = backend(
            r#"{"pattern": "Answer the question directly", "response": "maybe", "confidence": 0.1},
               {"pattern": "underlying reasons", "response": "", "confidence": 0.1},
               {"pattern": "parallel", "response": "", "confidence": 0.1}"#,
        );
        let mut store = MethodStore::new(8);
        let trace = orchestrator()
            .answer("an unseen question", &AskContext::default(), &mut store, &gw)
            .unwrap();
        assert_eq!(trace.outcome, Outcome::Unresolved);
        assert_eq!(trace.stages.len(), 4);
        assert_eq!(trace.final_answer, "maybe");
        assert!(trace.is_well_formed());
    }

    #[test]
    fn borrowing_measures_the_extended_question() {
        let gw = backend(
            r#"{"pattern": "Answer the question directly", "response": "unsure", "confidence": 0.1},
               {"pattern": "underlying reasons", "response": "load on the span", "confidence": 0.5},
               {"pattern": "parallel", "response": "", "confidence": 0.5},
               {"pattern": "using the added context", "response": "still unsure", "confidence": 0.3},
               {"pattern": "may transfer", "response": "fork the road", "confidence": 0.8}"#,
        );
        let mut store = MethodStore::new(8);
        let m = store.add_method("how to damp oscillation", "split the load", None, &gw).unwrap();
        let config = OrchestratorConfig { reuse_threshold: 0.0, ..Default::default() };
        let orch = Orchestrator::new(Templates::default(), config).unwrap();
        let trace = orch
            .answer("why does the bridge fork?", &AskContext::default(), &mut store, &gw)
            .unwrap();
        assert_eq!(trace.outcome, Outcome::Borrowed);
        let last = trace.stages.last().unwrap();
        assert_eq!(last.matched_on, Some(MatchedOn::ExtendedQuestion));
        assert!(last.hits.iter().all(|h| h.matched_on == MatchedOn::ExtendedQuestion));
        assert_eq!(trace.extensions.len(), 1);
        assert!(store.get(&m).unwrap().applicability.contains(&question_id("why does the bridge fork?")));
    }

    #[test]
    fn gateway_failure_returns_partial_trace() {
        let gw = backend(r#"{"pattern": "Answer the question directly", "response": "eh", "confidence": 0.1}"#);
        let mut store = MethodStore::new(8);
        match orchestrator().answer("q", &AskContext::default(), &mut store, &gw) {
            Err(OrchestratorError::Gateway { stage, partial: Some(trace), .. }) => {
                assert!(stage.starts_with("scope-extension"));
                assert_eq!(trace.stages.len(), 3);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn max_stages_limits_the_pipeline() {
        let gw = backend(r#"{"pattern": "Answer the question directly", "response": "eh", "confidence": 0.1}"#);
        let config = OrchestratorConfig { max_stages: 1, ..Default::default() };
        let orch = Orchestrator::new(Templates::default(), config).unwrap();
        let trace = orch.answer("q", &AskContext::default(), &mut MethodStore::new(8), &gw).unwrap();
        assert_eq!(trace.stages.len(), 1);
        assert_eq!(trace.outcome, Outcome::Unresolved);
    }

    #[test]
    fn active_step_issues_two_calls_in_order() {
        let gw = backend(
            r#"{"pattern": "Identify the key", "response": "obstacle appeared\nlane narrowed", "confidence": 0.5},
               {"pattern": "Propose the action", "response": "slow down and steer left", "confidence": 0.5}"#,
        );
        let step = orchestrator()
            .active_step("drive safely", "clear road", "obstacle ahead", &gw)
            .unwrap();
        let calls = gw.calls();
        assert_eq!(calls.len(), 2);
        assert!(calls[0].contains("Identify the key"));
        assert!(calls[1].contains("Propose the action"));
        for change in &step.changes {
            assert!(calls[1].contains(change.as_str()));
        }
        assert_eq!(step.action, "slow down and steer left");
    }

    #[test]
    fn active_step_without_change_maintains() {
        let gw = backend(
            r#"{"pattern": "Identify the key", "response": "No change.", "confidence": 0.5},
               {"pattern": "Propose the action", "response": "keep going", "confidence": 0.5}"#,
        );
        let step = orchestrator().active_step("drive safely", "road", "road", &gw).unwrap();
        assert!(step.changes.is_empty());
        assert_eq!(step.action, DEFAULT_ACTION);
        assert_eq!(gw.calls().len(), 2);
        assert!(orchestrator().active_step(" ", "a", "b", &gw).is_err());
    }

    #[test]
    fn critique_contains_steps_in_order() {
        let gw = backend(r#"{"pattern": "Critique", "response": "step 2 is redundant", "confidence": 0.5}"#);
        let (store, id) = three_step_store();
        assert_eq!(orchestrator().critique_method(&store, &id, &gw).unwrap(), "step 2 is redundant");
        let prompt = &gw.calls()[0];
        let positions: Vec<usize> = ["find bridge", "walk over", "check footing"]
            .iter()
            .map(|s| prompt.find(s).unwrap())
            .collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]));
        assert!(matches!(
            orchestrator().critique_method(&store, "m-none", &gw),
            Err(OrchestratorError::NotFound(_))
        ));
        let silent = backend(r#"{"pattern": "Critique", "response": "", "confidence": 0.5}"#);
        assert!(matches!(
            orchestrator().critique_method(&store, &id, &silent),
            Err(OrchestratorError::NoFeedback(_))
        ));
    }

    #[test]
    fn improvement_strategies_and_determinism() {
        let gw = backend(
            r#"{"pattern": "Improve step", "response": "better step", "confidence": 0.5},
               {"pattern": "estimate the probability", "response": "0.7", "confidence": 0.5}"#,
        );
        let (store, id) = three_step_store();
        let orch = orchestrator();
        let minimal = orch.improve_method(&store, &id, Strategy::Minimal, Evaluator::Predictive, 5, 9, &gw).unwrap();
        assert!(minimal.iter().all(|c| c.changed_steps.len() == 1 && c.score == 0.7));
        let complete = orch.improve_method(&store, &id, Strategy::Complete, Evaluator::Predictive, 2, 9, &gw).unwrap();
        assert!(complete.iter().all(|c| c.changed_steps == BTreeSet::from([0, 1, 2])));
        let again = orch.improve_method(&store, &id, Strategy::Minimal, Evaluator::Predictive, 5, 9, &gw).unwrap();
        assert_eq!(minimal, again);
    }

    #[test]
    fn empirical_scores_sort_candidates() {
        let gw = backend(r#"{"pattern": "Improve step", "response": "new", "confidence": 0.5}"#);
        let (store, id) = three_step_store();
        let test = |steps: &[String]| steps.iter().filter(|s| *s == "new").count() as f64 / steps.len() as f64;
        let cands = orchestrator()
            .improve_method(&store, &id, Strategy::Partial, Evaluator::Empirical(&test), 8, 1, &gw)
            .unwrap();
        assert!(cands.windows(2).all(|w| w[0].score >= w[1].score));
        assert!(cands.iter().all(|c| c.evaluator == EvaluatorKind::Empirical));
        assert!(cands.iter().all(|c| (1..3).contains(&c.changed_steps.len())));
    }

    #[test]
    fn partial_needs_two_steps() {
        let gw = backend(r#"{"pattern": "Improve step", "response": "new", "confidence": 0.5}"#);
        let mut store = MethodStore::new(2);
        let id = store.add_with_embedding("q", "one step", None, vec![1.0, 0.0], Origin::Authored).unwrap();
        assert!(matches!(
            orchestrator().improve_method(&store, &id, Strategy::Partial, Evaluator::Predictive, 1, 0, &gw),
            Err(OrchestratorError::InvalidStrategy(_))
        ));
        assert!(matches!(
            orchestrator().improve_method(&store, "m-x", Strategy::Minimal, Evaluator::Predictive, 1, 0, &gw),
            Err(OrchestratorError::NotFound(_))
        ));
    }

    #[test]
    fn adopted_candidate_keeps_lineage() {
        let gw = backend(
            r#"{"pattern": "Improve step", "response": "ford the shallows", "confidence": 0.5},
               {"pattern": "estimate the probability", "response": "80", "confidence": 0.5}"#,
        );
        let (mut store, id) = three_step_store();
        store.record_applicability(&id, "q-river").unwrap();
        let orch = orchestrator();
        let best = orch
            .improve_method(&store, &id, Strategy::Minimal, Evaluator::Predictive, 1, 3, &gw)
            .unwrap()
            .remove(0);
        assert_eq!(best.score, 0.8);
        let new_id = orch.adopt_candidate(&mut store, &best).unwrap();
        let adopted = store.get(&new_id).unwrap();
        assert_eq!(adopted.origin, Origin::ImprovedFrom(id));
        assert!(adopted.applicability.contains("q-river"));
    }

    #[test]
    fn score_parsing() {
        assert_eq!(parse_score("0.25"), Some(0.25));
        assert_eq!(parse_score("about 70%"), Some(0.7));
        assert_eq!(parse_score("none"), None);
        assert_eq!(parse_score("500"), None);
    }
}
