//! Scope-extension operators and the explicit composition operator.
//!
//! Every operator yields an [`Extension`]: a typed list of text fragments
//! anchored to a question. [`compose`] appends extensions to a question,
//! each under a `[[kind]]` header and separated by [`SEPARATOR`].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::gateway::{Gateway, GatewayError, GenerationRequest};
use crate::method_store::{MethodStore, StoreError};
use crate::templates::Templates;
use crate::text::{digest_hex, normalize, parse_list, question_id, render};

pub const SEPARATOR: &str = "\n---\n";

/// Promotion threshold used when none is configured.
pub const DEFAULT_PROMOTION_THRESHOLD: u32 = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExtensionError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("extension is empty: {0}")]
    ExtensionEmpty(String),
    #[error("generalization returned the question unchanged")]
    NoGeneralization,
    #[error("{stage}: {source}")]
    Gateway {
        stage: String,
        #[source]
        source: GatewayError,
    },
    #[error("kind {0:?} is already in the common list")]
    AlreadyCommon(String),
    #[error("unknown extension kind {0:?}")]
    UnknownKind(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

fn gateway_err(stage: impl Into<String>) -> impl FnOnce(GatewayError) -> ExtensionError {
    let stage = stage.into();
    move |source| ExtensionError::Gateway { stage, source }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ExtensionKind {
    Vertical,
    Horizontal,
    Generalization,
    Temporal,
    Spatial,
    Scatter,
    Dynamic(String),
}

impl ExtensionKind {
    pub const BUILTIN: [ExtensionKind; 6] = [
        ExtensionKind::Vertical,
        ExtensionKind::Horizontal,
        ExtensionKind::Generalization,
        ExtensionKind::Temporal,
        ExtensionKind::Spatial,
        ExtensionKind::Scatter,
    ];
}

impl fmt::Display for ExtensionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExtensionKind::Vertical => f.write_str("vertical"),
            ExtensionKind::Horizontal => f.write_str("horizontal"),
            ExtensionKind::Generalization => f.write_str("generalization"),
            ExtensionKind::Temporal => f.write_str("temporal"),
            ExtensionKind::Spatial => f.write_str("spatial"),
            ExtensionKind::Scatter => f.write_str("scatter"),
            ExtensionKind::Dynamic(name) => write!(f, "dynamic:{name}"),
        }
    }
}

impl FromStr for ExtensionKind {
    type Err = ExtensionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "vertical" | "v" => ExtensionKind::Vertical,
            "horizontal" | "h" => ExtensionKind::Horizontal,
            "generalization" | "g" => ExtensionKind::Generalization,
            "temporal" | "t" => ExtensionKind::Temporal,
            "spatial" | "s" => ExtensionKind::Spatial,
            "scatter" => ExtensionKind::Scatter,
            other => match other.strip_prefix("dynamic:") {
                Some(name) if !name.trim().is_empty() => ExtensionKind::Dynamic(name.trim().to_string()),
                _ => return Err(ExtensionError::UnknownKind(other.to_string())),
            },
        })
    }
}

impl Serialize for ExtensionKind {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ExtensionKind {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Source {
    ModelGenerated,
    UserSupplied,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Extension {
    pub kind: ExtensionKind,
    /// Question id of the anchor question.
    pub anchor: String,
    pub payload: Vec<String>,
    pub weight: f64,
    pub source: Source,
}

impl Extension {
    /// Build an extension anchored to `question`. Blank fragments are dropped.
    pub fn new(
        kind: ExtensionKind,
        question: &str,
        payload: Vec<String>,
        source: Source,
    ) -> Result<Self, ExtensionError> {
        let payload: Vec<String> = payload
            .into_iter()
            .filter(|p| !p.trim().is_empty())
            .collect();
        if payload.is_empty() {
            return Err(ExtensionError::ExtensionEmpty(kind.to_string()));
        }
        Ok(Self {
            kind,
            anchor: question_id(question),
            payload,
            weight: 1.0,
            source,
        })
    }

    /// Extension supplied by the caller rather than generated.
    pub fn user_supplied(
        kind: ExtensionKind,
        question: &str,
        payload: Vec<String>,
    ) -> Result<Self, ExtensionError> {
        Self::new(kind, question, payload, Source::UserSupplied)
    }

    /// Content-derived identifier.
    pub fn id(&self) -> String {
        let kind = self.kind.to_string();
        let mut parts = vec![kind.as_str(), self.anchor.as_str()];
        parts.extend(self.payload.iter().map(String::as_str));
        format!("e-{}", digest_hex(&parts))
    }

    fn render(&self) -> String {
        format!("[[{}]]\n{}", self.kind, self.payload.join("\n"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fragment {
    pub kind: ExtensionKind,
    pub payload: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtendedQuestion {
    pub original: String,
    pub fragments: Vec<Fragment>,
    pub composed: String,
}

/// `original ⊕ e_1 ⊕ … ⊕ e_m`: append each extension in order.
pub fn compose(original: &str, extensions: &[Extension]) -> ExtendedQuestion {
    let mut composed = original.to_string();
    for ext in extensions {
        composed.push_str(SEPARATOR);
        composed.push_str(&ext.render());
    }
    ExtendedQuestion {
        original: original.to_string(),
        fragments: extensions
            .iter()
            .map(|e| Fragment {
                kind: e.kind.clone(),
                payload: e.payload.clone(),
            })
            .collect(),
        composed,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Applicable,
    NotApplicable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageVerdict {
    pub stage: String,
    pub verdict: Verdict,
    pub rationale: String,
}

/// Outcome of [`ExtensionEngine::generalize`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generalization {
    pub generalized_question: String,
    pub question_id: String,
    pub generalized_id: String,
    /// Every method applicable to the original question.
    pub carried: BTreeSet<String>,
    /// The subset of `carried` that had to be registered for the generalized question.
    pub newly_registered: BTreeSet<String>,
}

fn parse_verdict(reply: &str) -> Result<(Verdict, String), GatewayError> {
    let mut lines = reply.lines().map(str::trim).filter(|l| !l.is_empty());
    let first = lines.next().unwrap_or("").to_lowercase();
    let head = first.trim_start_matches(|c: char| !c.is_alphanumeric());
    let verdict = if head.starts_with("not applicable")
        || head.starts_with("not-applicable")
        || head.starts_with("inapplicable")
        || head.starts_with("no")
    {
        Verdict::NotApplicable
    } else if head.starts_with("applicable") || head.starts_with("yes") {
        Verdict::Applicable
    } else {
        return Err(GatewayError::Parse {
            message: "verdict must start with applicable or not applicable".into(),
            raw: reply.to_string(),
        });
    };
    Ok((verdict, lines.collect::<Vec<_>>().join("\n")))
}

/// Scope-extension operators over a set of prompt templates.
#[derive(Debug, Clone, Default)]
pub struct ExtensionEngine {
    pub templates: Templates,
}

impl ExtensionEngine {
    pub fn new(templates: Templates) -> Self {
        Self { templates }
    }

    fn ask(&self, gateway: &dyn Gateway, stage: &str, prompt: String) -> Result<String, ExtensionError> {
        gateway
            .generate(&GenerationRequest::new(prompt))
            .map(|g| g.text)
            .map_err(gateway_err(stage))
    }

    fn require_question(question: &str) -> Result<(), ExtensionError> {
        if question.trim().is_empty() {
            return Err(ExtensionError::InvalidInput("empty question".into()));
        }
        Ok(())
    }

    /// Candidate causes behind `question`.
    pub fn extend_vertical(&self, question: &str, gateway: &dyn Gateway) -> Result<Extension, ExtensionError> {
        Self::require_question(question)?;
        let prompt = render(&self.templates.vertical, &[("question", question)]);
        let reply = self.ask(gateway, "vertical", prompt)?;
        Extension::new(ExtensionKind::Vertical, question, parse_list(&reply), Source::ModelGenerated)
    }

    /// Up to `n` parallel or related questions.
    pub fn extend_horizontal(
        &self,
        question: &str,
        gateway: &dyn Gateway,
        n: usize,
    ) -> Result<Extension, ExtensionError> {
        Self::require_question(question)?;
        if n == 0 {
            return Err(ExtensionError::InvalidInput("n must be positive".into()));
        }
        let prompt = render(
            &self.templates.horizontal,
            &[("question", question), ("n", &n.to_string())],
        );
        let reply = self.ask(gateway, "horizontal", prompt)?;
        let mut neighbors = parse_list(&reply);
        neighbors.truncate(n);
        Extension::new(ExtensionKind::Horizontal, question, neighbors, Source::ModelGenerated)
    }

    /// Generalize `question` and carry every method applicable to it over to
    /// the generalized question, so `M(q) ⊆ M(q_g)` holds on return.
    pub fn generalize(
        &self,
        question: &str,
        gateway: &dyn Gateway,
        store: &mut MethodStore,
    ) -> Result<Generalization, ExtensionError> {
        Self::require_question(question)?;
        let prompt = render(&self.templates.generalize, &[("question", question)]);
        let reply = self.ask(gateway, "generalize", prompt)?;
        let generalized = parse_list(&reply)
            .into_iter()
            .next()
            .ok_or_else(|| ExtensionError::ExtensionEmpty("generalization".into()))?;
        if normalize(&generalized) == normalize(question) {
            return Err(ExtensionError::NoGeneralization);
        }
        let qid = question_id(question);
        let gid = question_id(&generalized);
        let carried = store.methods_for(&qid);
        let already = store.methods_for(&gid);
        let mut newly_registered = BTreeSet::new();
        for method in &carried {
            if !already.contains(method) {
                store.record_applicability(method, &gid)?;
                newly_registered.insert(method.clone());
            }
        }
        Ok(Generalization {
            generalized_question: generalized,
            question_id: qid,
            generalized_id: gid,
            carried,
            newly_registered,
        })
    }

    /// The generalization as an extension of `question`.
    pub fn generalization_extension(
        question: &str,
        generalization: &Generalization,
    ) -> Result<Extension, ExtensionError> {
        Extension::new(
            ExtensionKind::Generalization,
            question,
            vec![generalization.generalized_question.clone()],
            Source::ModelGenerated,
        )
    }

    /// History (oldest first) and future (nearest first) around `input`.
    pub fn extend_temporal(
        &self,
        input: &str,
        history: &[String],
        future: &[String],
    ) -> Result<Extension, ExtensionError> {
        let history: Vec<&String> = history.iter().filter(|h| !h.trim().is_empty()).collect();
        let future: Vec<&String> = future.iter().filter(|f| !f.trim().is_empty()).collect();
        if history.is_empty() && future.is_empty() {
            return Err(ExtensionError::ExtensionEmpty("temporal".into()));
        }
        let depth = history.len();
        let payload = history
            .iter()
            .enumerate()
            .map(|(i, h)| format!("past[{}]: {}", depth - i, h.trim()))
            .chain(
                future
                    .iter()
                    .enumerate()
                    .map(|(i, f)| format!("future[{}]: {}", i + 1, f.trim())),
            )
            .collect();
        Extension::new(ExtensionKind::Temporal, input, payload, Source::UserSupplied)
    }

    /// Ask the gateway for the next `n` states; callers decide whether to
    /// feed them to [`extend_temporal`](Self::extend_temporal).
    pub fn predict_future(
        &self,
        input: &str,
        history: &[String],
        n: usize,
        gateway: &dyn Gateway,
    ) -> Result<Vec<String>, ExtensionError> {
        Self::require_question(input)?;
        let prompt = render(
            &self.templates.predict_future,
            &[
                ("question", input),
                ("history", &history.join("\n")),
                ("n", &n.to_string()),
            ],
        );
        let mut states = parse_list(&self.ask(gateway, "predict_future", prompt)?);
        states.truncate(n);
        Ok(states)
    }

    /// A wider description of the region `input` sits in.
    pub fn extend_spatial(&self, input: &str, wider_context: &str) -> Result<Extension, ExtensionError> {
        if wider_context.trim().is_empty() || normalize(wider_context) == normalize(input) {
            return Err(ExtensionError::ExtensionEmpty("spatial".into()));
        }
        Extension::new(
            ExtensionKind::Spatial,
            input,
            vec![wider_context.trim().to_string()],
            Source::UserSupplied,
        )
    }

    /// Predict, stage by stage, whether `optimization` carries over from
    /// `source_stage`. Stages are deduplicated (first occurrence kept) and
    /// the source stage is skipped; verdicts come back in input order.
    pub fn scatter(
        &self,
        optimization: &str,
        source_stage: &str,
        stages: &[String],
        gateway: &dyn Gateway,
    ) -> Result<Vec<StageVerdict>, ExtensionError> {
        if stages.is_empty() {
            return Err(ExtensionError::InvalidInput("no stages to evaluate".into()));
        }
        let source = normalize(source_stage);
        let mut seen = BTreeSet::new();
        let targets: Vec<&String> = stages
            .iter()
            .filter(|s| normalize(s) != source && seen.insert(normalize(s)))
            .collect();
        let results: Vec<Result<StageVerdict, ExtensionError>> = std::thread::scope(|scope| {
            let handles: Vec<_> = targets
                .iter()
                .map(|stage| {
                    scope.spawn(move || {
                        let prompt = render(
                            &self.templates.scatter,
                            &[
                                ("optimization", optimization),
                                ("source", source_stage),
                                ("stage", stage.as_str()),
                            ],
                        );
                        let stage_ctx = format!("scatter stage {stage:?}");
                        let reply = gateway
                            .generate(&GenerationRequest::new(prompt))
                            .map_err(gateway_err(stage_ctx.clone()))?;
                        let (verdict, rationale) =
                            parse_verdict(&reply.text).map_err(gateway_err(stage_ctx))?;
                        Ok(StageVerdict {
                            stage: stage.to_string(),
                            verdict,
                            rationale,
                        })
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("scatter worker panicked"))
                .collect()
        });
        results.into_iter().collect()
    }

    /// Stages judged applicable, as a scatter extension anchored at `source_stage`.
    pub fn scatter_extension(source_stage: &str, verdicts: &[StageVerdict]) -> Result<Extension, ExtensionError> {
        let payload = verdicts
            .iter()
            .filter(|v| v.verdict == Verdict::Applicable)
            .map(|v| v.stage.clone())
            .collect();
        Extension::new(ExtensionKind::Scatter, source_stage, payload, Source::ModelGenerated)
    }
}

/// Common and dynamic extension lists with usage-based promotion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtensionRegistry {
    common: Vec<String>,
    dynamic: BTreeMap<String, u32>,
    threshold: u32,
}

impl Default for ExtensionRegistry {
    fn default() -> Self {
        Self::new(DEFAULT_PROMOTION_THRESHOLD).expect("default threshold is positive")
    }
}

impl ExtensionRegistry {
    /// Registry whose common list holds the built-in kinds.
    pub fn new(threshold: u32) -> Result<Self, ExtensionError> {
        if threshold == 0 {
            return Err(ExtensionError::InvalidInput("promotion threshold must be positive".into()));
        }
        Ok(Self {
            common: ExtensionKind::BUILTIN.iter().map(ToString::to_string).collect(),
            dynamic: BTreeMap::new(),
            threshold,
        })
    }

    pub fn common(&self) -> &[String] {
        &self.common
    }

    pub fn dynamic(&self) -> &BTreeMap<String, u32> {
        &self.dynamic
    }

    pub fn threshold(&self) -> u32 {
        self.threshold
    }

    pub fn is_common(&self, name: &str) -> bool {
        self.common.iter().any(|c| c == name)
    }

    /// Add `name` to the dynamic list with zero uses. Re-registering a
    /// dynamic kind keeps its count.
    pub fn register_dynamic(&mut self, name: &str) -> Result<&mut Self, ExtensionError> {
        let name = name.trim();
        if name.is_empty() {
            return Err(ExtensionError::InvalidInput("empty kind name".into()));
        }
        if self.is_common(name) {
            return Err(ExtensionError::AlreadyCommon(name.to_string()));
        }
        self.dynamic.entry(name.to_string()).or_insert(0);
        Ok(self)
    }

    /// Count one use of `name`; a dynamic kind reaching the threshold moves
    /// to the common list. Uses of common kinds are no-ops.
    pub fn note_usage(&mut self, name: &str) -> Result<&mut Self, ExtensionError> {
        let name = name.trim();
        if self.is_common(name) {
            return Ok(self);
        }
        let count = self
            .dynamic
            .get_mut(name)
            .ok_or_else(|| ExtensionError::UnknownKind(name.to_string()))?;
        *count += 1;
        if *count >= self.threshold {
            self.dynamic.remove(name);
            self.common.push(name.to_string());
        }
        Ok(self)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, String> {
        let json = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let registry: Self = serde_json::from_str(&json).map_err(|e| format!("{}: {e}", path.display()))?;
        if registry.threshold == 0 {
            return Err(format!("{}: threshold must be positive", path.display()));
        }
        if registry.dynamic.keys().any(|k| registry.is_common(k)) {
            return Err(format!("{}: a kind is both common and dynamic", path.display()));
        }
        Ok(registry)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), String> {
        let json = serde_json::to_string_pretty(self).map_err(|e| e.to_string())?;
        std::fs::write(path, json + "\n").map_err(|e| format!("{}: {e}", path.display()))
    }
}
