//! `scopex` command-line front end.
//!
//! Machine-readable JSON goes to stdout (or `--out`), summaries to stderr.
//! Exit codes: 0 success, 1 domain error, 2 usage error.

mod config;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use scopex_core::entropy::{entropy_report, network_entropy};
use scopex_core::extension::{
    compose, ExtensionEngine, ExtensionKind, ExtensionRegistry, Generalization,
};
use scopex_core::gateway::{HttpBackend, HttpConfig, ScriptedBackend};
use scopex_core::network::{build_network, tree_from_extension, KnowledgeTree};
use scopex_core::orchestrator::{AskContext, Evaluator, Orchestrator, Outcome, ReasoningTrace, Strategy};
use scopex_core::{Gateway, MethodStore};

use config::{BackendSpec, Settings};

#[derive(Debug)]
pub struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }

    pub fn domain(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }
}

fn domain<E: std::fmt::Display>(e: E) -> CliError {
    CliError::domain(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "scopex", version, about = "Layered question answering with scope extension and method reuse")]
#[command(subcommand_required = true, arg_required_else_help = true)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// JSON config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Method store (JSONL).
    #[arg(long, global = true)]
    pub store: Option<PathBuf>,
    /// `http`, or a scripted rule file (`scripted:PATH` or `PATH`).
    #[arg(long, global = true)]
    pub backend: Option<String>,
    #[arg(long, global = true)]
    pub templates: Option<PathBuf>,
    /// Extension registry (JSON), created on first use.
    #[arg(long, global = true)]
    pub registry: Option<PathBuf>,
    #[arg(long, global = true)]
    pub intuition_threshold: Option<f64>,
    #[arg(long, global = true)]
    pub reuse_threshold: Option<f64>,
    #[arg(long, global = true)]
    pub borrow_k: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Add a question-solution pair to the method store.
    Ingest {
        #[arg(long)]
        question: String,
        #[arg(long)]
        solution: String,
        /// Solution steps; together they must spell out the solution.
        #[arg(long, num_args = 1..)]
        steps: Vec<String>,
    },
    /// Answer a question through the staged pipeline.
    Ask {
        #[arg(long)]
        question: String,
        /// Also write the trace to this file.
        #[arg(long)]
        trace_out: Option<PathBuf>,
        #[arg(long)]
        max_stages: Option<usize>,
        #[command(flatten)]
        context: ContextArgs,
    },
    /// Apply extension kinds to a question.
    Extend {
        #[arg(long)]
        question: String,
        /// Comma-separated kinds: v, h, g, t, s, scatter (or full names).
        #[arg(long, value_delimiter = ',')]
        kinds: Vec<String>,
        /// Parallel questions for horizontal, predicted states for temporal.
        #[arg(long, default_value_t = 3)]
        n: usize,
        /// Caller-defined extension, `name:content`. Repeatable.
        #[arg(long = "dynamic")]
        dynamic: Vec<String>,
        /// Stage the question's optimization was found at (scatter).
        #[arg(long)]
        source_stage: Option<String>,
        /// Stages to test the optimization against (scatter).
        #[arg(long, value_delimiter = ',')]
        stages: Vec<String>,
        #[command(flatten)]
        context: ContextArgs,
    },
    /// Knowledge-network operations.
    Network {
        #[command(subcommand)]
        command: NetworkCommand,
    },
    /// Entropy report for an extension coverage file.
    Entropy {
        #[arg(long)]
        coverage: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate step-change candidates for a stored method.
    Improve {
        #[arg(long)]
        method: String,
        #[arg(long, value_enum)]
        strategy: StrategyArg,
        #[arg(long, default_value_t = 1)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Store the best candidate as a new method.
        #[arg(long)]
        adopt: bool,
    },
}

#[derive(Debug, Subcommand)]
enum NetworkCommand {
    /// Build a network from the extensions recorded in trace files.
    Build {
        #[arg(long)]
        traces: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
}

#[derive(Debug, Args)]
struct ContextArgs {
    /// File of past states, one per line, oldest first.
    #[arg(long)]
    history: Option<PathBuf>,
    /// File of future states, one per line, nearest first.
    #[arg(long)]
    future: Option<PathBuf>,
    /// Wider region or context the question sits in.
    #[arg(long)]
    wider: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Dot,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StrategyArg {
    Minimal,
    Partial,
    Complete,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Minimal => Strategy::Minimal,
            StrategyArg::Partial => Strategy::Partial,
            StrategyArg::Complete => Strategy::Complete,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {}", err.message);
            ExitCode::from(err.code)
        }
    }
}

fn run(cli: Cli) -> Result<u8, CliError> {
    let settings = config::resolve(&cli.global)?;
    match cli.command {
        Command::Ingest { question, solution, steps } => ingest(&settings, &question, &solution, steps),
        Command::Ask {
            question,
            trace_out,
            max_stages,
            context,
        } => ask(&settings, &question, trace_out.as_deref(), max_stages, &context),
        Command::Extend {
            question,
            kinds,
            n,
            dynamic,
            source_stage,
            stages,
            context,
        } => extend(
            &settings,
            &question,
            &kinds,
            n,
            &dynamic,
            source_stage.as_deref(),
            &stages,
            &context,
        ),
        Command::Network {
            command: NetworkCommand::Build { traces, out, format },
        } => network_build(&traces, out.as_deref(), format),
        Command::Entropy { coverage, out } => entropy(&coverage, out.as_deref()),
        Command::Improve {
            method,
            strategy,
            trials,
            seed,
            adopt,
        } => improve(&settings, &method, strategy.into(), trials, seed, adopt),
    }
}

fn gateway(settings: &Settings) -> Result<(Box<dyn Gateway>, Option<usize>), CliError> {
    match settings.backend()? {
        BackendSpec::Scripted(path) => {
            let backend = ScriptedBackend::from_file(path).map_err(|e| CliError::usage(e.to_string()))?;
            let dim = backend.config().embedding_dim;
            Ok((Box::new(backend), Some(dim)))
        }
        BackendSpec::Http => {
            let config = HttpConfig::from_env().map_err(|e| CliError::usage(e.to_string()))?;
            let backend = HttpBackend::new(config).map_err(|e| CliError::usage(e.to_string()))?;
            Ok((Box::new(backend), None))
        }
    }
}

fn load_store(path: &Path) -> Result<MethodStore, CliError> {
    if !path.is_file() {
        return Err(CliError::usage(format!("method store {} does not exist", path.display())));
    }
    MethodStore::load(path).map_err(|e| CliError::usage(e.to_string()))
}

fn save_store(store: &MethodStore, path: &Path) -> Result<(), CliError> {
    store.save(path).map_err(domain)
}

fn read_lines(path: &Path) -> Result<Vec<String>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

fn ask_context(args: &ContextArgs) -> Result<AskContext, CliError> {
    Ok(AskContext {
        history: args.history.as_deref().map(read_lines).transpose()?.unwrap_or_default(),
        future: args.future.as_deref().map(read_lines).transpose()?.unwrap_or_default(),
        wider_context: args.wider.clone(),
    })
}

fn label<T: Serialize>(value: &T) -> String {
    serde_json::to_value(value)
        .ok()
        .and_then(|v| v.as_str().map(String::from))
        .unwrap_or_default()
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut text = serde_json::to_string_pretty(value).expect("output serializes");
    text.push('\n');
    text
}

/// Write `text` to `out` if given, otherwise to stdout. With `out`, stdout
/// gets `receipt` so it stays valid JSON.
fn emit(text: &str, out: Option<&Path>, receipt: serde_json::Value) -> Result<(), CliError> {
    match out {
        Some(path) => {
            std::fs::write(path, text).map_err(|e| CliError::domain(format!("{}: {e}", path.display())))?;
            print!("{}", to_json(&receipt));
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn ingest(settings: &Settings, question: &str, solution: &str, steps: Vec<String>) -> Result<u8, CliError> {
    let path = settings.store_path()?;
    let (gw, dim) = gateway(settings)?;
    let steps = (!steps.is_empty()).then_some(steps);
    let mut store = if path.is_file() {
        load_store(path)?
    } else {
        let dim = match dim {
            Some(dim) => dim,
            None => gw.embed(question).map_err(domain)?.len(),
        };
        MethodStore::new(dim)
    };
    let before = store.len();
    let id = store.add_method(question, solution, steps, gw.as_ref()).map_err(domain)?;
    let created = store.len() > before;
    save_store(&store, path)?;
    let method = store.get(&id).expect("method was just stored");
    print!(
        "{}",
        to_json(&json!({"method_id": id, "created": created, "steps": method.steps}))
    );
    eprintln!(
        "{} method {id} ({} step(s)); store now holds {}",
        if created { "added" } else { "already stored:" },
        method.steps.len(),
        store.len()
    );
    Ok(0)
}

fn ask(
    settings: &Settings,
    question: &str,
    trace_out: Option<&Path>,
    max_stages: Option<usize>,
    context: &ContextArgs,
) -> Result<u8, CliError> {
    let path = settings.store_path()?;
    let mut store = load_store(path)?;
    let (gw, _) = gateway(settings)?;
    let mut config = settings.orchestrator.clone();
    if let Some(n) = max_stages {
        config.max_stages = n;
    }
    let orchestrator = Orchestrator::new(settings.templates.clone(), config).map_err(|e| CliError::usage(e.to_string()))?;
    let context = ask_context(context)?;
    let trace = orchestrator
        .answer(question, &context, &mut store, gw.as_ref())
        .map_err(domain)?;
    let text = to_json(&trace);
    if let Some(out) = trace_out {
        std::fs::write(out, &text).map_err(|e| CliError::domain(format!("{}: {e}", out.display())))?;
    }
    print!("{text}");
    let stages: Vec<String> = trace.stages.iter().map(|s| label(&s.stage)).collect();
    eprintln!("stages: {}", stages.join(" -> "));
    if trace.outcome == Outcome::Unresolved {
        eprintln!("unresolved; best-effort answer: {}", trace.final_answer);
        return Ok(1);
    }
    save_store(&store, path)?;
    eprintln!("outcome: {}; answer: {}", label(&trace.outcome), trace.final_answer);
    Ok(0)
}

#[derive(Serialize)]
struct ExtendOutput {
    question: String,
    extensions: Vec<scopex_core::extension::Extension>,
    extended_question: scopex_core::extension::ExtendedQuestion,
    #[serde(skip_serializing_if = "Option::is_none")]
    generalization: Option<Generalization>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    scatter: Vec<scopex_core::extension::StageVerdict>,
}

#[allow(clippy::too_many_arguments)]
fn extend(
    settings: &Settings,
    question: &str,
    kinds: &[String],
    n: usize,
    dynamic: &[String],
    source_stage: Option<&str>,
    stages: &[String],
    context: &ContextArgs,
) -> Result<u8, CliError> {
    let kinds: Vec<ExtensionKind> = kinds
        .iter()
        .filter(|k| !k.trim().is_empty())
        .map(|k| k.trim().parse::<ExtensionKind>().map_err(|e| CliError::usage(e.to_string())))
        .collect::<Result<_, _>>()?;
    if kinds.is_empty() && dynamic.is_empty() {
        return Err(CliError::usage("no extension kinds given"));
    }
    let (gw, _) = gateway(settings)?;
    let engine = ExtensionEngine::new(settings.templates.clone());
    let ctx = ask_context(context)?;
    let store_path = settings.store_path().ok().map(Path::to_path_buf);
    let mut store: Option<MethodStore> = None;
    let mut extensions = Vec::new();
    let mut generalization = None;
    let mut scatter = Vec::new();
    for kind in &kinds {
        let ext = match kind {
            ExtensionKind::Vertical => engine.extend_vertical(question, gw.as_ref()),
            ExtensionKind::Horizontal => engine.extend_horizontal(question, gw.as_ref(), n),
            ExtensionKind::Generalization => {
                let path = store_path
                    .as_deref()
                    .ok_or_else(|| CliError::usage("generalization needs a method store"))?;
                let s = match store.as_mut() {
                    Some(s) => s,
                    None => store.insert(load_store(path)?),
                };
                let g = engine.generalize(question, gw.as_ref(), s).map_err(domain)?;
                let ext = ExtensionEngine::generalization_extension(question, &g);
                generalization = Some(g);
                ext
            }
            ExtensionKind::Temporal => {
                if ctx.history.is_empty() && ctx.future.is_empty() {
                    return Err(CliError::usage("temporal extension needs --history or --future"));
                }
                let future = if ctx.future.is_empty() {
                    engine
                        .predict_future(question, &ctx.history, n, gw.as_ref())
                        .map_err(domain)?
                } else {
                    ctx.future.clone()
                };
                engine.extend_temporal(question, &ctx.history, &future)
            }
            ExtensionKind::Spatial => {
                let wider = ctx
                    .wider_context
                    .as_deref()
                    .ok_or_else(|| CliError::usage("spatial extension needs --wider"))?;
                engine.extend_spatial(question, wider)
            }
            ExtensionKind::Scatter => {
                let source = source_stage.ok_or_else(|| CliError::usage("scatter needs --source-stage"))?;
                if stages.is_empty() {
                    return Err(CliError::usage("scatter needs --stages"));
                }
                let verdicts = engine.scatter(question, source, stages, gw.as_ref()).map_err(domain)?;
                let ext = ExtensionEngine::scatter_extension(source, &verdicts);
                scatter = verdicts;
                ext
            }
            ExtensionKind::Dynamic(name) => {
                return Err(CliError::usage(format!(
                    "dynamic kind {name:?} needs content; use --dynamic {name}:CONTENT"
                )))
            }
        };
        extensions.push(ext.map_err(domain)?);
    }
    if !dynamic.is_empty() {
        let mut registry = match settings.registry_path.as_deref() {
            Some(path) if path.is_file() => ExtensionRegistry::load(path).map_err(CliError::usage)?,
            _ => ExtensionRegistry::default(),
        };
        for spec in dynamic {
            let (name, content) = spec
                .split_once(':')
                .ok_or_else(|| CliError::usage(format!("--dynamic {spec:?} is not name:content")))?;
            let name = name.trim();
            if !registry.is_common(name) && !registry.dynamic().contains_key(name) {
                registry.register_dynamic(name).map_err(domain)?;
            }
            registry.note_usage(name).map_err(domain)?;
            let ext = scopex_core::extension::Extension::user_supplied(
                ExtensionKind::Dynamic(name.to_string()),
                question,
                vec![content.trim().to_string()],
            )
            .map_err(domain)?;
            extensions.push(ext);
        }
        if let Some(path) = settings.registry_path.as_deref() {
            registry.save(path).map_err(CliError::domain)?;
        }
    }
    if let (Some(s), Some(path)) = (&store, &store_path) {
        save_store(s, path)?;
    }
    let extended_question = compose(question, &extensions);
    eprintln!(
        "applied {} extension(s): {}",
        extensions.len(),
        extensions.iter().map(|e| e.kind.to_string()).collect::<Vec<_>>().join(", ")
    );
    let output = ExtendOutput {
        question: question.to_string(),
        extensions,
        extended_question,
        generalization,
        scatter,
    };
    print!("{}", to_json(&output));
    Ok(0)
}

#[derive(Serialize)]
struct NetworkOutput {
    trees: Vec<String>,
    nodes: Vec<scopex_core::network::NodeExport>,
    edges: Vec<scopex_core::network::EdgeExport>,
    entropy: scopex_core::entropy::NetworkEntropy,
}

fn network_build(dir: &Path, out: Option<&Path>, format: Format) -> Result<u8, CliError> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::usage(format!("{}: {e}", dir.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    let mut trees: Vec<KnowledgeTree> = Vec::new();
    for file in &files {
        let text = std::fs::read_to_string(file).map_err(|e| CliError::usage(format!("{}: {e}", file.display())))?;
        let trace: ReasoningTrace =
            serde_json::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", file.display())))?;
        for ext in &trace.extensions {
            trees.push(tree_from_extension(&trace.question, ext).map_err(|e| CliError::domain(format!("{}: {e}", file.display())))?);
        }
    }
    if trees.is_empty() {
        return Err(CliError::domain(format!("no extensions found in {}", dir.display())));
    }
    let tree_count = trees.len();
    let network = build_network(trees).map_err(domain)?;
    let sets: Vec<BTreeSet<String>> = network.extension_sets().into_iter().map(|(_, s)| s).collect();
    let entropy = network_entropy(&sets, &network.coverage()).map_err(domain)?;
    let text = match format {
        Format::Dot => network.to_dot(),
        Format::Json => {
            let export = network.export();
            to_json(&NetworkOutput {
                trees: network.trees.clone(),
                nodes: export.nodes,
                edges: export.edges,
                entropy: entropy.clone(),
            })
        }
    };
    let receipt = json!({
        "out": out.map(|p| p.display().to_string()),
        "trees": tree_count,
        "nodes": network.nodes.len(),
        "edges": network.edges.len(),
    });
    if format == Format::Dot && out.is_none() {
        print!("{text}");
    } else {
        emit(&text, out, receipt)?;
    }
    eprintln!(
        "{} trace file(s), {tree_count} tree(s) -> {} nodes, {} edges; network entropy {:.4} bits",
        files.len(),
        network.nodes.len(),
        network.edges.len(),
        entropy.combined
    );
    Ok(0)
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct CoverageFile {
    extensions: Vec<CoverageEntry>,
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct CoverageEntry {
    id: String,
    questions: Vec<String>,
}

fn entropy(coverage: &Path, out: Option<&Path>) -> Result<u8, CliError> {
    let text = std::fs::read_to_string(coverage).map_err(|e| CliError::usage(format!("{}: {e}", coverage.display())))?;
    let file: CoverageFile =
        serde_json::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", coverage.display())))?;
    let entries: Vec<(String, BTreeSet<String>)> = file
        .extensions
        .into_iter()
        .map(|e| (e.id, e.questions.into_iter().collect()))
        .collect();
    let report = entropy_report(&entries).map_err(domain)?;
    let receipt = json!({
        "out": out.map(|p| p.display().to_string()),
        "entropy_bits": report.entropy_bits,
    });
    emit(&to_json(&report), out, receipt)?;
    eprintln!("{} extension(s); entropy {:.4} bits", entries.len(), report.entropy_bits);
    Ok(0)
}

fn improve(
    settings: &Settings,
    method: &str,
    strategy: Strategy,
    trials: usize,
    seed: u64,
    adopt: bool,
) -> Result<u8, CliError> {
    let path = settings.store_path()?;
    let mut store = load_store(path)?;
    let (gw, _) = gateway(settings)?;
    let orchestrator =
        Orchestrator::new(settings.templates.clone(), settings.orchestrator.clone()).map_err(|e| CliError::usage(e.to_string()))?;
    let candidates = orchestrator
        .improve_method(&store, method, strategy, Evaluator::Predictive, trials, seed, gw.as_ref())
        .map_err(domain)?;
    let adopted = if adopt {
        let best = candidates.first().expect("trials is positive");
        let id = orchestrator.adopt_candidate(&mut store, best).map_err(domain)?;
        save_store(&store, path)?;
        Some(id)
    } else {
        None
    };
    print!(
        "{}",
        to_json(&json!({"method": method, "candidates": candidates, "adopted": adopted}))
    );
    if let Some(best) = candidates.first() {
        eprintln!(
            "{} candidate(s); best changes step(s) {:?} with score {:.3}",
            candidates.len(),
            best.changed_steps.iter().map(|i| i + 1).collect::<Vec<_>>(),
            best.score
        );
    }
    Ok(0)
}
