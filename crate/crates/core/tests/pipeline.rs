use scopex_core::entropy::{entropy_report, network_entropy};
use scopex_core::gateway::ScriptedBackend;
use scopex_core::network::{build_network, tree_from_extension};
use scopex_core::orchestrator::{AskContext, Orchestrator, OrchestratorConfig, Outcome, Stage};
use scopex_core::{MethodStore, Templates};

const RULES: &str = r#"{
  "embedding_dim": 8,
  "embedding_seed": 3,
  "rules": [
    {"pattern": "underlying reasons", "response": "- cold starts\n- worn seals", "confidence": 0.7},
    {"pattern": "parallel or closely related", "response": "1. Why do diesel vans stall?\n2. Why do generators fail in frost?", "confidence": 0.7},
    {"pattern": "using the added context", "response": "Replace the seals and fit a block heater.", "confidence": 0.9},
    {"pattern": "Answer the question directly", "response": "Unclear.", "confidence": 0.1}
  ]
}"#;

const QUESTION: &str = "Why does the pump engine stall in winter?";

#[test]
fn extended_answers_feed_the_network_and_entropy_accounting() {
    let gateway = ScriptedBackend::from_json(RULES).unwrap();
    let orchestrator = Orchestrator::new(Templates::default(), OrchestratorConfig::default()).unwrap();
    let mut store = MethodStore::new(8);

    let trace = orchestrator
        .answer(QUESTION, &AskContext::default(), &mut store, &gateway)
        .unwrap();
    assert!(trace.is_well_formed());
    assert_eq!(trace.outcome, Outcome::ScopeExtended);
    assert_eq!(trace.final_answer, "Replace the seals and fit a block heater.");
    let stages: Vec<Stage> = trace.stages.iter().map(|s| s.stage).collect();
    assert_eq!(stages, [Stage::Intuition, Stage::MethodReuse, Stage::ScopeExtension]);
    assert!(store.is_empty());
    assert!(!trace.extensions.is_empty());

    let trees: Vec<_> = trace
        .extensions
        .iter()
        .map(|e| tree_from_extension(QUESTION, e).unwrap())
        .collect();
    let network = build_network(trees.clone()).unwrap();
    assert_eq!(network.trees.len(), trees.len());
    let order = network.topological_order().unwrap();
    assert_eq!(order.len(), network.nodes.len());

    let coverage = network.coverage();
    let sets: Vec<_> = network.extension_sets().into_iter().map(|(_, s)| s).collect();
    let h = network_entropy(&sets, &coverage).unwrap();
    assert!(h.per_tree.iter().all(|&t| h.combined + 1e-9 >= t));

    let events: Vec<_> = coverage.into_iter().collect();
    let report = entropy_report(&events).unwrap();
    assert_eq!(report.gains.len(), events.len());
    assert!(report.gains.iter().all(|g| g.delta >= -1e-9));
    let total: f64 = report.probabilities.values().sum();
    assert!((total - 1.0).abs() < 1e-9);
}

#[test]
fn identical_runs_produce_identical_traces() {
    let run = || {
        let gateway = ScriptedBackend::from_json(RULES).unwrap();
        let orchestrator = Orchestrator::new(Templates::default(), OrchestratorConfig::default()).unwrap();
        let trace = orchestrator
            .answer(QUESTION, &AskContext::default(), &mut MethodStore::new(8), &gateway)
            .unwrap();
        serde_json::to_string(&trace).unwrap()
    };
    assert_eq!(run(), run());
}
