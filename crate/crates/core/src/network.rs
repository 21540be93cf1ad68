//! Knowledge trees built from extensions, merged into a knowledge network.
//!
//! Nodes are identified by the hash of their normalized label, so trees
//! built independently fuse wherever they mention the same question,
//! cause, state or region. Merging rejects any union that would close a
//! directed cycle.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::extension::{Extension, ExtensionKind};
use crate::text::{digest_hex, node_key, normalize};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("extension payload is empty")]
    ExtensionEmpty,
    #[error("invalid tree: {0}")]
    InvalidTree(String),
    #[error("merge would create a directed cycle: {}", .0.join(" -> "))]
    CycleDetected(Vec<String>),
    #[error("node key {key} names both {left:?} and {right:?}")]
    IdentityCollision { key: String, left: String, right: String },
    #[error("node not found: {0}")]
    NotFound(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NodeRole {
    Question,
    Method,
    Context,
    Cause,
    State,
    Region,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeNode {
    pub key: String,
    pub label: String,
    pub role: NodeRole,
}

impl KnowledgeNode {
    pub fn new(label: &str, role: NodeRole) -> Self {
        Self {
            key: node_key(label),
            label: label.trim().to_string(),
            role,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EdgeKind {
    /// `g(q) → q`, and a question to its parallel questions.
    Generalizes,
    /// cause → effect
    Causes,
    /// `x_t → x_{t+1}`
    Precedes,
    /// global region → local region
    Contains,
    /// source stage → stage the optimization carries to
    ScatterTransfer,
    /// anchor → caller-defined dynamic context
    Extends,
}

impl EdgeKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EdgeKind::Generalizes => "generalizes",
            EdgeKind::Causes => "causes",
            EdgeKind::Precedes => "precedes",
            EdgeKind::Contains => "contains",
            EdgeKind::ScatterTransfer => "scatter-transfer",
            EdgeKind::Extends => "extends",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct KnowledgeEdge {
    pub from: String,
    pub to: String,
    pub kind: EdgeKind,
}

impl KnowledgeEdge {
    /// Identifier of the extension event this edge records.
    pub fn id(&self) -> String {
        format!("{}->{}:{}", self.from, self.to, self.kind.as_str())
    }
}

fn roles_consistent(kind: EdgeKind, from: NodeRole, to: NodeRole) -> bool {
    match kind {
        EdgeKind::Causes => from == NodeRole::Cause,
        EdgeKind::Contains => from == NodeRole::Region && to == NodeRole::Region,
        EdgeKind::Precedes => from == NodeRole::State && to == NodeRole::State,
        EdgeKind::Generalizes | EdgeKind::ScatterTransfer | EdgeKind::Extends => true,
    }
}

/// A tree grown from one extension around an anchor node.
///
/// Edges point along the relation they record (cause → effect, past →
/// future, global → local), so the anchor may have incoming edges; the
/// tree property is that every node other than the root is attached to the
/// rest by exactly one edge and everything connects back to the root.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeTree {
    pub id: String,
    pub root: String,
    pub kind: ExtensionKind,
    pub nodes: BTreeMap<String, KnowledgeNode>,
    pub edges: BTreeSet<KnowledgeEdge>,
    /// For each edge, the node it added to the tree.
    pub introduced: BTreeMap<KnowledgeEdge, String>,
}

struct TreeBuilder {
    root: String,
    nodes: BTreeMap<String, KnowledgeNode>,
    edges: BTreeSet<KnowledgeEdge>,
    introduced: BTreeMap<KnowledgeEdge, String>,
}

impl TreeBuilder {
    fn new(root: KnowledgeNode) -> Self {
        let key = root.key.clone();
        Self {
            root: key.clone(),
            nodes: BTreeMap::from([(key, root)]),
            edges: BTreeSet::new(),
            introduced: BTreeMap::new(),
        }
    }

    /// Add `label` as a new node, or `None` if the tree already holds it.
    fn node(&mut self, label: &str, role: NodeRole) -> Option<String> {
        let node = KnowledgeNode::new(label, role);
        if self.nodes.contains_key(&node.key) {
            return None;
        }
        let key = node.key.clone();
        self.nodes.insert(key.clone(), node);
        Some(key)
    }

    fn edge(&mut self, from: &str, to: &str, kind: EdgeKind, introduces: &str) {
        let edge = KnowledgeEdge {
            from: from.to_string(),
            to: to.to_string(),
            kind,
        };
        self.introduced.insert(edge.clone(), introduces.to_string());
        self.edges.insert(edge);
    }
}

fn split_temporal(fragment: &str) -> Option<(bool, &str)> {
    let (head, rest) = fragment.split_once("]: ")?;
    if let Some(n) = head.strip_prefix("past[") {
        n.parse::<usize>().ok()?;
        return Some((true, rest));
    }
    if let Some(n) = head.strip_prefix("future[") {
        n.parse::<usize>().ok()?;
        return Some((false, rest));
    }
    None
}

/// Grow the tree an extension describes around `root_label`.
pub fn tree_from_extension(root_label: &str, extension: &Extension) -> Result<KnowledgeTree, NetworkError> {
    let payload: Vec<&str> = extension
        .payload
        .iter()
        .map(|p| p.trim())
        .filter(|p| !p.is_empty())
        .collect();
    if payload.is_empty() {
        return Err(NetworkError::ExtensionEmpty);
    }
    if normalize(root_label).is_empty() {
        return Err(NetworkError::InvalidTree("empty root label".into()));
    }
    let root_role = match extension.kind {
        ExtensionKind::Vertical | ExtensionKind::Horizontal | ExtensionKind::Generalization => NodeRole::Question,
        ExtensionKind::Temporal => NodeRole::State,
        ExtensionKind::Spatial => NodeRole::Region,
        ExtensionKind::Scatter | ExtensionKind::Dynamic(_) => NodeRole::Context,
    };
    let mut b = TreeBuilder::new(KnowledgeNode::new(root_label, root_role));
    let root = b.root.clone();
    match &extension.kind {
        ExtensionKind::Vertical => {
            for cause in &payload {
                if let Some(c) = b.node(cause, NodeRole::Cause) {
                    b.edge(&c, &root, EdgeKind::Causes, &c);
                }
            }
        }
        ExtensionKind::Horizontal => {
            for neighbor in &payload {
                if let Some(n) = b.node(neighbor, NodeRole::Question) {
                    b.edge(&root, &n, EdgeKind::Generalizes, &n);
                }
            }
        }
        ExtensionKind::Generalization => {
            for general in &payload {
                if let Some(g) = b.node(general, NodeRole::Question) {
                    b.edge(&g, &root, EdgeKind::Generalizes, &g);
                }
            }
        }
        ExtensionKind::Temporal => {
            let mut past = Vec::new();
            let mut future = Vec::new();
            for fragment in &payload {
                match split_temporal(fragment) {
                    Some((true, state)) => past.push(state),
                    Some((false, state)) => future.push(state),
                    None => {
                        return Err(NetworkError::InvalidTree(format!(
                            "temporal fragment {fragment:?} has no past[k]/future[k] label"
                        )))
                    }
                }
            }
            // Walk outward from the root in both directions so each state
            // hangs off its nearest already-placed neighbour.
            let mut next = root.clone();
            for state in past.iter().rev() {
                if let Some(s) = b.node(state, NodeRole::State) {
                    b.edge(&s, &next, EdgeKind::Precedes, &s);
                    next = s;
                }
            }
            let mut prev = root.clone();
            for state in &future {
                if let Some(s) = b.node(state, NodeRole::State) {
                    b.edge(&prev, &s, EdgeKind::Precedes, &s);
                    prev = s;
                }
            }
        }
        ExtensionKind::Spatial => {
            let mut inner = root.clone();
            for region in &payload {
                if let Some(r) = b.node(region, NodeRole::Region) {
                    b.edge(&r, &inner, EdgeKind::Contains, &r);
                    inner = r;
                }
            }
        }
        ExtensionKind::Scatter => {
            for stage in &payload {
                if let Some(s) = b.node(stage, NodeRole::Context) {
                    b.edge(&root, &s, EdgeKind::ScatterTransfer, &s);
                }
            }
        }
        ExtensionKind::Dynamic(_) => {
            for context in &payload {
                if let Some(c) = b.node(context, NodeRole::Context) {
                    b.edge(&root, &c, EdgeKind::Extends, &c);
                }
            }
        }
    }
    let id = format!(
        "t-{}",
        digest_hex(&[&extension.kind.to_string(), &root, &extension.id()])
    );
    let tree = KnowledgeTree {
        id,
        root: b.root,
        kind: extension.kind.clone(),
        nodes: b.nodes,
        edges: b.edges,
        introduced: b.introduced,
    };
    tree.validate()?;
    Ok(tree)
}

impl KnowledgeTree {
    /// Assemble a tree from parts, checking the tree property. Each edge's
    /// introduced node is the endpoint farther from the root.
    pub fn from_parts(
        id: &str,
        root: &str,
        kind: ExtensionKind,
        nodes: Vec<KnowledgeNode>,
        edges: Vec<KnowledgeEdge>,
    ) -> Result<Self, NetworkError> {
        let nodes: BTreeMap<String, KnowledgeNode> = nodes.into_iter().map(|n| (n.key.clone(), n)).collect();
        let edges: BTreeSet<KnowledgeEdge> = edges.into_iter().collect();
        let depth = undirected_depths(root, &nodes, &edges);
        let introduced = edges
            .iter()
            .map(|e| {
                let deeper = match (depth.get(&e.from), depth.get(&e.to)) {
                    (Some(f), Some(t)) if f > t => e.from.clone(),
                    _ => e.to.clone(),
                };
                (e.clone(), deeper)
            })
            .collect();
        let tree = Self {
            id: id.to_string(),
            root: root.to_string(),
            kind,
            nodes,
            edges,
            introduced,
        };
        tree.validate()?;
        Ok(tree)
    }

    /// Check that the edges span the nodes as a tree hanging from the root
    /// and that every edge kind fits its endpoint roles.
    pub fn validate(&self) -> Result<(), NetworkError> {
        let invalid = |m: String| Err(NetworkError::InvalidTree(m));
        if !self.nodes.contains_key(&self.root) {
            return invalid(format!("root {} is not a node", self.root));
        }
        for (key, node) in &self.nodes {
            if *key != node.key {
                return invalid(format!("node stored under {key} has key {}", node.key));
            }
        }
        let mut attached: BTreeSet<&str> = BTreeSet::new();
        for edge in &self.edges {
            let (Some(from), Some(to)) = (self.nodes.get(&edge.from), self.nodes.get(&edge.to)) else {
                return invalid(format!("edge {} has an endpoint outside the tree", edge.id()));
            };
            if edge.from == edge.to {
                return invalid(format!("self-loop on {}", edge.from));
            }
            if !roles_consistent(edge.kind, from.role, to.role) {
                return invalid(format!(
                    "{} edge from {:?} to {:?}",
                    edge.kind.as_str(),
                    from.role,
                    to.role
                ));
            }
            let Some(added) = self.introduced.get(edge) else {
                return invalid(format!("edge {} introduces no node", edge.id()));
            };
            if *added == self.root || (*added != edge.from && *added != edge.to) {
                return invalid(format!("edge {} introduces {added}", edge.id()));
            }
            if !attached.insert(added) {
                return invalid(format!("node {added} is attached by more than one edge"));
            }
        }
        if self.edges.len() + 1 != self.nodes.len() {
            return invalid(format!(
                "{} nodes need {} edges, found {}",
                self.nodes.len(),
                self.nodes.len() - 1,
                self.edges.len()
            ));
        }
        let depth = undirected_depths(&self.root, &self.nodes, &self.edges);
        if depth.len() != self.nodes.len() {
            return invalid("some nodes are not connected to the root".into());
        }
        for (edge, added) in &self.introduced {
            let other = if *added == edge.from { &edge.to } else { &edge.from };
            if depth[added] != depth[other] + 1 {
                return invalid(format!("edge {} does not point away from the root", edge.id()));
            }
        }
        Ok(())
    }
}

fn undirected_depths(
    root: &str,
    nodes: &BTreeMap<String, KnowledgeNode>,
    edges: &BTreeSet<KnowledgeEdge>,
) -> BTreeMap<String, usize> {
    let mut adjacency: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for e in edges {
        adjacency.entry(&e.from).or_default().push(&e.to);
        adjacency.entry(&e.to).or_default().push(&e.from);
    }
    let mut depth = BTreeMap::new();
    if !nodes.contains_key(root) {
        return depth;
    }
    depth.insert(root.to_string(), 0);
    let mut queue = VecDeque::from([root.to_string()]);
    while let Some(current) = queue.pop_front() {
        let d = depth[&current];
        for next in adjacency.get(current.as_str()).into_iter().flatten() {
            if !depth.contains_key(*next) {
                depth.insert(next.to_string(), d + 1);
                queue.push_back(next.to_string());
            }
        }
    }
    depth
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub tree: String,
    pub introduces: String,
}

/// Union of knowledge trees; always acyclic.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct KnowledgeNetwork {
    pub nodes: BTreeMap<String, KnowledgeNode>,
    pub edges: BTreeSet<KnowledgeEdge>,
    pub provenance: BTreeMap<KnowledgeEdge, Provenance>,
    /// Tree ids in merge order.
    pub trees: Vec<String>,
}

impl From<KnowledgeTree> for KnowledgeNetwork {
    fn from(tree: KnowledgeTree) -> Self {
        let provenance = tree
            .introduced
            .iter()
            .map(|(edge, node)| {
                (
                    edge.clone(),
                    Provenance {
                        tree: tree.id.clone(),
                        introduces: node.clone(),
                    },
                )
            })
            .collect();
        Self {
            nodes: tree.nodes,
            edges: tree.edges,
            provenance,
            trees: vec![tree.id],
        }
    }
}

impl From<&KnowledgeTree> for KnowledgeNetwork {
    fn from(tree: &KnowledgeTree) -> Self {
        tree.clone().into()
    }
}

/// `G = (V_a ∪ V_b, E_a ∪ E_b)`. Shared edges keep `a`'s provenance.
pub fn merge(
    a: impl Into<KnowledgeNetwork>,
    b: impl Into<KnowledgeNetwork>,
) -> Result<KnowledgeNetwork, NetworkError> {
    let mut net: KnowledgeNetwork = a.into();
    let other: KnowledgeNetwork = b.into();
    for (key, node) in other.nodes {
        match net.nodes.get(&key) {
            Some(existing) if normalize(&existing.label) != normalize(&node.label) => {
                return Err(NetworkError::IdentityCollision {
                    key,
                    left: existing.label.clone(),
                    right: node.label,
                })
            }
            Some(_) => {}
            None => {
                net.nodes.insert(key, node);
            }
        }
    }
    for edge in other.edges {
        if net.edges.insert(edge.clone()) {
            if let Some(p) = other.provenance.get(&edge) {
                net.provenance.insert(edge, p.clone());
            }
        }
    }
    for tree in other.trees {
        if !net.trees.contains(&tree) {
            net.trees.push(tree);
        }
    }
    net.topological_order()?;
    Ok(net)
}

/// Merge trees in order into one network.
pub fn build_network<I>(trees: I) -> Result<KnowledgeNetwork, NetworkError>
where
    I: IntoIterator<Item = KnowledgeTree>,
{
    trees
        .into_iter()
        .try_fold(KnowledgeNetwork::default(), merge)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeExport {
    pub key: String,
    pub label: String,
    pub role: NodeRole,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeExport {
    pub from: String,
    pub to: String,
    pub kind: EdgeKind,
    pub tree: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkExport {
    pub nodes: Vec<NodeExport>,
    pub edges: Vec<EdgeExport>,
}

impl KnowledgeNetwork {
    fn successors(&self) -> BTreeMap<&str, Vec<&str>> {
        let mut out: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for e in &self.edges {
            out.entry(&e.from).or_default().push(&e.to);
        }
        out
    }

    /// Kahn's algorithm; on failure, names one directed cycle by labels.
    pub fn topological_order(&self) -> Result<Vec<String>, NetworkError> {
        let mut indegree: BTreeMap<&str, usize> = self.nodes.keys().map(|k| (k.as_str(), 0)).collect();
        for e in &self.edges {
            *indegree.entry(&e.to).or_default() += 1;
        }
        let succ = self.successors();
        let mut ready: VecDeque<&str> = indegree.iter().filter(|(_, d)| **d == 0).map(|(k, _)| *k).collect();
        let mut order = Vec::with_capacity(indegree.len());
        while let Some(n) = ready.pop_front() {
            order.push(n.to_string());
            for next in succ.get(n).into_iter().flatten() {
                let d = indegree.get_mut(next).expect("edge endpoint is a node");
                *d -= 1;
                if *d == 0 {
                    ready.push_back(next);
                }
            }
        }
        if order.len() == indegree.len() {
            return Ok(order);
        }
        let stuck: BTreeSet<&str> = indegree.iter().filter(|(_, d)| **d > 0).map(|(k, _)| *k).collect();
        Err(NetworkError::CycleDetected(self.find_cycle(&stuck)))
    }

    // Every node left after Kahn's algorithm has a predecessor that is also
    // left, so walking predecessors from any of them must revisit a node.
    fn find_cycle(&self, stuck: &BTreeSet<&str>) -> Vec<String> {
        let mut pred: BTreeMap<&str, &str> = BTreeMap::new();
        for e in &self.edges {
            if stuck.contains(e.from.as_str()) && stuck.contains(e.to.as_str()) {
                pred.entry(&e.to).or_insert(&e.from);
            }
        }
        let start = *stuck.iter().next().expect("a cycle leaves nodes behind");
        let mut path = vec![start];
        let mut position: BTreeMap<&str, usize> = BTreeMap::from([(start, 0)]);
        let mut current = start;
        loop {
            let p = pred[current];
            if let Some(&i) = position.get(p) {
                let mut cycle: Vec<&str> = path[i..].to_vec();
                cycle.reverse();
                cycle.push(cycle[0]);
                return cycle
                    .into_iter()
                    .map(|k| self.nodes.get(k).map_or(k.to_string(), |n| n.label.clone()))
                    .collect();
            }
            position.insert(p, path.len());
            path.push(p);
            current = p;
        }
    }

    /// Nodes reachable from `from` along directed edges, excluding `from`.
    pub fn reachable(&self, from: &str) -> Result<BTreeSet<String>, NetworkError> {
        if !self.nodes.contains_key(from) {
            return Err(NetworkError::NotFound(from.to_string()));
        }
        let succ = self.successors();
        let mut seen = BTreeSet::new();
        let mut stack = vec![from];
        while let Some(n) = stack.pop() {
            for next in succ.get(n).into_iter().flatten() {
                if *next != from && seen.insert(next.to_string()) {
                    stack.push(next);
                }
            }
        }
        Ok(seen)
    }

    /// Extension-event ids (edge ids) grouped by originating tree, in merge order.
    pub fn extension_sets(&self) -> Vec<(String, BTreeSet<String>)> {
        let mut sets: Vec<(String, BTreeSet<String>)> =
            self.trees.iter().map(|t| (t.clone(), BTreeSet::new())).collect();
        for (edge, p) in &self.provenance {
            if let Some((_, set)) = sets.iter_mut().find(|(t, _)| *t == p.tree) {
                set.insert(edge.id());
            }
        }
        sets
    }

    /// For each extension event, the node it added.
    pub fn coverage(&self) -> BTreeMap<String, BTreeSet<String>> {
        self.provenance
            .iter()
            .map(|(edge, p)| (edge.id(), BTreeSet::from([p.introduces.clone()])))
            .collect()
    }

    pub fn export(&self) -> NetworkExport {
        NetworkExport {
            nodes: self
                .nodes
                .values()
                .map(|n| NodeExport {
                    key: n.key.clone(),
                    label: n.label.clone(),
                    role: n.role,
                })
                .collect(),
            edges: self
                .edges
                .iter()
                .map(|e| EdgeExport {
                    from: e.from.clone(),
                    to: e.to.clone(),
                    kind: e.kind,
                    tree: self.provenance.get(e).map(|p| p.tree.clone()).unwrap_or_default(),
                })
                .collect(),
        }
    }

    /// Graphviz rendering with the edge kind as edge label.
    pub fn to_dot(&self) -> String {
        let quote = |s: &str| s.replace('\\', "\\\\").replace('"', "\\\"").replace('\n', "\\n");
        let mut out = String::from("digraph knowledge {\n");
        for n in self.nodes.values() {
            let _ = writeln!(
                out,
                "  \"{}\" [label=\"{}\", role=\"{}\"];",
                n.key,
                quote(&n.label),
                serde_json::to_value(n.role).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default()
            );
        }
        for e in &self.edges {
            let _ = writeln!(out, "  \"{}\" -> \"{}\" [label=\"{}\"];", e.from, e.to, e.kind.as_str());
        }
        out.push_str("}\n");
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extension::{ExtensionEngine, ExtensionKind};

    fn ext(kind: ExtensionKind, root: &str, payload: &[&str]) -> Extension {
        Extension::user_supplied(kind, root, payload.iter().map(|s| s.to_string()).collect()).unwrap()
    }

    fn key(label: &str) -> String {
        node_key(label)
    }

    #[test]
    fn horizontal_tree_shape() {
        let tree = tree_from_extension("q", &ext(ExtensionKind::Horizontal, "q", &["n1", "n2"])).unwrap();
        assert_eq!(tree.nodes.len(), 3);
        assert_eq!(tree.edges.len(), 2);
        assert_eq!(tree.edges.iter().filter(|e| e.from == tree.root).count(), 2);
        assert!(tree.edges.iter().all(|e| e.kind == EdgeKind::Generalizes));
    }

    #[test]
    fn temporal_tree_is_a_chain() {
        let t = ExtensionEngine::default()
            .extend_temporal("x", &["a".to_string()], &["b".to_string()])
            .unwrap();
        let tree = tree_from_extension("x", &t).unwrap();
        let expected = BTreeSet::from([
            KnowledgeEdge { from: key("a"), to: key("x"), kind: EdgeKind::Precedes },
            KnowledgeEdge { from: key("x"), to: key("b"), kind: EdgeKind::Precedes },
        ]);
        assert_eq!(tree.edges, expected);
        let longer = ExtensionEngine::default()
            .extend_temporal("x", &["a".into(), "b".into()], &["c".into(), "d".into()])
            .unwrap();
        let tree = tree_from_extension("x", &longer).unwrap();
        let net = KnowledgeNetwork::from(tree);
        assert_eq!(
            net.topological_order().unwrap(),
            vec![key("a"), key("b"), key("x"), key("c"), key("d")]
        );
    }

    #[test]
    fn vertical_edge_points_cause_to_effect() {
        let tree = tree_from_extension("q", &ext(ExtensionKind::Vertical, "q", &["c"])).unwrap();
        let edge = tree.edges.iter().next().unwrap();
        assert_eq!((edge.from.as_str(), edge.to.as_str(), edge.kind), (key("c").as_str(), key("q").as_str(), EdgeKind::Causes));
        assert_eq!(tree.nodes[&key("c")].role, NodeRole::Cause);
    }

    #[test]
    fn spatial_and_generalization_point_to_root() {
        let s = tree_from_extension("bridge end", &ext(ExtensionKind::Spatial, "bridge end", &["whole crossing"])).unwrap();
        assert_eq!(s.edges.iter().next().unwrap().from, key("whole crossing"));
        let g = tree_from_extension("q", &ext(ExtensionKind::Generalization, "q", &["general q"])).unwrap();
        assert_eq!(g.edges.iter().next().unwrap().from, key("general q"));
    }

    #[test]
    fn duplicate_fragments_collapse() {
        let tree = tree_from_extension("q", &ext(ExtensionKind::Horizontal, "q", &["n", "N ", "Q"])).unwrap();
        assert_eq!(tree.nodes.len(), 2);
        assert!(tree_from_extension("q", &Extension { payload: vec![], ..ext(ExtensionKind::Vertical, "q", &["c"]) }).is_err());
    }

    #[test]
    fn merge_unions_and_fuses_shared_nodes() {
        let t1 = tree_from_extension("A", &ext(ExtensionKind::Horizontal, "A", &["B"])).unwrap();
        let t2 = tree_from_extension("B", &ext(ExtensionKind::Horizontal, "B", &["C"])).unwrap();
        let net = merge(&t1, &t2).unwrap();
        assert_eq!(net.nodes.len(), 3);
        assert_eq!(net.edges.len(), t1.edges.len() + t2.edges.len());
        assert_eq!(net.reachable(&key("A")).unwrap(), BTreeSet::from([key("B"), key("C")]));
        assert_eq!(merge(&t1, &t1).unwrap(), KnowledgeNetwork::from(&t1));
    }

    #[test]
    fn two_cycle_is_rejected() {
        let t1 = tree_from_extension("A", &ext(ExtensionKind::Vertical, "A", &["B"])).unwrap();
        let t2 = tree_from_extension("B", &ext(ExtensionKind::Vertical, "B", &["A"])).unwrap();
        match merge(&t1, &t2) {
            Err(NetworkError::CycleDetected(cycle)) => {
                assert_eq!(cycle.len(), 3);
                assert_eq!(cycle.first(), cycle.last());
                assert!(cycle.contains(&"A".to_string()) && cycle.contains(&"B".to_string()));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn identity_collision_is_rejected() {
        let t1 = tree_from_extension("A", &ext(ExtensionKind::Horizontal, "A", &["B"])).unwrap();
        let forged = KnowledgeNode { key: key("B"), label: "not B".into(), role: NodeRole::Question };
        let t2 = KnowledgeTree::from_parts("forged", &forged.key.clone(), ExtensionKind::Horizontal, vec![forged], vec![]).unwrap();
        assert!(matches!(merge(&t1, &t2), Err(NetworkError::IdentityCollision { .. })));
    }

    #[test]
    fn reachable_edge_cases() {
        let t = tree_from_extension("x", &ext(ExtensionKind::Horizontal, "x", &["y"])).unwrap();
        let net = KnowledgeNetwork::from(t);
        assert!(net.reachable(&key("y")).unwrap().is_empty());
        assert_eq!(net.reachable("n-missing"), Err(NetworkError::NotFound("n-missing".into())));
    }

    #[test]
    fn extension_sets_partition_edges() {
        let t1 = tree_from_extension("A", &ext(ExtensionKind::Horizontal, "A", &["B", "C"])).unwrap();
        let t2 = tree_from_extension("D", &ext(ExtensionKind::Horizontal, "D", &["E", "F"])).unwrap();
        let net = merge(&t1, &t2).unwrap();
        let sets = net.extension_sets();
        assert_eq!(sets.iter().map(|(_, s)| s.len()).collect::<Vec<_>>(), vec![2, 2]);

        // an edge present in both trees belongs to the first merged
        let t3 = tree_from_extension("A", &ext(ExtensionKind::Horizontal, "A", &["B", "G"])).unwrap();
        let net = merge(&t1, &t3).unwrap();
        let shared = KnowledgeEdge { from: key("A"), to: key("B"), kind: EdgeKind::Generalizes }.id();
        let sets = net.extension_sets();
        assert!(sets[0].1.contains(&shared));
        assert!(!sets[1].1.contains(&shared));
        assert!(sets.iter().map(|(_, s)| s.len()).sum::<usize>() >= net.edges.len());
    }

    #[test]
    fn from_parts_rejects_non_trees() {
        let a = KnowledgeNode::new("a", NodeRole::Question);
        let b = KnowledgeNode::new("b", NodeRole::Question);
        let c = KnowledgeNode::new("c", NodeRole::Question);
        let e = |x: &KnowledgeNode, y: &KnowledgeNode| KnowledgeEdge { from: x.key.clone(), to: y.key.clone(), kind: EdgeKind::Generalizes };
        // disconnected
        assert!(KnowledgeTree::from_parts("t", &a.key, ExtensionKind::Horizontal, vec![a.clone(), b.clone(), c.clone()], vec![e(&a, &b)]).is_err());
        // undirected cycle
        assert!(KnowledgeTree::from_parts(
            "t", &a.key, ExtensionKind::Horizontal,
            vec![a.clone(), b.clone(), c.clone()],
            vec![e(&a, &b), e(&b, &c), e(&a, &c)]
        ).is_err());
        // role mismatch on a precedes edge
        let bad = KnowledgeEdge { from: a.key.clone(), to: b.key.clone(), kind: EdgeKind::Precedes };
        assert!(KnowledgeTree::from_parts("t", &a.key, ExtensionKind::Temporal, vec![a.clone(), b.clone()], vec![bad]).is_err());
        assert!(KnowledgeTree::from_parts("t", &a.key, ExtensionKind::Horizontal, vec![a.clone(), b.clone(), c.clone()], vec![e(&a, &b), e(&c, &b)]).is_ok());
    }

    #[test]
    fn export_is_sorted_and_dot_labels_kinds() {
        let t1 = tree_from_extension("q", &ext(ExtensionKind::Vertical, "q", &["z cause", "a cause"])).unwrap();
        let net = KnowledgeNetwork::from(t1);
        let export = net.export();
        let keys: Vec<&String> = export.nodes.iter().map(|n| &n.key).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
        let dot = net.to_dot();
        assert!(dot.starts_with("digraph knowledge {"));
        assert_eq!(dot.matches("[label=\"causes\"]").count(), 2);
    }
}
