//! Scene graphs: parsing, validation, prompt decomposition and the per-step
//! guidance schedule.
//!
//! A graph file is JSON:
//!
//! ```json
//! {
//!   "global_prompt": "A wizard at a desk",
//!   "nodes": [{"name": "Wizard", "attributes": ["wise-looking"]},
//!             {"name": "Wooden Desk", "init_center": [0.3, 0, 0], "init_radius": 0.2}],
//!   "edges": [{"subject": "Wizard", "object": 1, "relation": "standing in front of"}]
//! }
//! ```
//!
//! Edge endpoints may be 0-based indices or node names.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::space::Aabb;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub name: String,
    #[serde(default)]
    pub attributes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_center: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_radius: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub subject: usize,
    pub object: usize,
    #[serde(skip)]
    relation_index: usize,
}

/// A validated scene graph. Node order is the file order.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGraph {
    global_prompt: String,
    nodes: Vec<Node>,
    edges: Vec<Edge>,
    relations: Vec<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("malformed graph file: {0}")]
    Syntax(#[from] serde_json::Error),
    #[error("invalid graph: {0}")]
    Invalid(#[from] ValidationError),
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ValidationError {
    #[error("graph has no nodes")]
    NoNodes,
    #[error("node {0} has an empty name")]
    EmptyName(usize),
    #[error("duplicate node name {0:?}")]
    DuplicateName(String),
    #[error("edge {edge} references unknown node {node}")]
    UnknownNode { edge: usize, node: String },
    #[error("edge {edge} connects node {node} to itself")]
    SelfEdge { edge: usize, node: usize },
    #[error("edge {edge} duplicates the pair ({a}, {b})")]
    DuplicateEdge { edge: usize, a: usize, b: usize },
    #[error("edge {0} has an empty relation")]
    EmptyRelation(usize),
    #[error("{edges} edges exceed the {max} possible pairs of {nodes} nodes")]
    TooManyEdges { edges: usize, max: usize, nodes: usize },
    #[error("node {0} has a non-positive init_radius")]
    BadRadius(usize),
    #[error("node {0} has an init_center outside the scene bounds")]
    CenterOutOfBounds(usize),
}

#[derive(Deserialize)]
#[serde(untagged)]
enum NodeRef {
    Index(usize),
    Name(String),
}

#[derive(Deserialize)]
struct RawEdge {
    subject: NodeRef,
    object: NodeRef,
    relation: String,
}

#[derive(Deserialize)]
struct RawGraph {
    global_prompt: String,
    nodes: Vec<Node>,
    #[serde(default)]
    edges: Vec<RawEdge>,
}

/// Parses and validates a graph file against the default scene bounds.
pub fn parse_graph(source: &str) -> Result<SceneGraph, GraphError> {
    parse_graph_in(source, &Aabb::default())
}

pub fn parse_graph_in(source: &str, bounds: &Aabb) -> Result<SceneGraph, GraphError> {
    let raw: RawGraph = serde_json::from_str(source)?;
    let resolve = |edge: usize, r: &NodeRef, nodes: &[Node]| -> Result<usize, ValidationError> {
        match r {
            NodeRef::Index(i) if *i < nodes.len() => Ok(*i),
            NodeRef::Index(i) => Err(ValidationError::UnknownNode {
                edge,
                node: i.to_string(),
            }),
            NodeRef::Name(n) => nodes.iter().position(|x| &x.name == n).ok_or_else(|| {
                ValidationError::UnknownNode {
                    edge,
                    node: n.clone(),
                }
            }),
        }
    };
    let mut edges = Vec::with_capacity(raw.edges.len());
    for (k, e) in raw.edges.iter().enumerate() {
        let subject = resolve(k, &e.subject, &raw.nodes)?;
        let object = resolve(k, &e.object, &raw.nodes)?;
        edges.push((subject, object, e.relation.clone()));
    }
    Ok(SceneGraph::new(raw.global_prompt, raw.nodes, edges, bounds)?)
}

impl SceneGraph {
    /// Builds a graph from `(subject, object, relation)` triples, checking every invariant.
    pub fn new(
        global_prompt: String,
        nodes: Vec<Node>,
        edges: Vec<(usize, usize, String)>,
        bounds: &Aabb,
    ) -> Result<Self, ValidationError> {
        if nodes.is_empty() {
            return Err(ValidationError::NoNodes);
        }
        let mut names = HashSet::new();
        for (i, n) in nodes.iter().enumerate() {
            if n.name.trim().is_empty() {
                return Err(ValidationError::EmptyName(i));
            }
            if !names.insert(n.name.as_str()) {
                return Err(ValidationError::DuplicateName(n.name.clone()));
            }
            if let Some(r) = n.init_radius {
                if !(r > 0.0 && r.is_finite()) {
                    return Err(ValidationError::BadRadius(i));
                }
            }
            if let Some(c) = n.init_center {
                if !bounds.contains(c) {
                    return Err(ValidationError::CenterOutOfBounds(i));
                }
            }
        }
        let m = nodes.len();
        let max = m * (m - 1) / 2;
        if edges.len() > max {
            return Err(ValidationError::TooManyEdges {
                edges: edges.len(),
                max,
                nodes: m,
            });
        }
        let mut pairs = HashSet::new();
        let mut out = Vec::with_capacity(edges.len());
        let mut relations = Vec::with_capacity(edges.len());
        for (k, (a, b, rel)) in edges.into_iter().enumerate() {
            for x in [a, b] {
                if x >= m {
                    return Err(ValidationError::UnknownNode {
                        edge: k,
                        node: x.to_string(),
                    });
                }
            }
            if a == b {
                return Err(ValidationError::SelfEdge { edge: k, node: a });
            }
            if rel.trim().is_empty() {
                return Err(ValidationError::EmptyRelation(k));
            }
            if !pairs.insert((a.min(b), a.max(b))) {
                return Err(ValidationError::DuplicateEdge { edge: k, a, b });
            }
            out.push(Edge {
                subject: a,
                object: b,
                relation_index: k,
            });
            relations.push(rel);
        }
        Ok(Self {
            global_prompt,
            nodes,
            edges: out,
            relations,
        })
    }

    pub fn global_prompt(&self) -> &str {
        &self.global_prompt
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn relation(&self, edge: usize) -> &str {
        &self.relations[self.edges[edge].relation_index]
    }

    /// M.
    pub fn num_objects(&self) -> usize {
        self.nodes.len()
    }

    /// K.
    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// Indices of the edges touching `node`, in file order.
    pub fn incident_edges(&self, node: usize) -> Vec<usize> {
        self.edges
            .iter()
            .enumerate()
            .filter(|(_, e)| e.subject == node || e.object == node)
            .map(|(k, _)| k)
            .collect()
    }

    /// Serializes back to the graph-file schema (endpoints as indices).
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "global_prompt": self.global_prompt,
            "nodes": self.nodes,
            "edges": self.edges.iter().enumerate().map(|(k, e)| serde_json::json!({
                "subject": e.subject,
                "object": e.object,
                "relation": self.relation(k),
            })).collect::<Vec<_>>(),
        })
    }
}

/// How the two endpoint objects are spelled inside an edge prompt.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgePromptStyle {
    /// Name plus attributes, exactly the object prompt.
    #[default]
    Full,
    /// Node names only ("Wizard standing in front of Wooden Desk").
    BareNames,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgePrompt {
    pub subject: usize,
    pub object: usize,
    pub prompt: String,
}

/// The `1 + M + K` text prompts of a graph.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSet {
    pub global: String,
    pub objects: Vec<String>,
    pub edges: Vec<EdgePrompt>,
}

impl PromptSet {
    pub fn len(&self) -> usize {
        1 + self.objects.len() + self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Prompt of the edge joining `a` and `b`, in either orientation.
    pub fn edge(&self, a: usize, b: usize) -> Option<&str> {
        self.edges
            .iter()
            .find(|e| (e.subject, e.object) == (a, b) || (e.subject, e.object) == (b, a))
            .map(|e| e.prompt.as_str())
    }

    /// Every prompt, global first, then objects, then edges.
    pub fn all(&self) -> Vec<&str> {
        std::iter::once(self.global.as_str())
            .chain(self.objects.iter().map(String::as_str))
            .chain(self.edges.iter().map(|e| e.prompt.as_str()))
            .collect()
    }
}

pub fn object_prompt(node: &Node) -> String {
    std::iter::once(node.name.as_str())
        .chain(node.attributes.iter().map(String::as_str))
        .collect::<Vec<_>>()
        .join(", ")
}

pub fn decompose_prompts(graph: &SceneGraph, style: EdgePromptStyle) -> PromptSet {
    let objects: Vec<String> = graph.nodes.iter().map(object_prompt).collect();
    let spell = |i: usize| match style {
        EdgePromptStyle::Full => objects[i].clone(),
        EdgePromptStyle::BareNames => graph.nodes[i].name.clone(),
    };
    let edges = graph
        .edges
        .iter()
        .enumerate()
        .map(|(k, e)| EdgePrompt {
            subject: e.subject,
            object: e.object,
            prompt: format!("{} {} {}", spell(e.subject), graph.relation(k), spell(e.object)),
        })
        .collect();
    PromptSet {
        global: graph.global_prompt.clone(),
        objects,
        edges,
    }
}

/// What a training step renders and guides.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepKind {
    /// Object image of `object`, plus the edge image of `edge` (an index
    /// into [`SceneGraph::edges`]) when the node has any edges.
    ObjectAndEdge { object: usize, edge: Option<usize> },
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepPlan {
    pub step: u64,
    #[serde(flatten)]
    pub kind: StepKind,
}

impl StepPlan {
    /// Number of guidance injections this plan calls for.
    pub fn sds_count(&self) -> usize {
        match self.kind {
            StepKind::ObjectAndEdge { edge: Some(_), .. } => 2,
            StepKind::ObjectAndEdge { edge: None, .. } => 1,
            StepKind::Global => 1,
        }
    }

    pub fn label(&self, graph: &SceneGraph) -> String {
        match self.kind {
            StepKind::ObjectAndEdge { object, edge: Some(k) } => {
                let e = graph.edges()[k];
                format!("object {object} + edge ({},{})", e.subject, e.object)
            }
            StepKind::ObjectAndEdge { object, edge: None } => format!("object {object}"),
            StepKind::Global => "global".to_string(),
        }
    }
}

/// Plan for step `s`: residue `M` of `s mod (M+1)` is the global step, residue
/// `i < M` guides object `i` and its next incident edge. `counters[i]` is how
/// many times node `i` has been scheduled before.
pub fn build_step_plan(graph: &SceneGraph, step: u64, counters: &[u64]) -> StepPlan {
    let m = graph.num_objects() as u64;
    let residue = step % (m + 1);
    let kind = if residue == m {
        StepKind::Global
    } else {
        let object = residue as usize;
        let incident = graph.incident_edges(object);
        let edge = if incident.is_empty() {
            None
        } else {
            let c = counters.get(object).copied().unwrap_or(0);
            Some(incident[(c % incident.len() as u64) as usize])
        };
        StepKind::ObjectAndEdge { object, edge }
    };
    StepPlan { step, kind }
}

/// Stateful schedule that advances the per-node edge rotation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeSchedule {
    counters: Vec<u64>,
}

impl EdgeSchedule {
    pub fn new(graph: &SceneGraph) -> Self {
        Self {
            counters: vec![0; graph.num_objects()],
        }
    }

    pub fn from_counters(counters: Vec<u64>) -> Self {
        Self { counters }
    }

    pub fn counters(&self) -> &[u64] {
        &self.counters
    }

    pub fn next(&mut self, graph: &SceneGraph, step: u64) -> StepPlan {
        let plan = build_step_plan(graph, step, &self.counters);
        if let StepKind::ObjectAndEdge { object, .. } = plan.kind {
            self.counters[object] += 1;
        }
        plan
    }
}

/// The first `steps` plans of a fresh schedule.
pub fn plan_sequence(graph: &SceneGraph, steps: u64) -> Vec<StepPlan> {
    let mut sched = EdgeSchedule::new(graph);
    (0..steps).map(|s| sched.next(graph, s)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) const WIZARD: &str = include_str!("../assets/wizard.json");

    fn two_nodes() -> SceneGraph {
        parse_graph(
            r#"{"global_prompt": "a cat on a mat",
                "nodes": [{"name": "Cat", "attributes": ["fluffy"]}, {"name": "Mat"}],
                "edges": [{"subject": "Cat", "object": "Mat", "relation": "sitting on"}]}"#,
        )
        .unwrap()
    }

    #[test]
    fn wizard_counts() {
        let g = parse_graph(WIZARD).unwrap();
        assert_eq!((g.num_objects(), g.num_edges()), (4, 3));
        let p = decompose_prompts(&g, EdgePromptStyle::BareNames);
        assert_eq!(p.len(), 8);
        assert_eq!(p.edge(0, 1), Some("Wizard standing in front of Wooden Desk"));
        assert_eq!(p.objects[0], "Wizard, wise-looking");
    }

    #[test]
    fn minimal_graph() {
        let g = parse_graph(r#"{"global_prompt": "a sphere", "nodes": [{"name": "Sphere"}]}"#).unwrap();
        assert_eq!((g.num_objects(), g.num_edges()), (1, 0));
    }

    #[test]
    fn validation_errors() {
        let bad = |s: &str| match parse_graph(s) {
            Err(GraphError::Invalid(e)) => e,
            other => panic!("expected validation error, got {other:?}"),
        };
        let e = bad(r#"{"global_prompt": "", "nodes": [{"name": "Dog"}, {"name": "Mat"}],
                "edges": [{"subject": "Cat", "object": "Mat", "relation": "on"}]}"#);
        assert!(matches!(e, ValidationError::UnknownNode { ref node, .. } if node == "Cat"));
        let e = bad(r#"{"global_prompt": "", "nodes": [{"name": "A"}],
                "edges": [{"subject": 0, "object": 0, "relation": "on"}]}"#);
        assert!(matches!(e, ValidationError::TooManyEdges { .. }));
        let e = bad(r#"{"global_prompt": "", "nodes": [{"name": "A"}, {"name": "B"}, {"name": "C"}],
                "edges": [{"subject": 0, "object": 0, "relation": "on"}]}"#);
        assert!(matches!(e, ValidationError::SelfEdge { .. }));
        let e = bad(r#"{"global_prompt": "", "nodes": [{"name": "A"}, {"name": "B"}, {"name": "C"}],
                "edges": [{"subject": 0, "object": 1, "relation": "on"},
                          {"subject": "B", "object": "A", "relation": "under"}]}"#);
        assert!(matches!(e, ValidationError::DuplicateEdge { .. }));
        let e = bad(r#"{"global_prompt": "", "nodes": [{"name": "A"}, {"name": "A"}]}"#);
        assert_eq!(e, ValidationError::DuplicateName("A".into()));
        let e = bad(r#"{"global_prompt": "", "nodes": []}"#);
        assert_eq!(e, ValidationError::NoNodes);
        let e = bad(r#"{"global_prompt": "", "nodes": [{"name": "A", "init_radius": -1}]}"#);
        assert_eq!(e, ValidationError::BadRadius(0));
        let e = bad(r#"{"global_prompt": "", "nodes": [{"name": "A", "init_center": [3, 0, 0]}]}"#);
        assert_eq!(e, ValidationError::CenterOutOfBounds(0));
        let e = bad(r#"{"global_prompt": "", "nodes": [{"name": "A"}, {"name": "B"}],
                "edges": [{"subject": 0, "object": 5, "relation": "on"}]}"#);
        assert!(matches!(e, ValidationError::UnknownNode { .. }));
        assert!(matches!(parse_graph("{nodes: ]"), Err(GraphError::Syntax(_))));
    }

    #[test]
    fn prompt_styles() {
        let g = two_nodes();
        let full = decompose_prompts(&g, EdgePromptStyle::Full);
        assert_eq!(full.edges[0].prompt, "Cat, fluffy sitting on Mat");
        let bare = decompose_prompts(&g, EdgePromptStyle::BareNames);
        assert_eq!(bare.edges[0].prompt, "Cat sitting on Mat");
        assert_eq!(full.len(), 4);
    }

    #[test]
    fn schedule_two_nodes() {
        let g = two_nodes();
        let kinds: Vec<_> = plan_sequence(&g, 4).into_iter().map(|p| p.kind).collect();
        assert_eq!(
            kinds,
            vec![
                StepKind::ObjectAndEdge { object: 0, edge: Some(0) },
                StepKind::ObjectAndEdge { object: 1, edge: Some(0) },
                StepKind::Global,
                StepKind::ObjectAndEdge { object: 0, edge: Some(0) },
            ]
        );
    }

    #[test]
    fn schedule_single_node() {
        let g = parse_graph(r#"{"global_prompt": "s", "nodes": [{"name": "Sphere"}]}"#).unwrap();
        let kinds: Vec<_> = plan_sequence(&g, 2).into_iter().map(|p| p.kind).collect();
        assert_eq!(
            kinds,
            vec![StepKind::ObjectAndEdge { object: 0, edge: None }, StepKind::Global]
        );
    }

    #[test]
    fn edges_alternate_for_a_hub_node() {
        let g = parse_graph(WIZARD).unwrap();
        // Wooden Desk (node 1) touches all three edges.
        let deg = g.incident_edges(1);
        assert_eq!(deg.len(), 3);
        let picks: Vec<_> = plan_sequence(&g, 5 * 6)
            .into_iter()
            .filter_map(|p| match p.kind {
                StepKind::ObjectAndEdge { object: 1, edge } => edge,
                _ => None,
            })
            .collect();
        assert_eq!(picks, vec![0, 1, 2, 0, 1, 2]);
    }

    fn random_graph() -> impl Strategy<Value = SceneGraph> {
        (1usize..7)
            .prop_flat_map(|m| {
                let pairs: Vec<(usize, usize)> =
                    (0..m).flat_map(|a| (a + 1..m).map(move |b| (a, b))).collect();
                let n = pairs.len();
                (Just(m), Just(pairs), proptest::collection::vec(any::<bool>(), n), any::<bool>())
            })
            .prop_map(|(m, pairs, keep, flip)| {
                let nodes = (0..m)
                    .map(|i| Node {
                        name: format!("obj{i}"),
                        attributes: (0..i % 3).map(|k| format!("attr{k}")).collect(),
                        init_center: None,
                        init_radius: None,
                    })
                    .collect();
                let edges = pairs
                    .into_iter()
                    .zip(keep)
                    .filter(|(_, k)| *k)
                    .map(|((a, b), _)| if flip { (b, a, "near".to_string()) } else { (a, b, "near".to_string()) })
                    .collect();
                SceneGraph::new("scene".into(), nodes, edges, &Aabb::default()).unwrap()
            })
    }

    proptest! {
        #[test]
        fn prompt_count_is_one_plus_m_plus_k(g in random_graph()) {
            let p = decompose_prompts(&g, EdgePromptStyle::Full);
            prop_assert_eq!(p.len(), 1 + g.num_objects() + g.num_edges());
            prop_assert_eq!(p.clone(), decompose_prompts(&g, EdgePromptStyle::Full));
        }

        #[test]
        fn every_window_has_each_object_once(g in random_graph(), start in 0u64..40) {
            let m = g.num_objects() as u64;
            let plans = plan_sequence(&g, start + m + 1);
            let window = &plans[start as usize..];
            let globals = window.iter().filter(|p| p.kind == StepKind::Global).count();
            prop_assert_eq!(globals, 1);
            let mut seen: Vec<usize> = window.iter().filter_map(|p| match p.kind {
                StepKind::ObjectAndEdge { object, edge } => {
                    // an edge is present exactly when the node has one
                    assert_eq!(edge.is_some(), !g.incident_edges(object).is_empty());
                    Some(object)
                }
                StepKind::Global => None,
            }).collect();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..m as usize).collect::<Vec<_>>());
        }

        #[test]
        fn round_robin_is_fair(g in random_graph(), rounds in 1u64..4) {
            let m = g.num_objects() as u64;
            for node in 0..g.num_objects() {
                let inc = g.incident_edges(node);
                if inc.is_empty() { continue; }
                let steps = rounds * inc.len() as u64 * (m + 1);
                let mut counts = vec![0u64; g.num_edges()];
                for p in plan_sequence(&g, steps) {
                    if let StepKind::ObjectAndEdge { object, edge: Some(e) } = p.kind {
                        if object == node { counts[e] += 1; }
                    }
                }
                for e in inc {
                    prop_assert_eq!(counts[e], rounds);
                }
            }
        }
    }
}
