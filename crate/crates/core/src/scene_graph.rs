//! Scene graphs: the contextual state that update programs act on.
//!
//! A [`SceneGraph`] holds identified nodes (name, attribute set, optional
//! bounding box) and directed predicate edges. All labels are normalized on
//! the way in (lowercase, trimmed, internal whitespace collapsed), so label
//! equality is plain string equality everywhere else in the crate.
//!
//! The textual context format produced by [`render_context`] is:
//!
//! ```text
//! Nodes:
//! 0: table (blue)
//! 1: chair
//! Edges:
//! 1 -> 0: near
//! ```
//!
//! An empty graph renders as `Empty Context`. The `Edges:` section is omitted
//! when the graph has no edges. Scene ids and bounding boxes are not part of
//! the rendered text.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Characters that may not appear in names, attributes or predicates. They
/// delimit fields in the context format and the update language.
pub const RESERVED_CHARS: &[char] = &[',', '(', ')', '[', ']', ';'];

/// Rendering of a graph with no nodes.
pub const EMPTY_CONTEXT: &str = "Empty Context";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u64);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// Node-id relabeling. When used with a graph it must be a bijection over
/// that graph's node ids.
pub type IdMap = BTreeMap<NodeId, NodeId>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GraphError {
    #[error("empty {kind}")]
    EmptyLabel { kind: &'static str },
    #[error("{kind} {label:?} contains reserved character {ch:?}")]
    ReservedChar {
        kind: &'static str,
        label: String,
        ch: char,
    },
    #[error("duplicate node id {0}")]
    DuplicateNode(NodeId),
    #[error("edge endpoint {0} does not exist")]
    DanglingEndpoint(NodeId),
    #[error("node {0} does not exist")]
    UnknownNode(NodeId),
    #[error("invalid bounding box [{x}, {y}, {width}, {height}]")]
    InvalidBBox { x: f64, y: f64, width: f64, height: f64 },
    #[error("id map is not a bijection over the graph's node ids: {0}")]
    NotABijection(String),
}

/// Lowercases, trims and collapses internal whitespace.
pub fn normalize(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for word in s.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.extend(word.chars().flat_map(char::to_lowercase));
    }
    out
}

/// Normalizes a label and checks it against the label invariants.
pub fn normalize_label(kind: &'static str, raw: &str) -> Result<String, GraphError> {
    let label = normalize(raw);
    if label.is_empty() {
        return Err(GraphError::EmptyLabel { kind });
    }
    if let Some(ch) = label.chars().find(|c| RESERVED_CHARS.contains(c)) {
        return Err(GraphError::ReservedChar { kind, label, ch });
    }
    Ok(label)
}

/// Axis-aligned box in pixels: top-left corner plus positive extent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x: f64,
    y: f64,
    width: f64,
    height: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, width: f64, height: f64) -> Result<Self, GraphError> {
        let ok = [x, y, width, height].iter().all(|v| v.is_finite()) && width > 0.0 && height > 0.0;
        if !ok {
            return Err(GraphError::InvalidBBox { x, y, width, height });
        }
        Ok(Self { x, y, width, height })
    }

    pub fn x(&self) -> f64 {
        self.x
    }
    pub fn y(&self) -> f64 {
        self.y
    }
    pub fn width(&self) -> f64 {
        self.width
    }
    pub fn height(&self) -> f64 {
        self.height
    }

    pub fn area(&self) -> f64 {
        self.width * self.height
    }

    /// Area of the overlap with `other` (zero when disjoint or touching).
    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = (self.x + self.width).min(other.x + other.width) - self.x.max(other.x);
        let h = (self.y + self.height).min(other.y + other.height) - self.y.max(other.y);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = GraphError;
    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.width, b.height]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    id: NodeId,
    name: String,
    attributes: BTreeSet<String>,
    bbox: Option<BBox>,
}

impl Node {
    pub fn new(id: NodeId, name: &str) -> Result<Self, GraphError> {
        Ok(Self {
            id,
            name: normalize_label("node name", name)?,
            attributes: BTreeSet::new(),
            bbox: None,
        })
    }

    pub fn with_attributes<I, S>(mut self, attributes: I) -> Result<Self, GraphError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        for a in attributes {
            self.insert_attribute(a.as_ref())?;
        }
        Ok(self)
    }

    pub fn with_bbox(mut self, bbox: Option<BBox>) -> Self {
        self.bbox = bbox;
        self
    }

    /// Returns `true` if the attribute was not already present.
    pub(crate) fn insert_attribute(&mut self, raw: &str) -> Result<bool, GraphError> {
        let a = normalize_label("attribute", raw)?;
        Ok(self.attributes.insert(a))
    }

    pub fn id(&self) -> NodeId {
        self.id
    }
    pub fn name(&self) -> &str {
        &self.name
    }
    /// Attributes in lexicographic order.
    pub fn attributes(&self) -> &BTreeSet<String> {
        &self.attributes
    }
    pub fn bbox(&self) -> Option<BBox> {
        self.bbox
    }

    /// Descriptive phrase: sorted attributes followed by the name,
    /// e.g. `"blue vibrant table"`.
    pub fn phrase(&self) -> String {
        let mut words: Vec<&str> = self.attributes.iter().map(String::as_str).collect();
        words.push(&self.name);
        words.join(" ")
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Edge {
    source: NodeId,
    target: NodeId,
    predicate: String,
}

impl Edge {
    pub fn new(source: NodeId, target: NodeId, predicate: &str) -> Result<Self, GraphError> {
        Ok(Self {
            source,
            target,
            predicate: normalize_label("predicate", predicate)?,
        })
    }

    pub fn source(&self) -> NodeId {
        self.source
    }
    pub fn target(&self) -> NodeId {
        self.target
    }
    pub fn predicate(&self) -> &str {
        &self.predicate
    }
}

/// Contextual state: nodes keyed by id plus a set of directed edges.
///
/// Every edge endpoint resolves to a node of the graph; the mutating methods
/// refuse anything that would break that.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SceneGraphRecord", into = "SceneGraphRecord")]
pub struct SceneGraph {
    scene_id: String,
    nodes: BTreeMap<NodeId, Node>,
    edges: BTreeSet<Edge>,
}

impl SceneGraph {
    pub fn new(scene_id: impl Into<String>) -> Self {
        Self {
            scene_id: scene_id.into(),
            ..Self::default()
        }
    }

    pub fn with_node(mut self, node: Node) -> Result<Self, GraphError> {
        self.add_node(node)?;
        Ok(self)
    }

    pub fn with_edge(mut self, edge: Edge) -> Result<Self, GraphError> {
        self.add_edge(edge)?;
        Ok(self)
    }

    pub fn with_scene_id(mut self, scene_id: impl Into<String>) -> Self {
        self.scene_id = scene_id.into();
        self
    }

    pub fn add_node(&mut self, node: Node) -> Result<(), GraphError> {
        if self.nodes.contains_key(&node.id) {
            return Err(GraphError::DuplicateNode(node.id));
        }
        self.nodes.insert(node.id, node);
        Ok(())
    }

    /// Returns `true` if the edge was new.
    pub fn add_edge(&mut self, edge: Edge) -> Result<bool, GraphError> {
        for end in [edge.source, edge.target] {
            if !self.nodes.contains_key(&end) {
                return Err(GraphError::DanglingEndpoint(end));
            }
        }
        Ok(self.edges.insert(edge))
    }

    /// Unions attributes onto an existing node; returns how many were new.
    pub fn add_attributes<I, S>(&mut self, id: NodeId, attributes: I) -> Result<usize, GraphError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let node = self.nodes.get_mut(&id).ok_or(GraphError::UnknownNode(id))?;
        // Validate everything before touching the node.
        let labels = attributes
            .into_iter()
            .map(|a| normalize_label("attribute", a.as_ref()))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(labels.into_iter().filter(|a| node.attributes.insert(a.clone())).count())
    }

    pub fn scene_id(&self) -> &str {
        &self.scene_id
    }
    pub fn node(&self, id: NodeId) -> Option<&Node> {
        self.nodes.get(&id)
    }
    pub fn contains_node(&self, id: NodeId) -> bool {
        self.nodes.contains_key(&id)
    }
    pub fn contains_edge(&self, edge: &Edge) -> bool {
        self.edges.contains(edge)
    }
    /// Nodes in ascending id order.
    pub fn nodes(&self) -> impl Iterator<Item = &Node> + '_ {
        self.nodes.values()
    }
    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes.keys().copied()
    }
    /// Edges ordered by (source, target, predicate).
    pub fn edges(&self) -> impl Iterator<Item = &Edge> + '_ {
        self.edges.iter()
    }
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }
    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }
    pub fn attribute_count(&self) -> usize {
        self.nodes.values().map(|n| n.attributes.len()).sum()
    }
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Graph with every bounding box removed.
    pub fn without_bboxes(&self) -> SceneGraph {
        let mut g = self.clone();
        for n in g.nodes.values_mut() {
            n.bbox = None;
        }
        g
    }

    /// True if every node, attribute and edge of `prior` is present here
    /// under the same node id.
    pub fn is_additive_superset_of(&self, prior: &SceneGraph) -> bool {
        self.additive_violation(prior).is_none()
    }

    /// First reason `self` fails to extend `prior`, if any.
    pub fn additive_violation(&self, prior: &SceneGraph) -> Option<String> {
        for p in prior.nodes() {
            let Some(n) = self.node(p.id) else {
                return Some(format!("node {} is missing", p.id));
            };
            if n.name != p.name {
                return Some(format!("node {} renamed from {:?} to {:?}", p.id, p.name, n.name));
            }
            if let Some(a) = p.attributes.difference(&n.attributes).next() {
                return Some(format!("node {} lost attribute {a:?}", p.id));
            }
        }
        prior
            .edges()
            .find(|e| !self.contains_edge(e))
            .map(|e| format!("edge {} -> {}: {} is missing", e.source, e.target, e.predicate))
    }

    /// Applies a node-id bijection, producing a new graph.
    pub fn relabel(&self, map: &IdMap) -> Result<SceneGraph, GraphError> {
        check_bijection(self, map)?;
        let mut out = SceneGraph::new(self.scene_id.clone());
        for n in self.nodes() {
            let mut n = n.clone();
            n.id = map[&n.id];
            out.add_node(n)?;
        }
        for e in self.edges() {
            out.add_edge(Edge {
                source: map[&e.source],
                target: map[&e.target],
                predicate: e.predicate.clone(),
            })?;
        }
        Ok(out)
    }
}

fn check_bijection(graph: &SceneGraph, map: &IdMap) -> Result<(), GraphError> {
    if map.len() != graph.node_count() {
        return Err(GraphError::NotABijection(format!(
            "map has {} entries, graph has {} nodes",
            map.len(),
            graph.node_count()
        )));
    }
    if let Some(id) = graph.node_ids().find(|id| !map.contains_key(id)) {
        return Err(GraphError::NotABijection(format!("node {id} is not mapped")));
    }
    let mut seen = BTreeSet::new();
    if let Some(v) = map.values().find(|v| !seen.insert(**v)) {
        return Err(GraphError::NotABijection(format!("id {v} is the image of two nodes")));
    }
    Ok(())
}

/// Renders the textual context representation, optionally through an id map.
pub fn render_context(graph: &SceneGraph, id_map: Option<&IdMap>) -> Result<String, GraphError> {
    if graph.is_empty() {
        return Ok(EMPTY_CONTEXT.to_string());
    }
    let relabeled;
    let g = match id_map {
        Some(map) => {
            relabeled = graph.relabel(map)?;
            &relabeled
        }
        None => graph,
    };
    let mut out = String::from("Nodes:");
    for n in g.nodes() {
        out.push('\n');
        out.push_str(&format!("{}: {}", n.id, n.name));
        if !n.attributes.is_empty() {
            let attrs: Vec<&str> = n.attributes.iter().map(String::as_str).collect();
            out.push_str(&format!(" ({})", attrs.join(", ")));
        }
    }
    if g.edge_count() > 0 {
        out.push_str("\nEdges:");
        for e in g.edges() {
            out.push_str(&format!("\n{} -> {}: {}", e.source, e.target, e.predicate));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("line {line}: {kind}")]
pub struct ContextParseError {
    /// 1-based line number.
    pub line: usize,
    pub kind: ContextErrorKind,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ContextErrorKind {
    #[error("malformed line: {0}")]
    Malformed(String),
    #[error("edge endpoint {0} does not exist")]
    DanglingEndpoint(NodeId),
    #[error("duplicate node id {0}")]
    DuplicateNode(NodeId),
    #[error(transparent)]
    Label(GraphError),
}

impl From<GraphError> for ContextErrorKind {
    fn from(e: GraphError) -> Self {
        match e {
            GraphError::DanglingEndpoint(id) => ContextErrorKind::DanglingEndpoint(id),
            GraphError::DuplicateNode(id) => ContextErrorKind::DuplicateNode(id),
            other => ContextErrorKind::Label(other),
        }
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Section {
    Start,
    Nodes,
    Edges,
}

/// Parses the textual context format back into a graph (with an empty scene
/// id). Accepts a single trailing newline.
pub fn parse_context(text: &str) -> Result<SceneGraph, ContextParseError> {
    let text = text.strip_suffix('\n').unwrap_or(text);
    if text == EMPTY_CONTEXT {
        return Ok(SceneGraph::default());
    }
    let mut graph = SceneGraph::default();
    let mut section = Section::Start;
    for (i, line) in text.split('\n').enumerate() {
        let err = |kind: ContextErrorKind| ContextParseError { line: i + 1, kind };
        let malformed = |msg: &str| err(ContextErrorKind::Malformed(msg.to_string()));
        match (section, line) {
            (Section::Start, "Nodes:") => section = Section::Nodes,
            (Section::Start | Section::Nodes, "Edges:") => section = Section::Edges,
            (Section::Start, _) => return Err(malformed("expected \"Nodes:\" header")),
            (Section::Nodes, _) => {
                let node = parse_node_line(line).map_err(malformed)?;
                let node = node.map_err(|e| err(e.into()))?;
                graph.add_node(node).map_err(|e| err(e.into()))?;
            }
            (Section::Edges, _) => {
                let edge = parse_edge_line(line).map_err(malformed)?;
                let edge = edge.map_err(|e| err(e.into()))?;
                graph.add_edge(edge).map_err(|e| err(e.into()))?;
            }
        }
    }
    Ok(graph)
}

type LineResult<T> = Result<Result<T, GraphError>, &'static str>;

fn parse_id(s: &str) -> Result<NodeId, &'static str> {
    let s = s.trim();
    if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) {
        return Err("node id is not a non-negative integer");
    }
    s.parse().map(NodeId).map_err(|_| "node id out of range")
}

fn parse_node_line(line: &str) -> LineResult<Node> {
    let (id, rest) = line.split_once(':').ok_or("expected \"id: name\"")?;
    let id = parse_id(id)?;
    let rest = rest.trim();
    let (name, attrs) = match rest.strip_suffix(')') {
        Some(body) => {
            let open = body.rfind('(').ok_or("unbalanced parenthesis")?;
            let inner = &body[open + 1..];
            if inner.trim().is_empty() {
                return Err("empty attribute list");
            }
            (&body[..open], inner.split(',').collect::<Vec<_>>())
        }
        None => (rest, Vec::new()),
    };
    Ok(Node::new(id, name).and_then(|n| n.with_attributes(attrs)))
}

fn parse_edge_line(line: &str) -> LineResult<Edge> {
    let (src, rest) = line.split_once("->").ok_or("expected \"src -> tgt: predicate\"")?;
    let (tgt, predicate) = rest.split_once(':').ok_or("expected \"src -> tgt: predicate\"")?;
    Ok(Edge::new(parse_id(src)?, parse_id(tgt)?, predicate))
}

/// Seeded random relabeling onto the contiguous range `0..n`. The same seed
/// always yields the same map.
pub fn random_id_assignment(graph: &SceneGraph, seed: u64) -> IdMap {
    let mut targets: Vec<u64> = (0..graph.node_count() as u64).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    targets.shuffle(&mut rng);
    graph.node_ids().zip(targets.into_iter().map(NodeId)).collect()
}

#[derive(Serialize, Deserialize)]
struct NodeRecord {
    id: u64,
    name: String,
    #[serde(default)]
    attributes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bbox: Option<BBox>,
}

#[derive(Serialize, Deserialize)]
struct EdgeRecord {
    source: u64,
    target: u64,
    predicate: String,
}

/// Wire form of a scene graph (one JSON object per JSONL line).
#[derive(Serialize, Deserialize)]
struct SceneGraphRecord {
    #[serde(default)]
    scene_id: String,
    #[serde(default)]
    nodes: Vec<NodeRecord>,
    #[serde(default)]
    edges: Vec<EdgeRecord>,
}

impl TryFrom<SceneGraphRecord> for SceneGraph {
    type Error = GraphError;
    fn try_from(r: SceneGraphRecord) -> Result<Self, Self::Error> {
        let mut g = SceneGraph::new(r.scene_id);
        for n in r.nodes {
            g.add_node(
                Node::new(NodeId(n.id), &n.name)?
                    .with_attributes(&n.attributes)?
                    .with_bbox(n.bbox),
            )?;
        }
        for e in r.edges {
            g.add_edge(Edge::new(NodeId(e.source), NodeId(e.target), &e.predicate)?)?;
        }
        Ok(g)
    }
}

impl From<SceneGraph> for SceneGraphRecord {
    fn from(g: SceneGraph) -> Self {
        SceneGraphRecord {
            scene_id: g.scene_id,
            nodes: g
                .nodes
                .into_values()
                .map(|n| NodeRecord {
                    id: n.id.0,
                    name: n.name,
                    attributes: n.attributes.into_iter().collect(),
                    bbox: n.bbox,
                })
                .collect(),
            edges: g
                .edges
                .into_iter()
                .map(|e| EdgeRecord {
                    source: e.source.0,
                    target: e.target.0,
                    predicate: e.predicate,
                })
                .collect(),
        }
    }
}
