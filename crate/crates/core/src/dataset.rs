//! Curation of annotated scenes into update samples.
//!
//! Raw scenes go through [`standardize`], [`dedup_nodes`] and
//! [`filter_graphs`], are converted with [`to_scene_graph`], and are then cut
//! into (prior, reference) pairs by [`sample_context_pairs`].
//! [`kmeans_representatives`] picks one sample per cluster for small
//! evaluation subsets.

use std::collections::{BTreeMap, BTreeSet};
use std::io::BufRead;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::formal_language::{canonicalize, ParseProgram};
use crate::io::JsonlError;
use crate::scene_graph::{normalize, BBox, Edge, GraphError, Node, NodeId, SceneGraph, RESERVED_CHARS};
use crate::similarity::{SimilarityError, SimilarityProvider};

/// Flag set by [`standardize`] when no part-of-speech lexicon was supplied.
pub const POS_UNFILTERED: &str = "pos-unfiltered";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawNode {
    pub id: u64,
    pub name: String,
    #[serde(default)]
    pub attributes: Vec<String>,
    pub bbox: Option<BBox>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawEdge {
    pub source: u64,
    pub target: u64,
    pub predicate: String,
}

/// A scene as annotated, before curation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RawScene {
    pub scene_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    pub nodes: Vec<RawNode>,
    #[serde(default)]
    pub edges: Vec<RawEdge>,
    /// Duplicate nodes merged so far.
    #[serde(default)]
    pub merged_count: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

impl RawScene {
    fn flag(&mut self, flag: &str) {
        if !self.flags.iter().any(|f| f == flag) {
            self.flags.push(flag.to_string());
        }
    }

    fn retain_valid_edges(&mut self) {
        let ids: BTreeSet<u64> = self.nodes.iter().map(|n| n.id).collect();
        let mut seen = BTreeSet::new();
        self.edges.retain(|e| {
            ids.contains(&e.source) && ids.contains(&e.target) && seen.insert((e.source, e.target, e.predicate.clone()))
        });
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurationConfig {
    pub iou_threshold: f64,
    pub name_sim_threshold: f64,
    pub attr_merge_threshold: f64,
    pub min_nodes: usize,
    pub min_edges: usize,
    /// Extra nodes and edges required per merged duplicate.
    pub dup_size_penalty: usize,
    pub min_term_count: usize,
    pub max_words_per_element: usize,
}

impl Default for CurationConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            name_sim_threshold: 0.7,
            attr_merge_threshold: 0.7,
            min_nodes: 4,
            min_edges: 4,
            dup_size_penalty: 1,
            min_term_count: 2,
            max_words_per_element: 3,
        }
    }
}

impl CurationConfig {
    pub fn validate(&self) -> Result<(), DatasetError> {
        for (name, v) in [
            ("iou_threshold", self.iou_threshold),
            ("name_sim_threshold", self.name_sim_threshold),
            ("attr_merge_threshold", self.attr_merge_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(DatasetError::InvalidArgument(format!(
                    "{name} must lie in [0, 1], got {v}"
                )));
            }
        }
        if self.min_term_count == 0 || self.max_words_per_element == 0 {
            return Err(DatasetError::InvalidArgument(
                "min_term_count and max_words_per_element must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Token to part-of-speech tag, from an external tagger.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PosLexicon(BTreeMap<String, String>);

#[derive(Deserialize)]
struct PosRecord {
    token: String,
    tag: String,
}

const NOUN_TAGS: &[&str] = &["NN", "NNS", "NNP", "NNPS", "NOUN", "PROPN"];

impl PosLexicon {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, token: &str, tag: &str) {
        self.0.insert(normalize(token), tag.trim().to_string());
    }

    pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Self, JsonlError> {
        let mut lex = Self::new();
        for (_, r) in crate::io::read_jsonl::<PosRecord, _>(reader)? {
            lex.insert(&r.token, &r.tag);
        }
        Ok(lex)
    }

    /// Whole phrase first, else its last word (the head of a short phrase).
    pub fn tag_of(&self, phrase: &str) -> Option<&str> {
        self.0
            .get(phrase)
            .or_else(|| phrase.rsplit(' ').next().and_then(|w| self.0.get(w)))
            .map(String::as_str)
    }

    pub fn is_noun(&self, phrase: &str) -> bool {
        self.tag_of(phrase)
            .is_some_and(|t| NOUN_TAGS.contains(&t.to_ascii_uppercase().as_str()))
    }
}

/// Label cleanup used by [`standardize`]: reserved characters become spaces,
/// then the usual normalization applies.
pub fn clean_label(raw: &str) -> String {
    let replaced: String = raw
        .chars()
        .map(|c| if RESERVED_CHARS.contains(&c) { ' ' } else { c })
        .collect();
    normalize(&replaced)
}

fn word_count(s: &str) -> usize {
    s.split(' ').filter(|w| !w.is_empty()).count()
}

/// Normalizes strings, drops overlong or empty elements, removes noun-tagged
/// attributes and predicates, and merges near-duplicate attributes on a node
/// (keeping the shorter string).
pub fn standardize(
    raw: &RawScene,
    cfg: &CurationConfig,
    provider: &dyn SimilarityProvider,
    pos: Option<&PosLexicon>,
) -> Result<RawScene, DatasetError> {
    let mut out = raw.clone();
    let max_words = cfg.max_words_per_element;
    let ok = |s: &str| !s.is_empty() && word_count(s) <= max_words;

    out.nodes.retain_mut(|n| {
        n.name = clean_label(&n.name);
        ok(&n.name)
    });
    for node in &mut out.nodes {
        let mut attrs: Vec<String> = node
            .attributes
            .iter()
            .map(|a| clean_label(a))
            .filter(|a| ok(a) && !pos.is_some_and(|p| p.is_noun(a)))
            .collect();
        attrs.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
        attrs.dedup();
        let mut kept: Vec<String> = Vec::with_capacity(attrs.len());
        for a in attrs {
            let mut absorbed = false;
            for k in &kept {
                if provider.similarity(k, &a)? >= cfg.attr_merge_threshold {
                    absorbed = true;
                    break;
                }
            }
            if !absorbed {
                kept.push(a);
            }
        }
        kept.sort();
        node.attributes = kept;
    }
    out.edges.retain_mut(|e| {
        e.predicate = clean_label(&e.predicate);
        ok(&e.predicate) && !pos.is_some_and(|p| p.is_noun(&e.predicate))
    });
    out.retain_valid_edges();
    if pos.is_none() {
        out.flag(POS_UNFILTERED);
    }
    Ok(out)
}

/// Intersection over union of two boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

fn find(parent: &mut [usize], i: usize) -> usize {
    let mut r = i;
    while parent[r] != r {
        r = parent[r];
    }
    let mut i = i;
    while parent[i] != r {
        let next = parent[i];
        parent[i] = r;
        i = next;
    }
    r
}

/// Merges nodes whose boxes overlap with IoU ≥ `iou_threshold` and whose
/// names score ≥ `name_sim_threshold`, repeating until nothing qualifies.
/// Nodes without a box never merge. Returns the scene and the number of
/// merges performed in this call (also added to `merged_count`).
pub fn dedup_nodes(
    scene: &RawScene,
    cfg: &CurationConfig,
    provider: &dyn SimilarityProvider,
) -> Result<(RawScene, usize), DatasetError> {
    let mut out = scene.clone();
    out.nodes.sort_by_key(|n| n.id);
    let mut merges = 0;
    loop {
        let n = out.nodes.len();
        let mut parent: Vec<usize> = (0..n).collect();
        let mut any = false;
        for i in 0..n {
            for j in i + 1..n {
                let (a, b) = (&out.nodes[i], &out.nodes[j]);
                let (Some(ba), Some(bb)) = (a.bbox, b.bbox) else {
                    continue;
                };
                if iou(&ba, &bb) >= cfg.iou_threshold
                    && provider.similarity(&a.name, &b.name)? >= cfg.name_sim_threshold
                {
                    let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                    if ri != rj {
                        parent[ri.max(rj)] = ri.min(rj);
                        any = true;
                    }
                }
            }
        }
        if !any {
            break;
        }
        let mut name_freq: BTreeMap<&str, usize> = BTreeMap::new();
        for node in &out.nodes {
            *name_freq.entry(node.name.as_str()).or_default() += 1;
        }
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for i in 0..n {
            groups.entry(find(&mut parent, i)).or_default().push(i);
        }
        let mut redirect: BTreeMap<u64, u64> = BTreeMap::new();
        let mut merged_nodes = Vec::with_capacity(groups.len());
        for members in groups.values() {
            let survivor_id = out.nodes[members[0]].id;
            let name = members
                .iter()
                .map(|&i| out.nodes[i].name.as_str())
                .min_by(|a, b| {
                    name_freq[b]
                        .cmp(&name_freq[a])
                        .then(a.len().cmp(&b.len()))
                        .then(a.cmp(b))
                })
                .expect("non-empty group")
                .to_string();
            let bbox = members
                .iter()
                .map(|&i| &out.nodes[i])
                .find(|n| n.name == name)
                .and_then(|n| n.bbox);
            let attributes: BTreeSet<String> = members
                .iter()
                .flat_map(|&i| out.nodes[i].attributes.iter().cloned())
                .collect();
            for &i in members {
                redirect.insert(out.nodes[i].id, survivor_id);
            }
            merges += members.len() - 1;
            merged_nodes.push(RawNode {
                id: survivor_id,
                name,
                attributes: attributes.into_iter().collect(),
                bbox,
            });
        }
        out.nodes = merged_nodes;
        out.edges = out
            .edges
            .iter()
            .filter_map(|e| {
                let (s, t) = (redirect[&e.source], redirect[&e.target]);
                let created_loop = s == t && e.source != e.target;
                (!created_loop).then(|| RawEdge {
                    source: s,
                    target: t,
                    predicate: e.predicate.clone(),
                })
            })
            .collect();
        out.retain_valid_edges();
    }
    out.merged_count += merges;
    Ok((out, merges))
}

/// Corpus-wide term frequencies, counted per scene occurrence.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabCounts {
    pub names: BTreeMap<String, usize>,
    pub attributes: BTreeMap<String, usize>,
    pub predicates: BTreeMap<String, usize>,
}

impl VocabCounts {
    pub fn from_scenes<'a>(scenes: impl IntoIterator<Item = &'a RawScene>) -> Self {
        let mut v = Self::default();
        for s in scenes {
            v.add(s);
        }
        v
    }

    pub fn add(&mut self, scene: &RawScene) {
        for n in &scene.nodes {
            *self.names.entry(n.name.clone()).or_default() += 1;
            for a in &n.attributes {
                *self.attributes.entry(a.clone()).or_default() += 1;
            }
        }
        for e in &scene.edges {
            *self.predicates.entry(e.predicate.clone()).or_default() += 1;
        }
    }
}

/// Removes rare terms, then keeps the scene only if it still has enough
/// nodes and edges. Each merged duplicate raises both minimums by
/// `dup_size_penalty`.
pub fn filter_scene(scene: &RawScene, cfg: &CurationConfig, vocab: &VocabCounts) -> Option<RawScene> {
    let frequent = |m: &BTreeMap<String, usize>, k: &str| m.get(k).copied().unwrap_or(0) >= cfg.min_term_count;
    let mut out = scene.clone();
    out.nodes.retain(|n| frequent(&vocab.names, &n.name));
    for n in &mut out.nodes {
        n.attributes.retain(|a| frequent(&vocab.attributes, a));
    }
    out.edges.retain(|e| frequent(&vocab.predicates, &e.predicate));
    out.retain_valid_edges();
    let extra = cfg.dup_size_penalty * out.merged_count;
    (out.nodes.len() >= cfg.min_nodes + extra && out.edges.len() >= cfg.min_edges + extra).then_some(out)
}

pub fn filter_graphs(scenes: &[RawScene], cfg: &CurationConfig, vocab: &VocabCounts) -> Vec<RawScene> {
    scenes.iter().filter_map(|s| filter_scene(s, cfg, vocab)).collect()
}

/// Builds the scene graph, renumbering nodes to `0..n` in ascending raw id
/// order.
pub fn to_scene_graph(scene: &RawScene) -> Result<SceneGraph, GraphError> {
    let mut nodes: Vec<&RawNode> = scene.nodes.iter().collect();
    nodes.sort_by_key(|n| n.id);
    let ids: BTreeMap<u64, NodeId> = nodes
        .iter()
        .enumerate()
        .map(|(i, n)| (n.id, NodeId(i as u64)))
        .collect();
    let mut g = SceneGraph::new(scene.scene_id.clone());
    for n in nodes {
        g.add_node(
            Node::new(ids[&n.id], &n.name)?
                .with_attributes(&n.attributes)?
                .with_bbox(n.bbox),
        )?;
    }
    for e in &scene.edges {
        let (Some(s), Some(t)) = (ids.get(&e.source), ids.get(&e.target)) else {
            return Err(GraphError::DanglingEndpoint(NodeId(if ids.contains_key(&e.source) {
                e.target
            } else {
                e.source
            })));
        };
        g.add_edge(Edge::new(*s, *t, &e.predicate)?)?;
    }
    Ok(g)
}

/// One update instance: a prior context, the reference after the update,
/// and the canonical parse between them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplePair {
    pub sample_id: String,
    pub scene_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    pub prior: SceneGraph,
    pub reference: SceneGraph,
    pub reference_parse: ParseProgram,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub utterance: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio: Option<String>,
}

impl SamplePair {
    pub fn nodes_added(&self) -> usize {
        self.reference.node_count() - self.prior.node_count()
    }
    pub fn edges_added(&self) -> usize {
        self.reference.edge_count() - self.prior.edge_count()
    }
    pub fn attributes_added(&self) -> usize {
        self.reference.attribute_count() - self.prior.attribute_count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    /// Bounds of the uniform prior fraction.
    pub prior_fraction: (f64, f64),
    /// Relative weights of adding 1, 2 or 3 nodes.
    pub increment_weights: [f64; 3],
    /// Inclusion probability of each candidate edge and omitted attribute.
    pub edge_keep: f64,
    pub attribute_keep: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            prior_fraction: (0.0, 0.9),
            increment_weights: [0.78, 0.17, 0.05],
            edge_keep: 0.5,
            attribute_keep: 0.5,
        }
    }
}

fn draw_increment(rng: &mut impl Rng, weights: &[f64; 3]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i + 1;
        }
        u -= w;
    }
    weights.len()
}

pub fn sample_context_pairs(graph: &SceneGraph, seed: u64, n_pairs: usize) -> Vec<SamplePair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_context_pairs_with(graph, &mut rng, n_pairs, &SamplingConfig::default())
}

/// Draws `n_pairs` (prior, reference) pairs from `graph`. Each prior holds a
/// uniform fraction of the nodes with their induced edges; each prior
/// attribute survives with that same probability. The reference adds 1 to 3
/// omitted nodes with all their attributes, a random subset of the edges
/// they induce, and a random subset of the omitted prior attributes.
/// Bounding boxes are dropped. An empty graph yields no pairs.
pub fn sample_context_pairs_with(
    graph: &SceneGraph,
    rng: &mut impl Rng,
    n_pairs: usize,
    cfg: &SamplingConfig,
) -> Vec<SamplePair> {
    let graph = graph.without_bboxes();
    let ids: Vec<NodeId> = graph.node_ids().collect();
    if ids.is_empty() {
        log::warn!("scene {:?} has no nodes to sample from", graph.scene_id());
        return Vec::new();
    }
    let (lo, hi) = cfg.prior_fraction;
    let mut out = Vec::with_capacity(n_pairs);
    for i in 0..n_pairs {
        let f = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let k = ((f * ids.len() as f64).floor() as usize).min(ids.len() - 1);
        let mut chosen: Vec<usize> = index::sample(rng, ids.len(), k).into_vec();
        chosen.sort_unstable();
        let in_prior: BTreeSet<NodeId> = chosen.iter().map(|&j| ids[j]).collect();

        let mut prior = SceneGraph::new(graph.scene_id());
        let mut omitted_attrs: Vec<(NodeId, String)> = Vec::new();
        for id in &in_prior {
            let node = graph.node(*id).expect("sampled id exists");
            let mut kept = Vec::new();
            for a in node.attributes() {
                if rng.random::<f64>() < f {
                    kept.push(a.clone());
                } else {
                    omitted_attrs.push((*id, a.clone()));
                }
            }
            let prior_node = Node::new(*id, node.name()).and_then(|n| n.with_attributes(kept));
            prior
                .add_node(prior_node.expect("labels already valid"))
                .expect("fresh id");
        }
        for e in graph.edges() {
            if in_prior.contains(&e.source()) && in_prior.contains(&e.target()) {
                prior.add_edge(e.clone()).expect("endpoints in prior");
            }
        }

        let omitted: Vec<NodeId> = ids.iter().copied().filter(|id| !in_prior.contains(id)).collect();
        let m = draw_increment(rng, &cfg.increment_weights).min(omitted.len());
        let mut picks: Vec<usize> = index::sample(rng, omitted.len(), m).into_vec();
        picks.sort_unstable();
        let added: BTreeSet<NodeId> = picks.iter().map(|&j| omitted[j]).collect();

        let mut reference = prior.clone();
        for id in &added {
            reference
                .add_node(graph.node(*id).expect("exists").clone())
                .expect("fresh id");
        }
        for e in graph.edges() {
            let (s, t) = (e.source(), e.target());
            let touches_added = added.contains(&s) || added.contains(&t);
            let resolvable = reference.contains_node(s) && reference.contains_node(t);
            if touches_added && resolvable && rng.random::<f64>() < cfg.edge_keep {
                reference.add_edge(e.clone()).expect("endpoints present");
            }
        }
        for (id, a) in &omitted_attrs {
            if rng.random::<f64>() < cfg.attribute_keep {
                reference.add_attributes(*id, [a.as_str()]).expect("node present");
            }
        }
        let reference_parse = canonicalize(&prior, &reference).expect("reference extends prior by construction");
        out.push(SamplePair {
            sample_id: format!("{}-{:03}", graph.scene_id(), i),
            scene_id: graph.scene_id().to_string(),
            image: None,
            prior,
            reference,
            reference_parse,
            utterance: None,
            audio: None,
        });
    }
    out
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// One representative index per k-means cluster: Lloyd iterations from a
/// seeded k-means++ start, then for each centroid the nearest vector not
/// already chosen. Returned indices are sorted.
pub fn kmeans_representatives(vectors: &[Vec<f64>], k: usize, seed: u64) -> Result<Vec<usize>, DatasetError> {
    const MAX_ITER: usize = 100;
    const TOL: f64 = 1e-6;
    let n = vectors.len();
    if n == 0 || k == 0 || k > n {
        return Err(DatasetError::InvalidArgument(format!(
            "need 1 <= k <= n, got k={k}, n={n}"
        )));
    }
    let dim = vectors[0].len();
    if vectors
        .iter()
        .any(|v| v.len() != dim || v.iter().any(|x| !x.is_finite()))
    {
        return Err(DatasetError::InvalidArgument(
            "vectors must be finite and share one dimension".into(),
        ));
    }
    if k == n {
        return Ok((0..n).collect());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids: Vec<Vec<f64>> = vec![vectors[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = vectors.iter().map(|v| sq_dist(v, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, d) in d2.iter().enumerate() {
                if u < *d {
                    pick = i;
                    break;
                }
                u -= d;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centroids.push(vectors[next].clone());
        for (i, v) in vectors.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(v, &centroids[centroids.len() - 1]));
        }
    }

    let nearest = |v: &[f64], cs: &[Vec<f64>]| {
        cs.iter()
            .enumerate()
            .map(|(c, x)| (sq_dist(v, x), c))
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
            .expect("k >= 1")
            .1
    };
    for _ in 0..MAX_ITER {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for v in vectors {
            let c = nearest(v, &centroids);
            counts[c] += 1;
            for (s, x) in sums[c].iter_mut().zip(v) {
                *s += x;
            }
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let updated: Vec<f64> = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            shift = shift.max(sq_dist(&updated, &centroids[c]).sqrt());
            centroids[c] = updated;
        }
        if shift <= TOL {
            break;
        }
    }

    let mut taken = vec![false; n];
    let mut reps = Vec::with_capacity(k);
    for c in &centroids {
        let best = (0..n)
            .filter(|&i| !taken[i])
            .min_by(|&a, &b| {
                sq_dist(&vectors[a], c)
                    .total_cmp(&sq_dist(&vectors[b], c))
                    .then(a.cmp(&b))
            })
            .expect("k <= n leaves a free vector");
        taken[best] = true;
        reps.push(best);
    }
    reps.sort_unstable();
    Ok(reps)
}

/// Corpus statistics of a built dataset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub input_scenes: usize,
    /// Scenes surviving curation ("#Scenes").
    pub scenes: usize,
    /// Distinct node names ("#Nodes").
    pub node_vocabulary: usize,
    /// Distinct predicates ("#Predicates").
    pub predicate_vocabulary: usize,
    pub attribute_vocabulary: usize,
    /// Mean nodes plus edges per kept scene ("Avg. Size").
    pub avg_size: f64,
    pub merged_nodes: usize,
    pub pos_unfiltered_scenes: usize,
    pub samples: usize,
    pub avg_nodes_added: f64,
    pub avg_attributes_added: f64,
    pub avg_edges_added: f64,
}

impl DatasetStats {
    pub fn compute(input_scenes: usize, graphs: &[SceneGraph], curated: &[RawScene], samples: &[SamplePair]) -> Self {
        let mean = |xs: Vec<f64>| {
            if xs.is_empty() {
                0.0
            } else {
                crate::metrics::stable_sum(&xs) / xs.len() as f64
            }
        };
        let names: BTreeSet<&str> = graphs.iter().flat_map(|g| g.nodes().map(|n| n.name())).collect();
        let predicates: BTreeSet<&str> = graphs.iter().flat_map(|g| g.edges().map(|e| e.predicate())).collect();
        let attributes: BTreeSet<&String> = graphs
            .iter()
            .flat_map(|g| g.nodes().flat_map(|n| n.attributes()))
            .collect();
        Self {
            input_scenes,
            scenes: graphs.len(),
            node_vocabulary: names.len(),
            predicate_vocabulary: predicates.len(),
            attribute_vocabulary: attributes.len(),
            avg_size: mean(
                graphs
                    .iter()
                    .map(|g| (g.node_count() + g.edge_count()) as f64)
                    .collect(),
            ),
            merged_nodes: curated.iter().map(|s| s.merged_count).sum(),
            pos_unfiltered_scenes: curated
                .iter()
                .filter(|s| s.flags.iter().any(|f| f == POS_UNFILTERED))
                .count(),
            samples: samples.len(),
            avg_nodes_added: mean(samples.iter().map(|s| s.nodes_added() as f64).collect()),
            avg_attributes_added: mean(samples.iter().map(|s| s.attributes_added() as f64).collect()),
            avg_edges_added: mean(samples.iter().map(|s| s.edges_added() as f64).collect()),
        }
    }
}

/// Visual Genome scene-graph record (one image).
#[derive(Deserialize)]
struct VgScene {
    image_id: u64,
    #[serde(default)]
    url: Option<String>,
    objects: Vec<VgObject>,
    #[serde(default)]
    relationships: Vec<VgRelationship>,
}

#[derive(Deserialize)]
struct VgObject {
    object_id: u64,
    x: f64,
    y: f64,
    w: f64,
    h: f64,
    #[serde(default)]
    names: Vec<String>,
    #[serde(default)]
    name: Option<String>,
    #[serde(default)]
    attributes: Vec<String>,
}

#[derive(Deserialize)]
struct VgRelationship {
    predicate: String,
    subject_id: u64,
    object_id: u64,
}

impl From<VgScene> for RawScene {
    fn from(vg: VgScene) -> Self {
        let mut nodes = Vec::with_capacity(vg.objects.len());
        for o in vg.objects {
            let Some(name) = o.names.into_iter().next().or(o.name) else {
                log::warn!("image {}: object {} has no name, dropped", vg.image_id, o.object_id);
                continue;
            };
            let Ok(bbox) = BBox::new(o.x, o.y, o.w, o.h) else {
                log::warn!(
                    "image {}: object {} has a degenerate box, dropped",
                    vg.image_id,
                    o.object_id
                );
                continue;
            };
            nodes.push(RawNode {
                id: o.object_id,
                name,
                attributes: o.attributes,
                bbox: Some(bbox),
            });
        }
        let edges = vg
            .relationships
            .into_iter()
            .map(|r| RawEdge {
                source: r.subject_id,
                target: r.object_id,
                predicate: r.predicate,
            })
            .collect();
        let mut scene = RawScene {
            scene_id: vg.image_id.to_string(),
            image: vg.url,
            nodes,
            edges,
            ..RawScene::default()
        };
        scene.retain_valid_edges();
        scene
    }
}

/// Reads scenes, one JSON object per line, in either the Visual Genome
/// layout (`image_id`, `objects`, `relationships`) or the toolkit's own
/// raw-scene layout (`scene_id`, `nodes`, `edges`).
pub fn read_scenes<R: BufRead>(reader: R) -> Result<Vec<RawScene>, JsonlError> {
    let mut out = Vec::new();
    for (line, value) in crate::io::read_jsonl::<serde_json::Value, _>(reader)? {
        let scene = if value.get("objects").is_some() {
            serde_json::from_value::<VgScene>(value).map(RawScene::from)
        } else {
            serde_json::from_value::<RawScene>(value)
        };
        out.push(scene.map_err(|e| JsonlError::schema(line, e.to_string()))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formal_language::execute;
    use crate::similarity::JaccardSimilarity;

    struct Table(Vec<(&'static str, &'static str, f64)>);

    impl SimilarityProvider for Table {
        fn similarity(&self, a: &str, b: &str) -> Result<f64, SimilarityError> {
            if a == b {
                return Ok(1.0);
            }
            Ok(self
                .0
                .iter()
                .find(|(x, y, _)| (*x == a && *y == b) || (*x == b && *y == a))
                .map_or(0.0, |t| t.2))
        }
        fn label(&self) -> String {
            "table".into()
        }
    }

    fn bb(x: f64, y: f64, w: f64, h: f64) -> Option<BBox> {
        Some(BBox::new(x, y, w, h).unwrap())
    }

    fn node(id: u64, name: &str, attrs: &[&str], bbox: Option<BBox>) -> RawNode {
        RawNode {
            id,
            name: name.into(),
            attributes: attrs.iter().map(|s| s.to_string()).collect(),
            bbox,
        }
    }

    fn edge(s: u64, t: u64, p: &str) -> RawEdge {
        RawEdge {
            source: s,
            target: t,
            predicate: p.into(),
        }
    }

    fn scene(nodes: Vec<RawNode>, edges: Vec<RawEdge>) -> RawScene {
        RawScene {
            scene_id: "s".into(),
            nodes,
            edges,
            ..RawScene::default()
        }
    }

    #[test]
    fn iou_examples() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0).unwrap();
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::new(5.0, 5.0, 1.0, 1.0).unwrap()), 0.0);
        assert_eq!(iou(&a, &BBox::new(1.0, 1.0, 2.0, 2.0).unwrap()), 1.0 / 7.0);
    }

    #[test]
    fn standardize_merges_reddish_into_red() {
        let s = scene(vec![node(1, " Apple ", &["Reddish", "red"], None)], vec![]);
        let provider = Table(vec![("red", "reddish", 0.8)]);
        let out = standardize(&s, &CurationConfig::default(), &provider, None).unwrap();
        assert_eq!(out.nodes[0].name, "apple");
        assert_eq!(out.nodes[0].attributes, vec!["red".to_string()]);
        assert_eq!(out.flags, vec![POS_UNFILTERED.to_string()]);
    }

    #[test]
    fn standardize_is_idempotent_and_drops_long_elements() {
        let s = scene(
            vec![
                node(1, "man", &["very tall and thin", "tall"], None),
                node(2, "big old red barn", &[], None),
            ],
            vec![edge(1, 2, "next to"), edge(2, 1, "behind")],
        );
        let cfg = CurationConfig::default();
        let once = standardize(&s, &cfg, &JaccardSimilarity, None).unwrap();
        assert_eq!(once.nodes.len(), 1);
        assert_eq!(once.nodes[0].attributes, vec!["tall".to_string()]);
        assert!(once.edges.is_empty());
        assert_eq!(standardize(&once, &cfg, &JaccardSimilarity, None).unwrap(), once);
    }

    #[test]
    fn standardize_removes_noun_tagged_labels() {
        let mut pos = PosLexicon::new();
        pos.insert("wood", "NN");
        pos.insert("brown", "JJ");
        pos.insert("man", "NN");
        let s = scene(
            vec![node(1, "table", &["wood", "brown"], None), node(2, "chair", &[], None)],
            vec![edge(2, 1, "near"), edge(2, 1, "man")],
        );
        let out = standardize(&s, &CurationConfig::default(), &JaccardSimilarity, Some(&pos)).unwrap();
        assert_eq!(out.nodes[0].attributes, vec!["brown".to_string()]);
        assert_eq!(out.edges, vec![edge(2, 1, "near")]);
        assert!(out.flags.is_empty());
    }

    #[test]
    fn dedup_identical_boxes() {
        let s = scene(
            vec![
                node(1, "man", &["tall"], bb(0.0, 0.0, 4.0, 4.0)),
                node(2, "man", &["smiling"], bb(0.0, 0.0, 4.0, 4.0)),
            ],
            vec![edge(1, 2, "next to")],
        );
        let (out, merged) = dedup_nodes(&s, &CurationConfig::default(), &JaccardSimilarity).unwrap();
        assert_eq!(merged, 1);
        assert_eq!(out.merged_count, 1);
        assert_eq!(out.nodes.len(), 1);
        assert_eq!(out.nodes[0].attributes, vec!["smiling".to_string(), "tall".to_string()]);
        assert!(out.edges.is_empty());
    }

    #[test]
    fn dedup_requires_name_similarity() {
        let s = scene(
            vec![
                node(1, "man", &[], bb(0.0, 0.0, 4.0, 4.0)),
                node(2, "building", &[], bb(0.0, 0.0, 4.0, 4.0)),
            ],
            vec![],
        );
        let provider = Table(vec![("man", "building", 0.1)]);
        let (out, merged) = dedup_nodes(&s, &CurationConfig::default(), &provider).unwrap();
        assert_eq!(merged, 0);
        assert_eq!(out.nodes.len(), 2);
    }

    #[test]
    fn dedup_chain_and_naming() {
        // a~b and b~c qualify, a~c does not overlap enough.
        let s = scene(
            vec![
                node(1, "person", &[], bb(0.0, 0.0, 4.0, 4.0)),
                node(2, "man", &[], bb(1.0, 0.0, 4.0, 4.0)),
                node(3, "man", &[], bb(2.0, 0.0, 4.0, 4.0)),
                node(4, "tree", &[], bb(50.0, 50.0, 4.0, 4.0)),
            ],
            vec![edge(1, 4, "near"), edge(3, 4, "near"), edge(2, 3, "beside")],
        );
        let provider = Table(vec![("man", "person", 0.9)]);
        let (out, merged) = dedup_nodes(&s, &CurationConfig::default(), &provider).unwrap();
        assert_eq!(merged, 2);
        let names: Vec<&str> = out.nodes.iter().map(|n| n.name.as_str()).collect();
        assert_eq!(names, vec!["man", "tree"]);
        assert_eq!(out.nodes[0].id, 1);
        assert_eq!(out.nodes[0].bbox, bb(1.0, 0.0, 4.0, 4.0));
        assert_eq!(out.edges, vec![edge(1, 4, "near")]);
        let (again, more) = dedup_nodes(&out, &CurationConfig::default(), &provider).unwrap();
        assert_eq!(more, 0);
        assert_eq!(again.nodes, out.nodes);
    }

    fn square(n: usize, merged: usize) -> RawScene {
        let nodes = (0..n as u64).map(|i| node(i, "thing", &[], None)).collect();
        let edges = (0..n as u64).map(|i| edge(i, (i + 1) % n as u64, "near")).collect();
        RawScene {
            merged_count: merged,
            ..scene(nodes, edges)
        }
    }

    #[test]
    fn size_filter() {
        let cfg = CurationConfig::default();
        let scenes = [square(3, 0), square(4, 0), square(4, 1), square(5, 1)];
        let vocab = VocabCounts::from_scenes(&scenes);
        let kept = filter_graphs(&scenes, &cfg, &vocab);
        assert_eq!(
            kept.iter().map(|s| (s.nodes.len(), s.merged_count)).collect::<Vec<_>>(),
            vec![(4, 0), (5, 1)]
        );
    }

    #[test]
    fn rare_terms_are_removed() {
        let mut a = square(4, 0);
        a.nodes[0].attributes = vec!["odd".into(), "blue".into()];
        let mut b = square(4, 0);
        b.nodes[0].attributes = vec!["blue".into()];
        b.edges[0].predicate = "under".into();
        let scenes = [a, b];
        let vocab = VocabCounts::from_scenes(&scenes);
        let cfg = CurationConfig {
            min_edges: 3,
            ..CurationConfig::default()
        };
        let kept = filter_graphs(&scenes, &cfg, &vocab);
        assert_eq!(kept[0].nodes[0].attributes, vec!["blue".to_string()]);
        assert_eq!(kept[1].edges.len(), 3);
    }

    fn demo_graph() -> SceneGraph {
        let s = scene(
            (0..8u64)
                .map(|i| {
                    node(
                        i,
                        ["cup", "table", "lamp", "chair"][i as usize % 4],
                        &["red", "old"][..(i as usize % 3).min(2)],
                        None,
                    )
                })
                .collect(),
            (0..8u64).map(|i| edge(i, (i + 3) % 8, "near")).collect(),
        );
        to_scene_graph(&s).unwrap()
    }

    #[test]
    fn sampled_pairs_are_consistent() {
        let g = demo_graph();
        let pairs = sample_context_pairs(&g, 7, 200);
        assert_eq!(pairs.len(), 200);
        for p in &pairs {
            assert!(p.reference.is_additive_superset_of(&p.prior));
            assert_eq!(execute(&p.reference_parse, &p.prior).unwrap(), p.reference);
            assert!((1..=3).contains(&p.nodes_added()));
            assert!(p.prior.node_count() < g.node_count());
        }
        assert_eq!(pairs, sample_context_pairs(&g, 7, 200));
        assert_ne!(pairs, sample_context_pairs(&g, 8, 200));
    }

    #[test]
    fn zero_fraction_gives_empty_prior() {
        let g = demo_graph();
        let cfg = SamplingConfig {
            prior_fraction: (0.0, 0.0),
            ..SamplingConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for p in sample_context_pairs_with(&g, &mut rng, 20, &cfg) {
            assert!(p.prior.is_empty());
            assert!(p.nodes_added() >= 1);
        }
    }

    #[test]
    fn empty_graph_yields_nothing() {
        assert!(sample_context_pairs(&SceneGraph::new("x"), 1, 5).is_empty());
    }

    #[test]
    fn kmeans_edge_cases() {
        let v: Vec<Vec<f64>> = vec![vec![0.0], vec![1.0], vec![5.0]];
        assert_eq!(kmeans_representatives(&v, 3, 0).unwrap(), vec![0, 1, 2]);
        assert!(kmeans_representatives(&v, 4, 0).is_err());
        assert!(kmeans_representatives(&[], 1, 0).is_err());
        // Mean is 2.0; index 1 is nearest.
        assert_eq!(kmeans_representatives(&v, 1, 3).unwrap(), vec![1]);
    }

    #[test]
    fn reads_both_input_layouts() {
        let text = concat!(
            r#"{"image_id": 9, "objects": [{"object_id": 5, "x": 0, "y": 0, "w": 3, "h": 2, "names": ["Dog"], "attributes": ["brown"]},"#,
            r#" {"object_id": 6, "x": 1, "y": 1, "w": 0, "h": 2, "names": ["ghost"]}, {"object_id": 7, "x": 1, "y": 1, "w": 2, "h": 2, "names": ["ball"]}],"#,
            r#" "relationships": [{"predicate": "chasing", "subject_id": 5, "object_id": 7}, {"predicate": "sees", "subject_id": 5, "object_id": 6}]}"#,
            "\n",
            r#"{"scene_id": "x", "nodes": [{"id": 1, "name": "cat", "bbox": null}]}"#,
            "\n"
        );
        let scenes = read_scenes(text.as_bytes()).unwrap();
        assert_eq!(scenes[0].scene_id, "9");
        assert_eq!(scenes[0].nodes.len(), 2);
        assert_eq!(scenes[0].edges, vec![edge(5, 7, "chasing")]);
        assert_eq!(scenes[1].nodes[0].name, "cat");
        let err = read_scenes("{\"objects\": 3}\n".as_bytes()).unwrap_err();
        assert_eq!(err.line(), Some(1));
    }
}
