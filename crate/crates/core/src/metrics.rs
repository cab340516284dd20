//! Graph Edit Distance and Representation Edit Distance between a predicted
//! and a reference context that both extend a shared prior context.
//!
//! Entities already present in the prior are matched to themselves. Only
//! the added portions of the two graphs take part in the pairing search:
//! an exhaustive search over injective node pairings, with edge pairings
//! derived from each node pairing (an edge pair is admissible only when both
//! endpoints are paired with each other, prior endpoints with themselves).
//!
//! * GED pairs nodes only on identical names and edges only on identical
//!   predicates. A missing or extra node or edge costs 1, a missing or extra
//!   attribute 0.25. GED is not normalized.
//! * RED compares descriptive phrases with a [`SimilarityProvider`]; a pair
//!   costs `1 - sim`, an unmatched entity 1. The raw cost is divided by the
//!   soft cost of the empty update (predicted = prior).
//!
//! Soft variants charge only what the reference has and the prediction
//! lacks; hard variants also charge unmatched predicted entities and extra
//! attributes.
//!
//! Costs are collected as individual terms and summed in sorted order, and
//! ties between pairings are broken on the sorted term list, so results do
//! not depend on node ids or iteration order.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene_graph::{Edge, Node, NodeId, SceneGraph};
use crate::similarity::{SimilarityError, SimilarityProvider};

pub const ATTRIBUTE_PENALTY: f64 = 0.25;
pub const DEFAULT_PAIRING_CAP: usize = 8;

/// Slack used when pruning the search on partial sums.
const PRUNE_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricMode {
    Hard,
    Soft,
}

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("{which} context does not extend the prior: {reason}")]
    NonMonotonic { which: &'static str, reason: String },
    #[error("RED is undefined: the reference adds nothing measurable to the prior")]
    UndefinedMetric,
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
}

/// Sum of `values` taken in ascending order. Independent of input order.
pub fn stable_sum(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v.iter().fold(0.0, |acc, x| acc + x)
}

/// Endpoint of an added edge: a prior node (matched to itself) or an added
/// node by its index on that side.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Endpoint {
    Prior(NodeId),
    Added(usize),
}

/// Cost of pairing two entities, kept as up to two additive terms so that
/// hard costs are a superset of the matching soft terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairCost([f64; 2]);

impl PairCost {
    pub fn single(v: f64) -> Self {
        PairCost([v, 0.0])
    }
    pub fn split(a: f64, b: f64) -> Self {
        PairCost([a, b])
    }
    pub fn total(&self) -> f64 {
        self.0[0] + self.0[1]
    }
    fn push_terms(&self, out: &mut Vec<f64>) {
        out.extend(self.0.iter().copied().filter(|t| *t != 0.0));
    }
}

/// A pairing problem between the added entities of a predicted graph and a
/// reference graph. `None` marks a pair that may never be formed.
#[derive(Clone, Debug, Default)]
pub struct PairingInstance {
    /// `[pred][ref]`
    pub node_costs: Vec<Vec<Option<PairCost>>>,
    pub unmatched_pred_nodes: Vec<f64>,
    pub unmatched_ref_nodes: Vec<f64>,
    pub pred_edges: Vec<(Endpoint, Endpoint)>,
    pub ref_edges: Vec<(Endpoint, Endpoint)>,
    /// `[pred edge][ref edge]`
    pub edge_costs: Vec<Vec<Option<PairCost>>>,
    pub unmatched_pred_edges: Vec<f64>,
    pub unmatched_ref_edges: Vec<f64>,
    /// Costs independent of the pairing (pre-matched prior entities).
    pub fixed_terms: Vec<f64>,
}

impl PairingInstance {
    pub fn pred_nodes(&self) -> usize {
        self.unmatched_pred_nodes.len()
    }
    pub fn ref_nodes(&self) -> usize {
        self.unmatched_ref_nodes.len()
    }

    /// Cost terms of a complete assignment (`assign[pred] = Some(ref)`),
    /// with its best derived edge pairing.
    pub fn evaluate(&self, assign: &[Option<usize>]) -> (Vec<(usize, usize)>, Vec<f64>) {
        let groups = self.ref_edge_groups();
        let (edge_pairs, mut terms) = self.derive_edges(assign, &groups);
        let mut used = vec![false; self.ref_nodes()];
        for (i, a) in assign.iter().enumerate() {
            match a {
                Some(j) => {
                    used[*j] = true;
                    self.node_costs[i][*j]
                        .expect("assigned pair must be admissible")
                        .push_terms(&mut terms);
                }
                None => terms.push(self.unmatched_pred_nodes[i]),
            }
        }
        for (j, u) in used.iter().enumerate() {
            if !u {
                terms.push(self.unmatched_ref_nodes[j]);
            }
        }
        terms.extend_from_slice(&self.fixed_terms);
        terms.retain(|t| *t != 0.0);
        (edge_pairs, terms)
    }

    fn ref_edge_groups(&self) -> HashMap<(Endpoint, Endpoint), Vec<usize>> {
        let mut groups: HashMap<(Endpoint, Endpoint), Vec<usize>> = HashMap::new();
        for (r, key) in self.ref_edges.iter().enumerate() {
            groups.entry(*key).or_default().push(r);
        }
        groups
    }

    fn derive_edges(
        &self,
        assign: &[Option<usize>],
        ref_groups: &HashMap<(Endpoint, Endpoint), Vec<usize>>,
    ) -> (Vec<(usize, usize)>, Vec<f64>) {
        let map = |e: Endpoint| match e {
            Endpoint::Prior(id) => Some(Endpoint::Prior(id)),
            Endpoint::Added(i) => assign[i].map(Endpoint::Added),
        };
        let mut pred_groups: BTreeMap<(Endpoint, Endpoint), Vec<usize>> = BTreeMap::new();
        let mut terms = Vec::new();
        for (p, (s, t)) in self.pred_edges.iter().enumerate() {
            match (map(*s), map(*t)) {
                (Some(s), Some(t)) if ref_groups.contains_key(&(s, t)) => {
                    pred_groups.entry((s, t)).or_default().push(p)
                }
                _ => terms.push(self.unmatched_pred_edges[p]),
            }
        }
        let mut pairs = Vec::new();
        // Reference edges in a contested group are charged by the group matching.
        let mut ref_charged = vec![false; self.ref_edges.len()];
        for (key, preds) in &pred_groups {
            let refs = &ref_groups[key];
            let (group_pairs, group_terms) = best_edge_matching(self, preds, refs);
            for &r in refs {
                ref_charged[r] = true;
            }
            pairs.extend(group_pairs);
            terms.extend(group_terms);
        }
        for (r, charged) in ref_charged.iter().enumerate() {
            if !charged {
                terms.push(self.unmatched_ref_edges[r]);
            }
        }
        (pairs, terms)
    }
}

/// Sorted, zero-free term list with its ordered sum.
#[derive(Clone, Debug)]
struct Canonical {
    total: f64,
    terms: Vec<f64>,
}

impl Canonical {
    fn new(mut terms: Vec<f64>) -> Self {
        terms.retain(|t| *t != 0.0);
        terms.sort_by(f64::total_cmp);
        let total = terms.iter().fold(0.0, |acc, x| acc + x);
        Canonical { total, terms }
    }

    fn cmp(&self, other: &Canonical) -> Ordering {
        self.total.total_cmp(&other.total).then_with(|| {
            for (a, b) in self.terms.iter().zip(&other.terms) {
                match a.total_cmp(b) {
                    Ordering::Equal => continue,
                    o => return o,
                }
            }
            self.terms.len().cmp(&other.terms.len())
        })
    }
}

/// Minimum-cost partial matching between the predicted and reference edges
/// sharing one endpoint pair. Groups are tiny, so this is plain recursion.
fn best_edge_matching(inst: &PairingInstance, preds: &[usize], refs: &[usize]) -> (Vec<(usize, usize)>, Vec<f64>) {
    struct State<'a> {
        inst: &'a PairingInstance,
        preds: &'a [usize],
        refs: &'a [usize],
        used: Vec<bool>,
        current: Vec<(usize, usize)>,
        best: Option<(Canonical, Vec<(usize, usize)>)>,
    }
    fn rec(s: &mut State<'_>, k: usize) {
        if k == s.preds.len() {
            let mut terms = Vec::new();
            for &(p, r) in &s.current {
                s.inst.edge_costs[p][r].expect("admissible").push_terms(&mut terms);
            }
            let paired: Vec<usize> = s.current.iter().map(|&(p, _)| p).collect();
            for &p in s.preds {
                if !paired.contains(&p) {
                    terms.push(s.inst.unmatched_pred_edges[p]);
                }
            }
            for (i, &r) in s.refs.iter().enumerate() {
                if !s.used[i] {
                    terms.push(s.inst.unmatched_ref_edges[r]);
                }
            }
            let c = Canonical::new(terms);
            if s.best.as_ref().is_none_or(|(b, _)| c.cmp(b) == Ordering::Less) {
                s.best = Some((c, s.current.clone()));
            }
            return;
        }
        rec(s, k + 1);
        let p = s.preds[k];
        for i in 0..s.refs.len() {
            let r = s.refs[i];
            if !s.used[i] && s.inst.edge_costs[p][r].is_some() {
                s.used[i] = true;
                s.current.push((p, r));
                rec(s, k + 1);
                s.current.pop();
                s.used[i] = false;
            }
        }
    }
    let mut s = State {
        inst,
        preds,
        refs,
        used: vec![false; refs.len()],
        current: Vec::new(),
        best: None,
    };
    rec(&mut s, 0);
    let (c, pairs) = s.best.expect("at least the empty matching exists");
    (pairs, c.terms)
}

/// Chosen pairing of added entities and its total cost.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchPlan {
    /// `(pred index, ref index)`
    pub node_pairs: Vec<(usize, usize)>,
    /// `(pred edge index, ref edge index)`
    pub edge_pairs: Vec<(usize, usize)>,
    /// Total cost, including the instance's fixed terms.
    pub cost: f64,
    /// Set when the instance exceeded the cap and greedy pairing was used.
    pub approximate: bool,
}

/// Minimum-cost pairing. Exhaustive when both sides have at most `cap`
/// added nodes; otherwise greedy best-first and marked approximate.
pub fn optimal_pairing(inst: &PairingInstance, cap: usize) -> MatchPlan {
    if inst.pred_nodes().max(inst.ref_nodes()) <= cap {
        exhaustive(inst)
    } else {
        greedy(inst)
    }
}

fn exhaustive(inst: &PairingInstance) -> MatchPlan {
    type Best = (Canonical, Vec<Option<usize>>, Vec<(usize, usize)>);

    struct Search<'a> {
        inst: &'a PairingInstance,
        groups: HashMap<(Endpoint, Endpoint), Vec<usize>>,
        lower_bound_suffix: Vec<f64>,
        fixed: f64,
        assign: Vec<Option<usize>>,
        used: Vec<bool>,
        best_bound: f64,
        best: Option<Best>,
    }

    fn leaf(s: &mut Search<'_>, partial: f64) {
        let (edge_pairs, edge_terms) = s.inst.derive_edges(&s.assign, &s.groups);
        let unused: f64 = s
            .used
            .iter()
            .enumerate()
            .filter(|(_, u)| !**u)
            .map(|(j, _)| s.inst.unmatched_ref_nodes[j])
            .sum();
        let approx_total = partial + unused + edge_terms.iter().sum::<f64>() + s.fixed;
        if approx_total > s.best_bound + PRUNE_EPS {
            return;
        }
        s.best_bound = s.best_bound.min(approx_total);

        let mut terms = edge_terms;
        for (i, a) in s.assign.iter().enumerate() {
            match a {
                Some(j) => s.inst.node_costs[i][*j].expect("admissible").push_terms(&mut terms),
                None => terms.push(s.inst.unmatched_pred_nodes[i]),
            }
        }
        for (j, u) in s.used.iter().enumerate() {
            if !u {
                terms.push(s.inst.unmatched_ref_nodes[j]);
            }
        }
        terms.extend_from_slice(&s.inst.fixed_terms);
        let c = Canonical::new(terms);
        if s.best.as_ref().is_none_or(|(b, _, _)| c.cmp(b) == Ordering::Less) {
            s.best = Some((c, s.assign.clone(), edge_pairs));
        }
    }

    fn dfs(s: &mut Search<'_>, i: usize, partial: f64) {
        if i == s.assign.len() {
            leaf(s, partial);
            return;
        }
        if partial + s.lower_bound_suffix[i] + s.fixed > s.best_bound + PRUNE_EPS {
            return;
        }
        dfs(s, i + 1, partial + s.inst.unmatched_pred_nodes[i]);
        for j in 0..s.used.len() {
            if s.used[j] {
                continue;
            }
            if let Some(c) = s.inst.node_costs[i][j] {
                s.used[j] = true;
                s.assign[i] = Some(j);
                dfs(s, i + 1, partial + c.total());
                s.assign[i] = None;
                s.used[j] = false;
            }
        }
    }

    let n = inst.pred_nodes();
    // Remaining pred nodes each cost at least their cheapest option.
    let mut lower_bound_suffix = vec![0.0; n + 1];
    for i in (0..n).rev() {
        let cheapest = inst.node_costs[i]
            .iter()
            .flatten()
            .map(PairCost::total)
            .fold(inst.unmatched_pred_nodes[i], f64::min);
        lower_bound_suffix[i] = lower_bound_suffix[i + 1] + cheapest;
    }
    let mut s = Search {
        inst,
        groups: inst.ref_edge_groups(),
        lower_bound_suffix,
        fixed: inst.fixed_terms.iter().sum(),
        assign: vec![None; n],
        used: vec![false; inst.ref_nodes()],
        best_bound: f64::INFINITY,
        best: None,
    };
    dfs(&mut s, 0, 0.0);
    let (c, assign, edge_pairs) = s.best.expect("the empty pairing is always reachable");
    MatchPlan {
        node_pairs: pairs_of(&assign),
        edge_pairs,
        cost: c.total,
        approximate: false,
    }
}

fn greedy(inst: &PairingInstance) -> MatchPlan {
    let mut candidates = Vec::new();
    for (i, row) in inst.node_costs.iter().enumerate() {
        for (j, c) in row.iter().enumerate() {
            if let Some(c) = c {
                let gain = c.total() - inst.unmatched_pred_nodes[i] - inst.unmatched_ref_nodes[j];
                if gain < 0.0 {
                    candidates.push((gain, i, j));
                }
            }
        }
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    let mut assign = vec![None; inst.pred_nodes()];
    let mut used = vec![false; inst.ref_nodes()];
    for (_, i, j) in candidates {
        if assign[i].is_none() && !used[j] {
            assign[i] = Some(j);
            used[j] = true;
        }
    }
    let (edge_pairs, terms) = inst.evaluate(&assign);
    MatchPlan {
        node_pairs: pairs_of(&assign),
        edge_pairs,
        cost: Canonical::new(terms).total,
        approximate: true,
    }
}

fn pairs_of(assign: &[Option<usize>]) -> Vec<(usize, usize)> {
    assign
        .iter()
        .enumerate()
        .filter_map(|(i, a)| a.map(|j| (i, j)))
        .collect()
}

/// Added portion of a graph relative to the prior.
struct Delta<'a> {
    graph: &'a SceneGraph,
    nodes: Vec<&'a Node>,
    index: HashMap<NodeId, usize>,
    edges: Vec<&'a Edge>,
}

impl<'a> Delta<'a> {
    fn new(graph: &'a SceneGraph, prior: &SceneGraph, which: &'static str) -> Result<Self, MetricError> {
        if let Some(reason) = graph.additive_violation(prior) {
            return Err(MetricError::NonMonotonic { which, reason });
        }
        let mut nodes: Vec<&Node> = graph.nodes().filter(|n| !prior.contains_node(n.id())).collect();
        nodes.sort_by_cached_key(|n| (n.phrase(), n.id()));
        let index = nodes.iter().enumerate().map(|(i, n)| (n.id(), i)).collect();
        let edges = graph.edges().filter(|e| !prior.contains_edge(e)).collect();
        Ok(Delta {
            graph,
            nodes,
            index,
            edges,
        })
    }

    fn endpoint(&self, id: NodeId) -> Endpoint {
        match self.index.get(&id) {
            Some(i) => Endpoint::Added(*i),
            None => Endpoint::Prior(id),
        }
    }

    fn edge_endpoints(&self) -> Vec<(Endpoint, Endpoint)> {
        self.edges
            .iter()
            .map(|e| (self.endpoint(e.source()), self.endpoint(e.target())))
            .collect()
    }

    fn edge_phrase(&self, e: &Edge) -> String {
        edge_phrase(self.graph, e)
    }
}

/// Descriptive phrase of an edge: source phrase, predicate, target phrase.
pub fn edge_phrase(graph: &SceneGraph, e: &Edge) -> String {
    let phrase = |id| graph.node(id).map(|n| n.phrase()).unwrap_or_default();
    format!("{} {} {}", phrase(e.source()), e.predicate(), phrase(e.target()))
}

/// Every phrase RED may compare for this graph.
pub fn graph_phrases(graph: &SceneGraph) -> Vec<String> {
    graph
        .nodes()
        .map(Node::phrase)
        .chain(graph.edges().map(|e| edge_phrase(graph, e)))
        .collect()
}

fn unmatched_pred_cost(mode: MetricMode) -> f64 {
    match mode {
        MetricMode::Hard => 1.0,
        MetricMode::Soft => 0.0,
    }
}

fn attribute_terms(pred: &Node, reference: &Node, mode: MetricMode) -> PairCost {
    let missing = reference.attributes().difference(pred.attributes()).count() as f64;
    let extra = match mode {
        MetricMode::Hard => pred.attributes().difference(reference.attributes()).count() as f64,
        MetricMode::Soft => 0.0,
    };
    PairCost::split(ATTRIBUTE_PENALTY * missing, ATTRIBUTE_PENALTY * extra)
}

/// GED pairing problem for the added portions of `predicted` and `reference`.
pub fn ged_instance(
    predicted: &SceneGraph,
    reference: &SceneGraph,
    prior: &SceneGraph,
    mode: MetricMode,
) -> Result<PairingInstance, MetricError> {
    let p = Delta::new(predicted, prior, "predicted")?;
    let r = Delta::new(reference, prior, "reference")?;
    Ok(ged_instance_from(&p, &r, prior, mode))
}

fn ged_instance_from(p: &Delta<'_>, r: &Delta<'_>, prior: &SceneGraph, mode: MetricMode) -> PairingInstance {
    let node_costs = p
        .nodes
        .iter()
        .map(|pn| {
            r.nodes
                .iter()
                .map(|rn| (pn.name() == rn.name()).then(|| attribute_terms(pn, rn, mode)))
                .collect()
        })
        .collect();
    let edge_costs = p
        .edges
        .iter()
        .map(|pe| {
            r.edges
                .iter()
                .map(|re| (pe.predicate() == re.predicate()).then(|| PairCost::single(0.0)))
                .collect()
        })
        .collect();
    let mut fixed_terms = Vec::new();
    for old in prior.nodes() {
        let pn = p.graph.node(old.id()).expect("superset");
        let rn = r.graph.node(old.id()).expect("superset");
        attribute_terms(pn, rn, mode).push_terms(&mut fixed_terms);
    }
    PairingInstance {
        node_costs,
        unmatched_pred_nodes: vec![unmatched_pred_cost(mode); p.nodes.len()],
        unmatched_ref_nodes: vec![1.0; r.nodes.len()],
        pred_edges: p.edge_endpoints(),
        ref_edges: r.edge_endpoints(),
        edge_costs,
        unmatched_pred_edges: vec![unmatched_pred_cost(mode); p.edges.len()],
        unmatched_ref_edges: vec![1.0; r.edges.len()],
        fixed_terms,
    }
}

/// Counts describing a GED pairing.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub matched_nodes: usize,
    pub missing_nodes: usize,
    pub extra_nodes: usize,
    pub matched_edges: usize,
    pub missing_edges: usize,
    pub extra_edges: usize,
    pub missing_attributes: usize,
    pub extra_attributes: usize,
}

#[derive(Clone, Debug)]
pub struct GedOutcome {
    pub value: f64,
    pub plan: MatchPlan,
    pub diagnostics: Diagnostics,
}

pub fn ged(
    predicted: &SceneGraph,
    reference: &SceneGraph,
    prior: &SceneGraph,
    mode: MetricMode,
) -> Result<f64, MetricError> {
    ged_with_cap(predicted, reference, prior, mode, DEFAULT_PAIRING_CAP).map(|o| o.value)
}

pub fn ged_with_cap(
    predicted: &SceneGraph,
    reference: &SceneGraph,
    prior: &SceneGraph,
    mode: MetricMode,
    cap: usize,
) -> Result<GedOutcome, MetricError> {
    let p = Delta::new(predicted, prior, "predicted")?;
    let r = Delta::new(reference, prior, "reference")?;
    let inst = ged_instance_from(&p, &r, prior, mode);
    let plan = optimal_pairing(&inst, cap);

    let mut d = Diagnostics {
        matched_nodes: plan.node_pairs.len(),
        missing_nodes: r.nodes.len() - plan.node_pairs.len(),
        extra_nodes: p.nodes.len() - plan.node_pairs.len(),
        matched_edges: plan.edge_pairs.len(),
        missing_edges: r.edges.len() - plan.edge_pairs.len(),
        extra_edges: p.edges.len() - plan.edge_pairs.len(),
        ..Diagnostics::default()
    };
    let node_pairs = plan.node_pairs.iter().map(|&(i, j)| (p.nodes[i], r.nodes[j])).chain(
        prior
            .nodes()
            .map(|n| (predicted.node(n.id()).unwrap(), reference.node(n.id()).unwrap())),
    );
    for (pn, rn) in node_pairs {
        d.missing_attributes += rn.attributes().difference(pn.attributes()).count();
        d.extra_attributes += pn.attributes().difference(rn.attributes()).count();
    }
    Ok(GedOutcome {
        value: plan.cost,
        plan,
        diagnostics: d,
    })
}

/// RED pairing problem: raw (unnormalized) representation costs.
pub fn red_instance(
    predicted: &SceneGraph,
    reference: &SceneGraph,
    prior: &SceneGraph,
    mode: MetricMode,
    provider: &dyn SimilarityProvider,
) -> Result<PairingInstance, MetricError> {
    let p = Delta::new(predicted, prior, "predicted")?;
    let r = Delta::new(reference, prior, "reference")?;
    red_instance_from(&p, &r, prior, mode, provider)
}

fn dissimilarity(provider: &dyn SimilarityProvider, a: &str, b: &str) -> Result<f64, MetricError> {
    let s = provider.similarity(a, b)?.clamp(0.0, 1.0);
    Ok(1.0 - s)
}

fn red_instance_from(
    p: &Delta<'_>,
    r: &Delta<'_>,
    prior: &SceneGraph,
    mode: MetricMode,
    provider: &dyn SimilarityProvider,
) -> Result<PairingInstance, MetricError> {
    let pred_phrases: Vec<String> = p.nodes.iter().map(|n| n.phrase()).collect();
    let ref_phrases: Vec<String> = r.nodes.iter().map(|n| n.phrase()).collect();
    let node_costs = pred_phrases
        .iter()
        .map(|pp| {
            ref_phrases
                .iter()
                .map(|rp| dissimilarity(provider, pp, rp).map(|d| Some(PairCost::single(d))))
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<Vec<_>, _>>()?;

    let pred_edge_phrases: Vec<String> = p.edges.iter().map(|e| p.edge_phrase(e)).collect();
    let ref_edge_phrases: Vec<String> = r.edges.iter().map(|e| r.edge_phrase(e)).collect();
    let edge_costs = pred_edge_phrases
        .iter()
        .map(|pp| {
            ref_edge_phrases
                .iter()
                .map(|rp| dissimilarity(provider, pp, rp).map(|d| Some(PairCost::single(d))))
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut fixed_terms = Vec::new();
    for old in prior.nodes() {
        let pp = p.graph.node(old.id()).expect("superset").phrase();
        let rp = r.graph.node(old.id()).expect("superset").phrase();
        if pp != rp {
            fixed_terms.push(dissimilarity(provider, &pp, &rp)?);
        }
    }
    Ok(PairingInstance {
        node_costs,
        unmatched_pred_nodes: vec![unmatched_pred_cost(mode); p.nodes.len()],
        unmatched_ref_nodes: vec![1.0; r.nodes.len()],
        pred_edges: p.edge_endpoints(),
        ref_edges: r.edge_endpoints(),
        edge_costs,
        unmatched_pred_edges: vec![unmatched_pred_cost(mode); p.edges.len()],
        unmatched_ref_edges: vec![1.0; r.edges.len()],
        fixed_terms,
    })
}

#[derive(Clone, Debug)]
pub struct RedOutcome {
    pub value: f64,
    pub raw: f64,
    pub normalizer: f64,
    pub plan: MatchPlan,
}

pub fn red(
    predicted: &SceneGraph,
    reference: &SceneGraph,
    prior: &SceneGraph,
    mode: MetricMode,
    provider: &dyn SimilarityProvider,
) -> Result<f64, MetricError> {
    red_with_cap(predicted, reference, prior, mode, provider, DEFAULT_PAIRING_CAP).map(|o| o.value)
}

pub fn red_with_cap(
    predicted: &SceneGraph,
    reference: &SceneGraph,
    prior: &SceneGraph,
    mode: MetricMode,
    provider: &dyn SimilarityProvider,
    cap: usize,
) -> Result<RedOutcome, MetricError> {
    let p = Delta::new(predicted, prior, "predicted")?;
    let r = Delta::new(reference, prior, "reference")?;
    let normalizer = red_normalizer(&r, prior, provider)?;
    let inst = red_instance_from(&p, &r, prior, mode, provider)?;
    let plan = optimal_pairing(&inst, cap);
    Ok(RedOutcome {
        value: plan.cost / normalizer,
        raw: plan.cost,
        normalizer,
        plan,
    })
}

/// Soft RED cost of the empty update: what it takes to turn the prior into
/// the reference.
fn red_normalizer(r: &Delta<'_>, prior: &SceneGraph, provider: &dyn SimilarityProvider) -> Result<f64, MetricError> {
    let empty = Delta::new(prior, prior, "prior")?;
    let inst = red_instance_from(&empty, r, prior, MetricMode::Soft, provider)?;
    let n = optimal_pairing(&inst, usize::MAX).cost;
    if n > 0.0 {
        Ok(n)
    } else {
        Err(MetricError::UndefinedMetric)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricSelection {
    Ged,
    Red,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeSelection {
    Hard,
    Soft,
    Both,
}

impl ModeSelection {
    fn includes(self, mode: MetricMode) -> bool {
        matches!(
            (self, mode),
            (ModeSelection::Both, _)
                | (ModeSelection::Hard, MetricMode::Hard)
                | (ModeSelection::Soft, MetricMode::Soft)
        )
    }
}

impl MetricSelection {
    fn ged(self) -> bool {
        self != MetricSelection::Red
    }
    fn red(self) -> bool {
        self != MetricSelection::Ged
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ScoreConfig {
    pub metrics: MetricSelection,
    pub modes: ModeSelection,
    pub cap: usize,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            metrics: MetricSelection::Both,
            modes: ModeSelection::Both,
            cap: DEFAULT_PAIRING_CAP,
        }
    }
}

/// Why a sample was scored as an empty update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Annotation {
    ParseError,
    ExecError,
    Missing,
    /// An earlier step of a carried sequence was missing.
    MissingUpstream,
}

/// Per-sample scores. Fields for metrics that were not requested are absent.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub sample_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h_ged: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s_ged: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h_red: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s_red: Option<f64>,
    pub diagnostics: Diagnostics,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub approximate: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<Annotation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

/// Scores one prediction. A reference that adds nothing leaves the RED
/// fields empty and records a note instead of failing.
pub fn score_sample(
    sample_id: &str,
    predicted: &SceneGraph,
    reference: &SceneGraph,
    prior: &SceneGraph,
    cfg: &ScoreConfig,
    provider: &dyn SimilarityProvider,
) -> Result<MetricReport, MetricError> {
    let mut report = MetricReport {
        sample_id: sample_id.to_string(),
        ..MetricReport::default()
    };
    if cfg.metrics.ged() {
        for mode in [MetricMode::Hard, MetricMode::Soft] {
            let include = cfg.modes.includes(mode);
            // Diagnostics always come from the hard pairing.
            if !include && mode == MetricMode::Soft {
                continue;
            }
            let o = ged_with_cap(predicted, reference, prior, mode, cfg.cap)?;
            report.approximate |= o.plan.approximate;
            if mode == MetricMode::Hard {
                report.diagnostics = o.diagnostics;
            }
            if include {
                match mode {
                    MetricMode::Hard => report.h_ged = Some(o.value),
                    MetricMode::Soft => report.s_ged = Some(o.value),
                }
            }
        }
    }
    if cfg.metrics.red() {
        for mode in [MetricMode::Hard, MetricMode::Soft] {
            if !cfg.modes.includes(mode) {
                continue;
            }
            match red_with_cap(predicted, reference, prior, mode, provider, cfg.cap) {
                Ok(o) => {
                    report.approximate |= o.plan.approximate;
                    match mode {
                        MetricMode::Hard => report.h_red = Some(o.value),
                        MetricMode::Soft => report.s_red = Some(o.value),
                    }
                }
                Err(MetricError::UndefinedMetric) => {
                    if !report.notes.iter().any(|n| n == "red-undefined") {
                        report.notes.push("red-undefined".into());
                    }
                }
                Err(e) => return Err(e),
            }
        }
    }
    Ok(report)
}
