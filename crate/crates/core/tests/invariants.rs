use proptest::prelude::*;
use spice_core::metrics::{ged, red, MetricMode};
use spice_core::scene_graph::random_id_assignment;
use spice_core::{
    canonicalize, execute, parse_context, parse_program, render_context, Edge, JaccardSimilarity, Node, NodeId,
    SceneGraph,
};

const NAMES: &[&str] = &[
    "table",
    "chair",
    "red chair",
    "cup",
    "coffee cup",
    "lamp",
    "t-shirt",
    "10:30 clock",
];
const ATTRS: &[&str] = &["red", "blue", "wooden", "very tall", "half-full"];
const PREDS: &[&str] = &["on", "near", "next to", "behind"];

type NodeSpec = (usize, Vec<usize>);

fn graph_from(ids: &[u64], nodes: &[NodeSpec], edges: &[(usize, usize, usize)]) -> SceneGraph {
    let mut g = SceneGraph::new("");
    for (id, (name, attrs)) in ids.iter().zip(nodes) {
        let attrs: Vec<&str> = attrs.iter().map(|&a| ATTRS[a]).collect();
        g.add_node(
            Node::new(NodeId(*id), NAMES[*name])
                .unwrap()
                .with_attributes(attrs)
                .unwrap(),
        )
        .unwrap();
    }
    if !ids.is_empty() {
        for &(s, t, p) in edges {
            let (s, t) = (ids[s % ids.len()], ids[t % ids.len()]);
            g.add_edge(Edge::new(NodeId(s), NodeId(t), PREDS[p]).unwrap()).unwrap();
        }
    }
    g
}

fn node_specs(max: usize) -> impl Strategy<Value = Vec<NodeSpec>> {
    prop::collection::vec((0..NAMES.len(), prop::collection::vec(0..ATTRS.len(), 0..3)), 0..max)
}

fn edge_specs(max: usize) -> impl Strategy<Value = Vec<(usize, usize, usize)>> {
    prop::collection::vec((0..40usize, 0..40usize, 0..PREDS.len()), 0..max)
}

fn graph(max_nodes: usize) -> impl Strategy<Value = SceneGraph> {
    (
        node_specs(max_nodes),
        edge_specs(2 * max_nodes),
        prop::collection::hash_set(0u64..500, max_nodes),
    )
        .prop_map(|(nodes, edges, ids)| {
            let ids: Vec<u64> = ids.into_iter().take(nodes.len()).collect();
            graph_from(&ids, &nodes[..ids.len()], &edges)
        })
}

/// A prior plus an additive extension of it, built from the same pieces.
fn extension_of(prior: SceneGraph, first_id: u64) -> impl Strategy<Value = SceneGraph> {
    (
        node_specs(4),
        edge_specs(4),
        prop::collection::vec((0..40usize, 0..ATTRS.len()), 0..3),
    )
        .prop_map(move |(nodes, edges, new_attrs)| {
            let mut g = prior.clone();
            for (i, (name, attrs)) in nodes.iter().enumerate() {
                let attrs: Vec<&str> = attrs.iter().map(|&a| ATTRS[a]).collect();
                let n = Node::new(NodeId(first_id + i as u64), NAMES[*name])
                    .unwrap()
                    .with_attributes(attrs)
                    .unwrap();
                g.add_node(n).unwrap();
            }
            let ids: Vec<NodeId> = g.node_ids().collect();
            let prior_ids: Vec<NodeId> = prior.node_ids().collect();
            if !prior_ids.is_empty() {
                for (k, a) in new_attrs {
                    g.add_attributes(prior_ids[k % prior_ids.len()], [ATTRS[a]]).unwrap();
                }
            }
            if !ids.is_empty() {
                for (s, t, p) in edges {
                    let e = Edge::new(ids[s % ids.len()], ids[t % ids.len()], PREDS[p]).unwrap();
                    g.add_edge(e).unwrap();
                }
            }
            g
        })
}

fn triple() -> impl Strategy<Value = (SceneGraph, SceneGraph, SceneGraph)> {
    graph(5).prop_flat_map(|prior| {
        let p = prior.clone();
        (Just(prior.clone()), extension_of(prior, 1000), extension_of(p, 1000))
    })
}

proptest! {
    #[test]
    fn rendering_round_trips(g in graph(12)) {
        let text = render_context(&g, None).unwrap();
        prop_assert_eq!(parse_context(&text).unwrap(), g);
    }

    #[test]
    fn random_ids_are_a_permutation_of_0_to_n(g in graph(12), seed in any::<u64>()) {
        let map = random_id_assignment(&g, seed);
        let mut targets: Vec<u64> = map.values().map(|i| i.0).collect();
        targets.sort();
        prop_assert_eq!(targets, (0..g.node_count() as u64).collect::<Vec<_>>());
        let text = render_context(&g, Some(&map)).unwrap();
        prop_assert_eq!(parse_context(&text).unwrap(), g.relabel(&map).unwrap());
    }

    #[test]
    fn canonical_program_rebuilds_the_reference((prior, _, reference) in triple()) {
        let program = canonicalize(&prior, &reference).unwrap();
        prop_assert_eq!(&execute(&program, &prior).unwrap(), &reference);
        let reparsed = parse_program(&program.to_string()).unwrap();
        prop_assert_eq!(reparsed, program);
    }

    #[test]
    fn metrics_vanish_on_the_reference((prior, _, reference) in triple()) {
        for mode in [MetricMode::Hard, MetricMode::Soft] {
            prop_assert_eq!(ged(&reference, &reference, &prior, mode).unwrap(), 0.0);
            if reference != prior {
                prop_assert_eq!(red(&reference, &reference, &prior, mode, &JaccardSimilarity).unwrap(), 0.0);
            }
        }
    }

    #[test]
    fn soft_never_exceeds_hard((prior, pred, reference) in triple()) {
        let sg = ged(&pred, &reference, &prior, MetricMode::Soft).unwrap();
        let hg = ged(&pred, &reference, &prior, MetricMode::Hard).unwrap();
        prop_assert!(sg <= hg && sg >= 0.0);
        if reference != prior {
            let sr = red(&pred, &reference, &prior, MetricMode::Soft, &JaccardSimilarity).unwrap();
            let hr = red(&pred, &reference, &prior, MetricMode::Hard, &JaccardSimilarity).unwrap();
            prop_assert!(sr <= hr && sr >= 0.0);
        }
    }

    #[test]
    fn empty_prediction_has_unit_soft_red((prior, _, reference) in triple()) {
        prop_assume!(reference != prior);
        let v = red(&prior, &reference, &prior, MetricMode::Soft, &JaccardSimilarity).unwrap();
        prop_assert!((v - 1.0).abs() <= 1e-9, "{}", v);
    }
}
