//! Scene-graph context tracking: a graph model with a text rendering, a
//! small update language, edit-distance metrics between graph updates,
//! dataset construction from annotated scenes, and training objectives.

pub mod dataset;
pub mod formal_language;
pub mod harness;
pub mod io;
pub mod metrics;
pub mod objectives;
pub mod scene_graph;
pub mod similarity;

pub use formal_language::{canonicalize, execute, parse_program, ParseOp, ParseProgram};
pub use metrics::{ged, red, MetricMode};
pub use scene_graph::{parse_context, render_context, BBox, Edge, Node, NodeId, SceneGraph};
pub use similarity::{ExactSimilarity, JaccardSimilarity, SimilarityProvider};
