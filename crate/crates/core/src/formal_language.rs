//! The graph update language: parsing, execution and canonical programs.
//!
//! Three commands exist, one per line or separated by `;`:
//!
//! ```text
//! #ADD_NODE(3, dog, [brown, furry])
//! #ADD_ATTR(0, [blue])
//! #ADD_EDGE(3, 0, on)
//! ```
//!
//! Keywords are case-insensitive and whitespace around tokens is ignored.
//! Execution is additive only: nodes, attributes and edges can be added but
//! never removed or renamed.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::scene_graph::{normalize_label, Edge, GraphError, Node, NodeId, SceneGraph};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ParseOp {
    AddNode {
        id: NodeId,
        name: String,
        attributes: Vec<String>,
    },
    AddAttr {
        id: NodeId,
        attributes: Vec<String>,
    },
    AddEdge {
        source: NodeId,
        target: NodeId,
        predicate: String,
    },
}

impl fmt::Display for ParseOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParseOp::AddNode { id, name, attributes } if attributes.is_empty() => write!(f, "#ADD_NODE({id}, {name})"),
            ParseOp::AddNode { id, name, attributes } => {
                write!(f, "#ADD_NODE({id}, {name}, [{}])", attributes.join(", "))
            }
            ParseOp::AddAttr { id, attributes } => write!(f, "#ADD_ATTR({id}, [{}])", attributes.join(", ")),
            ParseOp::AddEdge {
                source,
                target,
                predicate,
            } => write!(f, "#ADD_EDGE({source}, {target}, {predicate})"),
        }
    }
}

/// A semantic parse: an ordered list of update operations. May be empty.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParseProgram {
    pub ops: Vec<ParseOp>,
}

impl ParseProgram {
    pub fn new(ops: Vec<ParseOp>) -> Self {
        Self { ops }
    }
    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }
    pub fn len(&self) -> usize {
        self.ops.len()
    }
}

/// Serialized as its surface text.
impl Serialize for ParseProgram {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ParseProgram {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        parse_program(&text).map_err(serde::de::Error::custom)
    }
}

/// One command per line, in canonical surface syntax.
impl fmt::Display for ParseProgram {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, op) in self.ops.iter().enumerate() {
            if i > 0 {
                f.write_str("\n")?;
            }
            op.fmt(f)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("command {command}: {kind}")]
pub struct ProgramParseError {
    /// 1-based index of the offending command.
    pub command: usize,
    pub kind: ProgramErrorKind,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProgramErrorKind {
    #[error("unknown command {0:?}")]
    UnknownCommand(String),
    #[error("{command} takes {expected} arguments, got {found}")]
    Arity {
        command: &'static str,
        expected: &'static str,
        found: usize,
    },
    #[error("{0:?} is not a non-negative integer node id")]
    InvalidId(String),
    #[error("ADD_ATTR requires a non-empty attribute list")]
    EmptyAttributeList,
    #[error("expected a bracketed attribute list, got {0:?}")]
    ExpectedList(String),
    #[error("malformed command: {0}")]
    Malformed(&'static str),
    #[error(transparent)]
    Label(#[from] GraphError),
}

enum Arg<'a> {
    Scalar(&'a str),
    List(Vec<&'a str>),
}

impl<'a> Arg<'a> {
    fn scalar(&self) -> Result<&'a str, ProgramErrorKind> {
        match self {
            Arg::Scalar(s) => Ok(s),
            Arg::List(_) => Err(ProgramErrorKind::Malformed("unexpected attribute list")),
        }
    }

    fn id(&self) -> Result<NodeId, ProgramErrorKind> {
        let s = self.scalar()?;
        if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) {
            return Err(ProgramErrorKind::InvalidId(s.to_string()));
        }
        s.parse()
            .map(NodeId)
            .map_err(|_| ProgramErrorKind::InvalidId(s.to_string()))
    }

    fn label(&self, kind: &'static str) -> Result<String, ProgramErrorKind> {
        Ok(normalize_label(kind, self.scalar()?)?)
    }

    fn attributes(&self) -> Result<Vec<String>, ProgramErrorKind> {
        match self {
            Arg::List(items) => items
                .iter()
                .map(|a| normalize_label("attribute", a).map_err(Into::into))
                .collect(),
            Arg::Scalar(s) => Err(ProgramErrorKind::ExpectedList(s.to_string())),
        }
    }
}

fn split_args(body: &str) -> Result<Vec<Arg<'_>>, ProgramErrorKind> {
    let mut args = Vec::new();
    let mut rest = body.trim();
    if rest.is_empty() {
        return Ok(args);
    }
    loop {
        let (arg, tail) = if let Some(list) = rest.strip_prefix('[') {
            let close = list.find(']').ok_or(ProgramErrorKind::Malformed("unclosed '['"))?;
            let inner = &list[..close];
            if inner.contains('[') {
                return Err(ProgramErrorKind::Malformed("nested '['"));
            }
            let items = if inner.trim().is_empty() {
                Vec::new()
            } else {
                inner.split(',').map(str::trim).collect()
            };
            let tail = list[close + 1..].trim_start();
            (Arg::List(items), tail)
        } else {
            let end = rest.find(',').unwrap_or(rest.len());
            let scalar = rest[..end].trim();
            if scalar.contains([']', '[']) {
                return Err(ProgramErrorKind::Malformed("stray bracket"));
            }
            (Arg::Scalar(scalar), &rest[end..])
        };
        args.push(arg);
        if tail.is_empty() {
            return Ok(args);
        }
        rest = tail
            .strip_prefix(',')
            .ok_or(ProgramErrorKind::Malformed("expected ',' between arguments"))?
            .trim_start();
    }
}

fn parse_command(cmd: &str) -> Result<ParseOp, ProgramErrorKind> {
    let body = cmd
        .strip_prefix('#')
        .ok_or(ProgramErrorKind::Malformed("command must start with '#'"))?;
    let open = body.find('(').ok_or(ProgramErrorKind::Malformed("missing '('"))?;
    let keyword = body[..open].trim().to_ascii_uppercase();
    let inner = body[open + 1..]
        .trim_end()
        .strip_suffix(')')
        .ok_or(ProgramErrorKind::Malformed("missing closing ')'"))?;
    if inner.contains(['(', ')']) {
        return Err(ProgramErrorKind::Malformed("unbalanced parentheses"));
    }
    let args = split_args(inner)?;
    match keyword.as_str() {
        "ADD_NODE" => {
            if !(2..=3).contains(&args.len()) {
                return Err(ProgramErrorKind::Arity {
                    command: "ADD_NODE",
                    expected: "2 or 3",
                    found: args.len(),
                });
            }
            Ok(ParseOp::AddNode {
                id: args[0].id()?,
                name: args[1].label("node name")?,
                attributes: match args.get(2) {
                    Some(a) => a.attributes()?,
                    None => Vec::new(),
                },
            })
        }
        "ADD_ATTR" => {
            if args.len() != 2 {
                return Err(ProgramErrorKind::Arity {
                    command: "ADD_ATTR",
                    expected: "2",
                    found: args.len(),
                });
            }
            let attributes = args[1].attributes()?;
            if attributes.is_empty() {
                return Err(ProgramErrorKind::EmptyAttributeList);
            }
            Ok(ParseOp::AddAttr {
                id: args[0].id()?,
                attributes,
            })
        }
        "ADD_EDGE" => {
            if args.len() != 3 {
                return Err(ProgramErrorKind::Arity {
                    command: "ADD_EDGE",
                    expected: "3",
                    found: args.len(),
                });
            }
            Ok(ParseOp::AddEdge {
                source: args[0].id()?,
                target: args[1].id()?,
                predicate: args[2].label("predicate")?,
            })
        }
        _ => Err(ProgramErrorKind::UnknownCommand(keyword)),
    }
}

/// Parses program text. Commands are separated by newlines or `;`; blank
/// commands are skipped.
pub fn parse_program(text: &str) -> Result<ParseProgram, ProgramParseError> {
    let ops = text
        .split(['\n', ';'])
        .map(str::trim)
        .filter(|c| !c.is_empty())
        .enumerate()
        .map(|(i, c)| parse_command(c).map_err(|kind| ProgramParseError { command: i + 1, kind }))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ParseProgram { ops })
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("operation {op}: {kind}")]
pub struct ExecError {
    /// 1-based index of the failing operation.
    pub op: usize,
    pub kind: ExecErrorKind,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExecErrorKind {
    #[error("node id {0} already exists")]
    DuplicateId(NodeId),
    #[error("node id {0} has not been added")]
    UnknownId(NodeId),
    #[error(transparent)]
    Label(GraphError),
}

fn apply(graph: &mut SceneGraph, op: &ParseOp) -> Result<(), ExecErrorKind> {
    let label = ExecErrorKind::Label;
    match op {
        ParseOp::AddNode { id, name, attributes } => {
            if graph.contains_node(*id) {
                return Err(ExecErrorKind::DuplicateId(*id));
            }
            let node = Node::new(*id, name)
                .and_then(|n| n.with_attributes(attributes))
                .map_err(label)?;
            graph.add_node(node).map_err(label)
        }
        ParseOp::AddAttr { id, attributes } => {
            if !graph.contains_node(*id) {
                return Err(ExecErrorKind::UnknownId(*id));
            }
            graph.add_attributes(*id, attributes).map(drop).map_err(label)
        }
        ParseOp::AddEdge {
            source,
            target,
            predicate,
        } => {
            for end in [source, target] {
                if !graph.contains_node(*end) {
                    return Err(ExecErrorKind::UnknownId(*end));
                }
            }
            let edge = Edge::new(*source, *target, predicate).map_err(label)?;
            graph.add_edge(edge).map(drop).map_err(label)
        }
    }
}

/// Applies `program` to `prior`, returning the updated context. Repeated
/// attributes and edges are no-ops; `prior` itself is untouched.
pub fn execute(program: &ParseProgram, prior: &SceneGraph) -> Result<SceneGraph, ExecError> {
    let mut graph = prior.clone();
    for (i, op) in program.ops.iter().enumerate() {
        apply(&mut graph, op).map_err(|kind| ExecError { op: i + 1, kind })?;
    }
    Ok(graph)
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("reference does not extend prior: {0}")]
pub struct NonMonotonicUpdate(pub String);

/// Reference program turning `prior` into `reference`: attribute additions
/// on existing nodes first, then new nodes with their attributes, then new
/// edges, each group in ascending id order.
pub fn canonicalize(prior: &SceneGraph, reference: &SceneGraph) -> Result<ParseProgram, NonMonotonicUpdate> {
    if let Some(why) = reference.additive_violation(prior) {
        return Err(NonMonotonicUpdate(why));
    }
    let mut ops = Vec::new();
    for old in prior.nodes() {
        let new = reference.node(old.id()).expect("checked superset");
        let added: Vec<String> = new.attributes().difference(old.attributes()).cloned().collect();
        if !added.is_empty() {
            ops.push(ParseOp::AddAttr {
                id: old.id(),
                attributes: added,
            });
        }
    }
    for n in reference.nodes().filter(|n| !prior.contains_node(n.id())) {
        ops.push(ParseOp::AddNode {
            id: n.id(),
            name: n.name().to_string(),
            attributes: n.attributes().iter().cloned().collect(),
        });
    }
    for e in reference.edges().filter(|e| !prior.contains_edge(e)) {
        ops.push(ParseOp::AddEdge {
            source: e.source(),
            target: e.target(),
            predicate: e.predicate().to_string(),
        });
    }
    Ok(ParseProgram { ops })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> SceneGraph {
        SceneGraph::new("s")
            .with_node(Node::new(NodeId(0), "table").unwrap())
            .unwrap()
    }

    fn node(id: u64, name: &str, attrs: &[&str]) -> ParseOp {
        ParseOp::AddNode {
            id: NodeId(id),
            name: name.into(),
            attributes: attrs.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn edge(s: u64, t: u64, p: &str) -> ParseOp {
        ParseOp::AddEdge {
            source: NodeId(s),
            target: NodeId(t),
            predicate: p.into(),
        }
    }

    #[test]
    fn empty_text_is_empty_program() {
        assert!(parse_program("").unwrap().is_empty());
        assert!(parse_program(" \n ;; \n").unwrap().is_empty());
    }

    #[test]
    fn golden_parse() {
        let p = parse_program("#ADD_NODE(3, dog, [brown, furry])\n#ADD_EDGE(3, 0, on)").unwrap();
        assert_eq!(p.ops, vec![node(3, "dog", &["brown", "furry"]), edge(3, 0, "on")]);
    }

    #[test]
    fn tolerant_of_case_whitespace_and_semicolons() {
        let p = parse_program("  #add_node ( 1 , Big  Dog , [ ] ) ;#Add_Attr(1,[Brown]);  # ADD_EDGE(1,0, next to)")
            .unwrap();
        assert_eq!(
            p.ops,
            vec![
                node(1, "big dog", &[]),
                ParseOp::AddAttr {
                    id: NodeId(1),
                    attributes: vec!["brown".into()]
                },
                edge(1, 0, "next to"),
            ]
        );
    }

    #[test]
    fn display_round_trips() {
        let p = parse_program(
            "#ADD_ATTR(0, [blue, wooden]); #ADD_NODE(1, chair); #ADD_NODE(2, cup, [red]); #ADD_EDGE(1, 0, near)",
        )
        .unwrap();
        assert_eq!(
            p.to_string(),
            "#ADD_ATTR(0, [blue, wooden])\n#ADD_NODE(1, chair)\n#ADD_NODE(2, cup, [red])\n#ADD_EDGE(1, 0, near)"
        );
        assert_eq!(parse_program(&p.to_string()).unwrap(), p);
    }

    #[test]
    fn parse_errors_carry_command_index() {
        type Case = (&'static str, usize, fn(&ProgramErrorKind) -> bool);
        let cases: Vec<Case> = vec![
            ("#ADD_ATTR(3, [])", 1, |k| *k == ProgramErrorKind::EmptyAttributeList),
            (
                "#ADD_NODE(1, a)\n#DELETE(1)",
                2,
                |k| matches!(k, ProgramErrorKind::UnknownCommand(c) if c == "DELETE"),
            ),
            ("#ADD_EDGE(1, 2)", 1, |k| {
                matches!(k, ProgramErrorKind::Arity { found: 2, .. })
            }),
            ("#ADD_NODE(x, dog)", 1, |k| matches!(k, ProgramErrorKind::InvalidId(_))),
            ("#ADD_NODE(-1, dog)", 1, |k| matches!(k, ProgramErrorKind::InvalidId(_))),
            ("#ADD_NODE(1, dog, brown)", 1, |k| {
                matches!(k, ProgramErrorKind::ExpectedList(_))
            }),
            ("#ADD_ATTR(1, blue)", 1, |k| {
                matches!(k, ProgramErrorKind::ExpectedList(_))
            }),
            ("ADD_NODE(1, dog)", 1, |k| matches!(k, ProgramErrorKind::Malformed(_))),
            ("#ADD_NODE(1, dog", 1, |k| matches!(k, ProgramErrorKind::Malformed(_))),
            ("#ADD_NODE(1, dog, [a, [b]])", 1, |k| {
                matches!(k, ProgramErrorKind::Malformed(_))
            }),
            ("#ADD_NODE(1, , [a])", 1, |k| matches!(k, ProgramErrorKind::Label(_))),
            ("#ADD_NODE(1, dog, [a,])", 1, |k| {
                matches!(k, ProgramErrorKind::Label(_))
            }),
        ];
        for (text, idx, check) in cases {
            let e = parse_program(text).unwrap_err();
            assert_eq!(e.command, idx, "{text}");
            assert!(check(&e.kind), "{text}: {:?}", e.kind);
        }
    }

    #[test]
    fn execute_identity_and_construction() {
        let prior = table();
        assert_eq!(execute(&ParseProgram::default(), &prior).unwrap(), prior);

        let p = ParseProgram::new(vec![node(1, "chair", &[]), edge(1, 0, "near")]);
        let out = execute(&p, &prior).unwrap();
        let expected = table()
            .with_node(Node::new(NodeId(1), "chair").unwrap())
            .unwrap()
            .with_edge(Edge::new(NodeId(1), NodeId(0), "near").unwrap())
            .unwrap();
        assert_eq!(out, expected);
        assert_eq!(prior, table());
    }

    #[test]
    fn execute_errors() {
        let prior = table();
        let e = execute(&ParseProgram::new(vec![edge(1, 0, "near")]), &prior).unwrap_err();
        assert_eq!(
            e,
            ExecError {
                op: 1,
                kind: ExecErrorKind::UnknownId(NodeId(1))
            }
        );

        let e = execute(&ParseProgram::new(vec![node(1, "a", &[]), node(0, "b", &[])]), &prior).unwrap_err();
        assert_eq!(
            e,
            ExecError {
                op: 2,
                kind: ExecErrorKind::DuplicateId(NodeId(0))
            }
        );

        let attr = ParseOp::AddAttr {
            id: NodeId(5),
            attributes: vec!["red".into()],
        };
        assert_eq!(
            execute(&ParseProgram::new(vec![attr]), &prior).unwrap_err().kind,
            ExecErrorKind::UnknownId(NodeId(5))
        );

        let bad = node(1, "a(b", &[]);
        assert!(matches!(
            execute(&ParseProgram::new(vec![bad]), &prior).unwrap_err().kind,
            ExecErrorKind::Label(_)
        ));
    }

    #[test]
    fn repeated_content_is_idempotent() {
        let p = parse_program(
            "#ADD_NODE(1, chair, [red]); #ADD_ATTR(1, [red]); #ADD_EDGE(1, 0, near); #ADD_EDGE(1, 0, near)",
        )
        .unwrap();
        let once = parse_program("#ADD_NODE(1, chair, [red]); #ADD_EDGE(1, 0, near)").unwrap();
        assert_eq!(execute(&p, &table()).unwrap(), execute(&once, &table()).unwrap());
    }

    #[test]
    fn canonical_order() {
        let prior = table();
        let reference = SceneGraph::new("s")
            .with_node(
                Node::new(NodeId(0), "table")
                    .unwrap()
                    .with_attributes(["blue"])
                    .unwrap(),
            )
            .unwrap()
            .with_node(Node::new(NodeId(1), "chair").unwrap())
            .unwrap()
            .with_edge(Edge::new(NodeId(1), NodeId(0), "near").unwrap())
            .unwrap();
        let p = canonicalize(&prior, &reference).unwrap();
        assert_eq!(
            p.ops,
            vec![
                ParseOp::AddAttr {
                    id: NodeId(0),
                    attributes: vec!["blue".into()]
                },
                node(1, "chair", &[]),
                edge(1, 0, "near"),
            ]
        );
        assert_eq!(execute(&p, &prior).unwrap(), reference);
        assert!(canonicalize(&reference, &reference).unwrap().is_empty());
        assert!(canonicalize(&reference, &prior).is_err());
    }
}
