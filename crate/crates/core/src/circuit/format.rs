//! Line-oriented `.qdag` text format.
//!
//! ```text
//! qdag v1 <node-count>
//! <id> NUM <decimal-label>
//! <id> ESN <variable> <state>
//! <id> ADD <parent-id> [<parent-id> ...]
//! <id> MUL <parent-id> [<parent-id> ...]
//! query <id> <variable> <state>
//! ```

use std::fmt::Write as _;

use thiserror::Error;

use super::{CircuitError, NodeId, NodeKind, QDag, Violation};

#[derive(Debug, Error, PartialEq)]
pub enum ParseError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: node {node} references parent {parent}, which is not defined yet")]
    ForwardReference {
        line: usize,
        node: usize,
        parent: usize,
    },
    #[error("line {line}: {source}")]
    Structure {
        line: usize,
        #[source]
        source: CircuitError,
    },
    #[error("invalid dag: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join(", "))]
    Invalid(Vec<Violation>),
}

/// Renders a label with the shortest decimal that parses back to the same
/// bits.
pub fn format_label(x: f64) -> String {
    let plain = format!("{}", x);
    if plain.len() <= 24 {
        plain
    } else {
        format!("{:e}", x)
    }
}

/// Writes `dag` in canonical form: nodes renumbered into topological order
/// with ascending-id tie-break, then query lines in registration order.
///
/// Panics if the dag is cyclic; serialize only validated dags.
pub fn serialize(dag: &QDag) -> String {
    let order = dag
        .topological_order()
        .expect("serialize called on a cyclic dag");
    let mut new_id = vec![0usize; dag.node_count()];
    for (pos, id) in order.iter().enumerate() {
        new_id[id.index()] = pos;
    }

    let mut out = String::new();
    writeln!(out, "qdag v1 {}", dag.node_count()).unwrap();
    for (pos, &id) in order.iter().enumerate() {
        match dag.kind(id) {
            NodeKind::Num(l) => writeln!(out, "{} NUM {}", pos, format_label(*l)).unwrap(),
            NodeKind::Esn { variable, state } => {
                writeln!(out, "{} ESN {} {}", pos, variable, state).unwrap()
            }
            NodeKind::Add | NodeKind::Mul => {
                let tag = if *dag.kind(id) == NodeKind::Add { "ADD" } else { "MUL" };
                write!(out, "{} {}", pos, tag).unwrap();
                for p in dag.parents(id) {
                    write!(out, " {}", new_id[p.index()]).unwrap();
                }
                out.push('\n');
            }
        }
    }
    for q in dag.queries() {
        writeln!(out, "query {} {} {}", new_id[q.node.index()], q.variable, q.state).unwrap();
    }
    out
}

pub fn parse(text: &str) -> Result<QDag, ParseError> {
    let syntax = |line: usize, message: String| ParseError::Syntax { line, message };
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));

    let (hline, header) = lines
        .next()
        .ok_or_else(|| syntax(1, "missing `qdag v1 <node-count>` header".into()))?;
    let htoks: Vec<&str> = header.split_whitespace().collect();
    if htoks.len() != 3 || htoks[0] != "qdag" || htoks[1] != "v1" {
        return Err(syntax(hline, format!("expected `qdag v1 <node-count>`, found `{}`", header)));
    }
    let count: usize = htoks[2]
        .parse()
        .map_err(|_| syntax(hline, format!("bad node count `{}`", htoks[2])))?;

    let mut dag = QDag::new();
    let mut in_queries = false;
    for (line, text) in lines {
        let toks: Vec<&str> = text.split_whitespace().collect();
        if toks[0] == "query" {
            in_queries = true;
            if toks.len() != 4 {
                return Err(syntax(line, "expected `query <id> <variable> <state>`".into()));
            }
            let id = parse_id(toks[1], line)?;
            dag.add_query(toks[2], toks[3], NodeId::from(id))
                .map_err(|source| ParseError::Structure { line, source })?;
            continue;
        }
        if in_queries {
            return Err(syntax(line, "node line after query lines".into()));
        }
        let id = parse_id(toks[0], line)?;
        if id != dag.node_count() {
            return Err(syntax(
                line,
                format!("expected node id {}, found {}", dag.node_count(), id),
            ));
        }
        if toks.len() < 2 {
            return Err(syntax(line, "missing node type".into()));
        }
        let (kind, parents) = match toks[1] {
            "NUM" => {
                if toks.len() != 3 {
                    return Err(syntax(line, "expected `<id> NUM <label>`".into()));
                }
                let label: f64 = toks[2]
                    .parse()
                    .map_err(|_| syntax(line, format!("bad numeric label `{}`", toks[2])))?;
                (NodeKind::Num(label), Vec::new())
            }
            "ESN" => {
                if toks.len() != 4 {
                    return Err(syntax(line, "expected `<id> ESN <variable> <state>`".into()));
                }
                (NodeKind::esn(toks[2], toks[3]), Vec::new())
            }
            op @ ("ADD" | "MUL") => {
                let mut parents = Vec::with_capacity(toks.len() - 2);
                for t in &toks[2..] {
                    let p = parse_id(t, line)?;
                    if p >= id {
                        return Err(ParseError::ForwardReference { line, node: id, parent: p });
                    }
                    parents.push(NodeId::from(p));
                }
                let kind = if op == "ADD" { NodeKind::Add } else { NodeKind::Mul };
                (kind, parents)
            }
            other => return Err(syntax(line, format!("unknown node type `{}`", other))),
        };
        dag.add_node(kind, &parents)
            .map_err(|source| ParseError::Structure { line, source })?;
    }
    if dag.node_count() != count {
        return Err(syntax(
            hline,
            format!("header declares {} nodes, found {}", count, dag.node_count()),
        ));
    }
    let violations = dag.validate();
    if !violations.is_empty() {
        return Err(ParseError::Invalid(violations));
    }
    Ok(dag)
}

fn parse_id(tok: &str, line: usize) -> Result<usize, ParseError> {
    tok.parse().map_err(|_| ParseError::Syntax {
        line,
        message: format!("bad node id `{}`", tok),
    })
}
