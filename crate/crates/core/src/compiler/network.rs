//! Discrete belief networks and the `.bn` text format.

use std::collections::HashMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::circuit::format_label;

const ROW_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum NetworkError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: variable `{parent}` is used as a parent of `{child}` before it is declared")]
    UndeclaredParent {
        line: usize,
        child: String,
        parent: String,
    },
    #[error("line {line}: unknown variable `{name}`")]
    UnknownVariable { line: usize, name: String },
    #[error("line {line}: variable `{name}` declared twice")]
    DuplicateVariable { line: usize, name: String },
    #[error("parent graph has a cycle through `{0}`")]
    Cycle(String),
    #[error("line {line}: row [{row}] of `{variable}` sums to {sum}, expected 1")]
    RowSum {
        line: usize,
        variable: String,
        row: String,
        sum: f64,
    },
    #[error("line {line}: probability {value} outside [0, 1] in `{variable}`")]
    BadProbability {
        line: usize,
        variable: String,
        value: f64,
    },
    #[error("variable `{variable}` is missing the row for [{row}]")]
    MissingRow { variable: String, row: String },
    #[error("line {line}: duplicate row [{row}] for `{variable}`")]
    DuplicateRow {
        line: usize,
        variable: String,
        row: String,
    },
    #[error("variable `{0}` has no cpt")]
    MissingCpt(String),
    #[error("line {line}: second cpt for `{variable}`")]
    DuplicateCpt { line: usize, variable: String },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Variable {
    pub name: String,
    pub states: Vec<String>,
}

impl Variable {
    pub fn card(&self) -> usize {
        self.states.len()
    }

    pub fn state_index(&self, state: &str) -> Option<usize> {
        self.states.iter().position(|s| s == state)
    }
}

/// A discrete belief network. CPT rows are stored flat in canonical order:
/// parent-state combinations with the last parent cycling fastest, then the
/// child's states within a row.
#[derive(Clone, Debug, PartialEq)]
pub struct BeliefNetwork {
    pub name: String,
    pub variables: Vec<Variable>,
    pub parents: Vec<Vec<usize>>,
    pub cpts: Vec<Vec<f64>>,
    index: HashMap<String, usize>,
}

impl BeliefNetwork {
    /// Builds and checks a network from parts. Row sums, table sizes,
    /// parent indices and acyclicity are verified.
    pub fn new(
        name: impl Into<String>,
        variables: Vec<Variable>,
        parents: Vec<Vec<usize>>,
        cpts: Vec<Vec<f64>>,
    ) -> Result<Self, NetworkError> {
        let mut index = HashMap::new();
        for (i, v) in variables.iter().enumerate() {
            if index.insert(v.name.clone(), i).is_some() {
                return Err(NetworkError::DuplicateVariable { line: 0, name: v.name.clone() });
            }
        }
        let net = BeliefNetwork {
            name: name.into(),
            variables,
            parents,
            cpts,
            index,
        };
        for v in 0..net.variables.len() {
            for &p in &net.parents[v] {
                if p >= net.variables.len() {
                    return Err(NetworkError::UnknownVariable { line: 0, name: format!("#{}", p) });
                }
            }
            let card = net.variables[v].card();
            let rows = net.row_count(v);
            if net.cpts[v].len() != rows * card {
                return Err(NetworkError::MissingRow {
                    variable: net.variables[v].name.clone(),
                    row: format!("table has {} entries, expected {}", net.cpts[v].len(), rows * card),
                });
            }
            for r in 0..rows {
                let row = &net.cpts[v][r * card..(r + 1) * card];
                check_row(&net, v, r, row, 0)?;
            }
        }
        net.check_acyclic()?;
        Ok(net)
    }

    pub fn var_index(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn row_count(&self, v: usize) -> usize {
        self.parents[v]
            .iter()
            .map(|&p| self.variables[p].card())
            .product()
    }

    /// Row index for the given parent states (one per parent, in order).
    pub fn row_index(&self, v: usize, parent_states: &[usize]) -> usize {
        let mut r = 0;
        for (k, &p) in self.parents[v].iter().enumerate() {
            r = r * self.variables[p].card() + parent_states[k];
        }
        r
    }

    /// `Pr(v = state | parents)` read off the CPT.
    pub fn prob(&self, v: usize, parent_states: &[usize], state: usize) -> f64 {
        let card = self.variables[v].card();
        self.cpts[v][self.row_index(v, parent_states) * card + state]
    }

    fn row_label(&self, v: usize, row: usize) -> String {
        let mut states = Vec::new();
        let mut r = row;
        for &p in self.parents[v].iter().rev() {
            let c = self.variables[p].card();
            states.push(self.variables[p].states[r % c].clone());
            r /= c;
        }
        states.reverse();
        states.join(" ")
    }

    fn check_acyclic(&self) -> Result<(), NetworkError> {
        // 0 = unvisited, 1 = on stack, 2 = done
        let n = self.variables.len();
        let mut mark = vec![0u8; n];
        for start in 0..n {
            if mark[start] != 0 {
                continue;
            }
            let mut stack = vec![(start, 0usize)];
            mark[start] = 1;
            while let Some(&mut (v, ref mut k)) = stack.last_mut() {
                if *k < self.parents[v].len() {
                    let p = self.parents[v][*k];
                    *k += 1;
                    match mark[p] {
                        0 => {
                            mark[p] = 1;
                            stack.push((p, 0));
                        }
                        1 => return Err(NetworkError::Cycle(self.variables[p].name.clone())),
                        _ => {}
                    }
                } else {
                    mark[v] = 2;
                    stack.pop();
                }
            }
        }
        Ok(())
    }

    /// Variables ordered so that parents precede children.
    pub fn topological_order(&self) -> Vec<usize> {
        let n = self.variables.len();
        let mut done = vec![false; n];
        let mut order = Vec::with_capacity(n);
        while order.len() < n {
            for v in 0..n {
                if !done[v] && self.parents[v].iter().all(|&p| done[p]) {
                    done[v] = true;
                    order.push(v);
                }
            }
        }
        order
    }

    /// Renders the network in canonical `.bn` form.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "network {}", self.name).unwrap();
        for v in &self.variables {
            writeln!(out, "variable {} : {}", v.name, v.states.join(" ")).unwrap();
        }
        for (v, var) in self.variables.iter().enumerate() {
            if self.parents[v].is_empty() {
                writeln!(out, "cpt {}", var.name).unwrap();
            } else {
                let ps: Vec<&str> = self.parents[v]
                    .iter()
                    .map(|&p| self.variables[p].name.as_str())
                    .collect();
                writeln!(out, "cpt {} | {}", var.name, ps.join(" ")).unwrap();
            }
            let card = var.card();
            for r in 0..self.row_count(v) {
                let probs: Vec<String> = self.cpts[v][r * card..(r + 1) * card]
                    .iter()
                    .map(|&p| format_label(p))
                    .collect();
                if self.parents[v].is_empty() {
                    writeln!(out, "  row {}", probs.join(" ")).unwrap();
                } else {
                    writeln!(out, "  row {} : {}", self.row_label(v, r), probs.join(" ")).unwrap();
                }
            }
            writeln!(out, "end").unwrap();
        }
        out
    }
}

fn check_row(net: &BeliefNetwork, v: usize, r: usize, row: &[f64], line: usize) -> Result<(), NetworkError> {
    for &p in row {
        if !(0.0..=1.0).contains(&p) {
            return Err(NetworkError::BadProbability {
                line,
                variable: net.variables[v].name.clone(),
                value: p,
            });
        }
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
        return Err(NetworkError::RowSum {
            line,
            variable: net.variables[v].name.clone(),
            row: net.row_label(v, r),
            sum,
        });
    }
    Ok(())
}

struct CptBlock {
    line: usize,
    var: usize,
    rows: Vec<Option<(usize, Vec<f64>)>>,
}

pub fn parse_network(text: &str) -> Result<BeliefNetwork, NetworkError> {
    let syntax = |line: usize, message: String| NetworkError::Syntax { line, message };
    let mut name: Option<String> = None;
    let mut variables: Vec<Variable> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut parents: Vec<Option<Vec<usize>>> = Vec::new();
    let mut blocks: Vec<CptBlock> = Vec::new();
    let mut open: Option<CptBlock> = None;

    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let l = raw.trim();
        if l.is_empty() || l.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = l.split_whitespace().collect();
        match toks[0] {
            "network" => {
                if toks.len() != 2 || name.is_some() || !variables.is_empty() {
                    return Err(syntax(line, "expected a single leading `network <name>`".into()));
                }
                name = Some(toks[1].to_string());
            }
            "variable" => {
                if open.is_some() {
                    return Err(syntax(line, "`variable` inside a cpt block".into()));
                }
                if toks.len() < 4 || toks[2] != ":" {
                    return Err(syntax(line, "expected `variable <name> : <state> ...`".into()));
                }
                let vname = toks[1].to_string();
                if index.contains_key(&vname) {
                    return Err(NetworkError::DuplicateVariable { line, name: vname });
                }
                let states: Vec<String> = toks[3..].iter().map(|s| s.to_string()).collect();
                for (k, s) in states.iter().enumerate() {
                    if states[..k].contains(s) {
                        return Err(syntax(line, format!("state `{}` repeated", s)));
                    }
                }
                index.insert(vname.clone(), variables.len());
                variables.push(Variable { name: vname, states });
                parents.push(None);
            }
            "cpt" => {
                if open.is_some() {
                    return Err(syntax(line, "nested cpt block (missing `end`)".into()));
                }
                if toks.len() < 2 {
                    return Err(syntax(line, "expected `cpt <var> [| <parents>]`".into()));
                }
                let v = *index.get(toks[1]).ok_or_else(|| NetworkError::UnknownVariable {
                    line,
                    name: toks[1].to_string(),
                })?;
                if parents[v].is_some() {
                    return Err(NetworkError::DuplicateCpt { line, variable: toks[1].to_string() });
                }
                let ps = match toks.get(2) {
                    None => Vec::new(),
                    Some(&"|") if toks.len() > 3 => {
                        let mut ps = Vec::new();
                        for p in &toks[3..] {
                            let pi = *index.get(*p).ok_or_else(|| NetworkError::UndeclaredParent {
                                line,
                                child: toks[1].to_string(),
                                parent: p.to_string(),
                            })?;
                            if ps.contains(&pi) {
                                return Err(syntax(line, format!("parent `{}` repeated", p)));
                            }
                            ps.push(pi);
                        }
                        ps
                    }
                    _ => return Err(syntax(line, "expected `cpt <var> [| <parents>]`".into())),
                };
                let rows: usize = ps.iter().map(|&p| variables[p].card()).product();
                parents[v] = Some(ps);
                open = Some(CptBlock { line, var: v, rows: vec![None; rows] });
            }
            "row" => {
                let block = open
                    .as_mut()
                    .ok_or_else(|| syntax(line, "`row` outside a cpt block".into()))?;
                let v = block.var;
                let ps = parents[v].as_ref().unwrap();
                let (prefix, probs) = match toks.iter().position(|t| *t == ":") {
                    Some(k) => (&toks[1..k], &toks[k + 1..]),
                    None => (&toks[1..1], &toks[1..]),
                };
                if prefix.len() != ps.len() {
                    return Err(syntax(
                        line,
                        format!("row needs {} parent state(s), found {}", ps.len(), prefix.len()),
                    ));
                }
                let mut r = 0;
                for (k, s) in prefix.iter().enumerate() {
                    let pv = &variables[ps[k]];
                    let si = pv.state_index(s).ok_or_else(|| {
                        syntax(line, format!("`{}` is not a state of `{}`", s, pv.name))
                    })?;
                    r = r * pv.card() + si;
                }
                if probs.len() != variables[v].card() {
                    return Err(syntax(
                        line,
                        format!("row needs {} probabilities, found {}", variables[v].card(), probs.len()),
                    ));
                }
                let mut values = Vec::with_capacity(probs.len());
                for t in probs {
                    values.push(
                        t.parse::<f64>()
                            .map_err(|_| syntax(line, format!("bad probability `{}`", t)))?,
                    );
                }
                if block.rows[r].is_some() {
                    return Err(NetworkError::DuplicateRow {
                        line,
                        variable: variables[v].name.clone(),
                        row: prefix.join(" "),
                    });
                }
                block.rows[r] = Some((line, values));
            }
            "end" => {
                let block = open
                    .take()
                    .ok_or_else(|| syntax(line, "`end` without a cpt block".into()))?;
                blocks.push(block);
            }
            other => return Err(syntax(line, format!("unknown directive `{}`", other))),
        }
    }
    if let Some(b) = open {
        return Err(syntax(b.line, "cpt block is missing `end`".into()));
    }
    let name = name.unwrap_or_else(|| "unnamed".to_string());

    let n = variables.len();
    let mut cpts: Vec<Vec<f64>> = vec![Vec::new(); n];
    let mut lines: Vec<Vec<usize>> = vec![Vec::new(); n];
    for b in blocks {
        for (r, row) in b.rows.into_iter().enumerate() {
            match row {
                Some((l, vals)) => {
                    lines[b.var].push(l);
                    cpts[b.var].extend(vals);
                }
                None => {
                    let partial = BeliefNetwork {
                        name: name.clone(),
                        variables: variables.clone(),
                        parents: parents.iter().map(|p| p.clone().unwrap_or_default()).collect(),
                        cpts: Vec::new(),
                        index: index.clone(),
                    };
                    return Err(NetworkError::MissingRow {
                        variable: variables[b.var].name.clone(),
                        row: partial.row_label(b.var, r),
                    });
                }
            }
        }
    }
    let mut ps = Vec::with_capacity(n);
    for (v, p) in parents.into_iter().enumerate() {
        ps.push(p.ok_or_else(|| NetworkError::MissingCpt(variables[v].name.clone()))?);
    }
    let net = BeliefNetwork {
        name,
        variables,
        parents: ps,
        cpts,
        index,
    };
    for v in 0..n {
        let card = net.variables[v].card();
        for r in 0..net.row_count(v) {
            check_row(&net, v, r, &net.cpts[v][r * card..(r + 1) * card], lines[v][r])?;
        }
    }
    net.check_acyclic()?;
    Ok(net)
}

/// The two-variable network used throughout the docs and tests.
pub const TINY_NETWORK: &str = "\
network tiny
variable A : on off
variable B : on off
cpt A
  row 0.5 0.5
end
cpt B | A
  row on  : 0.6  0.4
  row off : 0.28 0.72
end
";

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_tiny() {
        let net = parse_network(TINY_NETWORK).unwrap();
        assert_eq!(net.name, "tiny");
        assert_eq!(net.variables.len(), 2);
        assert_eq!(net.variables[0].name, "A");
        assert_eq!(net.parents[1], vec![0]);
        assert_eq!(net.prob(1, &[1], 0), 0.28);
        assert_eq!(net.prob(0, &[], 1), 0.5);
    }

    #[test]
    fn rows_are_normalized_to_canonical_order() {
        let text = "network t\nvariable A : a b\nvariable B : x y\ncpt A\n row 0.5 0.5\nend\n\
                    cpt B | A\n row b : 0.1 0.9\n row a : 0.2 0.8\nend\n";
        let net = parse_network(text).unwrap();
        assert_eq!(net.cpts[1], vec![0.2, 0.8, 0.1, 0.9]);
        assert_eq!(parse_network(&net.to_text()).unwrap(), net);
    }

    #[test]
    fn last_parent_cycles_fastest() {
        let text = "network t\nvariable A : a0 a1\nvariable B : b0 b1 b2\nvariable C : c0 c1\n\
                    cpt A\n row 0.5 0.5\nend\ncpt B\n row 0.2 0.3 0.5\nend\n\
                    cpt C | A B\n row a0 b0 : 1 0\n row a0 b1 : 0.9 0.1\n row a0 b2 : 0.8 0.2\n\
                    row a1 b0 : 0.7 0.3\n row a1 b1 : 0.6 0.4\n row a1 b2 : 0.5 0.5\nend\n";
        let net = parse_network(text).unwrap();
        assert_eq!(net.row_index(2, &[1, 0]), 3);
        assert_eq!(net.prob(2, &[1, 0], 0), 0.7);
        assert_eq!(net.prob(2, &[0, 2], 1), 0.2);
    }

    #[test]
    fn row_sum_error_names_row() {
        let text = TINY_NETWORK.replace("0.28 0.72", "0.28 0.62");
        match parse_network(&text) {
            Err(NetworkError::RowSum { row, variable, line, .. }) => {
                assert_eq!(row, "off");
                assert_eq!(variable, "B");
                assert_eq!(line, 9);
            }
            other => panic!("{:?}", other),
        }
    }

    #[test]
    fn undeclared_parent() {
        let text = "network t\nvariable B : x y\ncpt B | A\n row a : 0.5 0.5\nend\nvariable A : a b\n";
        assert!(matches!(parse_network(text), Err(NetworkError::UndeclaredParent { line: 3, .. })));
    }

    #[test]
    fn structural_errors() {
        let cyc = "network t\nvariable A : a b\nvariable B : x y\n\
                   cpt A | B\n row x : 0.5 0.5\n row y : 0.5 0.5\nend\n\
                   cpt B | A\n row a : 0.5 0.5\n row b : 0.5 0.5\nend\n";
        assert!(matches!(parse_network(cyc), Err(NetworkError::Cycle(_))));

        let missing = TINY_NETWORK.replace("  row off : 0.28 0.72\n", "");
        assert!(matches!(parse_network(&missing), Err(NetworkError::MissingRow { .. })));

        let dup = TINY_NETWORK.replace("  row off : 0.28 0.72\n", "  row on : 0.28 0.72\n");
        assert!(matches!(parse_network(&dup), Err(NetworkError::DuplicateRow { .. })));

        let nocpt = "network t\nvariable A : a b\n";
        assert!(matches!(parse_network(nocpt), Err(NetworkError::MissingCpt(_))));

        let bad = TINY_NETWORK.replace("0.5 0.5", "1.5 -0.5");
        assert!(matches!(parse_network(&bad), Err(NetworkError::BadProbability { .. })));

        let unterminated = "network t\nvariable A : a b\ncpt A\n row 0.5 0.5\n";
        assert!(matches!(parse_network(unterminated), Err(NetworkError::Syntax { .. })));
    }
}
