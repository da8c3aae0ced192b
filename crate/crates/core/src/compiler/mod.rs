//! Belief network to Q-DAG compilation by symbolic variable elimination.
//!
//! Every CPT entry becomes a `Num` node and every (evidence variable, state)
//! pair an `Esn` node, held in a unary indicator factor. Eliminating a
//! variable multiplies the factors that mention it (`Mul` nodes) and sums
//! the variable out (`Add` nodes). Each query variable is compiled on its
//! own; the expressions for its states share whatever they have in common.

mod network;

pub use network::{parse_network, BeliefNetwork, NetworkError, Variable, TINY_NETWORK};

use std::collections::BTreeSet;

use thiserror::Error;

use crate::circuit::{NodeId, NodeKind, QDag};

#[derive(Debug, Error, PartialEq)]
pub enum CompileError {
    #[error("unknown variable `{0}`")]
    UnknownVariable(String),
    #[error("no query variables given")]
    NoQuery,
    #[error("elimination order must list every non-query variable exactly once")]
    BadOrder,
}

/// Which variables get query nodes and which get evidence nodes.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CompileSpec {
    pub query: Vec<String>,
    pub evidence: Vec<String>,
}

impl CompileSpec {
    pub fn new<Q, E>(query: Q, evidence: E) -> Self
    where
        Q: IntoIterator,
        Q::Item: Into<String>,
        E: IntoIterator,
        E::Item: Into<String>,
    {
        CompileSpec {
            query: query.into_iter().map(Into::into).collect(),
            evidence: evidence.into_iter().map(Into::into).collect(),
        }
    }

    /// Resolves names to variable indices in declaration order.
    fn resolve(&self, net: &BeliefNetwork) -> Result<(Vec<usize>, Vec<usize>), CompileError> {
        let lookup = |names: &[String]| -> Result<Vec<usize>, CompileError> {
            let mut set = BTreeSet::new();
            for n in names {
                set.insert(
                    net.var_index(n)
                        .ok_or_else(|| CompileError::UnknownVariable(n.clone()))?,
                );
            }
            Ok(set.into_iter().collect())
        };
        let q = lookup(&self.query)?;
        if q.is_empty() {
            return Err(CompileError::NoQuery);
        }
        Ok((q, lookup(&self.evidence)?))
    }
}

/// Where a compiled `Num` node came from: entry `entry` of the flat CPT of
/// `variable`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CptEntry {
    pub variable: usize,
    pub entry: usize,
}

#[derive(Clone, Debug)]
pub struct Compiled {
    pub dag: QDag,
    /// Per node of `dag`, the CPT entry it was created for, if any.
    pub cpt_origin: Vec<Option<CptEntry>>,
}

/// Greedy min-degree order over the variables not in `keep`: each step
/// eliminates the variable whose elimination factor (itself plus its current
/// neighbours in the moral graph) has the fewest entries. Ties go to the
/// earlier declared variable.
pub fn elimination_order(net: &BeliefNetwork, keep: &[usize]) -> Vec<usize> {
    let n = net.variables.len();
    let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
    let link = |a: usize, b: usize, adj: &mut Vec<BTreeSet<usize>>| {
        if a != b {
            adj[a].insert(b);
            adj[b].insert(a);
        }
    };
    for v in 0..n {
        let ps = &net.parents[v];
        for (i, &p) in ps.iter().enumerate() {
            link(v, p, &mut adj);
            for &q in &ps[i + 1..] {
                link(p, q, &mut adj);
            }
        }
    }
    let mut alive: Vec<bool> = (0..n).map(|v| !keep.contains(&v)).collect();
    let mut order = Vec::new();
    loop {
        let best = (0..n).filter(|&v| alive[v]).min_by_key(|&v| {
            adj[v]
                .iter()
                .map(|&u| net.variables[u].card())
                .fold(net.variables[v].card(), |acc, c| acc.saturating_mul(c))
        });
        let Some(v) = best else { break };
        alive[v] = false;
        order.push(v);
        let nbrs: Vec<usize> = adj[v].iter().copied().collect();
        for (i, &a) in nbrs.iter().enumerate() {
            adj[a].remove(&v);
            for &b in &nbrs[i + 1..] {
                link(a, b, &mut adj);
            }
        }
        adj[v].clear();
    }
    order
}

struct Factor {
    scope: Vec<usize>,
    entries: Vec<NodeId>,
}

struct Builder<'n> {
    net: &'n BeliefNetwork,
    dag: QDag,
    cpt_origin: Vec<Option<CptEntry>>,
}

impl<'n> Builder<'n> {
    fn node(&mut self, kind: NodeKind, parents: &[NodeId]) -> NodeId {
        let id = self.dag.add_node(kind, parents).expect("compiler emits valid nodes");
        self.cpt_origin.push(None);
        id
    }

    fn mul(&mut self, operands: &[NodeId]) -> NodeId {
        if operands.len() == 1 {
            return operands[0];
        }
        // Operands come from distinct factors, so they never repeat.
        debug_assert!(operands.iter().enumerate().all(|(i, a)| !operands[..i].contains(a)));
        self.node(NodeKind::Mul, operands)
    }

    fn add(&mut self, operands: &[NodeId]) -> NodeId {
        if operands.len() == 1 {
            return operands[0];
        }
        self.node(NodeKind::Add, operands)
    }

    fn cpt_factor(&mut self, v: usize) -> Factor {
        let mut scope = self.net.parents[v].clone();
        scope.push(v);
        let entries = self.net.cpts[v]
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                let id = self.node(NodeKind::Num(p), &[]);
                self.cpt_origin[id.index()] = Some(CptEntry { variable: v, entry: i });
                id
            })
            .collect();
        Factor { scope, entries }
    }

    fn card(&self, v: usize) -> usize {
        self.net.variables[v].card()
    }

    /// Pointwise product over the union of the scopes.
    fn product(&mut self, factors: &[Factor]) -> Factor {
        let mut scope: Vec<usize> = Vec::new();
        for f in factors {
            for &v in &f.scope {
                if !scope.contains(&v) {
                    scope.push(v);
                }
            }
        }
        let cards: Vec<usize> = scope.iter().map(|&v| self.card(v)).collect();
        let size: usize = cards.iter().product();
        // strides[f][k]: step of factor f's index when scope[k] advances.
        let strides: Vec<Vec<usize>> = factors
            .iter()
            .map(|f| {
                scope
                    .iter()
                    .map(|v| match f.scope.iter().position(|u| u == v) {
                        Some(pos) => f.scope[pos + 1..].iter().map(|&u| self.card(u)).product(),
                        None => 0,
                    })
                    .collect()
            })
            .collect();
        let mut assignment = vec![0usize; scope.len()];
        let mut entries = Vec::with_capacity(size);
        let mut operands = Vec::with_capacity(factors.len());
        for _ in 0..size {
            operands.clear();
            for (f, st) in factors.iter().zip(&strides) {
                let idx: usize = assignment.iter().zip(st).map(|(a, s)| a * s).sum();
                operands.push(f.entries[idx]);
            }
            let ops = operands.clone();
            entries.push(self.mul(&ops));
            for k in (0..scope.len()).rev() {
                assignment[k] += 1;
                if assignment[k] < cards[k] {
                    break;
                }
                assignment[k] = 0;
            }
        }
        Factor { scope, entries }
    }

    fn sum_out(&mut self, f: Factor, v: usize) -> Factor {
        let pos = f.scope.iter().position(|&u| u == v).expect("variable in scope");
        let card = self.card(v);
        let inner: usize = f.scope[pos + 1..].iter().map(|&u| self.card(u)).product();
        let outer = f.entries.len() / (card * inner);
        let mut entries = Vec::with_capacity(outer * inner);
        let mut terms = Vec::with_capacity(card);
        for o in 0..outer {
            for i in 0..inner {
                terms.clear();
                for s in 0..card {
                    terms.push(f.entries[(o * card + s) * inner + i]);
                }
                let t = terms.clone();
                entries.push(self.add(&t));
            }
        }
        let mut scope = f.scope;
        scope.remove(pos);
        Factor { scope, entries }
    }
}

/// Compiles with the greedy elimination order of [`elimination_order`].
pub fn compile(net: &BeliefNetwork, spec: &CompileSpec) -> Result<QDag, CompileError> {
    compile_traced(net, spec, None).map(|c| c.dag)
}

/// Compiles and keeps CPT provenance. `order`, when given, is used (minus
/// the query variable) for every query variable and must list every
/// variable not being queried at that point.
pub fn compile_traced(
    net: &BeliefNetwork,
    spec: &CompileSpec,
    order: Option<&[usize]>,
) -> Result<Compiled, CompileError> {
    let (query, evidence) = spec.resolve(net)?;
    if let Some(order) = order {
        let set: BTreeSet<usize> = order.iter().copied().collect();
        if set.len() != order.len() || order.iter().any(|&v| v >= net.variables.len()) {
            return Err(CompileError::BadOrder);
        }
        for &q in &query {
            let missing = (0..net.variables.len()).any(|v| v != q && !set.contains(&v));
            if missing {
                return Err(CompileError::BadOrder);
            }
        }
    }

    let mut b = Builder {
        net,
        dag: QDag::new(),
        cpt_origin: Vec::new(),
    };
    let indicators: Vec<(usize, Vec<NodeId>)> = evidence
        .iter()
        .map(|&e| {
            let ids = net.variables[e]
                .states
                .iter()
                .map(|s| b.node(NodeKind::esn(net.variables[e].name.clone(), s.clone()), &[]))
                .collect();
            (e, ids)
        })
        .collect();

    for &q in &query {
        let mut pool: Vec<Factor> = (0..net.variables.len()).map(|v| b.cpt_factor(v)).collect();
        for (e, ids) in &indicators {
            pool.push(Factor {
                scope: vec![*e],
                entries: ids.clone(),
            });
        }
        let elim: Vec<usize> = match order {
            Some(o) => o.iter().copied().filter(|&v| v != q).collect(),
            None => elimination_order(net, &[q]),
        };
        for v in elim {
            let (with, without): (Vec<Factor>, Vec<Factor>) =
                pool.into_iter().partition(|f| f.scope.contains(&v));
            pool = without;
            if with.is_empty() {
                continue;
            }
            let prod = b.product(&with);
            let summed = b.sum_out(prod, v);
            pool.push(summed);
        }
        let last = b.product(&pool);
        debug_assert_eq!(last.scope, vec![q]);
        for (s, state) in net.variables[q].states.iter().enumerate() {
            b.dag
                .add_query(net.variables[q].name.clone(), state.clone(), last.entries[s])
                .expect("one query per state");
        }
    }
    Ok(Compiled {
        dag: b.dag,
        cpt_origin: b.cpt_origin,
    })
}
