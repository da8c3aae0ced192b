//! Value maintenance for a fixed Q-DAG under changing evidence.
//!
//! [`ValueState::new`] evaluates every node bottom-up with all evidence
//! indicators at 1. [`ValueState::set_evidence`] then flips a single
//! indicator and pushes the change forward: an addition child moves by
//! `new - old`, a multiplication child is rescaled by `new / old`, and is
//! recomputed from its parents only when `old` is zero. Propagation stops at
//! any node whose value did not change.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap};

use thiserror::Error;

use crate::circuit::{NodeId, NodeKind, QDag};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("node {0} is not an evidence-specific node")]
    NotAnEsn(NodeId),
    #[error("indicator value must be 0 or 1, got {0}")]
    BadIndicator(f64),
    #[error("variable `{0}` has no evidence nodes in this dag")]
    UnknownVariable(String),
    #[error("variable `{variable}` has no evidence node for state `{state}`")]
    UnknownState { variable: String, state: String },
    #[error("no query node for ({variable}, {state})")]
    UnknownQuery { variable: String, state: String },
    #[error("variable `{0}` has no query nodes")]
    UnknownQueryVariable(String),
    #[error("evidence has probability zero for `{0}`; it is inconsistent with the model")]
    ZeroProbabilityEvidence(String),
}

/// Update discipline for multiplication nodes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Mode {
    /// Rescale by `new / old`, recompute from parents when `old == 0`.
    #[default]
    Paper,
    /// Each multiplication node tracks how many parents are zero and the
    /// product of the others, so zero transitions never need a recompute.
    /// Sums whose parents are all zero are set to exactly zero.
    Stabilized,
}

/// Work counters. `nodes_visited`, `edges_traversed` and `mul_recomputes`
/// accumulate across propagation calls; `last_*` hold the most recent call.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counters {
    pub nodes_visited: u64,
    pub edges_traversed: u64,
    pub mul_recomputes: u64,
    pub arithmetic_ops: u64,
    pub last_nodes_visited: u64,
    pub last_edges_traversed: u64,
    /// Work done by the last full evaluation (initialize or recompute_all).
    pub init_ops: u64,
}

/// Observation status of one variable.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Observation {
    Unknown,
    Observed(String),
}

/// Variable-level evidence. Variables not mentioned are unknown.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Evidence(pub BTreeMap<String, Observation>);

impl Evidence {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn observe(mut self, variable: impl Into<String>, state: impl Into<String>) -> Self {
        self.0
            .insert(variable.into(), Observation::Observed(state.into()));
        self
    }
}

/// Owned copy of node values, used by zero compression.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeValues {
    pub values: Vec<f64>,
    /// True when every indicator was at 1 when the snapshot was taken.
    pub indicators_all_one: bool,
}

pub struct ValueState<'a> {
    dag: &'a QDag,
    mode: Mode,
    values: Vec<f64>,
    rank: Vec<u32>,
    groups: Vec<(String, Vec<(String, NodeId)>)>,
    group_index: HashMap<String, usize>,
    // Stabilized mode bookkeeping, meaningful for Mul nodes only.
    zero_parents: Vec<u32>,
    nonzero_product: Vec<f64>,
    // Propagation scratch, reused across calls.
    pending: Vec<Vec<NodeId>>,
    prior: Vec<f64>,
    queued: Vec<bool>,
    heap: BinaryHeap<Reverse<(u32, NodeId)>>,
    counters: Counters,
}

impl<'a> ValueState<'a> {
    /// Evaluates `dag` with every indicator at 1.
    pub fn new(dag: &'a QDag, mode: Mode) -> Self {
        let n = dag.node_count();
        let rank = if dag.is_id_topological() {
            (0..n as u32).collect()
        } else {
            let order = dag
                .topological_order()
                .expect("ValueState requires an acyclic dag");
            let mut rank = vec![0u32; n];
            for (pos, id) in order.into_iter().enumerate() {
                rank[id.index()] = pos as u32;
            }
            rank
        };
        let groups = dag.esn_groups();
        let group_index = groups
            .iter()
            .enumerate()
            .map(|(i, (v, _))| (v.clone(), i))
            .collect();
        let mut values = vec![0.0; n];
        for (id, _, _) in dag.esn_nodes() {
            values[id.index()] = 1.0;
        }
        let mut state = ValueState {
            dag,
            mode,
            values,
            rank,
            groups,
            group_index,
            zero_parents: vec![0; n],
            nonzero_product: vec![1.0; n],
            pending: vec![Vec::new(); n],
            prior: vec![0.0; n],
            queued: vec![false; n],
            heap: BinaryHeap::new(),
            counters: Counters::default(),
        };
        state.evaluate_all();
        state
    }

    fn evaluation_order(&self) -> Vec<NodeId> {
        let mut order: Vec<NodeId> = self.dag.node_ids().collect();
        order.sort_by_key(|id| self.rank[id.index()]);
        order
    }

    /// Bottom-up evaluation from the current indicator settings.
    fn evaluate_all(&mut self) {
        let dag = self.dag;
        let mut ops = 0u64;
        for id in self.evaluation_order() {
            let i = id.index();
            ops += 1;
            match dag.kind(id) {
                NodeKind::Num(l) => self.values[i] = *l,
                NodeKind::Esn { .. } => {}
                NodeKind::Add => {
                    let mut v = 0.0;
                    let mut zeros = 0;
                    for p in dag.parents(id) {
                        let pv = self.values[p.index()];
                        v += pv;
                        if pv == 0.0 {
                            zeros += 1;
                        }
                    }
                    ops += dag.parents(id).len() as u64;
                    self.zero_parents[i] = zeros;
                    self.values[i] = v;
                }
                NodeKind::Mul => {
                    let mut zeros = 0;
                    let mut prod = 1.0;
                    let mut v = 1.0;
                    for p in dag.parents(id) {
                        let pv = self.values[p.index()];
                        v *= pv;
                        if pv == 0.0 {
                            zeros += 1;
                        } else {
                            prod *= pv;
                        }
                    }
                    ops += dag.parents(id).len() as u64;
                    self.zero_parents[i] = zeros;
                    self.nonzero_product[i] = prod;
                    self.values[i] = match self.mode {
                        Mode::Paper => v,
                        Mode::Stabilized if zeros > 0 => 0.0,
                        Mode::Stabilized => prod,
                    };
                }
            }
        }
        self.counters.init_ops = ops;
        self.counters.arithmetic_ops += ops;
    }

    pub fn dag(&self) -> &'a QDag {
        self.dag
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn value(&self, id: NodeId) -> f64 {
        self.values[id.index()]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn counters(&self) -> Counters {
        self.counters
    }

    pub fn reset_counters(&mut self) {
        self.counters = Counters::default();
    }

    pub fn snapshot(&self) -> NodeValues {
        NodeValues {
            values: self.values.clone(),
            indicators_all_one: self.dag.esn_nodes().all(|(id, _, _)| self.values[id.index()] == 1.0),
        }
    }

    /// Evidence variables and their indicator nodes.
    pub fn evidence_variables(&self) -> &[(String, Vec<(String, NodeId)>)] {
        &self.groups
    }

    /// Current indicator pattern of each evidence variable, mapped back to
    /// variable-level evidence. Patterns that are neither all-one nor
    /// one-hot come back as `None` for that variable.
    pub fn evidence(&self) -> BTreeMap<String, Option<Observation>> {
        self.groups
            .iter()
            .map(|(var, states)| {
                let on: Vec<&String> = states
                    .iter()
                    .filter(|(_, id)| self.values[id.index()] == 1.0)
                    .map(|(s, _)| s)
                    .collect();
                let obs = if on.len() == states.len() {
                    Some(Observation::Unknown)
                } else if on.len() == 1 {
                    Some(Observation::Observed(on[0].clone()))
                } else {
                    None
                };
                (var.clone(), obs)
            })
            .collect()
    }

    /// Sets indicator `esn` to `new_value` (0 or 1) and propagates.
    pub fn set_evidence(&mut self, esn: NodeId, new_value: f64) -> Result<(), EvalError> {
        if esn.index() >= self.dag.node_count()
            || !matches!(self.dag.kind(esn), NodeKind::Esn { .. })
        {
            return Err(EvalError::NotAnEsn(esn));
        }
        if new_value != 0.0 && new_value != 1.0 {
            return Err(EvalError::BadIndicator(new_value));
        }
        self.counters.last_nodes_visited = 0;
        self.counters.last_edges_traversed = 0;
        let old = self.values[esn.index()];
        if old == new_value {
            return Ok(());
        }
        self.values[esn.index()] = new_value;
        self.propagate(esn, old);
        Ok(())
    }

    fn notify_children(&mut self, n: NodeId, old: f64) {
        let dag = self.dag;
        self.prior[n.index()] = old;
        for &m in dag.children(n) {
            self.counters.edges_traversed += 1;
            self.counters.last_edges_traversed += 1;
            self.pending[m.index()].push(n);
            if !self.queued[m.index()] {
                self.queued[m.index()] = true;
                self.heap.push(Reverse((self.rank[m.index()], m)));
            }
        }
    }

    /// Worklist form of the recursive change propagation. Nodes are
    /// processed in topological rank, so every parent of a popped node has
    /// its final value and each changed parent is applied exactly once.
    fn propagate(&mut self, source: NodeId, old: f64) {
        let dag = self.dag;
        self.notify_children(source, old);
        while let Some(Reverse((_, m))) = self.heap.pop() {
            let mi = m.index();
            self.queued[mi] = false;
            self.counters.nodes_visited += 1;
            self.counters.last_nodes_visited += 1;
            let changed = std::mem::take(&mut self.pending[mi]);
            let before = self.values[mi];
            let mut v = before;
            match dag.kind(m) {
                NodeKind::Add => {
                    for &p in &changed {
                        v = v - self.prior[p.index()] + self.values[p.index()];
                        self.counters.arithmetic_ops += 2;
                    }
                    // Rounding residue can dip just below zero; true sums
                    // of non-negative terms never do.
                    if v < 0.0 {
                        v = 0.0;
                    }
                    if self.mode == Mode::Stabilized {
                        for &p in &changed {
                            if self.prior[p.index()] == 0.0 {
                                self.zero_parents[mi] -= 1;
                            }
                            if self.values[p.index()] == 0.0 {
                                self.zero_parents[mi] += 1;
                            }
                        }
                        if self.zero_parents[mi] as usize == dag.parents(m).len() {
                            v = 0.0;
                        }
                    }
                }
                NodeKind::Mul => match self.mode {
                    Mode::Paper => {
                        if changed.iter().any(|p| self.prior[p.index()] == 0.0) {
                            v = self.value_of_mul_node(m);
                        } else {
                            for &p in &changed {
                                v = v / self.prior[p.index()] * self.values[p.index()];
                                self.counters.arithmetic_ops += 2;
                            }
                        }
                    }
                    Mode::Stabilized => {
                        for &p in &changed {
                            let (o, n) = (self.prior[p.index()], self.values[p.index()]);
                            if o == 0.0 {
                                self.zero_parents[mi] -= 1;
                            } else {
                                self.nonzero_product[mi] /= o;
                                self.counters.arithmetic_ops += 1;
                            }
                            if n == 0.0 {
                                self.zero_parents[mi] += 1;
                            } else {
                                self.nonzero_product[mi] *= n;
                                self.counters.arithmetic_ops += 1;
                            }
                        }
                        v = if self.zero_parents[mi] > 0 {
                            0.0
                        } else {
                            self.nonzero_product[mi]
                        };
                    }
                },
                NodeKind::Num(_) | NodeKind::Esn { .. } => {}
            }
            let mut changed = changed;
            changed.clear();
            self.pending[mi] = changed;
            if v != before {
                self.values[mi] = v;
                self.notify_children(m, before);
            }
        }
    }

    fn value_of_mul_node(&mut self, m: NodeId) -> f64 {
        self.counters.mul_recomputes += 1;
        let mut v = 1.0;
        for p in self.dag.parents(m) {
            v *= self.values[p.index()];
        }
        self.counters.arithmetic_ops += self.dag.parents(m).len() as u64;
        v
    }

    fn group(&self, variable: &str) -> Result<usize, EvalError> {
        self.group_index
            .get(variable)
            .copied()
            .ok_or_else(|| EvalError::UnknownVariable(variable.to_string()))
    }

    /// Observes `variable = state`: its indicator goes to 1 and every other
    /// indicator of the variable goes to 0, one flip at a time in state
    /// order. Counters in `last_*` cover the whole observation.
    pub fn observe(&mut self, variable: &str, state: &str) -> Result<(), EvalError> {
        let g = self.group(variable)?;
        if !self.groups[g].1.iter().any(|(s, _)| s == state) {
            return Err(EvalError::UnknownState {
                variable: variable.to_string(),
                state: state.to_string(),
            });
        }
        let flips: Vec<(NodeId, f64)> = self.groups[g]
            .1
            .iter()
            .map(|(s, id)| (*id, if s == state { 1.0 } else { 0.0 }))
            .collect();
        self.apply_flips(&flips);
        Ok(())
    }

    /// Makes `variable` unknown again: all of its indicators go to 1.
    pub fn retract(&mut self, variable: &str) -> Result<(), EvalError> {
        let g = self.group(variable)?;
        let flips: Vec<(NodeId, f64)> = self.groups[g].1.iter().map(|(_, id)| (*id, 1.0)).collect();
        self.apply_flips(&flips);
        Ok(())
    }

    fn apply_flips(&mut self, flips: &[(NodeId, f64)]) {
        let (mut nodes, mut edges) = (0, 0);
        for &(id, v) in flips {
            self.set_evidence(id, v).expect("indicator ids come from the dag");
            nodes += self.counters.last_nodes_visited;
            edges += self.counters.last_edges_traversed;
        }
        self.counters.last_nodes_visited = nodes;
        self.counters.last_edges_traversed = edges;
    }

    /// Brings the indicators in line with `evidence`; unmentioned variables
    /// become unknown.
    pub fn apply(&mut self, evidence: &Evidence) -> Result<(), EvalError> {
        for var in evidence.0.keys() {
            self.group(var)?;
        }
        let (mut nodes, mut edges) = (0, 0);
        for g in 0..self.groups.len() {
            let var = self.groups[g].0.clone();
            match evidence.0.get(&var) {
                Some(Observation::Observed(s)) => self.observe(&var, s)?,
                _ => self.retract(&var)?,
            }
            nodes += self.counters.last_nodes_visited;
            edges += self.counters.last_edges_traversed;
        }
        self.counters.last_nodes_visited = nodes;
        self.counters.last_edges_traversed = edges;
        Ok(())
    }

    /// Value of the query node for `variable = state`, i.e. `Pr(state, e)`.
    pub fn query(&self, variable: &str, state: &str) -> Result<f64, EvalError> {
        self.dag
            .query_node(variable, state)
            .map(|id| self.values[id.index()])
            .ok_or_else(|| EvalError::UnknownQuery {
                variable: variable.to_string(),
                state: state.to_string(),
            })
    }

    /// All query values for `variable`, in registration order.
    pub fn query_all(&self, variable: &str) -> Result<Vec<(String, f64)>, EvalError> {
        let out: Vec<(String, f64)> = self
            .dag
            .queries()
            .iter()
            .filter(|q| q.variable == variable)
            .map(|q| (q.state.clone(), self.values[q.node.index()]))
            .collect();
        if out.is_empty() {
            return Err(EvalError::UnknownQueryVariable(variable.to_string()));
        }
        Ok(out)
    }

    /// `Pr(state | e)` for every state of `variable`.
    pub fn posterior(&self, variable: &str) -> Result<Vec<(String, f64)>, EvalError> {
        normalize(variable, self.query_all(variable)?)
    }

    /// Largest absolute gap between the maintained values and a fresh
    /// bottom-up evaluation. Leaves the table untouched.
    pub fn audit(&self) -> f64 {
        let fresh = self.fresh_values();
        fresh
            .iter()
            .zip(&self.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    fn fresh_values(&self) -> Vec<f64> {
        let dag = self.dag;
        let mut fresh = vec![0.0; dag.node_count()];
        for id in self.evaluation_order() {
            fresh[id.index()] = match dag.kind(id) {
                NodeKind::Num(l) => *l,
                NodeKind::Esn { .. } => self.values[id.index()],
                NodeKind::Add => dag.parents(id).iter().map(|p| fresh[p.index()]).sum(),
                NodeKind::Mul => dag.parents(id).iter().map(|p| fresh[p.index()]).product(),
            };
        }
        fresh
    }

    /// Recomputes every value from the current indicators, overwriting the
    /// table, and returns the largest absolute deviation that was removed.
    pub fn recompute_all(&mut self) -> f64 {
        let old = self.values.clone();
        self.evaluate_all();
        old.iter()
            .zip(&self.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Normalizes joint values `Pr(v, e)` into `Pr(v | e)`.
pub fn normalize(
    variable: &str,
    joint: Vec<(String, f64)>,
) -> Result<Vec<(String, f64)>, EvalError> {
    let total: f64 = joint.iter().map(|(_, v)| v).sum();
    if total <= 0.0 {
        return Err(EvalError::ZeroProbabilityEvidence(variable.to_string()));
    }
    Ok(joint.into_iter().map(|(s, v)| (s, v / total)).collect())
}

/// Convenience wrapper: a paper-mode state with all indicators at 1.
pub fn initialize(dag: &QDag) -> ValueState<'_> {
    ValueState::new(dag, Mode::Paper)
}
