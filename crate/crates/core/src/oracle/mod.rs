//! Brute-force ground truth.
//!
//! Probabilities come from enumerating every total assignment of the
//! network; Q-DAG equivalence from evaluating both dags from scratch under
//! every 0/1 indicator pattern. Nothing here shares code with the compiler
//! or the incremental evaluator.

pub mod random;

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::circuit::{NodeKind, QDag};
use crate::compiler::BeliefNetwork;

/// Largest number of assignments enumerated by [`marginal`], as log2.
pub const MAX_ENUMERATION_LOG2: f64 = 20.0;
/// Largest indicator count for exhaustive equivalence checking.
pub const MAX_EXHAUSTIVE_ESNS: usize = 12;
/// Relative tolerance used when comparing query values.
pub const EQUIVALENCE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("assignment does not give a state for `{0}`")]
    IncompleteAssignment(String),
    #[error("unknown variable `{0}`")]
    UnknownVariable(String),
    #[error("`{state}` is not a state of `{variable}`")]
    UnknownState { variable: String, state: String },
    #[error("enumeration of 2^{0:.1} assignments exceeds the oracle cap")]
    TooLarge(f64),
    #[error("evidence node ({0}, {1}) of the second dag is missing from the first")]
    EsnSetMismatch(String, String),
    #[error("query nodes differ: ({0}, {1}) is not in both dags")]
    QuerySetMismatch(String, String),
    #[error("{0} evidence nodes is too many for exhaustive checking (max {MAX_EXHAUSTIVE_ESNS})")]
    TooManyEsns(usize),
}

/// Variable name to state name. Total for [`joint_prob`], partial for
/// [`marginal`].
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Assignment(pub BTreeMap<String, String>);

impl Assignment {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, variable: impl Into<String>, state: impl Into<String>) -> Self {
        self.0.insert(variable.into(), state.into());
        self
    }

    fn resolve(&self, net: &BeliefNetwork) -> Result<Vec<Option<usize>>, OracleError> {
        let mut out = vec![None; net.variables.len()];
        for (var, state) in &self.0 {
            let v = net
                .var_index(var)
                .ok_or_else(|| OracleError::UnknownVariable(var.clone()))?;
            let s = net.variables[v]
                .state_index(state)
                .ok_or_else(|| OracleError::UnknownState {
                    variable: var.clone(),
                    state: state.clone(),
                })?;
            out[v] = Some(s);
        }
        Ok(out)
    }
}

/// Neumaier compensated sum.
#[derive(Clone, Copy, Default)]
struct Sum {
    total: f64,
    comp: f64,
}

impl Sum {
    fn add(&mut self, x: f64) {
        let t = self.total + x;
        if self.total.abs() >= x.abs() {
            self.comp += (self.total - t) + x;
        } else {
            self.comp += (x - t) + self.total;
        }
        self.total = t;
    }

    fn value(self) -> f64 {
        self.total + self.comp
    }
}

/// Chain rule on a total assignment given as state indices.
pub fn joint_prob_indexed(net: &BeliefNetwork, states: &[usize]) -> f64 {
    let mut p = 1.0;
    let mut ps = Vec::new();
    for v in 0..net.variables.len() {
        ps.clear();
        ps.extend(net.parents[v].iter().map(|&u| states[u]));
        p *= net.prob(v, &ps, states[v]);
    }
    p
}

pub fn joint_prob(net: &BeliefNetwork, a: &Assignment) -> Result<f64, OracleError> {
    let resolved = a.resolve(net)?;
    let mut states = Vec::with_capacity(resolved.len());
    for (v, s) in resolved.into_iter().enumerate() {
        states.push(s.ok_or_else(|| OracleError::IncompleteAssignment(net.variables[v].name.clone()))?);
    }
    Ok(joint_prob_indexed(net, &states))
}

fn log2_size(net: &BeliefNetwork, free: impl Iterator<Item = usize>) -> f64 {
    free.map(|v| (net.variables[v].card() as f64).log2()).sum()
}

/// Advances a mixed-radix counter over `vars`; false once it wraps.
fn step(states: &mut [usize], vars: &[usize], net: &BeliefNetwork) -> bool {
    for &v in vars.iter().rev() {
        states[v] += 1;
        if states[v] < net.variables[v].card() {
            return true;
        }
        states[v] = 0;
    }
    false
}

/// Sum of [`joint_prob`] over all completions of `a`.
pub fn marginal(net: &BeliefNetwork, a: &Assignment) -> Result<f64, OracleError> {
    let fixed = a.resolve(net)?;
    let free: Vec<usize> = (0..net.variables.len()).filter(|&v| fixed[v].is_none()).collect();
    let size = log2_size(net, free.iter().copied());
    if size > MAX_ENUMERATION_LOG2 {
        return Err(OracleError::TooLarge(size));
    }
    let mut states: Vec<usize> = fixed.iter().map(|s| s.unwrap_or(0)).collect();
    let mut sum = Sum::default();
    loop {
        sum.add(joint_prob_indexed(net, &states));
        if !step(&mut states, &free, net) {
            break;
        }
    }
    Ok(sum.value())
}

/// `Pr(query = q, e)` for every state `q` and every variable-level evidence
/// pattern `e` over `evidence`, filled in one enumeration pass.
#[derive(Clone, Debug)]
pub struct EvidenceTable {
    pub query: usize,
    pub evidence: Vec<usize>,
    radix: Vec<usize>,
    values: Vec<f64>,
}

impl EvidenceTable {
    /// Number of distinct evidence patterns (each variable unknown or in one
    /// of its states).
    pub fn pattern_count(&self) -> usize {
        self.radix.iter().product()
    }

    /// Decodes pattern `i`: per evidence variable, `None` for unknown.
    pub fn pattern(&self, mut i: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; self.evidence.len()];
        for k in (0..self.evidence.len()).rev() {
            let d = i % self.radix[k];
            i /= self.radix[k];
            out[k] = d.checked_sub(1);
        }
        out
    }

    pub fn get(&self, pattern: usize, query_state: usize) -> f64 {
        let card = self.values.len() / self.pattern_count();
        self.values[pattern * card + query_state]
    }
}

pub fn evidence_table(
    net: &BeliefNetwork,
    query: usize,
    evidence: &[usize],
) -> Result<EvidenceTable, OracleError> {
    let all: Vec<usize> = (0..net.variables.len()).collect();
    let size = log2_size(net, all.iter().copied());
    if size > MAX_ENUMERATION_LOG2 {
        return Err(OracleError::TooLarge(size));
    }
    let radix: Vec<usize> = evidence.iter().map(|&e| net.variables[e].card() + 1).collect();
    let patterns: usize = radix.iter().product();
    let qcard = net.variables[query].card();
    let mut sums = vec![Sum::default(); patterns * qcard];
    let mut states = vec![0usize; net.variables.len()];
    let k = evidence.len();
    loop {
        let p = joint_prob_indexed(net, &states);
        for mask in 0..(1usize << k) {
            let mut idx = 0;
            for j in 0..k {
                let digit = if mask & (1 << j) != 0 { states[evidence[j]] + 1 } else { 0 };
                idx = idx * radix[j] + digit;
            }
            sums[idx * qcard + states[query]].add(p);
        }
        if !step(&mut states, &all, net) {
            break;
        }
    }
    Ok(EvidenceTable {
        query,
        evidence: evidence.to_vec(),
        radix,
        values: sums.into_iter().map(Sum::value).collect(),
    })
}

/// Plain bottom-up evaluation with the given indicator values (keyed by
/// (variable, state); missing indicators count as 1). Returns every node
/// value.
pub fn evaluate(dag: &QDag, indicators: &HashMap<(String, String), f64>) -> Vec<f64> {
    let order = dag.topological_order().expect("oracle evaluates acyclic dags");
    let mut val = vec![0.0; dag.node_count()];
    for id in order {
        val[id.index()] = match dag.kind(id) {
            NodeKind::Num(l) => *l,
            NodeKind::Esn { variable, state } => *indicators
                .get(&(variable.clone(), state.clone()))
                .unwrap_or(&1.0),
            NodeKind::Add => dag.parents(id).iter().map(|p| val[p.index()]).sum(),
            NodeKind::Mul => dag.parents(id).iter().map(|p| val[p.index()]).product(),
        };
    }
    val
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    a == b || (a - b).abs() <= tol * a.abs().max(b.abs())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckMode {
    Exhaustive,
    Sampled { samples: usize, seed: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Counterexample {
    /// Indicator values over the first dag's evidence nodes.
    pub assignment: Vec<((String, String), f64)>,
    /// Query labels with the first and second dag's values.
    pub queries: Vec<((String, String), f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Verdict {
    Equivalent { assignments: usize },
    Counterexample(Counterexample),
}

impl Verdict {
    pub fn is_equivalent(&self) -> bool {
        matches!(self, Verdict::Equivalent { .. })
    }
}

/// Compares query values of `d1` and `d2` under 0/1 indicator patterns
/// over `d1`'s evidence nodes. `d2` may lack some of them.
pub fn check_equivalent(d1: &QDag, d2: &QDag, mode: CheckMode) -> Result<Verdict, OracleError> {
    let esns: Vec<(String, String)> = d1
        .esn_nodes()
        .map(|(_, v, s)| (v.to_string(), s.to_string()))
        .collect();
    for (_, v, s) in d2.esn_nodes() {
        if d1.esn_node(v, s).is_none() {
            return Err(OracleError::EsnSetMismatch(v.to_string(), s.to_string()));
        }
    }
    for q in d1.queries() {
        if d2.query_node(&q.variable, &q.state).is_none() {
            return Err(OracleError::QuerySetMismatch(q.variable.clone(), q.state.clone()));
        }
    }
    for q in d2.queries() {
        if d1.query_node(&q.variable, &q.state).is_none() {
            return Err(OracleError::QuerySetMismatch(q.variable.clone(), q.state.clone()));
        }
    }

    let k = esns.len();
    let patterns: Box<dyn Iterator<Item = Vec<bool>>> = match mode {
        CheckMode::Exhaustive => {
            if k > MAX_EXHAUSTIVE_ESNS {
                return Err(OracleError::TooManyEsns(k));
            }
            Box::new((0..(1u64 << k)).map(move |m| (0..k).map(|j| m & (1 << j) != 0).collect()))
        }
        CheckMode::Sampled { samples, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // All-ones first: it is the pattern every reduction is built on.
            let mut v: Vec<Vec<bool>> = vec![vec![true; k]];
            v.extend((1..samples).map(|_| (0..k).map(|_| rng.gen_bool(0.5)).collect()));
            Box::new(v.into_iter())
        }
    };

    let mut count = 0;
    let mut pats: Vec<Vec<bool>> = patterns.collect();
    // Exhaustive order starts from all-zero; put all-ones first so the most
    // informative counterexample is reported.
    if mode == CheckMode::Exhaustive {
        pats.reverse();
    }
    for bits in pats {
        count += 1;
        let indicators: HashMap<(String, String), f64> = esns
            .iter()
            .zip(&bits)
            .map(|(e, &b)| (e.clone(), if b { 1.0 } else { 0.0 }))
            .collect();
        let v1 = evaluate(d1, &indicators);
        let v2 = evaluate(d2, &indicators);
        let queries: Vec<((String, String), f64, f64)> = d1
            .queries()
            .iter()
            .map(|q| {
                let n2 = d2.query_node(&q.variable, &q.state).unwrap();
                (
                    (q.variable.clone(), q.state.clone()),
                    v1[q.node.index()],
                    v2[n2.index()],
                )
            })
            .collect();
        if queries
            .iter()
            .any(|(_, a, b)| !rel_close(*a, *b, EQUIVALENCE_TOLERANCE))
        {
            let mut assignment: Vec<((String, String), f64)> = indicators.into_iter().collect();
            assignment.sort_by(|a, b| a.0.cmp(&b.0));
            return Ok(Verdict::Counterexample(Counterexample { assignment, queries }));
        }
    }
    Ok(Verdict::Equivalent { assignments: count })
}

/// Exhaustive when the indicator count allows it, otherwise `samples`
/// seeded random patterns.
pub fn check_equivalent_auto(d1: &QDag, d2: &QDag, samples: usize, seed: u64) -> Result<Verdict, OracleError> {
    let k = d1.esn_nodes().count();
    let mode = if k <= MAX_EXHAUSTIVE_ESNS {
        CheckMode::Exhaustive
    } else {
        CheckMode::Sampled { samples, seed }
    };
    check_equivalent(d1, d2, mode)
}
