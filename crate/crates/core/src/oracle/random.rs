//! Seeded generators for test networks and arbitrary Q-DAGs.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::circuit::{NodeId, NodeKind, QDag};
use crate::compiler::{BeliefNetwork, Variable};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NetworkParams {
    pub variables: usize,
    /// States per variable are drawn from `2..=max_states`.
    pub max_states: usize,
    pub max_parents: usize,
    /// Probability that a CPT entry is forced to zero (rows are then
    /// renormalized; at least one entry per row stays positive).
    pub zero_density: f64,
}

impl NetworkParams {
    pub fn new(variables: usize, max_states: usize, max_parents: usize, zero_density: f64) -> Self {
        NetworkParams {
            variables,
            max_states,
            max_parents,
            zero_density,
        }
    }
}

pub fn random_network(params: &NetworkParams, seed: u64) -> BeliefNetwork {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = params.variables;
    let mut variables = Vec::with_capacity(n);
    let mut parents = Vec::with_capacity(n);
    for v in 0..n {
        let card = rng.gen_range(2..=params.max_states.max(2));
        variables.push(Variable {
            name: format!("V{}", v),
            states: (0..card).map(|s| format!("s{}", s)).collect(),
        });
        let k = rng.gen_range(0..=params.max_parents.min(v));
        let mut ps: Vec<usize> = (0..v).collect::<Vec<_>>().choose_multiple(&mut rng, k).copied().collect();
        ps.sort_unstable();
        parents.push(ps);
    }
    let mut cpts = Vec::with_capacity(n);
    for v in 0..n {
        let card = variables[v].states.len();
        let rows: usize = parents[v].iter().map(|&p: &usize| variables[p].states.len()).product();
        let mut table = Vec::with_capacity(rows * card);
        for _ in 0..rows {
            let mut row: Vec<f64> = (0..card)
                .map(|_| {
                    if rng.gen_bool(params.zero_density) {
                        0.0
                    } else {
                        rng.gen_range(0.05..1.0)
                    }
                })
                .collect();
            if row.iter().all(|&x| x == 0.0) {
                let k = rng.gen_range(0..card);
                row[k] = rng.gen_range(0.05..1.0);
            }
            let sum: f64 = row.iter().sum();
            table.extend(row.into_iter().map(|x| x / sum));
        }
        cpts.push(table);
    }
    BeliefNetwork::new(format!("random{}", seed), variables, parents, cpts)
        .expect("generator produces valid networks")
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DagParams {
    pub evidence_variables: usize,
    pub states: usize,
    pub constants: usize,
    pub operators: usize,
    pub max_fan_in: usize,
    pub queries: usize,
}

impl Default for DagParams {
    fn default() -> Self {
        DagParams {
            evidence_variables: 3,
            states: 2,
            constants: 8,
            operators: 30,
            max_fan_in: 3,
            queries: 3,
        }
    }
}

/// Random Q-DAG whose constants are biased toward 0, 1 and dyadic values so
/// every reduction rule has something to do.
pub fn random_dag(params: &DagParams, seed: u64) -> QDag {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut d = QDag::new();
    for v in 0..params.evidence_variables {
        for s in 0..params.states {
            d.add_node(NodeKind::esn(format!("E{}", v), format!("s{}", s)), &[])
                .unwrap();
        }
    }
    for _ in 0..params.constants {
        let label = match rng.gen_range(0..5) {
            0 => 0.0,
            1 => 1.0,
            2 => 0.5,
            _ => rng.gen_range(0.0..1.0),
        };
        d.add_node(NodeKind::Num(label), &[]).unwrap();
    }
    for _ in 0..params.operators {
        let n = d.node_count();
        let k = rng.gen_range(1..=params.max_fan_in.min(n));
        let mut ps: Vec<NodeId> = (0..n).map(NodeId::from).collect::<Vec<_>>().choose_multiple(&mut rng, k).copied().collect();
        ps.sort_unstable();
        let kind = if rng.gen_bool(0.5) { NodeKind::Add } else { NodeKind::Mul };
        d.add_node(kind, &ps).unwrap();
    }
    let n = d.node_count();
    let q = params.queries.min(n);
    for i in 0..q {
        d.add_query("Q", format!("q{}", i), NodeId::from(n - 1 - i)).unwrap();
    }
    d
}
