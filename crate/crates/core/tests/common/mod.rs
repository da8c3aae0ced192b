#![allow(dead_code)]

use std::collections::HashMap;

use qdag::circuit::{NodeKind, QDag};
use qdag::compiler::BeliefNetwork;
use qdag::oracle::{self, rel_close, EvidenceTable};
use qdag::oracle::random::{random_network, NetworkParams};
use qdag::{Mode, ValueState};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A seeded network with a query/evidence split.
pub struct Case {
    pub seed: u64,
    pub net: BeliefNetwork,
    pub query: Vec<usize>,
    pub evidence: Vec<usize>,
}

impl Case {
    pub fn query_names(&self) -> Vec<String> {
        self.query.iter().map(|&v| self.net.variables[v].name.clone()).collect()
    }

    pub fn evidence_names(&self) -> Vec<String> {
        self.evidence.iter().map(|&v| self.net.variables[v].name.clone()).collect()
    }
}

pub const DENSITIES: [f64; 3] = [0.0, 0.2, 0.5];

/// `count` networks with up to 10 variables, 4 states and 3 parents, one or
/// two query variables and up to four evidence variables.
pub fn suite(count: usize) -> Vec<Case> {
    (0..count as u64).map(|i| case(i, 6 + (i as usize % 5), DENSITIES[i as usize % 3])).collect()
}

pub fn case(seed: u64, variables: usize, density: f64) -> Case {
    let net = random_network(&NetworkParams::new(variables, 4, 3, density), seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut vars: Vec<usize> = (0..variables).collect();
    vars.shuffle(&mut rng);
    let nq = rng.gen_range(1..=2);
    let ne = rng.gen_range(1..=4).min(variables - nq);
    let mut query = vars[..nq].to_vec();
    let mut evidence = vars[nq..nq + ne].to_vec();
    query.sort_unstable();
    evidence.sort_unstable();
    Case {
        seed,
        net,
        query,
        evidence,
    }
}

/// Indicator values for a variable-level evidence pattern.
pub fn indicators(
    net: &BeliefNetwork,
    evidence: &[usize],
    pattern: &[Option<usize>],
) -> HashMap<(String, String), f64> {
    let mut out = HashMap::new();
    for (k, &e) in evidence.iter().enumerate() {
        let var = &net.variables[e];
        for (si, st) in var.states.iter().enumerate() {
            let on = pattern[k].is_none_or(|s| s == si);
            out.insert((var.name.clone(), st.clone()), if on { 1.0 } else { 0.0 });
        }
    }
    out
}

/// Compares every query value of `dag` with the enumeration oracle over all
/// evidence patterns. Values are read both from a plain bottom-up
/// evaluation and from an incremental state driven through the same
/// patterns. The incremental value may also sit within 1e-12 of the oracle,
/// which covers the subtraction residue a paper-mode sum leaves where the
/// exact answer is zero. Returns the number of comparisons made.
pub fn check_against_oracle(case: &Case, dag: &QDag, mode: Mode) -> Result<usize, String> {
    check_against_tables(case, &oracle_tables(case)?, dag, mode)
}

/// One oracle table per query variable of `case`.
pub fn oracle_tables(case: &Case) -> Result<Vec<EvidenceTable>, String> {
    case.query
        .iter()
        .map(|&q| oracle::evidence_table(&case.net, q, &case.evidence).map_err(|e| e.to_string()))
        .collect()
}

pub fn check_against_tables(
    case: &Case,
    tables: &[EvidenceTable],
    dag: &QDag,
    mode: Mode,
) -> Result<usize, String> {
    let net = &case.net;
    let mut state = ValueState::new(dag, mode);
    let mut compared = 0;
    for (&q, table) in case.query.iter().zip(tables) {
        let qv = &net.variables[q];
        for pi in 0..table.pattern_count() {
            let pattern = table.pattern(pi);
            let ind = indicators(net, &case.evidence, &pattern);
            let batch = oracle::evaluate(dag, &ind);
            for (id, var, st) in dag.esn_nodes().map(|(i, v, s)| (i, v.to_string(), s.to_string())).collect::<Vec<_>>() {
                state
                    .set_evidence(id, ind[&(var, st)])
                    .map_err(|e| e.to_string())?;
            }
            for (si, st) in qv.states.iter().enumerate() {
                let node = dag
                    .query_node(&qv.name, st)
                    .ok_or_else(|| format!("missing query node {} {}", qv.name, st))?;
                let expected = table.get(pi, si);
                let got = batch[node.index()];
                let inc = state.value(node);
                let inc_ok = rel_close(expected, inc, 1e-9) || (expected - inc).abs() <= 1e-12;
                if !rel_close(expected, got, 1e-9) || !inc_ok {
                    return Err(format!(
                        "seed {} pattern {:?} {}={}: oracle {} batch {} incremental {}",
                        case.seed, pattern, qv.name, st, expected, got, inc
                    ));
                }
                compared += 1;
            }
        }
    }
    Ok(compared)
}

/// Structural scan for the reducer's completeness post-conditions. Returns
/// a description of every offending node.
pub fn completeness_violations(dag: &QDag) -> Vec<String> {
    let mut out = Vec::new();
    let label = |id| dag.kind(id).label();
    for id in dag.node_ids() {
        let ps = dag.parents(id);
        match dag.kind(id) {
            NodeKind::Mul => {
                if ps.iter().any(|&p| matches!(label(p), Some(x) if x == 0.0 || x == 1.0)) {
                    out.push(format!("{}: Mul with Num(0)/Num(1) parent", id));
                }
            }
            NodeKind::Add => {
                if ps.iter().any(|&p| label(p) == Some(0.0)) {
                    out.push(format!("{}: Add with Num(0) parent", id));
                }
            }
            _ => {}
        }
        if matches!(dag.kind(id), NodeKind::Add | NodeKind::Mul)
            && ps.iter().all(|&p| dag.kind(p).is_num())
        {
            out.push(format!("{}: operator with all-numeric parents", id));
        }
    }
    // Reverse reachability from the query nodes.
    let mut live = vec![false; dag.node_count()];
    let mut stack: Vec<_> = dag.queries().iter().map(|q| q.node).collect();
    while let Some(n) = stack.pop() {
        if !std::mem::replace(&mut live[n.index()], true) {
            stack.extend(dag.parents(n).iter().copied());
        }
    }
    for (i, l) in live.iter().enumerate() {
        if !l {
            out.push(format!("{}: unreachable from the query set", i));
        }
    }
    out
}

/// Hand-written dags aimed at the degenerate corners of the rewrite rules.
pub const ADVERSARIAL: &[&str] = &[
    // empty sum after identity-zero
    "qdag v1 4\n0 NUM 0\n1 NUM 0\n2 ADD 0 1\n3 ESN E a\nquery 2 Q q\n",
    // empty product after identity-one
    "qdag v1 4\n0 NUM 1\n1 NUM 1\n2 MUL 0 1\n3 ESN E a\nquery 2 Q q\n",
    // zero factor next to an indicator
    "qdag v1 4\n0 ESN E a\n1 ESN E b\n2 NUM 0\n3 MUL 0 2\nquery 3 Q q\n",
    // zero term inside a sum
    "qdag v1 5\n0 ESN E a\n1 NUM 0\n2 ADD 0 1\n3 ESN E b\n4 MUL 2 3\nquery 4 Q q\n",
    // unit factor
    "qdag v1 4\n0 ESN E a\n1 NUM 1\n2 MUL 1 0\n3 ESN E b\nquery 2 Q q\n",
    // empty sum feeding a product
    "qdag v1 5\n0 NUM 0\n1 NUM 0\n2 ADD 0 1\n3 ESN E a\n4 MUL 2 3\nquery 4 Q q\n",
    // all-zero CPT row
    "qdag v1 8\n0 ESN A x\n1 ESN A y\n2 NUM 0\n3 NUM 0\n4 MUL 0 2\n5 MUL 1 3\n6 ADD 4 5\n7 NUM 0.5\nquery 6 Q q\nquery 7 Q r\n",
    // partially zero CPT row
    "qdag v1 7\n0 ESN A x\n1 ESN A y\n2 NUM 0\n3 NUM 0.7\n4 MUL 0 2\n5 MUL 1 3\n6 ADD 4 5\nquery 6 Q q\n",
    // barren sum to one
    "qdag v1 5\n0 ESN E a\n1 NUM 0.6\n2 NUM 0.4\n3 ADD 1 2\n4 MUL 0 3\nquery 4 Q q\n",
    // barren chain of products and sums
    "qdag v1 11\n0 ESN E a\n1 NUM 0.5\n2 NUM 0.6\n3 NUM 0.4\n4 MUL 1 2\n5 MUL 1 3\n6 ADD 4 5\n7 NUM 0.5\n8 ADD 6 7\n9 MUL 0 8\n10 ESN F b\nquery 9 Q q\n",
    // query on an indicator
    "qdag v1 2\n0 ESN E a\n1 ESN E b\nquery 0 Q q\nquery 1 Q r\n",
    // query on a constant
    "qdag v1 2\n0 NUM 0.25\n1 ESN E a\nquery 0 Q q\n",
    // shared zero in a diamond
    "qdag v1 7\n0 ESN E a\n1 NUM 0\n2 MUL 0 1\n3 ADD 2 0\n4 MUL 2 0\n5 ADD 3 4\n6 ESN E b\nquery 5 Q q\nquery 4 Q r\n",
    // indicator feeding only a folded constant
    "qdag v1 6\n0 ESN D on\n1 NUM 0\n2 MUL 0 1\n3 ESN E a\n4 ADD 2 3\n5 MUL 4 3\nquery 5 Q q\n",
    // long product with a single unit
    "qdag v1 7\n0 ESN E a\n1 ESN E b\n2 ESN F a\n3 NUM 1\n4 NUM 0.5\n5 MUL 0 1 2 3 4\n6 ADD 5 4\nquery 5 Q q\nquery 6 Q r\n",
    // chain of sums each padded with zero
    "qdag v1 8\n0 NUM 0\n1 ESN E a\n2 ADD 0 1\n3 ADD 0 2\n4 ADD 0 3\n5 ESN E b\n6 ADD 4 5 0\n7 MUL 6 1\nquery 7 Q q\n",
    // both states of one variable multiplied
    "qdag v1 5\n0 ESN A x\n1 ESN A y\n2 MUL 0 1\n3 NUM 0.3\n4 ADD 2 3\nquery 4 Q q\n",
    // alternating unit factors and zero terms
    "qdag v1 10\n0 ESN E a\n1 NUM 1\n2 NUM 0\n3 MUL 0 1\n4 ADD 3 2\n5 MUL 4 1\n6 ADD 5 2\n7 MUL 6 1\n8 ESN F b\n9 MUL 7 8\nquery 9 Q q\n",
    // zero product making a sum all-numeric
    "qdag v1 7\n0 ESN E a\n1 NUM 0\n2 MUL 0 1\n3 NUM 0.25\n4 ADD 2 3\n5 ESN F b\n6 MUL 4 5\nquery 6 Q q\n",
    // every query folds to a constant
    "qdag v1 6\n0 NUM 0.5\n1 NUM 0.5\n2 MUL 0 1\n3 ADD 2 0\n4 ESN E a\n5 ADD 0 1\nquery 2 Q q\nquery 5 Q r\n",
];

pub fn adversarial() -> Vec<QDag> {
    ADVERSARIAL
        .iter()
        .map(|t| qdag::circuit::parse(t).unwrap_or_else(|e| panic!("{}: {}", t, e)))
        .collect()
}
