//! Equivalence-preserving Q-DAG reduction.
//!
//! Four in-place passes (identity-zero, identity-one, numeric folding and
//! zero compression), a dead-node sweep that compacts ids, and [`reduce`],
//! which runs them to a fixpoint. Every pass keeps query values identical
//! for every 0/1 setting of the surviving evidence nodes.

use std::collections::VecDeque;
use std::fmt::{self, Write as _};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::circuit::{NodeId, NodeKind, QDag};
use crate::evaluator::{Mode, NodeValues, ValueState};

#[derive(Debug, Error, PartialEq)]
pub enum ReduceError {
    #[error("zero compression needs values computed with every indicator at 1")]
    ValuesNotInitialized,
    #[error("value table has {got} entries, dag has {expected} nodes")]
    ValueCountMismatch { expected: usize, got: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pass {
    ZeroCompression,
    IdentityZero,
    IdentityOne,
    NumericReduction,
    Sweep,
}

impl Pass {
    pub fn name(self) -> &'static str {
        match self {
            Pass::ZeroCompression => "zero-compression",
            Pass::IdentityZero => "identity-zero",
            Pass::IdentityOne => "identity-one",
            Pass::NumericReduction => "numeric-reduction",
            Pass::Sweep => "sweep",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PassReport {
    pub pass: Pass,
    pub cycle: usize,
    pub nodes_before: usize,
    pub nodes_after: usize,
    pub edges_before: usize,
    pub edges_after: usize,
    /// Nodes rewritten or edges dropped by the pass.
    pub rewrites: usize,
    /// Elementary steps (node scans, edge visits, folds).
    pub operations: u64,
    /// Steps spent rebuilding the children mirror.
    pub mirror_ops: u64,
}

impl PassReport {
    fn begin(pass: Pass, dag: &QDag) -> Self {
        PassReport {
            pass,
            cycle: 0,
            nodes_before: dag.node_count(),
            nodes_after: dag.node_count(),
            edges_before: dag.edge_count(),
            edges_after: dag.edge_count(),
            rewrites: 0,
            operations: 0,
            mirror_ops: 0,
        }
    }

    fn finish(mut self, dag: &QDag) -> Self {
        self.nodes_after = dag.node_count();
        self.edges_after = dag.edge_count();
        self
    }

    pub fn changed(&self) -> bool {
        self.rewrites > 0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReductionReport {
    pub passes: Vec<PassReport>,
    pub cycles: usize,
    /// Evidence nodes removed by the sweep, as (variable, state).
    pub removed_esns: Vec<(String, String)>,
    /// For each node of the output dag, the id it had in the input dag.
    pub origin: Vec<NodeId>,
    pub elapsed: Duration,
}

impl ReductionReport {
    fn single(pass: PassReport) -> Self {
        ReductionReport {
            passes: vec![pass],
            cycles: 1,
            ..Default::default()
        }
    }

    pub fn pass(&self) -> &PassReport {
        &self.passes[0]
    }

    pub fn total_operations(&self) -> u64 {
        self.passes.iter().map(|p| p.operations + p.mirror_ops).sum()
    }

    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for p in &self.passes {
            writeln!(
                out,
                "pass={} cycle={} nodes_before={} nodes_after={} edges_before={} edges_after={} rewrites={} operations={} mirror_ops={}",
                p.pass.name(),
                p.cycle,
                p.nodes_before,
                p.nodes_after,
                p.edges_before,
                p.edges_after,
                p.rewrites,
                p.operations,
                p.mirror_ops
            )
            .unwrap();
        }
        for (v, s) in &self.removed_esns {
            writeln!(out, "removed_esn={}={}", v, s).unwrap();
        }
        writeln!(out, "cycles={}", self.cycles).unwrap();
        if let (Some(first), Some(last)) = (self.passes.first(), self.passes.last()) {
            writeln!(out, "nodes_in={}", first.nodes_before).unwrap();
            writeln!(out, "nodes_out={}", last.nodes_after).unwrap();
            writeln!(out, "edges_in={}", first.edges_before).unwrap();
            writeln!(out, "edges_out={}", last.edges_after).unwrap();
        }
        writeln!(out, "total_operations={}", self.total_operations()).unwrap();
        writeln!(out, "elapsed_us={}", self.elapsed.as_micros()).unwrap();
        out
    }
}

impl fmt::Display for ReductionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<6} {:<18} {:>16} {:>16} {:>9} {:>10}",
            "cycle", "pass", "nodes", "edges", "rewrites", "ops"
        )?;
        for p in &self.passes {
            writeln!(
                f,
                "{:<6} {:<18} {:>16} {:>16} {:>9} {:>10}",
                p.cycle,
                p.pass.name(),
                format!("{} -> {}", p.nodes_before, p.nodes_after),
                format!("{} -> {}", p.edges_before, p.edges_after),
                p.rewrites,
                p.operations + p.mirror_ops
            )?;
        }
        if let (Some(first), Some(last)) = (self.passes.first(), self.passes.last()) {
            writeln!(
                f,
                "{} cycle(s): {} -> {} nodes, {} -> {} edges in {:?}",
                self.cycles,
                first.nodes_before,
                last.nodes_after,
                first.edges_before,
                last.edges_after,
                self.elapsed
            )?;
        }
        if !self.removed_esns.is_empty() {
            write!(f, "removed evidence nodes:")?;
            for (v, s) in &self.removed_esns {
                write!(f, " ({}, {})", v, s)?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Replaces operators left without parents by their empty-sum or
/// empty-product constant.
fn repair_empty(dag: &mut QDag, touched: &[NodeId]) -> usize {
    let mut repaired = 0;
    for &m in touched {
        if dag.parents(m).is_empty() {
            match dag.kind(m) {
                NodeKind::Add => dag.make_num(m, 0.0),
                NodeKind::Mul => dag.make_num(m, 1.0),
                _ => continue,
            }
            repaired += 1;
        }
    }
    repaired
}

fn eliminate_identity(dag: &mut QDag, pass: Pass, identity: f64, target: NodeKind) -> ReductionReport {
    let mut report = PassReport::begin(pass, dag);
    let n = dag.node_count();
    let mut marked = vec![false; n];
    let mut touched = Vec::new();
    let mut ops = 0u64;
    for id in dag.node_ids() {
        ops += 1;
        if dag.kind(id).label() != Some(identity) {
            continue;
        }
        for &m in dag.children(id) {
            ops += 1;
            if *dag.kind(m) == target && !marked[m.index()] {
                marked[m.index()] = true;
                touched.push(m);
            }
        }
    }
    let mut dropped = 0;
    for &m in &touched {
        let before = dag.parents(m).len();
        ops += before as u64;
        let kinds: Vec<bool> = dag
            .parents(m)
            .iter()
            .map(|p| dag.kind(*p).label() == Some(identity))
            .collect();
        let mut it = kinds.into_iter();
        dag.parents_mut(m).retain(|_| !it.next().unwrap());
        dropped += before - dag.parents(m).len();
    }
    let repaired = repair_empty(dag, &touched);
    if dropped > 0 {
        report.mirror_ops = (n + dag.rebuild_children()) as u64;
    }
    report.operations = ops;
    report.rewrites = dropped + repaired;
    ReductionReport::single(report.finish(dag))
}

/// Drops every edge from a `Num(0)` node into an addition node.
pub fn eliminate_identity_zero(dag: &mut QDag) -> ReductionReport {
    eliminate_identity(dag, Pass::IdentityZero, 0.0, NodeKind::Add)
}

/// Drops every edge from a `Num(1)` node into a multiplication node.
pub fn eliminate_identity_one(dag: &mut QDag) -> ReductionReport {
    eliminate_identity(dag, Pass::IdentityOne, 1.0, NodeKind::Mul)
}

/// Folds operators whose parents are all numeric into numeric nodes,
/// cascading through the folded results.
pub fn numeric_reduction(dag: &mut QDag) -> ReductionReport {
    let mut report = PassReport::begin(Pass::NumericReduction, dag);
    let n = dag.node_count();
    let mut remaining = vec![0usize; n];
    let mut queue = VecDeque::new();
    let mut ops = 0u64;
    for id in dag.node_ids() {
        ops += 1;
        match dag.kind(id) {
            NodeKind::Num(_) => queue.push_back(id),
            NodeKind::Add | NodeKind::Mul => remaining[id.index()] = dag.parents(id).len(),
            NodeKind::Esn { .. } => {}
        }
    }
    let mut folded = 0;
    while let Some(id) = queue.pop_front() {
        // The children list of a folded node is never modified in this
        // pass, so it is safe to iterate by index.
        for k in 0..dag.children(id).len() {
            let m = dag.children(id)[k];
            ops += 1;
            let r = &mut remaining[m.index()];
            if *r == 0 {
                continue;
            }
            *r -= 1;
            if *r == 0 {
                let ps = dag.parents(m);
                ops += ps.len() as u64;
                let label = match dag.kind(m) {
                    NodeKind::Add => {
                        let mut v = 0.0;
                        for p in ps {
                            v += dag.kind(*p).label().expect("all parents numeric");
                        }
                        v
                    }
                    _ => {
                        let mut v = 1.0;
                        for p in ps {
                            v *= dag.kind(*p).label().expect("all parents numeric");
                        }
                        v
                    }
                };
                dag.make_num(m, label);
                folded += 1;
                queue.push_back(m);
            }
        }
    }
    if folded > 0 {
        report.mirror_ops = (n + dag.rebuild_children()) as u64;
    }
    report.operations = ops;
    report.rewrites = folded;
    ReductionReport::single(report.finish(dag))
}

/// Turns every node whose value is zero with all indicators at 1 into
/// `Num(0)`. Such values stay zero under any evidence, because lowering an
/// indicator can only lower values.
pub fn zero_compression(dag: &mut QDag, values: &NodeValues) -> Result<ReductionReport, ReduceError> {
    if values.values.len() != dag.node_count() {
        return Err(ReduceError::ValueCountMismatch {
            expected: dag.node_count(),
            got: values.values.len(),
        });
    }
    if !values.indicators_all_one {
        return Err(ReduceError::ValuesNotInitialized);
    }
    let mut report = PassReport::begin(Pass::ZeroCompression, dag);
    let n = dag.node_count();
    let mut ops = 0u64;
    let mut compressed = 0;
    for i in 0..n {
        let id = NodeId::from(i);
        ops += 1;
        if values.values[i] != 0.0 {
            continue;
        }
        if matches!(dag.kind(id), NodeKind::Num(_)) {
            continue;
        }
        dag.make_num(id, 0.0);
        compressed += 1;
        ops += 1;
    }
    if compressed > 0 {
        report.mirror_ops = (n + dag.rebuild_children()) as u64;
    }
    report.operations = ops;
    report.rewrites = compressed;
    Ok(ReductionReport::single(report.finish(dag)))
}

/// Keeps exactly the nodes that reach a query node, renumbered in
/// topological order with ascending-id tie-break.
pub fn sweep_dead_nodes(dag: &QDag) -> (QDag, ReductionReport) {
    let mut report = PassReport::begin(Pass::Sweep, dag);
    let n = dag.node_count();
    let mut live = vec![false; n];
    let mut stack: Vec<NodeId> = Vec::new();
    let mut ops = 0u64;
    for q in dag.queries() {
        if !live[q.node.index()] {
            live[q.node.index()] = true;
            stack.push(q.node);
        }
    }
    while let Some(id) = stack.pop() {
        ops += 1;
        for &p in dag.parents(id) {
            ops += 1;
            if !live[p.index()] {
                live[p.index()] = true;
                stack.push(p);
            }
        }
    }

    let order = dag.topological_order().expect("sweep requires an acyclic dag");
    ops += (n + dag.edge_count()) as u64;
    let mut new_id: Vec<Option<NodeId>> = vec![None; n];
    let mut out = QDag::new();
    let mut origin = Vec::new();
    let mut removed_esns = Vec::new();
    for id in order {
        ops += 1;
        if !live[id.index()] {
            if let NodeKind::Esn { variable, state } = dag.kind(id) {
                removed_esns.push((variable.clone(), state.clone()));
            }
            continue;
        }
        let parents: Vec<NodeId> = dag
            .parents(id)
            .iter()
            .map(|p| new_id[p.index()].expect("live node has live parents"))
            .collect();
        ops += parents.len() as u64;
        let nid = out
            .add_node(dag.kind(id).clone(), &parents)
            .expect("sweep copies a valid dag");
        new_id[id.index()] = Some(nid);
        origin.push(id);
    }
    for q in dag.queries() {
        out.add_query(q.variable.clone(), q.state.clone(), new_id[q.node.index()].unwrap())
            .expect("queries copied from a valid dag");
    }
    report.operations = ops;
    report.rewrites = n - out.node_count();
    let report = report.finish(&out);
    (
        out,
        ReductionReport {
            passes: vec![report],
            cycles: 1,
            removed_esns,
            origin,
            elapsed: Duration::ZERO,
        },
    )
}

/// Runs zero compression, both identity eliminations, numeric folding and
/// the sweep until a whole cycle changes nothing.
pub fn reduce(dag: &QDag) -> (QDag, ReductionReport) {
    let start = Instant::now();
    let mut current = dag.clone();
    let mut report = ReductionReport {
        origin: dag.node_ids().collect(),
        ..Default::default()
    };
    loop {
        report.cycles += 1;
        let cycle = report.cycles;
        let values = ValueState::new(&current, Mode::Paper).snapshot();
        let mut work = current.clone();
        let mut cycle_passes = Vec::with_capacity(5);
        cycle_passes.push(
            zero_compression(&mut work, &values)
                .expect("fresh values have every indicator at 1")
                .passes
                .remove(0),
        );
        cycle_passes.push(eliminate_identity_zero(&mut work).passes.remove(0));
        cycle_passes.push(eliminate_identity_one(&mut work).passes.remove(0));
        cycle_passes.push(numeric_reduction(&mut work).passes.remove(0));
        let (swept, mut sweep_report) = sweep_dead_nodes(&work);
        cycle_passes.push(sweep_report.passes.remove(0));
        report.removed_esns.append(&mut sweep_report.removed_esns);
        report.origin = sweep_report
            .origin
            .iter()
            .map(|o| report.origin[o.index()])
            .collect();

        let changed = cycle_passes.iter().any(PassReport::changed);
        for mut p in cycle_passes {
            p.cycle = cycle;
            report.passes.push(p);
        }
        current = swept;
        if !changed {
            break;
        }
    }
    report.elapsed = start.elapsed();
    (current, report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn num(d: &mut QDag, l: f64) -> NodeId {
        d.add_node(NodeKind::Num(l), &[]).unwrap()
    }

    #[test]
    fn identity_zero_drops_add_edge_and_keeps_node() {
        let mut d = QDag::new();
        let z = num(&mut d, 0.0);
        let a = num(&mut d, 0.3);
        let s = d.add_node(NodeKind::Add, &[z, a]).unwrap();
        let r = eliminate_identity_zero(&mut d);
        assert_eq!(d.parents(s), &[a]);
        assert_eq!(d.node_count(), 3);
        assert!(d.children(z).is_empty());
        assert_eq!(r.pass().edges_after, 1);
        assert!(d.validate().is_empty());
    }

    #[test]
    fn identity_zero_repairs_empty_sum() {
        let mut d = QDag::new();
        let z1 = num(&mut d, 0.0);
        let z2 = num(&mut d, 0.0);
        let s = d.add_node(NodeKind::Add, &[z1, z2]).unwrap();
        eliminate_identity_zero(&mut d);
        assert_eq!(d.kind(s), &NodeKind::Num(0.0));
        assert!(d.validate().is_empty());
    }

    #[test]
    fn identity_zero_leaves_mul() {
        let mut d = QDag::new();
        let z = num(&mut d, 0.0);
        let e = d.add_node(NodeKind::esn("C", "on"), &[]).unwrap();
        let m = d.add_node(NodeKind::Mul, &[z, e]).unwrap();
        let r = eliminate_identity_zero(&mut d);
        assert_eq!(d.parents(m), &[z, e]);
        assert!(!r.pass().changed());
    }

    #[test]
    fn identity_one_cases() {
        let mut d = QDag::new();
        let one = num(&mut d, 1.0);
        let one_b = num(&mut d, 1.0);
        let e = d.add_node(NodeKind::esn("C", "on"), &[]).unwrap();
        let m = d.add_node(NodeKind::Mul, &[one, e]).unwrap();
        let mm = d.add_node(NodeKind::Mul, &[one, one_b]).unwrap();
        let s = d.add_node(NodeKind::Add, &[one_b, e]).unwrap();
        eliminate_identity_one(&mut d);
        assert_eq!(d.parents(m), &[e]);
        assert_eq!(d.kind(mm), &NodeKind::Num(1.0));
        assert_eq!(d.parents(s), &[one_b, e]);
        assert!(d.validate().is_empty());
    }

    #[test]
    fn numeric_reduction_folds_and_cascades() {
        let mut d = QDag::new();
        let a = num(&mut d, 0.6);
        let b = num(&mut d, 0.4);
        let s = d.add_node(NodeKind::Add, &[a, b]).unwrap();
        numeric_reduction(&mut d);
        assert_eq!(d.kind(s), &NodeKind::Num(1.0));

        let mut d = QDag::new();
        let h1 = num(&mut d, 0.5);
        let h2 = num(&mut d, 0.5);
        let m = d.add_node(NodeKind::Mul, &[h1, h2]).unwrap();
        let q = num(&mut d, 0.75);
        let s = d.add_node(NodeKind::Add, &[m, q]).unwrap();
        let r = numeric_reduction(&mut d);
        assert_eq!(d.kind(m), &NodeKind::Num(0.25));
        assert_eq!(d.kind(s), &NodeKind::Num(1.0));
        assert_eq!(r.pass().rewrites, 2);
        assert_eq!(r.pass().edges_after, 0);
        assert!(d.validate().is_empty());

        let mut d = QDag::new();
        let h = num(&mut d, 0.5);
        let e = d.add_node(NodeKind::esn("C", "on"), &[]).unwrap();
        let m = d.add_node(NodeKind::Mul, &[h, e]).unwrap();
        let r = numeric_reduction(&mut d);
        assert_eq!(d.kind(m), &NodeKind::Mul);
        assert!(!r.pass().changed());
    }

    #[test]
    fn zero_compression_cases() {
        let mut d = QDag::new();
        let z = num(&mut d, 0.0);
        let e = d.add_node(NodeKind::esn("C", "on"), &[]).unwrap();
        let m = d.add_node(NodeKind::Mul, &[z, e]).unwrap();
        let z2 = num(&mut d, 0.0);
        let s = d.add_node(NodeKind::Add, &[z, z2]).unwrap();
        let vals = ValueState::new(&d, Mode::Paper).snapshot();
        let r = zero_compression(&mut d, &vals).unwrap();
        assert_eq!(d.kind(m), &NodeKind::Num(0.0));
        assert_eq!(d.kind(s), &NodeKind::Num(0.0));
        assert!(matches!(d.kind(e), NodeKind::Esn { .. }));
        assert_eq!(r.pass().rewrites, 2);
        assert!(d.validate().is_empty());
    }

    #[test]
    fn zero_compression_requires_all_ones() {
        let mut d = QDag::new();
        let e = d.add_node(NodeKind::esn("C", "on"), &[]).unwrap();
        let mut st = ValueState::new(&d, Mode::Paper);
        st.set_evidence(e, 0.0).unwrap();
        let snap = st.snapshot();
        assert_eq!(zero_compression(&mut d, &snap), Err(ReduceError::ValuesNotInitialized));
        let short = NodeValues { values: vec![], indicators_all_one: true };
        assert!(matches!(
            zero_compression(&mut d, &short),
            Err(ReduceError::ValueCountMismatch { .. })
        ));
    }

    #[test]
    fn sweep_removes_orphans_and_unused_esns() {
        let mut d = QDag::new();
        let orphan = num(&mut d, 1.0);
        let unused = d.add_node(NodeKind::esn("D", "on"), &[]).unwrap();
        let folded = d.add_node(NodeKind::Mul, &[unused]).unwrap();
        let e = d.add_node(NodeKind::esn("C", "on"), &[]).unwrap();
        let h = num(&mut d, 0.5);
        let q = d.add_node(NodeKind::Mul, &[e, h]).unwrap();
        d.add_query("C", "on", q).unwrap();
        // Detach `folded` the way numeric folding would.
        d.make_num(folded, 1.0);
        d.rebuild_children();
        let _ = orphan;
        let (out, r) = sweep_dead_nodes(&d);
        assert_eq!(out.node_count(), 3);
        assert_eq!(r.removed_esns, vec![("D".to_string(), "on".to_string())]);
        assert_eq!(r.origin, vec![e, h, q]);
        assert!(out.validate().is_empty());
        assert_eq!(out.query_node("C", "on"), Some(NodeId(2)));
    }

    #[test]
    fn sweep_is_identity_on_live_dag() {
        let mut d = QDag::new();
        let e = d.add_node(NodeKind::esn("C", "on"), &[]).unwrap();
        let h = num(&mut d, 0.5);
        let q = d.add_node(NodeKind::Mul, &[e, h]).unwrap();
        d.add_query("C", "on", q).unwrap();
        let (out, r) = sweep_dead_nodes(&d);
        assert_eq!(out, d);
        assert!(!r.pass().changed());
    }

    #[test]
    fn reduce_fixpoint_on_reduced_dag() {
        let mut d = QDag::new();
        let e = d.add_node(NodeKind::esn("C", "on"), &[]).unwrap();
        let h = num(&mut d, 0.5);
        let q = d.add_node(NodeKind::Mul, &[e, h]).unwrap();
        d.add_query("C", "on", q).unwrap();
        let (out, r) = reduce(&d);
        assert_eq!(out, d);
        assert_eq!(r.cycles, 1);
        assert!(r.passes.iter().all(|p| !p.changed()));
    }

    #[test]
    fn reduce_collapses_barren_sum() {
        // q = Esn * 0.3 * (0.6 + 0.4): the barren sum folds to 1 and drops out.
        let mut d = QDag::new();
        let e = d.add_node(NodeKind::esn("B", "on"), &[]).unwrap();
        let p = num(&mut d, 0.3);
        let c1 = num(&mut d, 0.6);
        let c2 = num(&mut d, 0.4);
        let s = d.add_node(NodeKind::Add, &[c1, c2]).unwrap();
        let q = d.add_node(NodeKind::Mul, &[e, p, s]).unwrap();
        d.add_query("A", "on", q).unwrap();
        let (out, r) = reduce(&d);
        assert_eq!(out.node_count(), 3);
        assert_eq!(out.edge_count(), 2);
        assert_eq!(r.origin, vec![e, p, q]);
        assert!(r.cycles >= 2);
        let text = r.to_kv();
        assert!(text.contains("nodes_in=6"));
        assert!(text.contains("nodes_out=3"));
        assert!(r.to_string().contains("numeric-reduction"));
    }
}
