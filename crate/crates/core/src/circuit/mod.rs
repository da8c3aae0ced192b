//! The Q-DAG: a parameterized arithmetic circuit over numeric constants and
//! evidence indicators.
//!
//! Values flow from parents to children. Roots are inputs (`Num` and `Esn`
//! nodes), and query nodes are outputs whose value is `Pr(V=v, e)` for the
//! evidence `e` encoded by the indicator settings.

mod format;

pub use format::{format_label, parse, serialize, ParseError};

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use std::fmt;

use thiserror::Error;

/// Dense node index into a [`QDag`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub u32);

impl NodeId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl From<usize> for NodeId {
    fn from(i: usize) -> Self {
        NodeId(i as u32)
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum NodeKind {
    /// Numeric constant.
    Num(f64),
    /// Evidence-specific node for `variable = state`. Its value is 1 when
    /// the variable is unknown or observed in `state`, 0 otherwise.
    Esn { variable: String, state: String },
    Add,
    Mul,
}

impl NodeKind {
    pub fn esn(variable: impl Into<String>, state: impl Into<String>) -> Self {
        NodeKind::Esn {
            variable: variable.into(),
            state: state.into(),
        }
    }

    pub fn is_root_kind(&self) -> bool {
        matches!(self, NodeKind::Num(_) | NodeKind::Esn { .. })
    }

    pub fn is_num(&self) -> bool {
        matches!(self, NodeKind::Num(_))
    }

    pub fn label(&self) -> Option<f64> {
        match self {
            NodeKind::Num(l) => Some(*l),
            _ => None,
        }
    }
}

/// A query node binding: `node` evaluates to `Pr(variable = state, e)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QueryNode {
    pub variable: String,
    pub state: String,
    pub node: NodeId,
}

#[derive(Debug, Error, PartialEq)]
pub enum CircuitError {
    #[error("node {node}: unknown parent {parent}")]
    UnknownParent { node: NodeId, parent: NodeId },
    #[error("node {node}: duplicate parent {parent}")]
    DuplicateParent { node: NodeId, parent: NodeId },
    #[error("node {node}: NUM/ESN nodes cannot have parents")]
    RootKindWithParents { node: NodeId },
    #[error("node {node}: ADD/MUL nodes need at least one parent")]
    OperatorWithoutParents { node: NodeId },
    #[error("duplicate evidence node ({variable}, {state})")]
    DuplicateEsn { variable: String, state: String },
    #[error("node {node}: numeric label {label} must be finite and non-negative")]
    InvalidLabel { node: NodeId, label: f64 },
    #[error("duplicate query node ({variable}, {state})")]
    DuplicateQuery { variable: String, state: String },
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("cycle detected through node {0}")]
    Cycle(NodeId),
}

/// Kinds of structural problems reported by [`QDag::validate`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ViolationKind {
    ParentOutOfRange,
    ChildOutOfRange,
    MirrorMismatch,
    DuplicateParent,
    DuplicateChild,
    RootKindWithParents,
    OperatorWithoutParents,
    InvalidLabel,
    DuplicateEsn,
    QueryOutOfRange,
    DuplicateQuery,
    Cycle,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub kind: ViolationKind,
    pub node: NodeId,
    pub other: Option<NodeId>,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self.kind {
            ViolationKind::ParentOutOfRange => "parent-out-of-range",
            ViolationKind::ChildOutOfRange => "child-out-of-range",
            ViolationKind::MirrorMismatch => "mirror-mismatch",
            ViolationKind::DuplicateParent => "duplicate-parent",
            ViolationKind::DuplicateChild => "duplicate-child",
            ViolationKind::RootKindWithParents => "root-kind-with-parents",
            ViolationKind::OperatorWithoutParents => "operator-without-parents",
            ViolationKind::InvalidLabel => "invalid-label",
            ViolationKind::DuplicateEsn => "duplicate-esn",
            ViolationKind::QueryOutOfRange => "query-out-of-range",
            ViolationKind::DuplicateQuery => "duplicate-query",
            ViolationKind::Cycle => "cycle",
        };
        match self.other {
            Some(o) => write!(f, "{} at {}/{}", name, self.node, o),
            None => write!(f, "{} at {}", name, self.node),
        }
    }
}

/// Query DAG with side-table adjacency. `children` mirrors `parents`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct QDag {
    kinds: Vec<NodeKind>,
    parents: Vec<Vec<NodeId>>,
    children: Vec<Vec<NodeId>>,
    queries: Vec<QueryNode>,
    query_index: HashMap<(String, String), usize>,
    esn_index: HashMap<(String, String), NodeId>,
}

impl QDag {
    pub fn new() -> Self {
        Self::default()
    }

    /// Assembles a dag from raw tables without any checking. Intended for
    /// loaders and tests that need to look at malformed structures; run
    /// [`QDag::validate`] before trusting the result.
    pub fn from_raw_parts(
        kinds: Vec<NodeKind>,
        parents: Vec<Vec<NodeId>>,
        children: Vec<Vec<NodeId>>,
        queries: Vec<QueryNode>,
    ) -> Self {
        let mut esn_index = HashMap::new();
        for (i, k) in kinds.iter().enumerate() {
            if let NodeKind::Esn { variable, state } = k {
                esn_index
                    .entry((variable.clone(), state.clone()))
                    .or_insert(NodeId::from(i));
            }
        }
        let mut query_index = HashMap::new();
        for (i, q) in queries.iter().enumerate() {
            query_index
                .entry((q.variable.clone(), q.state.clone()))
                .or_insert(i);
        }
        QDag {
            kinds,
            parents,
            children,
            queries,
            query_index,
            esn_index,
        }
    }

    pub fn add_node(&mut self, kind: NodeKind, parents: &[NodeId]) -> Result<NodeId, CircuitError> {
        let id = NodeId::from(self.kinds.len());
        match &kind {
            NodeKind::Num(l) if !(l.is_finite() && *l >= 0.0) => {
                return Err(CircuitError::InvalidLabel { node: id, label: *l })
            }
            NodeKind::Esn { variable, state } => {
                if self.esn_index.contains_key(&(variable.clone(), state.clone())) {
                    return Err(CircuitError::DuplicateEsn {
                        variable: variable.clone(),
                        state: state.clone(),
                    });
                }
            }
            _ => {}
        }
        if kind.is_root_kind() && !parents.is_empty() {
            return Err(CircuitError::RootKindWithParents { node: id });
        }
        if !kind.is_root_kind() && parents.is_empty() {
            return Err(CircuitError::OperatorWithoutParents { node: id });
        }
        for (i, &p) in parents.iter().enumerate() {
            if p.index() >= self.kinds.len() {
                return Err(CircuitError::UnknownParent { node: id, parent: p });
            }
            if parents[..i].contains(&p) {
                return Err(CircuitError::DuplicateParent { node: id, parent: p });
            }
        }

        if let NodeKind::Esn { variable, state } = &kind {
            self.esn_index.insert((variable.clone(), state.clone()), id);
        }
        for &p in parents {
            self.children[p.index()].push(id);
        }
        self.kinds.push(kind);
        self.parents.push(parents.to_vec());
        self.children.push(Vec::new());
        Ok(id)
    }

    /// Registers `node` as the query node for `variable = state`.
    pub fn add_query(
        &mut self,
        variable: impl Into<String>,
        state: impl Into<String>,
        node: NodeId,
    ) -> Result<(), CircuitError> {
        let (variable, state) = (variable.into(), state.into());
        if node.index() >= self.kinds.len() {
            return Err(CircuitError::UnknownNode(node));
        }
        let key = (variable.clone(), state.clone());
        if self.query_index.contains_key(&key) {
            return Err(CircuitError::DuplicateQuery { variable, state });
        }
        self.query_index.insert(key, self.queries.len());
        self.queries.push(QueryNode {
            variable,
            state,
            node,
        });
        Ok(())
    }

    pub fn node_count(&self) -> usize {
        self.kinds.len()
    }

    pub fn edge_count(&self) -> usize {
        self.parents.iter().map(Vec::len).sum()
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        (0..self.kinds.len()).map(NodeId::from)
    }

    pub fn kind(&self, id: NodeId) -> &NodeKind {
        &self.kinds[id.index()]
    }

    pub fn parents(&self, id: NodeId) -> &[NodeId] {
        &self.parents[id.index()]
    }

    pub fn children(&self, id: NodeId) -> &[NodeId] {
        &self.children[id.index()]
    }

    /// Query nodes in registration order.
    pub fn queries(&self) -> &[QueryNode] {
        &self.queries
    }

    pub fn query_node(&self, variable: &str, state: &str) -> Option<NodeId> {
        self.query_index
            .get(&(variable.to_string(), state.to_string()))
            .map(|&i| self.queries[i].node)
    }

    pub fn esn_node(&self, variable: &str, state: &str) -> Option<NodeId> {
        self.esn_index
            .get(&(variable.to_string(), state.to_string()))
            .copied()
    }

    /// Evidence-specific nodes in ascending id order.
    pub fn esn_nodes(&self) -> impl Iterator<Item = (NodeId, &str, &str)> + '_ {
        self.kinds.iter().enumerate().filter_map(|(i, k)| match k {
            NodeKind::Esn { variable, state } => {
                Some((NodeId::from(i), variable.as_str(), state.as_str()))
            }
            _ => None,
        })
    }

    /// Evidence variables with their indicator nodes, grouped in order of
    /// first appearance; states keep ascending node order.
    pub fn esn_groups(&self) -> Vec<(String, Vec<(String, NodeId)>)> {
        let mut groups: Vec<(String, Vec<(String, NodeId)>)> = Vec::new();
        let mut pos: HashMap<&str, usize> = HashMap::new();
        for (id, var, state) in self.esn_nodes() {
            let g = *pos.entry(var).or_insert_with(|| {
                groups.push((var.to_string(), Vec::new()));
                groups.len() - 1
            });
            groups[g].1.push((state.to_string(), id));
        }
        groups
    }

    /// True when every parent id is smaller than its child id, i.e. the id
    /// order is already a topological order.
    pub fn is_id_topological(&self) -> bool {
        self.parents
            .iter()
            .enumerate()
            .all(|(i, ps)| ps.iter().all(|p| p.index() < i))
    }

    /// Kahn's algorithm with ascending-id tie-break.
    pub fn topological_order(&self) -> Result<Vec<NodeId>, CircuitError> {
        let n = self.kinds.len();
        let mut indegree: Vec<usize> = self.parents.iter().map(Vec::len).collect();
        let mut ready: BinaryHeap<Reverse<NodeId>> = (0..n)
            .filter(|&i| indegree[i] == 0)
            .map(|i| Reverse(NodeId::from(i)))
            .collect();
        let mut order = Vec::with_capacity(n);
        while let Some(Reverse(id)) = ready.pop() {
            order.push(id);
            for &c in &self.children[id.index()] {
                let d = &mut indegree[c.index()];
                *d -= 1;
                if *d == 0 {
                    ready.push(Reverse(c));
                }
            }
        }
        if order.len() != n {
            let stuck = (0..n).find(|&i| indegree[i] > 0).unwrap_or(0);
            return Err(CircuitError::Cycle(NodeId::from(stuck)));
        }
        Ok(order)
    }

    /// Checks every structural invariant. An empty result means the dag is
    /// well formed.
    pub fn validate(&self) -> Vec<Violation> {
        let n = self.kinds.len();
        let mut out = Vec::new();
        let mut push = |kind, node: usize, other: Option<usize>| {
            out.push(Violation {
                kind,
                node: NodeId::from(node),
                other: other.map(NodeId::from),
            })
        };

        if self.parents.len() != n || self.children.len() != n {
            push(ViolationKind::MirrorMismatch, 0, None);
            return out;
        }

        let mut seen_esn: HashMap<(&str, &str), usize> = HashMap::new();
        for (i, kind) in self.kinds.iter().enumerate() {
            let ps = &self.parents[i];
            match kind {
                NodeKind::Num(l) => {
                    if !(l.is_finite() && *l >= 0.0) {
                        push(ViolationKind::InvalidLabel, i, None);
                    }
                }
                NodeKind::Esn { variable, state } => {
                    if let Some(&first) = seen_esn.get(&(variable.as_str(), state.as_str())) {
                        push(ViolationKind::DuplicateEsn, i, Some(first));
                    } else {
                        seen_esn.insert((variable, state), i);
                    }
                }
                NodeKind::Add | NodeKind::Mul => {
                    if ps.is_empty() {
                        push(ViolationKind::OperatorWithoutParents, i, None);
                    }
                }
            }
            if kind.is_root_kind() && !ps.is_empty() {
                push(ViolationKind::RootKindWithParents, i, None);
            }
            for (j, &p) in ps.iter().enumerate() {
                if p.index() >= n {
                    push(ViolationKind::ParentOutOfRange, i, Some(p.index()));
                    continue;
                }
                if ps[..j].contains(&p) {
                    push(ViolationKind::DuplicateParent, i, Some(p.index()));
                } else if !self.children[p.index()].contains(&NodeId::from(i)) {
                    push(ViolationKind::MirrorMismatch, p.index(), Some(i));
                }
            }
            let cs = &self.children[i];
            for (j, &c) in cs.iter().enumerate() {
                if c.index() >= n {
                    push(ViolationKind::ChildOutOfRange, i, Some(c.index()));
                    continue;
                }
                if cs[..j].contains(&c) {
                    push(ViolationKind::DuplicateChild, i, Some(c.index()));
                } else if !self.parents[c.index()].contains(&NodeId::from(i)) {
                    push(ViolationKind::MirrorMismatch, i, Some(c.index()));
                }
            }
        }

        let mut seen_query: HashMap<(&str, &str), ()> = HashMap::new();
        for q in &self.queries {
            if q.node.index() >= n {
                push(ViolationKind::QueryOutOfRange, q.node.index(), None);
            }
            if seen_query
                .insert((q.variable.as_str(), q.state.as_str()), ())
                .is_some()
            {
                push(ViolationKind::DuplicateQuery, q.node.index(), None);
            }
        }

        // Only meaningful once the adjacency itself is sane.
        if out.is_empty() {
            if let Err(CircuitError::Cycle(at)) = self.topological_order() {
                out.push(Violation {
                    kind: ViolationKind::Cycle,
                    node: at,
                    other: None,
                });
            }
        }
        out
    }

    // ---- in-place rewriting support for the reducer ----

    /// Turns `id` into a numeric constant and drops its incoming edges. The
    /// children mirror of the former parents is left stale until
    /// [`QDag::rebuild_children`].
    pub(crate) fn make_num(&mut self, id: NodeId, label: f64) {
        if let NodeKind::Esn { variable, state } = &self.kinds[id.index()] {
            self.esn_index.remove(&(variable.clone(), state.clone()));
        }
        self.kinds[id.index()] = NodeKind::Num(label);
        self.parents[id.index()].clear();
    }

    pub(crate) fn parents_mut(&mut self, id: NodeId) -> &mut Vec<NodeId> {
        &mut self.parents[id.index()]
    }

    /// Recomputes `children` from `parents`. Returns the number of edges
    /// written, for operation accounting.
    pub(crate) fn rebuild_children(&mut self) -> usize {
        for cs in &mut self.children {
            cs.clear();
        }
        let mut edges = 0;
        for (i, ps) in self.parents.iter().enumerate() {
            for &p in ps {
                self.children[p.index()].push(NodeId::from(i));
                edges += 1;
            }
        }
        edges
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain() -> QDag {
        let mut d = QDag::new();
        let a = d.add_node(NodeKind::Num(0.5), &[]).unwrap();
        let b = d.add_node(NodeKind::Mul, &[a]).unwrap();
        let c = d.add_node(NodeKind::Add, &[b]).unwrap();
        d.add_query("X", "x", c).unwrap();
        d
    }

    #[test]
    fn add_node_assigns_dense_ids_and_mirrors() {
        let mut d = QDag::new();
        let a = d.add_node(NodeKind::Num(0.4), &[]).unwrap();
        assert_eq!(a, NodeId(0));
        let m = d.add_node(NodeKind::Mul, &[a]).unwrap();
        assert_eq!(m, NodeId(1));
        assert_eq!(d.children(a), &[m]);
        assert!(d.validate().is_empty());
    }

    #[test]
    fn add_node_rejects_bad_input() {
        let mut d = QDag::new();
        let a = d.add_node(NodeKind::Num(0.4), &[]).unwrap();
        assert_eq!(
            d.add_node(NodeKind::Mul, &[a, a]),
            Err(CircuitError::DuplicateParent { node: NodeId(1), parent: a })
        );
        assert_eq!(
            d.add_node(NodeKind::Add, &[NodeId(7)]),
            Err(CircuitError::UnknownParent { node: NodeId(1), parent: NodeId(7) })
        );
        assert_eq!(
            d.add_node(NodeKind::Num(0.1), &[a]),
            Err(CircuitError::RootKindWithParents { node: NodeId(1) })
        );
        assert_eq!(
            d.add_node(NodeKind::Add, &[]),
            Err(CircuitError::OperatorWithoutParents { node: NodeId(1) })
        );
        assert!(matches!(
            d.add_node(NodeKind::Num(-0.1), &[]),
            Err(CircuitError::InvalidLabel { .. })
        ));
        assert!(matches!(
            d.add_node(NodeKind::Num(f64::NAN), &[]),
            Err(CircuitError::InvalidLabel { .. })
        ));
        d.add_node(NodeKind::esn("C", "on"), &[]).unwrap();
        assert_eq!(
            d.add_node(NodeKind::esn("C", "on"), &[]),
            Err(CircuitError::DuplicateEsn { variable: "C".into(), state: "on".into() })
        );
        // Failed insertions leave nothing behind.
        assert_eq!(d.node_count(), 2);
        assert!(d.validate().is_empty());
    }

    #[test]
    fn labels_above_one_are_allowed() {
        let mut d = QDag::new();
        d.add_node(NodeKind::Num(1.7), &[]).unwrap();
        assert!(d.validate().is_empty());
    }

    #[test]
    fn topological_order_breaks_ties_by_id() {
        let mut d = QDag::new();
        let a = d.add_node(NodeKind::Num(0.1), &[]).unwrap();
        let b = d.add_node(NodeKind::Num(0.2), &[]).unwrap();
        d.add_node(NodeKind::Add, &[a, b]).unwrap();
        assert_eq!(d.topological_order().unwrap(), vec![NodeId(0), NodeId(1), NodeId(2)]);

        let mut single = QDag::new();
        single.add_node(NodeKind::Num(1.0), &[]).unwrap();
        assert_eq!(single.topological_order().unwrap(), vec![NodeId(0)]);

        assert_eq!(chain().topological_order().unwrap(), vec![NodeId(0), NodeId(1), NodeId(2)]);
    }

    #[test]
    fn topological_order_handles_non_monotone_ids() {
        // 0 <- 1 expressed with the parent at the higher id.
        let d = QDag::from_raw_parts(
            vec![NodeKind::Add, NodeKind::Num(0.5)],
            vec![vec![NodeId(1)], vec![]],
            vec![vec![], vec![NodeId(0)]],
            vec![],
        );
        assert!(d.validate().is_empty());
        assert!(!d.is_id_topological());
        assert_eq!(d.topological_order().unwrap(), vec![NodeId(1), NodeId(0)]);
    }

    #[test]
    fn cycle_is_detected() {
        let d = QDag::from_raw_parts(
            vec![NodeKind::Add, NodeKind::Mul],
            vec![vec![NodeId(1)], vec![NodeId(0)]],
            vec![vec![NodeId(1)], vec![NodeId(0)]],
            vec![],
        );
        assert!(matches!(d.topological_order(), Err(CircuitError::Cycle(_))));
        let v = d.validate();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].kind, ViolationKind::Cycle);
    }

    #[test]
    fn validate_reports_mirror_mismatch() {
        let d = QDag::from_raw_parts(
            vec![NodeKind::Num(0.5), NodeKind::Num(0.5), NodeKind::Add],
            vec![vec![], vec![], vec![NodeId(0)]],
            vec![vec![], vec![], vec![]],
            vec![],
        );
        let v = d.validate();
        assert_eq!(
            v,
            vec![Violation {
                kind: ViolationKind::MirrorMismatch,
                node: NodeId(0),
                other: Some(NodeId(2)),
            }]
        );
        assert_eq!(v[0].to_string(), "mirror-mismatch at 0/2");
    }

    #[test]
    fn validate_reports_duplicate_esn() {
        let d = QDag::from_raw_parts(
            vec![NodeKind::esn("C", "on"), NodeKind::esn("C", "on")],
            vec![vec![], vec![]],
            vec![vec![], vec![]],
            vec![],
        );
        let v = d.validate();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].kind, ViolationKind::DuplicateEsn);
    }

    #[test]
    fn validate_accepts_well_formed() {
        assert!(chain().validate().is_empty());
    }

    #[test]
    fn query_may_sit_on_a_root() {
        let mut d = QDag::new();
        let a = d.add_node(NodeKind::Num(0.25), &[]).unwrap();
        d.add_query("A", "on", a).unwrap();
        assert!(d.validate().is_empty());
        assert_eq!(d.query_node("A", "on"), Some(a));
        assert!(matches!(d.add_query("A", "on", a), Err(CircuitError::DuplicateQuery { .. })));
        assert!(matches!(d.add_query("A", "off", NodeId(9)), Err(CircuitError::UnknownNode(_))));
    }

    #[test]
    fn esn_groups_keep_node_order() {
        let mut d = QDag::new();
        d.add_node(NodeKind::esn("B", "x"), &[]).unwrap();
        d.add_node(NodeKind::esn("A", "on"), &[]).unwrap();
        d.add_node(NodeKind::esn("B", "y"), &[]).unwrap();
        let g = d.esn_groups();
        assert_eq!(g[0].0, "B");
        assert_eq!(g[0].1, vec![("x".to_string(), NodeId(0)), ("y".to_string(), NodeId(2))]);
        assert_eq!(g[1].0, "A");
    }
}
