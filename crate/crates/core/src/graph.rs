//! Directed communication graphs and the augmented index space.
//!
//! A [`GraphSpec`] is a strongly connected directed graph over `m` computing
//! nodes with a per-link delivery probability `q` on every edge. Every node
//! carries a self-loop, and self-loops are always reliable (`q = 1`), so they
//! get no virtual buffer. The [`AugmentedSpace`] extends the node set with one
//! virtual buffer per non-self-loop edge; buffers hold mass that was sent but
//! not yet delivered. All matrix, vector, and CSV layouts across the crate use
//! the canonical augmented ordering defined here: computing nodes by id, then
//! buffers in lexicographic `(from, to)` order.
//!
//! Node ids are 0-based inside the library; external documents and messages
//! use 1-based ids, converted only at the I/O boundary.

use std::collections::BTreeMap;

use serde::Deserialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("failed to parse graph document: {0}")]
    Parse(String),
    #[error("graph must have at least one node")]
    Empty,
    #[error("node id {id} out of range 1..={m}")]
    NodeOutOfRange { id: usize, m: usize },
    #[error("duplicate edge ({from}, {to})")]
    DuplicateEdge { from: usize, to: usize },
    #[error("edge ({from}, {to}) has reliability {q}, expected 0 < q <= 1")]
    InvalidReliability { from: usize, to: usize, q: f64 },
    #[error("self-loop at node {node} must have reliability 1.0, got {q}")]
    UnreliableSelfLoop { node: usize, q: f64 },
    #[error("graph is not strongly connected")]
    NotStronglyConnected,
}

/// One directed link. Node ids are 0-based.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    /// Per-transmission success probability, in `(0, 1]`.
    pub q: f64,
}

/// Validated directed graph with self-loops at every node.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphSpec {
    m: usize,
    /// All edges including self-loops, sorted by `(from, to)`.
    edges: Vec<Edge>,
    /// Non-self-loop edges, sorted by `(from, to)`: the canonical buffer order.
    ns_edges: Vec<Edge>,
    out: Vec<Vec<usize>>,
    inn: Vec<Vec<usize>>,
}

/// On-disk graph document. Node ids in the document are 1-based; self-loops
/// may be listed (with `q = 1.0`) or omitted.
#[derive(Debug, Deserialize)]
struct GraphDocument {
    m: usize,
    edges: Vec<EdgeDocument>,
}

#[derive(Debug, Deserialize)]
struct EdgeDocument {
    from: usize,
    to: usize,
    q: f64,
}

impl GraphSpec {
    /// Builds a graph from 0-based `(from, to, q)` triples. Self-loops are
    /// added automatically when absent; listed self-loops must have `q = 1`.
    pub fn new(m: usize, edges: &[(usize, usize, f64)]) -> Result<Self, GraphError> {
        if m == 0 {
            return Err(GraphError::Empty);
        }
        let mut map: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for &(from, to, q) in edges {
            for id in [from, to] {
                if id >= m {
                    return Err(GraphError::NodeOutOfRange { id: id + 1, m });
                }
            }
            if map.insert((from, to), q).is_some() {
                return Err(GraphError::DuplicateEdge {
                    from: from + 1,
                    to: to + 1,
                });
            }
            if from == to {
                if q != 1.0 {
                    return Err(GraphError::UnreliableSelfLoop { node: from + 1, q });
                }
            } else if !(q > 0.0 && q <= 1.0) {
                return Err(GraphError::InvalidReliability {
                    from: from + 1,
                    to: to + 1,
                    q,
                });
            }
        }
        for i in 0..m {
            map.entry((i, i)).or_insert(1.0);
        }

        let edges: Vec<Edge> = map
            .iter()
            .map(|(&(from, to), &q)| Edge { from, to, q })
            .collect();
        let ns_edges: Vec<Edge> = edges.iter().filter(|e| e.from != e.to).copied().collect();

        let mut out = vec![Vec::new(); m];
        let mut inn = vec![Vec::new(); m];
        for e in &edges {
            out[e.from].push(e.to);
            inn[e.to].push(e.from);
        }
        // BTreeMap iteration already yields sorted out-lists; sort in-lists.
        for l in &mut inn {
            l.sort_unstable();
        }

        let g = GraphSpec {
            m,
            edges,
            ns_edges,
            out,
            inn,
        };
        if !g.is_strongly_connected() {
            return Err(GraphError::NotStronglyConnected);
        }
        Ok(g)
    }

    /// Parses and validates a graph document (JSON, 1-based node ids).
    pub fn from_json(text: &str) -> Result<Self, GraphError> {
        let doc: GraphDocument =
            serde_json::from_str(text).map_err(|e| GraphError::Parse(e.to_string()))?;
        if doc.m == 0 {
            return Err(GraphError::Empty);
        }
        let mut triples = Vec::with_capacity(doc.edges.len());
        for e in &doc.edges {
            for id in [e.from, e.to] {
                if id == 0 || id > doc.m {
                    return Err(GraphError::NodeOutOfRange { id, m: doc.m });
                }
            }
            triples.push((e.from - 1, e.to - 1, e.q));
        }
        Self::new(doc.m, &triples)
    }

    /// Directed ring `0 -> 1 -> ... -> m-1 -> 0` with reliability `q` on every
    /// non-self-loop edge.
    pub fn ring(m: usize, q: f64) -> Result<Self, GraphError> {
        let edges: Vec<(usize, usize, f64)> = (0..m).map(|i| (i, (i + 1) % m, q)).collect();
        Self::new(m, &edges)
    }

    /// Complete directed graph on `m` nodes with uniform reliability `q`.
    pub fn complete(m: usize, q: f64) -> Result<Self, GraphError> {
        let mut edges = Vec::new();
        for i in 0..m {
            for j in 0..m {
                if i != j {
                    edges.push((i, j, q));
                }
            }
        }
        Self::new(m, &edges)
    }

    /// Copy of this graph with `q` replaced on every non-self-loop edge.
    pub fn with_uniform_q(&self, q: f64) -> Result<Self, GraphError> {
        let triples: Vec<(usize, usize, f64)> = self
            .ns_edges
            .iter()
            .map(|e| (e.from, e.to, q))
            .collect();
        Self::new(self.m, &triples)
    }

    pub fn node_count(&self) -> usize {
        self.m
    }

    /// All edges including self-loops, sorted by `(from, to)`.
    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    /// Non-self-loop edges in canonical (lexicographic) order. Buffer `b` in
    /// every mask, matrix, and trace corresponds to `non_self_edges()[b]`.
    pub fn non_self_edges(&self) -> &[Edge] {
        &self.ns_edges
    }

    /// Out-degree `D_i`, counting the self-loop.
    pub fn out_degree(&self, i: usize) -> Result<usize, GraphError> {
        if i >= self.m {
            return Err(GraphError::NodeOutOfRange {
                id: i + 1,
                m: self.m,
            });
        }
        Ok(self.out[i].len())
    }

    /// Out-neighbors of `i` in ascending order (includes `i` itself).
    pub fn out_neighbors(&self, i: usize) -> &[usize] {
        &self.out[i]
    }

    /// In-neighbors of `i` in ascending order (includes `i` itself).
    pub fn in_neighbors(&self, i: usize) -> &[usize] {
        &self.inn[i]
    }

    pub fn has_edge(&self, from: usize, to: usize) -> bool {
        self.out[from].binary_search(&to).is_ok()
    }

    pub fn edge_q(&self, from: usize, to: usize) -> Option<f64> {
        self.edges
            .binary_search_by_key(&(from, to), |e| (e.from, e.to))
            .ok()
            .map(|idx| self.edges[idx].q)
    }

    fn is_strongly_connected(&self) -> bool {
        self.reaches_all(&self.out) && self.reaches_all(&self.inn)
    }

    /// BFS from node 0 along the given adjacency; true iff all nodes reached.
    fn reaches_all(&self, adj: &[Vec<usize>]) -> bool {
        let mut seen = vec![false; self.m];
        let mut queue = vec![0usize];
        seen[0] = true;
        while let Some(u) = queue.pop() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    queue.push(v);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// Canonical textual encoding (1-based ids), used for hashing.
    pub fn canonical_string(&self) -> String {
        use std::fmt::Write;
        let mut s = format!("m={}", self.m);
        for e in &self.edges {
            write!(s, ";{},{},{:.17e}", e.from + 1, e.to + 1, e.q).unwrap();
        }
        s
    }

    /// SHA-256 of the canonical encoding, as lowercase hex.
    pub fn sha256_hex(&self) -> String {
        let digest = Sha256::digest(self.canonical_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Position of an entity in the augmented index space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum AugmentedIndex {
    /// Computing node `i`.
    Node(usize),
    /// Virtual buffer for the directed link `(from, to)`.
    Buffer { from: usize, to: usize },
}

/// Canonical bijection between augmented entities and `0..n`.
///
/// Positions `0..m` are computing nodes in id order; positions `m..n` are
/// buffers in lexicographic `(from, to)` order, so `n = m + #non-self-loop
/// edges`. Self-loops get no buffer: they are always reliable, so a self-loop
/// buffer could never hold mass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AugmentedSpace {
    m: usize,
    buffers: Vec<(usize, usize)>,
    positions: BTreeMap<(usize, usize), usize>,
}

impl AugmentedSpace {
    pub fn new(g: &GraphSpec) -> Self {
        let buffers: Vec<(usize, usize)> =
            g.non_self_edges().iter().map(|e| (e.from, e.to)).collect();
        let positions = buffers
            .iter()
            .enumerate()
            .map(|(b, &edge)| (edge, g.node_count() + b))
            .collect();
        AugmentedSpace {
            m: g.node_count(),
            buffers,
            positions,
        }
    }

    /// Total number of augmented entities.
    pub fn n(&self) -> usize {
        self.m + self.buffers.len()
    }

    pub fn node_count(&self) -> usize {
        self.m
    }

    pub fn buffer_count(&self) -> usize {
        self.buffers.len()
    }

    pub fn kind(&self, position: usize) -> Option<AugmentedIndex> {
        if position < self.m {
            Some(AugmentedIndex::Node(position))
        } else {
            self.buffers
                .get(position - self.m)
                .map(|&(from, to)| AugmentedIndex::Buffer { from, to })
        }
    }

    pub fn position(&self, kind: AugmentedIndex) -> Option<usize> {
        match kind {
            AugmentedIndex::Node(i) => (i < self.m).then_some(i),
            AugmentedIndex::Buffer { from, to } => self.positions.get(&(from, to)).copied(),
        }
    }

    /// Position of the buffer for link `(from, to)`, if that link exists.
    pub fn buffer_position(&self, from: usize, to: usize) -> Option<usize> {
        self.positions.get(&(from, to)).copied()
    }

    /// Human-readable labels in canonical order (1-based), used in CSV output.
    pub fn labels(&self) -> Vec<String> {
        let mut labels: Vec<String> = (1..=self.m).map(|i| i.to_string()).collect();
        labels.extend(
            self.buffers
                .iter()
                .map(|&(f, t)| format!("{}->{}", f + 1, t + 1)),
        );
        labels
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_node() -> GraphSpec {
        GraphSpec::new(2, &[(0, 1, 0.9), (1, 0, 0.9)]).unwrap()
    }

    #[test]
    fn two_node_document_loads_with_self_loops() {
        let text = r#"{"m": 2, "edges": [
            {"from": 1, "to": 2, "q": 0.9},
            {"from": 2, "to": 1, "q": 0.9}
        ]}"#;
        let g = GraphSpec::from_json(text).unwrap();
        assert_eq!(g.node_count(), 2);
        assert_eq!(g.edges().len(), 4);
        assert_eq!(g.edge_q(0, 0), Some(1.0));
        assert_eq!(g.edge_q(1, 1), Some(1.0));
        assert_eq!(g.edge_q(0, 1), Some(0.9));
    }

    #[test]
    fn missing_return_path_is_rejected() {
        let text = r#"{"m": 3, "edges": [
            {"from": 1, "to": 2, "q": 0.5},
            {"from": 2, "to": 3, "q": 0.5}
        ]}"#;
        assert_eq!(
            GraphSpec::from_json(text).unwrap_err(),
            GraphError::NotStronglyConnected
        );
    }

    #[test]
    fn five_ring_has_ten_edges() {
        let g = GraphSpec::ring(5, 0.5).unwrap();
        assert_eq!(g.node_count(), 5);
        assert_eq!(g.edges().len(), 10);
        assert_eq!(g.non_self_edges().len(), 5);
    }

    #[test]
    fn parse_failure_is_distinct() {
        assert!(matches!(
            GraphSpec::from_json("not json"),
            Err(GraphError::Parse(_))
        ));
    }

    #[test]
    fn duplicate_edge_is_rejected() {
        let err = GraphSpec::new(2, &[(0, 1, 0.9), (0, 1, 0.8), (1, 0, 0.9)]).unwrap_err();
        assert_eq!(err, GraphError::DuplicateEdge { from: 1, to: 2 });
    }

    #[test]
    fn reliability_out_of_range_is_rejected() {
        for q in [0.0, -0.1, 1.5] {
            let err = GraphSpec::new(2, &[(0, 1, q), (1, 0, 0.9)]).unwrap_err();
            assert!(matches!(err, GraphError::InvalidReliability { .. }), "q={q}");
        }
    }

    #[test]
    fn listed_self_loop_must_be_reliable() {
        let err = GraphSpec::new(2, &[(0, 0, 0.5), (0, 1, 0.9), (1, 0, 0.9)]).unwrap_err();
        assert_eq!(err, GraphError::UnreliableSelfLoop { node: 1, q: 0.5 });
        // Listing the self-loop with q = 1 is fine.
        GraphSpec::new(2, &[(0, 0, 1.0), (0, 1, 0.9), (1, 0, 0.9)]).unwrap();
    }

    #[test]
    fn node_out_of_range_in_document() {
        let text = r#"{"m": 2, "edges": [{"from": 1, "to": 3, "q": 0.9}]}"#;
        assert_eq!(
            GraphSpec::from_json(text).unwrap_err(),
            GraphError::NodeOutOfRange { id: 3, m: 2 }
        );
    }

    #[test]
    fn out_degree_counts_self_loop() {
        assert_eq!(two_node().out_degree(0).unwrap(), 2);
        let ring = GraphSpec::ring(5, 0.5).unwrap();
        for i in 0..5 {
            assert_eq!(ring.out_degree(i).unwrap(), 2);
        }
        let complete = GraphSpec::complete(4, 0.5).unwrap();
        for i in 0..4 {
            assert_eq!(complete.out_degree(i).unwrap(), 4);
        }
    }

    #[test]
    fn out_degree_rejects_unknown_node() {
        assert!(matches!(
            two_node().out_degree(7),
            Err(GraphError::NodeOutOfRange { id: 8, m: 2 })
        ));
    }

    #[test]
    fn out_degrees_sum_to_edge_count() {
        for g in [
            two_node(),
            GraphSpec::ring(5, 0.5).unwrap(),
            GraphSpec::complete(4, 0.9).unwrap(),
        ] {
            let total: usize = (0..g.node_count())
                .map(|i| g.out_degree(i).unwrap())
                .sum();
            assert_eq!(total, g.edges().len());
        }
    }

    #[test]
    fn augmented_space_two_node_order() {
        let aug = AugmentedSpace::new(&two_node());
        assert_eq!(aug.n(), 4);
        assert_eq!(aug.kind(0), Some(AugmentedIndex::Node(0)));
        assert_eq!(aug.kind(1), Some(AugmentedIndex::Node(1)));
        assert_eq!(aug.kind(2), Some(AugmentedIndex::Buffer { from: 0, to: 1 }));
        assert_eq!(aug.kind(3), Some(AugmentedIndex::Buffer { from: 1, to: 0 }));
        assert_eq!(aug.labels(), vec!["1", "2", "1->2", "2->1"]);
    }

    #[test]
    fn augmented_space_single_node() {
        let g = GraphSpec::new(1, &[]).unwrap();
        let aug = AugmentedSpace::new(&g);
        assert_eq!(aug.n(), 1);
    }

    #[test]
    fn augmented_space_five_ring() {
        let g = GraphSpec::ring(5, 0.5).unwrap();
        assert_eq!(AugmentedSpace::new(&g).n(), 10);
    }

    #[test]
    fn reachability_covers_all_nodes_in_both_directions() {
        // Accepted graphs must be reachable from node 0 forward and reverse.
        let g = GraphSpec::ring(6, 0.3).unwrap();
        assert!(g.reaches_all(&g.out));
        assert!(g.reaches_all(&g.inn));
    }

    #[test]
    fn canonical_hash_is_stable() {
        let a = two_node();
        let b = GraphSpec::from_json(
            r#"{"m": 2, "edges": [
                {"from": 2, "to": 1, "q": 0.9},
                {"from": 1, "to": 2, "q": 0.9}
            ]}"#,
        )
        .unwrap();
        assert_eq!(a.sha256_hex(), b.sha256_hex());
        assert_eq!(a.sha256_hex().len(), 64);
    }

    /// Random strongly connected graph: a ring over a permutation plus extras.
    pub(crate) fn arb_graph() -> impl Strategy<Value = GraphSpec> {
        (2usize..7, proptest::collection::vec(0usize..36, 0..12), 1u64..1_000_000).prop_map(
            |(m, extra, salt)| {
                let mut edges: Vec<(usize, usize, f64)> = Vec::new();
                for i in 0..m {
                    edges.push((i, (i + 1) % m, 0.5));
                }
                for (t, raw) in extra.iter().enumerate() {
                    let from = (raw + t) % m;
                    let to = (raw / 7 + salt as usize) % m;
                    if from != to && !edges.iter().any(|&(f, s, _)| (f, s) == (from, to)) {
                        edges.push((from, to, 0.25 + 0.5 * ((t % 3) as f64) / 3.0));
                    }
                }
                GraphSpec::new(m, &edges).unwrap()
            },
        )
    }

    proptest! {
        #[test]
        fn augmented_index_roundtrip(g in arb_graph()) {
            let aug = AugmentedSpace::new(&g);
            for pos in 0..aug.n() {
                let kind = aug.kind(pos).unwrap();
                prop_assert_eq!(aug.position(kind), Some(pos));
            }
            prop_assert_eq!(aug.kind(aug.n()), None);
        }

        #[test]
        fn degree_sum_matches_edge_count(g in arb_graph()) {
            let total: usize = (0..g.node_count()).map(|i| g.out_degree(i).unwrap()).sum();
            prop_assert_eq!(total, g.edges().len());
        }
    }
}
