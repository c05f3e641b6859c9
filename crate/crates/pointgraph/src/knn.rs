//! Exact k-nearest-neighbor search over row-major feature matrices, directed
//! graph construction and graph-overlap metrics.
//!
//! Both search paths (brute force and kd-tree) share one total order on
//! candidates: squared distance first, lower node id on ties. Squared
//! distances are accumulated dimension by dimension in index order, so the
//! two paths produce bit-identical neighbor lists.

use ndarray::{Array2, ArrayView1, ArrayView2};
use std::fmt::Write as _;
use std::str::FromStr;
use thiserror::Error;

/// Feature rows used for graph creation; row index is the node id.
pub type FeatureSet = Array2<f64>;

const LEAF_SIZE: usize = 16;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("need more points than neighbors: n = {n}, k = {k}")]
    TooFewPoints { n: usize, k: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("feature row {row} contains a non-finite value")]
    NonFinite { row: usize },
    #[error("graphs differ in shape: {a_nodes} nodes/k={a_k} vs {b_nodes} nodes/k={b_k}")]
    ShapeMismatch {
        a_nodes: usize,
        a_k: usize,
        b_nodes: usize,
        b_k: usize,
    },
    #[error("invalid neighbor list: {0}")]
    InvalidNeighbors(String),
    #[error("edge list line {line}: {msg}")]
    EdgeParse { line: usize, msg: String },
}

/// A directed k-NN graph: edge `(w -> v)` exists iff `w ∈ N(v)`.
///
/// Neighbor lists have exactly `k` entries, ordered by (distance, id).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DirectedGraph {
    k: usize,
    n_nodes: usize,
    neighbors: Vec<u32>,
}

impl DirectedGraph {
    /// Build from explicit neighbor lists, validating the graph invariants.
    pub fn from_neighbor_lists(lists: &[Vec<u32>], k: usize) -> Result<Self, GraphError> {
        let n_nodes = lists.len();
        let mut neighbors = Vec::with_capacity(n_nodes * k);
        for (v, list) in lists.iter().enumerate() {
            if list.len() != k {
                return Err(GraphError::InvalidNeighbors(format!(
                    "node {v} has {} neighbors, expected {k}",
                    list.len()
                )));
            }
            for &w in list {
                if w as usize >= n_nodes {
                    return Err(GraphError::InvalidNeighbors(format!(
                        "node {v} lists out-of-range neighbor {w}"
                    )));
                }
                if w as usize == v {
                    return Err(GraphError::InvalidNeighbors(format!(
                        "node {v} lists itself as a neighbor"
                    )));
                }
                neighbors.push(w);
            }
        }
        Ok(DirectedGraph {
            k,
            n_nodes,
            neighbors,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn n_edges(&self) -> usize {
        self.neighbors.len()
    }

    /// Ordered neighbor ids of node `v`.
    pub fn neighbors(&self, v: usize) -> &[u32] {
        &self.neighbors[v * self.k..(v + 1) * self.k]
    }

    /// Source node of flat edge row `r`; rows are laid out `(v, rank)`-major.
    pub fn edge_source(&self, r: usize) -> u32 {
        self.neighbors[r]
    }

    /// Target node of flat edge row `r`.
    pub fn edge_target(&self, r: usize) -> usize {
        r / self.k
    }

    /// Serialize as `v,w` lines (one directed edge per line), sorted by
    /// (target, rank).
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for v in 0..self.n_nodes {
            for &w in self.neighbors(v) {
                writeln!(out, "{v},{w}").expect("string write");
            }
        }
        out
    }

    /// Parse the `to_csv` format. A literal `v,w` header line is tolerated.
    pub fn from_csv(text: &str) -> Result<Self, GraphError> {
        let mut lists: Vec<Vec<u32>> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || (idx == 0 && line == "v,w") {
                continue;
            }
            let mut parts = line.split(',');
            let parse = |s: Option<&str>| -> Result<u32, GraphError> {
                let s = s.ok_or(GraphError::EdgeParse {
                    line: idx + 1,
                    msg: "expected two comma-separated ids".into(),
                })?;
                u32::from_str(s.trim()).map_err(|e| GraphError::EdgeParse {
                    line: idx + 1,
                    msg: e.to_string(),
                })
            };
            let v = parse(parts.next())? as usize;
            let w = parse(parts.next())?;
            if parts.next().is_some() {
                return Err(GraphError::EdgeParse {
                    line: idx + 1,
                    msg: "expected exactly two fields".into(),
                });
            }
            if v >= lists.len() {
                lists.resize(v + 1, Vec::new());
            }
            lists[v].push(w);
        }
        if lists.is_empty() {
            return Err(GraphError::InvalidNeighbors("empty edge list".into()));
        }
        let k = lists[0].len();
        if k == 0 {
            return Err(GraphError::InvalidNeighbors(
                "node 0 has no neighbors".into(),
            ));
        }
        Self::from_neighbor_lists(&lists, k)
    }
}

fn validate_features(features: &ArrayView2<f64>, k: usize) -> Result<(), GraphError> {
    if k == 0 {
        return Err(GraphError::ZeroK);
    }
    let n = features.nrows();
    if n <= k {
        return Err(GraphError::TooFewPoints { n, k });
    }
    for (row, r) in features.rows().into_iter().enumerate() {
        if r.iter().any(|v| !v.is_finite()) {
            return Err(GraphError::NonFinite { row });
        }
    }
    Ok(())
}

#[inline]
fn dist2(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

/// `(distance², id)` precedes another candidate if it is closer, or equally
/// close with a lower id.
#[inline]
fn candidate_lt(a: (f64, u32), b: (f64, u32)) -> bool {
    a.0 < b.0 || (a.0 == b.0 && a.1 < b.1)
}

/// Bounded candidate list kept sorted by (distance², id).
struct Candidates {
    k: usize,
    items: Vec<(f64, u32)>,
}

impl Candidates {
    fn new(k: usize) -> Self {
        Candidates {
            k,
            items: Vec::with_capacity(k + 1),
        }
    }

    #[inline]
    fn full(&self) -> bool {
        self.items.len() == self.k
    }

    #[inline]
    fn worst_dist2(&self) -> f64 {
        self.items.last().map(|c| c.0).unwrap_or(f64::INFINITY)
    }

    #[inline]
    fn offer(&mut self, cand: (f64, u32)) {
        if self.full() && !candidate_lt(cand, *self.items.last().unwrap()) {
            return;
        }
        let pos = self.items.partition_point(|&c| candidate_lt(c, cand));
        self.items.insert(pos, cand);
        self.items.truncate(self.k);
    }
}

/// Exact k-NN by exhaustive pairwise distances.
///
/// `N(v)` holds the k ids `w != v` minimizing `‖row_w - row_v‖₂`, ties broken
/// by lower id, sorted by (distance, id).
pub fn knn_brute(features: &FeatureSet, k: usize) -> Result<DirectedGraph, GraphError> {
    let view = features.view();
    validate_features(&view, k)?;
    let n = view.nrows();
    let mut neighbors = Vec::with_capacity(n * k);
    let mut scratch: Vec<(f64, u32)> = Vec::with_capacity(n - 1);
    for v in 0..n {
        scratch.clear();
        let rv = view.row(v);
        for w in 0..n {
            if w != v {
                scratch.push((dist2(view.row(w), rv), w as u32));
            }
        }
        scratch.select_nth_unstable_by(k - 1, |a, b| {
            a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
        });
        scratch[..k].sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        neighbors.extend(scratch[..k].iter().map(|c| c.1));
    }
    Ok(DirectedGraph {
        k,
        n_nodes: n,
        neighbors,
    })
}

enum Node {
    Leaf {
        start: usize,
        len: usize,
    },
    Split {
        dim: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

/// Immutable kd-tree over a feature matrix. Splits on the widest-spread
/// dimension at the median; queries are exact and reproduce the brute-force
/// (distance, id) ordering bit for bit.
pub struct KdTree<'a> {
    data: ArrayView2<'a, f64>,
    nodes: Vec<Node>,
    order: Vec<u32>,
}

impl<'a> KdTree<'a> {
    pub fn build(features: &'a FeatureSet) -> Self {
        let data = features.view();
        let mut order: Vec<u32> = (0..data.nrows() as u32).collect();
        let mut nodes = Vec::new();
        build_node(&data, &mut order, 0, data.nrows(), &mut nodes);
        KdTree { data, nodes, order }
    }

    /// The k nearest rows to `query`, excluding node id `exclude`.
    pub fn knn_excluding(&self, query: ArrayView1<f64>, exclude: u32, k: usize) -> Vec<(f64, u32)> {
        let mut cands = Candidates::new(k);
        self.search(self.nodes.len() - 1, query, exclude, &mut cands);
        cands.items
    }

    fn search(&self, node: usize, query: ArrayView1<f64>, exclude: u32, cands: &mut Candidates) {
        match self.nodes[node] {
            Node::Leaf { start, len } => {
                for &id in &self.order[start..start + len] {
                    if id != exclude {
                        cands.offer((dist2(self.data.row(id as usize), query), id));
                    }
                }
            }
            Node::Split {
                dim,
                value,
                left,
                right,
            } => {
                let diff = query[dim] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, query, exclude, cands);
                // The far side can still win a tie on equal distance with a
                // lower id, so prune only on a strictly larger bound.
                if !cands.full() || diff * diff <= cands.worst_dist2() {
                    self.search(far, query, exclude, cands);
                }
            }
        }
    }
}

fn build_node(
    data: &ArrayView2<f64>,
    order: &mut [u32],
    start: usize,
    len: usize,
    nodes: &mut Vec<Node>,
) -> usize {
    if len <= LEAF_SIZE {
        nodes.push(Node::Leaf { start, len });
        return nodes.len() - 1;
    }
    let slice = &mut order[..]; // indices for this node live at [0..len)
    let dim = widest_dimension(data, slice, len);
    let mid = len / 2;
    slice[..len].select_nth_unstable_by(mid, |&a, &b| {
        data[[a as usize, dim]]
            .total_cmp(&data[[b as usize, dim]])
            .then(a.cmp(&b))
    });
    let value = data[[slice[mid] as usize, dim]];
    let (lo, hi) = order.split_at_mut(mid);
    let left = build_node(data, lo, start, mid, nodes);
    let right = build_node(data, hi, start + mid, len - mid, nodes);
    nodes.push(Node::Split {
        dim,
        value,
        left,
        right,
    });
    nodes.len() - 1
}

fn widest_dimension(data: &ArrayView2<f64>, order: &[u32], len: usize) -> usize {
    let d = data.ncols();
    let mut best_dim = 0;
    let mut best_spread = f64::NEG_INFINITY;
    for dim in 0..d {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &id in &order[..len] {
            let v = data[[id as usize, dim]];
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let spread = hi - lo;
        if spread > best_spread {
            best_spread = spread;
            best_dim = dim;
        }
    }
    best_dim
}

/// Exact k-NN through a kd-tree; bit-identical to [`knn_brute`].
pub fn knn_kdtree(features: &FeatureSet, k: usize) -> Result<DirectedGraph, GraphError> {
    let view = features.view();
    validate_features(&view, k)?;
    let n = view.nrows();
    let tree = KdTree::build(features);
    let mut neighbors = Vec::with_capacity(n * k);
    for v in 0..n {
        let found = tree.knn_excluding(view.row(v), v as u32, k);
        debug_assert_eq!(found.len(), k);
        neighbors.extend(found.iter().map(|c| c.1));
    }
    Ok(DirectedGraph {
        k,
        n_nodes: n,
        neighbors,
    })
}

/// Percentage of directed edges common to both graphs:
/// `100 · |edges(a) ∩ edges(b)| / (N·k)`.
pub fn shared_edge_percentage(a: &DirectedGraph, b: &DirectedGraph) -> Result<f64, GraphError> {
    if a.n_nodes != b.n_nodes || a.k != b.k {
        return Err(GraphError::ShapeMismatch {
            a_nodes: a.n_nodes,
            a_k: a.k,
            b_nodes: b.n_nodes,
            b_k: b.k,
        });
    }
    let mut shared = 0usize;
    let mut sa: Vec<u32> = Vec::with_capacity(a.k);
    let mut sb: Vec<u32> = Vec::with_capacity(a.k);
    for v in 0..a.n_nodes {
        sa.clear();
        sb.clear();
        sa.extend_from_slice(a.neighbors(v));
        sb.extend_from_slice(b.neighbors(v));
        sa.sort_unstable();
        sb.sort_unstable();
        let (mut i, mut j) = (0, 0);
        while i < sa.len() && j < sb.len() {
            match sa[i].cmp(&sb[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    shared += 1;
                    i += 1;
                    j += 1;
                }
            }
        }
    }
    Ok(100.0 * shared as f64 / (a.n_nodes * a.k) as f64)
}
