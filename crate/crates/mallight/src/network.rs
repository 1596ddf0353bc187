//! Road graph: intersections, directed road segments, the distance-based
//! edge-weight matrix, its row-stochastic normalization, and shortest-path
//! routing.
//!
//! All types here are immutable after construction and safe to share
//! read-only across concurrent experiment replicas.

use std::collections::BinaryHeap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use thiserror::Error;

/// Lanes per driving direction on every road segment.
pub const LANES_PER_DIRECTION: usize = 3;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid network: {0}")]
    Validation(String),
    #[error("sigma must be positive, got {0}")]
    NonPositiveSigma(f64),
    #[error("node {0} has zero outgoing weight mass")]
    IsolatedNode(usize),
    #[error("route endpoints must differ (both are node {0})")]
    SameEndpoints(usize),
    #[error("unknown node id {0}")]
    UnknownNode(usize),
    #[error("no route from node {from} to node {to}")]
    Unreachable { from: usize, to: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A signalized intersection with planar coordinates in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intersection {
    pub id: usize,
    pub x: f64,
    pub y: f64,
}

/// One directed road segment. Bidirectional roads appear as two segments
/// with equal length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoadSegment {
    pub from: usize,
    pub to: usize,
    pub length_m: f64,
    pub lanes_per_direction: usize,
}

/// Validated road graph. Node ids are contiguous `0..N`, every segment has
/// a reverse twin of equal length, and the graph is connected.
#[derive(Debug, Clone)]
pub struct RoadNetwork {
    nodes: Vec<Intersection>,
    edges: Vec<RoadSegment>,
    /// Outgoing adjacency, sorted by neighbor id.
    adjacency: Vec<Vec<(usize, f64)>>,
}

impl RoadNetwork {
    pub fn new(
        nodes: Vec<Intersection>,
        edges: Vec<RoadSegment>,
    ) -> Result<Self, NetworkError> {
        let n = nodes.len();
        if n < 2 {
            return Err(NetworkError::Validation(format!(
                "degenerate network: need at least 2 intersections, got {n}"
            )));
        }
        let mut seen = vec![false; n];
        for node in &nodes {
            if node.id >= n {
                return Err(NetworkError::Validation(format!(
                    "node ids must be contiguous 0..{n}, found id {}",
                    node.id
                )));
            }
            if seen[node.id] {
                return Err(NetworkError::Validation(format!(
                    "duplicate node id {}",
                    node.id
                )));
            }
            seen[node.id] = true;
        }
        let mut by_id = nodes.clone();
        by_id.sort_by_key(|v| v.id);

        let mut adjacency = vec![Vec::new(); n];
        for edge in &edges {
            if edge.from >= n || edge.to >= n {
                return Err(NetworkError::Validation(format!(
                    "dangling edge {} -> {}: node does not exist",
                    edge.from, edge.to
                )));
            }
            if edge.from == edge.to {
                return Err(NetworkError::Validation(format!(
                    "self-loop edge at node {}",
                    edge.from
                )));
            }
            if !(edge.length_m.is_finite() && edge.length_m > 0.0) {
                return Err(NetworkError::Validation(format!(
                    "edge {} -> {} has non-positive length {}",
                    edge.from, edge.to, edge.length_m
                )));
            }
            if adjacency[edge.from].iter().any(|&(v, _)| v == edge.to) {
                return Err(NetworkError::Validation(format!(
                    "duplicate edge {} -> {}",
                    edge.from, edge.to
                )));
            }
            adjacency[edge.from].push((edge.to, edge.length_m));
        }
        // Every directed segment needs a reverse twin with the same length.
        for edge in &edges {
            let back = adjacency[edge.to]
                .iter()
                .find(|&&(v, _)| v == edge.from)
                .map(|&(_, len)| len);
            match back {
                None => {
                    return Err(NetworkError::Validation(format!(
                        "segment {} -> {} has no reverse direction",
                        edge.from, edge.to
                    )))
                }
                Some(len) if len != edge.length_m => {
                    return Err(NetworkError::Validation(format!(
                        "segment pair {} <-> {} has mismatched lengths {} vs {}",
                        edge.from, edge.to, edge.length_m, len
                    )))
                }
                Some(_) => {}
            }
        }
        for list in &mut adjacency {
            list.sort_by_key(|&(v, _)| v);
        }

        let net = Self {
            nodes: by_id,
            edges,
            adjacency,
        };
        if let Some(unreached) = net.first_unreachable(0) {
            return Err(NetworkError::Validation(format!(
                "disconnected graph: node {unreached} is not reachable from node 0"
            )));
        }
        Ok(net)
    }

    /// Loads a network from the line-oriented text format:
    /// `nodes N edges E`, then `node <id> <x> <y>` and
    /// `edge <from> <to> <length_m>` lines. `#` starts a comment.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, NetworkError> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, NetworkError> {
        let err = |line: usize, msg: String| NetworkError::Parse { line, msg };
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
            .filter(|(_, l)| !l.is_empty());

        let (hline, header) = lines
            .next()
            .ok_or_else(|| err(0, "empty file".into()))?;
        let head: Vec<&str> = header.split_whitespace().collect();
        if head.len() != 4 || head[0] != "nodes" || head[2] != "edges" {
            return Err(err(hline, format!("expected `nodes N edges E`, got `{header}`")));
        }
        let n: usize = head[1]
            .parse()
            .map_err(|_| err(hline, format!("bad node count `{}`", head[1])))?;
        let e: usize = head[3]
            .parse()
            .map_err(|_| err(hline, format!("bad edge count `{}`", head[3])))?;

        let mut nodes = Vec::with_capacity(n);
        let mut edges = Vec::with_capacity(e);
        for (line, body) in lines {
            let fields: Vec<&str> = body.split_whitespace().collect();
            match fields.first().copied() {
                Some("node") => {
                    if fields.len() != 4 {
                        return Err(err(line, "expected `node <id> <x> <y>`".into()));
                    }
                    let id = fields[1]
                        .parse()
                        .map_err(|_| err(line, format!("bad node id `{}`", fields[1])))?;
                    let x = fields[2]
                        .parse()
                        .map_err(|_| err(line, format!("bad x coordinate `{}`", fields[2])))?;
                    let y = fields[3]
                        .parse()
                        .map_err(|_| err(line, format!("bad y coordinate `{}`", fields[3])))?;
                    nodes.push(Intersection { id, x, y });
                }
                Some("edge") => {
                    if fields.len() != 4 {
                        return Err(err(line, "expected `edge <from> <to> <length_m>`".into()));
                    }
                    let from = fields[1]
                        .parse()
                        .map_err(|_| err(line, format!("bad from id `{}`", fields[1])))?;
                    let to = fields[2]
                        .parse()
                        .map_err(|_| err(line, format!("bad to id `{}`", fields[2])))?;
                    let length_m = fields[3]
                        .parse()
                        .map_err(|_| err(line, format!("bad length `{}`", fields[3])))?;
                    edges.push(RoadSegment {
                        from,
                        to,
                        length_m,
                        lanes_per_direction: LANES_PER_DIRECTION,
                    });
                }
                _ => return Err(err(line, format!("unknown record `{body}`"))),
            }
        }
        if nodes.len() != n {
            return Err(NetworkError::Validation(format!(
                "header promises {n} nodes, file has {}",
                nodes.len()
            )));
        }
        if edges.len() != e {
            return Err(NetworkError::Validation(format!(
                "header promises {e} edges, file has {}",
                edges.len()
            )));
        }
        Self::new(nodes, edges)
    }

    /// Serializes back to the text format accepted by [`RoadNetwork::parse`].
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "nodes {} edges {}", self.nodes.len(), self.edges.len());
        for v in &self.nodes {
            let _ = writeln!(out, "node {} {} {}", v.id, v.x, v.y);
        }
        for s in &self.edges {
            let _ = writeln!(out, "edge {} {} {}", s.from, s.to, s.length_m);
        }
        out
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[Intersection] {
        &self.nodes
    }

    pub fn edges(&self) -> &[RoadSegment] {
        &self.edges
    }

    /// Outgoing neighbors of `u` with segment lengths, sorted by id.
    pub fn neighbors(&self, u: usize) -> &[(usize, f64)] {
        &self.adjacency[u]
    }

    pub fn edge_length(&self, u: usize, v: usize) -> Option<f64> {
        self.adjacency
            .get(u)?
            .iter()
            .find(|&&(w, _)| w == v)
            .map(|&(_, len)| len)
    }

    /// BFS hop distance from `source` to every node.
    pub fn hop_distances(&self, source: usize) -> Vec<usize> {
        let mut dist = vec![usize::MAX; self.node_count()];
        let mut queue = std::collections::VecDeque::new();
        dist[source] = 0;
        queue.push_back(source);
        while let Some(u) = queue.pop_front() {
            for &(v, _) in &self.adjacency[u] {
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    fn first_unreachable(&self, source: usize) -> Option<usize> {
        self.hop_distances(source)
            .iter()
            .position(|&d| d == usize::MAX)
    }
}

/// Thresholded Gaussian kernel over direct road distances: connected pairs
/// get `exp(-dist^2 / sigma^2)`, unconnected pairs get 0.
#[derive(Debug, Clone)]
pub struct WeightMatrix {
    values: Array2<f64>,
    sigma: f64,
}

impl WeightMatrix {
    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }
}

/// Default kernel width: standard deviation of all direct road distances,
/// falling back to their mean on perfectly uniform networks where the
/// deviation is zero.
pub fn default_sigma(net: &RoadNetwork) -> f64 {
    let mut dists = Vec::new();
    for s in net.edges() {
        if s.from < s.to {
            dists.push(s.length_m);
        }
    }
    let n = dists.len() as f64;
    let mean = dists.iter().sum::<f64>() / n;
    let var = dists.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    if sd > 1e-9 {
        sd
    } else {
        mean
    }
}

pub fn build_edge_weights(net: &RoadNetwork, sigma: f64) -> Result<WeightMatrix, NetworkError> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(NetworkError::NonPositiveSigma(sigma));
    }
    let n = net.node_count();
    let mut values = Array2::zeros((n, n));
    for u in 0..n {
        for &(v, len) in net.neighbors(u) {
            values[(u, v)] = (-(len * len) / (sigma * sigma)).exp();
        }
    }
    Ok(WeightMatrix { values, sigma })
}

/// Row-stochastic random-walk matrix: each weight row divided by its sum.
#[derive(Debug, Clone)]
pub struct TransitionMatrix {
    values: Array2<f64>,
}

impl TransitionMatrix {
    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn order(&self) -> usize {
        self.values.nrows()
    }
}

pub fn transition_matrix(weights: &WeightMatrix) -> Result<TransitionMatrix, NetworkError> {
    let mut values = weights.values().clone();
    for (i, mut row) in values.rows_mut().into_iter().enumerate() {
        let sum: f64 = row.sum();
        if sum <= 0.0 {
            return Err(NetworkError::IsolatedNode(i));
        }
        row.mapv_inplace(|w| w / sum);
    }
    Ok(TransitionMatrix { values })
}

#[derive(Copy, Clone, PartialEq)]
struct QueueEntry {
    dist: f64,
    node: usize,
}

impl Eq for QueueEntry {}

impl Ord for QueueEntry {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // Max-heap: invert so smaller distance (then smaller id) pops first.
        other
            .dist
            .partial_cmp(&self.dist)
            .expect("distances are finite")
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for QueueEntry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Minimal-length route from `origin` to `dest` as a node sequence.
///
/// Among all minimal routes the lexicographically smallest node sequence is
/// returned: remaining distances are computed by a Dijkstra pass from the
/// destination, then the route greedily takes the smallest-id neighbor that
/// stays on a shortest path.
pub fn shortest_path(
    net: &RoadNetwork,
    origin: usize,
    dest: usize,
) -> Result<Vec<usize>, NetworkError> {
    let n = net.node_count();
    if origin >= n {
        return Err(NetworkError::UnknownNode(origin));
    }
    if dest >= n {
        return Err(NetworkError::UnknownNode(dest));
    }
    if origin == dest {
        return Err(NetworkError::SameEndpoints(origin));
    }

    // Distance-to-destination over reversed edges. Segment twins make the
    // graph symmetric, but relax incoming edges to stay correct in general.
    let mut incoming = vec![Vec::new(); n];
    for s in net.edges() {
        incoming[s.to].push((s.from, s.length_m));
    }
    let mut dist = vec![f64::INFINITY; n];
    dist[dest] = 0.0;
    let mut heap = BinaryHeap::new();
    heap.push(QueueEntry { dist: 0.0, node: dest });
    while let Some(QueueEntry { dist: d, node }) = heap.pop() {
        if d > dist[node] {
            continue;
        }
        for &(prev, len) in &incoming[node] {
            let cand = d + len;
            if cand < dist[prev] {
                dist[prev] = cand;
                heap.push(QueueEntry { dist: cand, node: prev });
            }
        }
    }
    if !dist[origin].is_finite() {
        return Err(NetworkError::Unreachable {
            from: origin,
            to: dest,
        });
    }

    let mut route = vec![origin];
    let mut here = origin;
    while here != dest {
        // Exact equality is sound: both sides are the same f64 sum.
        let next = net
            .neighbors(here)
            .iter()
            .find(|&&(v, len)| len + dist[v] == dist[here])
            .map(|&(v, _)| v)
            .ok_or(NetworkError::Unreachable {
                from: origin,
                to: dest,
            })?;
        route.push(next);
        here = next;
    }
    Ok(route)
}

/// Total length of a node-sequence route, if every hop is an edge.
pub fn path_length(net: &RoadNetwork, route: &[usize]) -> Option<f64> {
    route
        .windows(2)
        .map(|w| net.edge_length(w[0], w[1]))
        .sum()
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    /// Uniform `rows x cols` lattice used across the test suite. Node
    /// (r, c) has id `r*cols + c`, x grows east, y shrinks southward so
    /// node 0 is the upper-left corner.
    pub(crate) fn grid(rows: usize, cols: usize, block: f64) -> RoadNetwork {
        let mut nodes = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                nodes.push(Intersection {
                    id: r * cols + c,
                    x: c as f64 * block,
                    y: -(r as f64) * block,
                });
            }
        }
        let mut edges = Vec::new();
        let mut push_pair = |a: usize, b: usize| {
            for (f, t) in [(a, b), (b, a)] {
                edges.push(RoadSegment {
                    from: f,
                    to: t,
                    length_m: block,
                    lanes_per_direction: LANES_PER_DIRECTION,
                });
            }
        };
        for r in 0..rows {
            for c in 0..cols {
                let id = r * cols + c;
                if c + 1 < cols {
                    push_pair(id, id + 1);
                }
                if r + 1 < rows {
                    push_pair(id, id + cols);
                }
            }
        }
        RoadNetwork::new(nodes, edges).unwrap()
    }

    /// Path graph 0-1-...-n-1 with mildly varying segment lengths, handy
    /// for small gradient and diffusion checks.
    pub(crate) fn grid_like_path(n: usize) -> RoadNetwork {
        let nodes = (0..n)
            .map(|id| Intersection {
                id,
                x: 120.0 * id as f64,
                y: 0.0,
            })
            .collect();
        let mut edges = Vec::new();
        for a in 0..n - 1 {
            let len = 100.0 + 10.0 * (a % 3) as f64;
            for (f, t) in [(a, a + 1), (a + 1, a)] {
                edges.push(RoadSegment {
                    from: f,
                    to: t,
                    length_m: len,
                    lanes_per_direction: LANES_PER_DIRECTION,
                });
            }
        }
        RoadNetwork::new(nodes, edges).unwrap()
    }

    #[test]
    fn grid_4x4_has_16_nodes_and_48_directed_edges() {
        let net = grid(4, 4, 300.0);
        assert_eq!(net.node_count(), 16);
        assert_eq!(net.edges().len(), 48);
    }

    #[test]
    fn parse_round_trips_grid_file() {
        let net = grid(4, 4, 300.0);
        let text = net.to_text();
        let parsed = RoadNetwork::parse(&text).unwrap();
        assert_eq!(parsed.node_count(), 16);
        assert_eq!(parsed.edges().len(), 48);
        assert_eq!(parsed.edge_length(0, 1), Some(300.0));
    }

    #[test]
    fn parse_reports_line_numbers() {
        let text = "nodes 2 edges 2\nnode 0 0 0\nnode 1 x 0\nedge 0 1 300\nedge 1 0 300\n";
        match RoadNetwork::parse(text) {
            Err(NetworkError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn dangling_edge_is_rejected() {
        let mut net_text = String::from("nodes 2 edges 2\nnode 0 0 0\nnode 1 300 0\n");
        net_text.push_str("edge 0 99 300\nedge 99 0 300\n");
        match RoadNetwork::parse(&net_text) {
            Err(NetworkError::Validation(msg)) => assert!(msg.contains("dangling"), "{msg}"),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn degenerate_single_node_is_rejected() {
        match RoadNetwork::parse("nodes 1 edges 0\nnode 0 0 0\n") {
            Err(NetworkError::Validation(msg)) => assert!(msg.contains("degenerate"), "{msg}"),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn disconnected_graph_is_rejected() {
        let text = "nodes 4 edges 4\nnode 0 0 0\nnode 1 300 0\nnode 2 900 0\nnode 3 1200 0\n\
                    edge 0 1 300\nedge 1 0 300\nedge 2 3 300\nedge 3 2 300\n";
        match RoadNetwork::parse(text) {
            Err(NetworkError::Validation(msg)) => assert!(msg.contains("disconnected"), "{msg}"),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn weight_at_distance_sigma_is_exp_minus_one() {
        let net = grid(2, 2, 250.0);
        let w = build_edge_weights(&net, 250.0).unwrap();
        assert!((w.values()[(0, 1)] - (-1.0f64).exp()).abs() < 1e-12);
        // Unconnected pair (diagonal of the square) stays zero.
        assert_eq!(w.values()[(0, 3)], 0.0);
        assert_eq!(w.values()[(0, 0)], 0.0);
    }

    #[test]
    fn uniform_grid_weights_all_equal_exp_minus_one() {
        let net = grid(4, 4, 300.0);
        let sigma = default_sigma(&net);
        assert_eq!(sigma, 300.0); // zero deviation falls back to the mean
        let w = build_edge_weights(&net, sigma).unwrap();
        let expected = (-1.0f64).exp();
        for u in 0..16 {
            for &(v, _) in net.neighbors(u) {
                assert!((w.values()[(u, v)] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn non_positive_sigma_is_rejected() {
        let net = grid(2, 2, 100.0);
        assert!(matches!(
            build_edge_weights(&net, 0.0),
            Err(NetworkError::NonPositiveSigma(_))
        ));
    }

    #[test]
    fn transition_rows_match_degree() {
        let net = grid(4, 4, 300.0);
        let w = build_edge_weights(&net, 300.0).unwrap();
        let t = transition_matrix(&w).unwrap();
        // Corner node 0 has degree 2, interior node 5 has degree 4.
        assert!((t.values()[(0, 1)] - 0.5).abs() < 1e-12);
        assert!((t.values()[(0, 4)] - 0.5).abs() < 1e-12);
        for &(v, _) in net.neighbors(5) {
            assert!((t.values()[(5, v)] - 0.25).abs() < 1e-12);
        }
        for row in t.values().rows() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn shortest_path_adjacent_pair() {
        let net = grid(4, 4, 300.0);
        assert_eq!(shortest_path(&net, 0, 1).unwrap(), vec![0, 1]);
        assert_eq!(path_length(&net, &[0, 1]), Some(300.0));
    }

    #[test]
    fn shortest_path_corner_to_corner_is_lex_smallest_staircase() {
        let net = grid(4, 4, 300.0);
        let route = shortest_path(&net, 0, 15).unwrap();
        assert_eq!(route, vec![0, 1, 2, 3, 7, 11, 15]);
        assert_eq!(path_length(&net, &route), Some(1800.0));
    }

    #[test]
    fn shortest_path_same_endpoints_is_rejected() {
        let net = grid(4, 4, 300.0);
        assert!(matches!(
            shortest_path(&net, 3, 3),
            Err(NetworkError::SameEndpoints(3))
        ));
    }
}
