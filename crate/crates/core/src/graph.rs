//! Centrality and connectivity on small undirected graphs.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Undirected simple graph. Edge `k` is `edges[k]`; ids are positions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimpleGraph {
    pub n_nodes: usize,
    pub edges: Vec<(usize, usize)>,
}

impl SimpleGraph {
    pub fn new(n_nodes: usize, edges: Vec<(usize, usize)>) -> Result<Self> {
        let g = Self { n_nodes, edges };
        g.check()?;
        Ok(g)
    }

    /// No self-loops, no duplicates, ids in range.
    pub fn check(&self) -> Result<()> {
        let mut seen: Vec<(usize, usize)> = Vec::with_capacity(self.edges.len());
        for &(u, v) in &self.edges {
            if u >= self.n_nodes || v >= self.n_nodes {
                return Err(Error::InvalidGraph(format!("edge ({u}, {v}) out of range for {} nodes", self.n_nodes)));
            }
            if u == v {
                return Err(Error::InvalidGraph(format!("self-loop at node {u}")));
            }
            seen.push((u.min(v), u.max(v)));
        }
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidGraph("duplicate edge".into()));
        }
        Ok(())
    }

    /// Adjacency lists of `(neighbor, edge index)`.
    pub fn adjacency(&self) -> Vec<Vec<(usize, usize)>> {
        let mut adj = vec![Vec::new(); self.n_nodes];
        for (k, &(u, v)) in self.edges.iter().enumerate() {
            adj[u].push((v, k));
            adj[v].push((u, k));
        }
        adj
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.n_nodes];
        for &(u, v) in &self.edges {
            deg[u] += 1;
            deg[v] += 1;
        }
        deg
    }

    pub fn is_connected(&self) -> bool {
        if self.n_nodes == 0 {
            return true;
        }
        connected_components(self, &[], &[]).len() == 1
    }
}

/// `C_d(i) = deg(i) / (N - 1)`.
pub fn degree_centrality(g: &SimpleGraph) -> Result<Vec<f64>> {
    if g.n_nodes < 2 {
        return Err(Error::InvalidGraph(format!("degree centrality needs at least 2 nodes, got {}", g.n_nodes)));
    }
    let denom = (g.n_nodes - 1) as f64;
    Ok(g.degrees().into_iter().map(|d| d as f64 / denom).collect())
}

/// Normalized edge betweenness: for each edge, the share of unordered node
/// pairs whose shortest paths run through it (split evenly among equal-length
/// alternatives). Brandes accumulation, one BFS per source.
pub fn edge_betweenness(g: &SimpleGraph) -> Result<Vec<f64>> {
    g.check()?;
    let n = g.n_nodes;
    if n < 2 {
        return Err(Error::InvalidGraph("edge betweenness needs at least 2 nodes".into()));
    }
    if !g.is_connected() {
        return Err(Error::InvalidGraph("edge betweenness requires a connected graph".into()));
    }
    let adj = g.adjacency();
    let mut score = vec![0.0f64; g.edges.len()];

    let mut dist = vec![-1i64; n];
    let mut sigma = vec![0.0f64; n];
    let mut delta = vec![0.0f64; n];
    let mut preds: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
    let mut order = Vec::with_capacity(n);
    let mut queue = VecDeque::with_capacity(n);

    for s in 0..n {
        dist.fill(-1);
        sigma.fill(0.0);
        delta.fill(0.0);
        preds.iter_mut().for_each(Vec::clear);
        order.clear();

        dist[s] = 0;
        sigma[s] = 1.0;
        queue.push_back(s);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            for &(w, e) in &adj[v] {
                if dist[w] < 0 {
                    dist[w] = dist[v] + 1;
                    queue.push_back(w);
                }
                if dist[w] == dist[v] + 1 {
                    sigma[w] += sigma[v];
                    preds[w].push((v, e));
                }
            }
        }
        while let Some(w) = order.pop() {
            for &(v, e) in &preds[w] {
                let c = sigma[v] / sigma[w] * (1.0 + delta[w]);
                score[e] += c;
                delta[v] += c;
            }
        }
    }

    // Each unordered pair was counted from both ends.
    let pairs = (n * (n - 1) / 2) as f64;
    Ok(score.into_iter().map(|x| x / 2.0 / pairs).collect())
}

/// Maximal connected sets of surviving nodes, each sorted ascending, listed
/// by smallest member. `removed_edges` holds edge indices; edges touching a
/// removed node are dropped implicitly.
pub fn connected_components(g: &SimpleGraph, removed_nodes: &[usize], removed_edges: &[usize]) -> Vec<Vec<usize>> {
    let n = g.n_nodes;
    let mut node_alive = vec![true; n];
    for &v in removed_nodes {
        if v < n {
            node_alive[v] = false;
        }
    }
    let mut edge_alive = vec![true; g.edges.len()];
    for &e in removed_edges {
        if e < edge_alive.len() {
            edge_alive[e] = false;
        }
    }
    components_masked(g, &node_alive, &edge_alive)
}

/// Same as [`connected_components`], driven by survival masks.
pub fn components_masked(g: &SimpleGraph, node_alive: &[bool], edge_alive: &[bool]) -> Vec<Vec<usize>> {
    let n = g.n_nodes;
    let adj = g.adjacency();
    let mut seen = vec![false; n];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..n {
        if !node_alive[start] || seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        seen[start] = true;
        queue.push_back(start);
        while let Some(v) = queue.pop_front() {
            comp.push(v);
            for &(w, e) in &adj[v] {
                if edge_alive[e] && node_alive[w] && !seen[w] {
                    seen[w] = true;
                    queue.push_back(w);
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}
