//! Cosine KNN similarity graph over the unlabeled pool.
//!
//! Neighbor search is exact (full pairwise) so graph construction is
//! reproducible and oracle-testable; the target scale is desk-sized. The
//! directed top-k lists are symmetrized by union: an edge survives if it is
//! in either endpoint's list.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::embed::{dot, EmbeddingSet};
use crate::error::{Error, Result};

/// Weighted undirected graph stored as symmetric adjacency lists sorted by
/// neighbor index. No self-loops.
#[derive(Debug, Clone)]
pub struct SimilarityGraph {
    adj: Vec<Vec<(usize, f64)>>,
}

impl SimilarityGraph {
    pub fn from_edges(n: usize, edges: &[(usize, usize, f64)]) -> SimilarityGraph {
        let mut adj = vec![Vec::new(); n];
        for &(u, v, w) in edges {
            assert!(u != v, "self-loop {u}");
            adj[u].push((v, w));
            adj[v].push((u, w));
        }
        for list in &mut adj {
            list.sort_by_key(|&(v, _)| v);
        }
        SimilarityGraph { adj }
    }

    pub fn node_count(&self) -> usize {
        self.adj.len()
    }

    /// Undirected edge count.
    pub fn edge_count(&self) -> usize {
        self.adj.iter().map(|l| l.len()).sum::<usize>() / 2
    }

    pub fn neighbors(&self, node: usize) -> &[(usize, f64)] {
        &self.adj[node]
    }

    pub fn degree(&self, node: usize) -> usize {
        self.adj[node].len()
    }

    /// Sum of incident edge weights.
    pub fn strength(&self, node: usize) -> f64 {
        self.adj[node].iter().map(|(_, w)| w).sum()
    }

    /// Sum of undirected edge weights.
    pub fn total_weight(&self) -> f64 {
        self.adj
            .iter()
            .map(|l| l.iter().map(|(_, w)| w).sum::<f64>())
            .sum::<f64>()
            / 2.0
    }

    pub fn isolated_nodes(&self) -> Vec<usize> {
        (0..self.node_count()).filter(|&u| self.adj[u].is_empty()).collect()
    }

    /// Edges as `(u, v, w)` with `u < v`, ascending.
    pub fn edges(&self) -> Vec<(usize, usize, f64)> {
        let mut edges = Vec::with_capacity(self.edge_count());
        for (u, list) in self.adj.iter().enumerate() {
            for &(v, w) in list {
                if u < v {
                    edges.push((u, v, w));
                }
            }
        }
        edges
    }

    pub fn is_symmetric(&self) -> bool {
        for (u, list) in self.adj.iter().enumerate() {
            for &(v, w) in list {
                let back = self.adj[v].iter().find(|(t, _)| *t == u);
                match back {
                    Some(&(_, w2)) if w2 == w => {}
                    _ => return false,
                }
            }
        }
        true
    }
}

/// Orders candidate neighbors by descending similarity, breaking ties on
/// the lower index.
fn neighbor_order(a: &(f64, usize), b: &(f64, usize)) -> std::cmp::Ordering {
    b.0.partial_cmp(&a.0)
        .expect("similarities are finite")
        .then(a.1.cmp(&b.1))
}

/// Directed exact top-k neighbor lists, before symmetrization.
fn top_k_lists(embeddings: &EmbeddingSet, k: usize) -> Vec<Vec<(usize, f64)>> {
    let n = embeddings.len();
    let mut lists = Vec::with_capacity(n);
    for u in 0..n {
        let row = embeddings.row(u);
        let mut sims: Vec<(f64, usize)> = (0..n)
            .filter(|&v| v != u)
            .map(|v| (dot(row, embeddings.row(v)), v))
            .collect();
        sims.select_nth_unstable_by(k - 1, neighbor_order);
        sims.truncate(k);
        sims.sort_by(neighbor_order);
        lists.push(sims.into_iter().map(|(w, v)| (v, w)).collect());
    }
    lists
}

/// Builds the exact cosine KNN graph, symmetrized by edge union.
/// Requires `1 <= k < n` and normalized embeddings.
pub fn build_knn(embeddings: &EmbeddingSet, k: usize) -> Result<SimilarityGraph> {
    let n = embeddings.len();
    if k == 0 || k >= n {
        return Err(Error::InvalidK { k, n });
    }
    let lists = top_k_lists(embeddings, k);
    let mut edges: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for (u, list) in lists.iter().enumerate() {
        for &(v, w) in list {
            edges.insert((u.min(v), u.max(v)), w);
        }
    }
    let flat: Vec<(usize, usize, f64)> =
        edges.into_iter().map(|((u, v), w)| (u, v, w)).collect();
    Ok(SimilarityGraph::from_edges(n, &flat))
}

/// Result of the knee-point selection of `k`.
#[derive(Debug, Clone)]
pub struct ElbowSelection {
    pub k: usize,
    /// `(candidate k, mean k-th neighbor similarity)` pairs, for audit.
    pub curve: Vec<(usize, f64)>,
    /// Set when the curve is a straight line and no knee exists; the first
    /// interior candidate is returned in that case.
    pub degenerate: bool,
}

/// Picks `k` from `candidates` (ascending, each `< n`, at least 3) by
/// computing the mean k-th nearest-neighbor similarity curve and returning
/// the candidate with maximum perpendicular distance to the chord joining
/// the curve's endpoints.
pub fn elbow_select_k(embeddings: &EmbeddingSet, candidates: &[usize]) -> Result<ElbowSelection> {
    if candidates.len() < 3 {
        return Err(Error::TooFewCandidates(candidates.len()));
    }
    let n = embeddings.len();
    for window in candidates.windows(2) {
        if window[0] >= window[1] {
            return Err(Error::Config(
                "elbow candidates must be strictly ascending".into(),
            ));
        }
    }
    let max_k = *candidates.last().unwrap();
    if candidates[0] == 0 || max_k >= n {
        return Err(Error::InvalidK { k: max_k, n });
    }

    let lists = top_k_lists(embeddings, max_k);
    let curve: Vec<(usize, f64)> = candidates
        .iter()
        .map(|&k| {
            let mean = lists.iter().map(|l| l[k - 1].1).sum::<f64>() / n as f64;
            (k, mean)
        })
        .collect();
    Ok(select_knee(curve))
}

/// Knee of an already-computed curve: maximum perpendicular distance to the
/// endpoint chord, ties to the smaller k.
pub fn select_knee(curve: Vec<(usize, f64)>) -> ElbowSelection {
    let (x0, y0) = (curve[0].0 as f64, curve[0].1);
    let (x1, y1) = (
        curve[curve.len() - 1].0 as f64,
        curve[curve.len() - 1].1,
    );
    let slope = (y1 - y0) / (x1 - x0);
    let norm = (1.0 + slope * slope).sqrt();
    let mut best = (0usize, 0.0f64);
    for (i, &(k, y)) in curve.iter().enumerate() {
        let distance = (slope * (k as f64 - x0) - (y - y0)).abs() / norm;
        if distance > best.1 {
            best = (i, distance);
        }
    }
    if best.1 < 1e-12 {
        ElbowSelection {
            k: curve[1].0,
            curve,
            degenerate: true,
        }
    } else {
        ElbowSelection {
            k: curve[best.0].0,
            curve,
            degenerate: false,
        }
    }
}

/// Removes every edge with weight `<= ned` (strictly greater survives).
/// Returns the pruned graph and the number of removed undirected edges.
pub fn prune_by_ned(graph: &SimilarityGraph, ned: f64) -> (SimilarityGraph, usize) {
    let n = graph.node_count();
    let mut kept = Vec::new();
    let mut removed = 0usize;
    for (u, v, w) in graph.edges() {
        if w > ned {
            kept.push((u, v, w));
        } else {
            removed += 1;
        }
    }
    (SimilarityGraph::from_edges(n, &kept), removed)
}

/// Writes the text edge list: header `n=<N> k=<k>`, then `u v weight`
/// lines with `u < v` in ascending order.
pub fn save_graph(graph: &SimilarityGraph, k: usize, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "n={} k={}", graph.node_count(), k).map_err(|e| Error::io(path, e))?;
    for (u, v, weight) in graph.edges() {
        writeln!(w, "{u} {v} {weight}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a graph file written by [`save_graph`]; returns the graph and the
/// `k` recorded in the header.
pub fn load_graph(path: &Path) -> Result<(SimilarityGraph, usize)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::parse(path, 1, "missing header"))?
        .map_err(|e| Error::io(path, e))?;
    let mut n = None;
    let mut k = None;
    for field in header.split_whitespace() {
        match field.split_once('=') {
            Some(("n", v)) => n = v.parse::<usize>().ok(),
            Some(("k", v)) => k = v.parse::<usize>().ok(),
            _ => return Err(Error::parse(path, 1, format!("bad header field {field:?}"))),
        }
    }
    let (n, k) = match (n, k) {
        (Some(n), Some(k)) => (n, k),
        _ => return Err(Error::parse(path, 1, "header must contain n= and k=")),
    };
    let mut edges = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let parse_err = |msg: &str| Error::parse(path, lineno + 2, msg.to_string());
        let u: usize = fields
            .next()
            .ok_or_else(|| parse_err("missing u"))?
            .parse()
            .map_err(|_| parse_err("bad u"))?;
        let v: usize = fields
            .next()
            .ok_or_else(|| parse_err("missing v"))?
            .parse()
            .map_err(|_| parse_err("bad v"))?;
        let weight: f64 = fields
            .next()
            .ok_or_else(|| parse_err("missing weight"))?
            .parse()
            .map_err(|_| parse_err("bad weight"))?;
        if u >= n || v >= n {
            return Err(parse_err("node index out of range"));
        }
        edges.push((u, v, weight));
    }
    Ok((SimilarityGraph::from_edges(n, &edges), k))
}
