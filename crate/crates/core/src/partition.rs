//! Cluster assignments with removed/outlier status: the evolving
//! pseudo-label state threaded through every stage.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::embed::EmbeddingSet;
use crate::error::{Error, Result};

/// Assignment of node indices to dense cluster ids; `None` marks a node as
/// removed. Cluster ids of the non-removed nodes always form `0..C`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    assignment: Vec<Option<usize>>,
    clusters: usize,
}

impl Partition {
    /// Builds a partition from arbitrary (possibly sparse) labels,
    /// relabeling clusters densely in ascending order of the original id.
    pub fn from_labels(labels: Vec<Option<usize>>) -> Partition {
        densify_ascending(labels)
    }

    /// Builds a partition from arbitrary labels, relabeling clusters in
    /// order of first appearance (scanning nodes from 0).
    pub fn from_labels_first_seen(labels: Vec<Option<usize>>) -> Partition {
        let mut remap: Vec<Option<usize>> = Vec::new();
        let mut next = 0usize;
        let assignment = labels
            .iter()
            .map(|l| {
                l.map(|old| {
                    if remap.len() <= old {
                        remap.resize(old + 1, None);
                    }
                    *remap[old].get_or_insert_with(|| {
                        let id = next;
                        next += 1;
                        id
                    })
                })
            })
            .collect();
        Partition {
            assignment,
            clusters: next,
        }
    }

    /// Number of nodes covered (removed or not).
    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    /// Number of clusters `C`.
    pub fn num_clusters(&self) -> usize {
        self.clusters
    }

    pub fn cluster_of(&self, node: usize) -> Option<usize> {
        self.assignment[node]
    }

    pub fn is_removed(&self, node: usize) -> bool {
        self.assignment[node].is_none()
    }

    pub fn assignment(&self) -> &[Option<usize>] {
        &self.assignment
    }

    pub fn non_removed(&self) -> usize {
        self.assignment.iter().filter(|a| a.is_some()).count()
    }

    /// Derived inverse map: members of each cluster, ascending node order.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut members = vec![Vec::new(); self.clusters];
        for (node, assigned) in self.assignment.iter().enumerate() {
            if let Some(c) = assigned {
                members[*c].push(node);
            }
        }
        members
    }

    /// True when both partitions induce the same grouping of the same
    /// non-removed node set, ignoring cluster ids.
    pub fn equivalent_to(&self, other: &Partition) -> bool {
        if self.assignment.len() != other.assignment.len() {
            return false;
        }
        let mut fwd: Vec<Option<usize>> = vec![None; self.clusters];
        let mut back: Vec<Option<usize>> = vec![None; other.clusters];
        for (a, b) in self.assignment.iter().zip(&other.assignment) {
            match (a, b) {
                (None, None) => {}
                (Some(x), Some(y)) => {
                    match (fwd[*x], back[*y]) {
                        (None, None) => {
                            fwd[*x] = Some(*y);
                            back[*y] = Some(*x);
                        }
                        (Some(y2), Some(x2)) if y2 == *y && x2 == *x => {}
                        _ => return false,
                    }
                }
                _ => return false,
            }
        }
        true
    }
}

fn densify_ascending(labels: Vec<Option<usize>>) -> Partition {
    let mut used: Vec<usize> = labels.iter().flatten().copied().collect();
    used.sort_unstable();
    used.dedup();
    let remap: std::collections::HashMap<usize, usize> =
        used.iter().enumerate().map(|(new, &old)| (old, new)).collect();
    let assignment = labels.into_iter().map(|l| l.map(|old| remap[&old])).collect();
    Partition {
        assignment,
        clusters: used.len(),
    }
}

/// Writes `utterance-id <TAB> pseudo-label` lines, sorted by utterance id.
/// Removed nodes are omitted; an all-removed partition yields an empty file.
pub fn save_partition(partition: &Partition, embeddings: &EmbeddingSet, path: &Path) -> Result<()> {
    if partition.len() != embeddings.len() {
        return Err(Error::PartitionSizeMismatch {
            partition: partition.len(),
            graph: embeddings.len(),
        });
    }
    let mut lines: Vec<(&str, usize)> = Vec::with_capacity(partition.non_removed());
    for node in 0..partition.len() {
        if let Some(c) = partition.cluster_of(node) {
            lines.push((embeddings.id(node), c));
        }
    }
    lines.sort();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for (id, label) in lines {
        writeln!(w, "{id}\t{label}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Loads a partition TSV back against the id universe of `embeddings`.
/// Ids missing from the file are marked removed.
pub fn load_partition(path: &Path, embeddings: &EmbeddingSet) -> Result<Partition> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut labels: Vec<Option<usize>> = vec![None; embeddings.len()];
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let (id, label) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(path, lineno + 1, "expected `id<TAB>label`"))?;
        let node = embeddings
            .position(id)
            .ok_or_else(|| Error::UnknownId { id: id.to_string() })?;
        let label: usize = label
            .trim()
            .parse()
            .map_err(|e| Error::parse(path, lineno + 1, format!("bad label: {e}")))?;
        labels[node] = Some(label);
    }
    Ok(Partition::from_labels(labels))
}
