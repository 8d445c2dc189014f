//! Post-clustering cleanup: intra-class denoising against the ICD
//! threshold and removal of deficient clusters.

use crate::embed::{cosine, EmbeddingSet};
use crate::partition::Partition;

/// Removes every member whose cosine to its cluster centroid is `<= icd`
/// (strictly greater survives). Centroids are computed once from the
/// pre-cleaning membership; there is no recleaning iteration. Returns the
/// cleaned partition and the number of removed members.
pub fn clean_by_icd(
    embeddings: &EmbeddingSet,
    partition: &Partition,
    icd: f64,
) -> (Partition, usize) {
    let dim = embeddings.dim();
    let members = partition.members();
    let mut labels: Vec<Option<usize>> = partition.assignment().to_vec();
    let mut removed = 0usize;
    for (cluster, nodes) in members.iter().enumerate() {
        let mut centroid = vec![0.0; dim];
        for &node in nodes {
            for (acc, v) in centroid.iter_mut().zip(embeddings.row(node)) {
                *acc += v;
            }
        }
        let inv = 1.0 / nodes.len() as f64;
        for acc in centroid.iter_mut() {
            *acc *= inv;
        }
        for &node in nodes {
            if cosine(embeddings.row(node), &centroid) <= icd {
                labels[node] = None;
                removed += 1;
            } else {
                debug_assert_eq!(labels[node], Some(cluster));
            }
        }
    }
    (Partition::from_labels(labels), removed)
}

/// Marks every member of a cluster smaller than `min_size` as removed.
/// Surviving cluster ids are re-densified in ascending order of the old id.
/// Returns the filtered partition and the number of dropped clusters.
pub fn drop_small_clusters(partition: &Partition, min_size: usize) -> (Partition, usize) {
    let members = partition.members();
    let mut labels: Vec<Option<usize>> = partition.assignment().to_vec();
    let mut dropped = 0usize;
    for nodes in members.iter() {
        if nodes.len() < min_size {
            dropped += 1;
            for &node in nodes {
                labels[node] = None;
            }
        }
    }
    (Partition::from_labels(labels), dropped)
}
