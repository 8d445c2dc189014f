//! Progressive class merging down a descending threshold schedule.
//!
//! At each threshold, cluster centroids are compared and every pair that is
//! (a) at or above the threshold and (b) mutually nearest is merged, all
//! disjoint pairs at once; centroids are recomputed and the pass repeats at
//! the same threshold until no pair qualifies, then the schedule descends.
//! The final threshold is the CMD descriptor. Merging never removes
//! samples.

use serde::Serialize;

use crate::embed::{cosine, EmbeddingSet};
use crate::error::{Error, Result};
use crate::partition::Partition;

/// One executed merge, replayable from the log.
#[derive(Debug, Clone, Serialize)]
pub struct MergeEvent {
    pub threshold: f64,
    /// Surviving cluster id (the smaller of the pair at merge time).
    pub kept: usize,
    /// Cluster id absorbed into `kept`.
    pub absorbed: usize,
    /// Centroid cosine of the pair at the moment of merging.
    pub similarity: f64,
}

/// Linearly spaced descending thresholds from `start` down to `cmd`
/// inclusive; `steps == 1` yields just `[cmd]`.
pub fn merge_schedule(start: f64, cmd: f64, steps: usize) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(Error::EmptySchedule);
    }
    if start <= cmd {
        return Err(Error::InvalidSchedule { start, cmd });
    }
    if steps == 1 {
        return Ok(vec![cmd]);
    }
    let mut thresholds: Vec<f64> = (0..steps)
        .map(|i| start + (cmd - start) * i as f64 / (steps - 1) as f64)
        .collect();
    thresholds[steps - 1] = cmd;
    Ok(thresholds)
}

/// Centroids of the current clusters of a raw label vector, keyed by
/// cluster id. Ids may be sparse mid-merge; empty ids get no entry.
fn centroids_of(
    embeddings: &EmbeddingSet,
    labels: &[Option<usize>],
    num_ids: usize,
) -> (Vec<Vec<f64>>, Vec<usize>) {
    let dim = embeddings.dim();
    let mut sums = vec![vec![0.0; dim]; num_ids];
    let mut counts = vec![0usize; num_ids];
    for (node, label) in labels.iter().enumerate() {
        if let Some(c) = label {
            counts[*c] += 1;
            for (acc, v) in sums[*c].iter_mut().zip(embeddings.row(node)) {
                *acc += v;
            }
        }
    }
    for (sum, &count) in sums.iter_mut().zip(&counts) {
        if count > 0 {
            for v in sum.iter_mut() {
                *v /= count as f64;
            }
        }
    }
    (sums, counts)
}

/// One fixpoint pass at a single threshold over raw labels. Merged
/// clusters keep the smaller id of the pair, so ids remain stable within a
/// pass. Returns the merges applied.
fn merge_pass_raw(
    embeddings: &EmbeddingSet,
    labels: &mut [Option<usize>],
    num_ids: usize,
    threshold: f64,
) -> Vec<MergeEvent> {
    let mut events = Vec::new();
    loop {
        let (centroids, counts) = centroids_of(embeddings, labels, num_ids);
        let live: Vec<usize> = (0..num_ids).filter(|&c| counts[c] > 0).collect();
        if live.len() < 2 {
            break;
        }
        // Nearest live cluster per live cluster, ties to the lower id.
        let mut nearest: Vec<Option<(usize, f64)>> = vec![None; num_ids];
        for (i, &a) in live.iter().enumerate() {
            for &b in &live[i + 1..] {
                let sim = cosine(&centroids[a], &centroids[b]);
                for (from, to) in [(a, b), (b, a)] {
                    let better = match nearest[from] {
                        None => true,
                        Some((best_id, best_sim)) => {
                            sim > best_sim || (sim == best_sim && to < best_id)
                        }
                    };
                    if better {
                        nearest[from] = Some((to, sim));
                    }
                }
            }
        }
        // Mutual nearest neighbors at or above the threshold, ordered by
        // (min id, max id). Mutuality makes the pairs disjoint.
        let mut pairs: Vec<(usize, usize, f64)> = Vec::new();
        for &a in &live {
            if let Some((b, sim)) = nearest[a] {
                if a < b && sim >= threshold && nearest[b].map(|(n, _)| n) == Some(a) {
                    pairs.push((a, b, sim));
                }
            }
        }
        if pairs.is_empty() {
            break;
        }
        for &(kept, absorbed, similarity) in &pairs {
            for label in labels.iter_mut() {
                if *label == Some(absorbed) {
                    *label = Some(kept);
                }
            }
            events.push(MergeEvent {
                threshold,
                kept,
                absorbed,
                similarity,
            });
        }
    }
    events
}

/// Public single-threshold pass; the returned partition is re-densified.
pub fn merge_pass(
    embeddings: &EmbeddingSet,
    partition: &Partition,
    threshold: f64,
) -> (Partition, Vec<MergeEvent>) {
    let mut labels = partition.assignment().to_vec();
    let events = merge_pass_raw(embeddings, &mut labels, partition.num_clusters(), threshold);
    (Partition::from_labels(labels), events)
}

/// Merge stage configuration: schedule length and optional explicit start
/// threshold. Without a start, the maximum observed inter-centroid
/// similarity is used so the first pass is non-vacuous.
#[derive(Debug, Clone, Serialize)]
pub struct MergeConfig {
    pub steps: usize,
    pub start: Option<f64>,
}

impl Default for MergeConfig {
    fn default() -> Self {
        MergeConfig {
            steps: 10,
            start: None,
        }
    }
}

/// Maximum centroid cosine over distinct clusters, or `None` with fewer
/// than two clusters.
pub fn max_intercluster_similarity(
    embeddings: &EmbeddingSet,
    partition: &Partition,
) -> Option<f64> {
    let labels = partition.assignment().to_vec();
    let (centroids, counts) = centroids_of(embeddings, &labels, partition.num_clusters());
    let live: Vec<usize> = (0..partition.num_clusters()).filter(|&c| counts[c] > 0).collect();
    if live.len() < 2 {
        return None;
    }
    let mut best = f64::NEG_INFINITY;
    for (i, &a) in live.iter().enumerate() {
        for &b in &live[i + 1..] {
            best = best.max(cosine(&centroids[a], &centroids[b]));
        }
    }
    Some(best)
}

/// Runs a merge pass at every schedule threshold in descending order and
/// returns the re-densified partition plus the full merge log.
pub fn progressive_merge(
    embeddings: &EmbeddingSet,
    partition: &Partition,
    cmd: f64,
    config: &MergeConfig,
) -> Result<(Partition, Vec<MergeEvent>)> {
    let start = match config.start {
        Some(start) => start,
        None => max_intercluster_similarity(embeddings, partition).unwrap_or(cmd),
    };
    // Nothing sits above CMD: a single pass at CMD is the whole schedule.
    let schedule = if start <= cmd {
        vec![cmd]
    } else {
        merge_schedule(start, cmd, config.steps)?
    };
    let mut labels = partition.assignment().to_vec();
    let mut log = Vec::new();
    for threshold in schedule {
        log.extend(merge_pass_raw(
            embeddings,
            &mut labels,
            partition.num_clusters(),
            threshold,
        ));
    }
    Ok((Partition::from_labels(labels), log))
}
