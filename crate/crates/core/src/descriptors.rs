//! Domain-specific descriptors computed from the labeled subset.
//!
//! Three cosine thresholds drive the denoising stages:
//!
//! * NED: maximum cosine similarity over all cross-class embedding pairs.
//!   Edges above it are almost surely same-class, so the graph stage keeps
//!   only edge weights strictly greater than NED.
//! * ICD: for each class, the minimum member-to-centroid cosine; ICD is
//!   the maximum of those minima. The cleaning stage keeps only members
//!   strictly above ICD to their cluster center.
//! * CMD: maximum cosine similarity between distinct class centroids; the
//!   terminal threshold of the progressive merge schedule.
//!
//! All three are exact (no sampling); the labeled subset is small.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::embed::{cosine, EmbeddingSet, LabeledSubset};
use crate::error::{Error, Result};

/// The (NED, ICD, CMD) triple.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Descriptors {
    pub ned: f64,
    pub icd: f64,
    pub cmd: f64,
}

/// Per-class arithmetic-mean centroids. Centroids are not re-normalized:
/// cosine is scale-invariant, so re-normalization would not change any
/// downstream result.
#[derive(Debug, Clone)]
pub struct CentroidSet {
    centroids: Vec<f64>,
    dim: usize,
}

impl CentroidSet {
    pub fn num_classes(&self) -> usize {
        self.centroids.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn centroid(&self, class: usize) -> &[f64] {
        &self.centroids[class * self.dim..(class + 1) * self.dim]
    }
}

/// Maximum cross-class cosine similarity (exact, all pairs).
pub fn compute_ned(embeddings: &EmbeddingSet, labels: &LabeledSubset) -> Result<f64> {
    if labels.num_classes() < 2 {
        return Err(Error::DescriptorUndefined {
            name: "NED",
            classes: labels.num_classes(),
        });
    }
    let rows = labels.class_rows(embeddings)?;
    let mut best = f64::NEG_INFINITY;
    for i in 0..rows.len() {
        for j in (i + 1)..rows.len() {
            for &a in &rows[i] {
                for &b in &rows[j] {
                    best = best.max(embeddings.cosine(a, b));
                }
            }
        }
    }
    Ok(best)
}

/// Arithmetic mean of each class's member embeddings.
pub fn compute_centroids(
    embeddings: &EmbeddingSet,
    labels: &LabeledSubset,
) -> Result<CentroidSet> {
    let rows = labels.class_rows(embeddings)?;
    let dim = embeddings.dim();
    let mut centroids = vec![0.0; rows.len() * dim];
    for (class, members) in rows.iter().enumerate() {
        let out = &mut centroids[class * dim..(class + 1) * dim];
        for &row in members {
            for (acc, v) in out.iter_mut().zip(embeddings.row(row)) {
                *acc += v;
            }
        }
        let inv = 1.0 / members.len() as f64;
        for acc in out.iter_mut() {
            *acc *= inv;
        }
    }
    Ok(CentroidSet { centroids, dim })
}

/// Max over classes of the minimum member-to-centroid cosine.
pub fn compute_icd(
    embeddings: &EmbeddingSet,
    labels: &LabeledSubset,
    centroids: &CentroidSet,
) -> Result<f64> {
    let rows = labels.class_rows(embeddings)?;
    let mut best = f64::NEG_INFINITY;
    for (class, members) in rows.iter().enumerate() {
        let center = centroids.centroid(class);
        let mut class_min = f64::INFINITY;
        for &row in members {
            class_min = class_min.min(cosine(embeddings.row(row), center));
        }
        best = best.max(class_min);
    }
    Ok(best)
}

/// Maximum cosine similarity between distinct class centroids.
pub fn compute_cmd(centroids: &CentroidSet) -> Result<f64> {
    let k = centroids.num_classes();
    if k < 2 {
        return Err(Error::DescriptorUndefined {
            name: "CMD",
            classes: k,
        });
    }
    let mut best = f64::NEG_INFINITY;
    for i in 0..k {
        for j in (i + 1)..k {
            best = best.max(cosine(centroids.centroid(i), centroids.centroid(j)));
        }
    }
    Ok(best)
}

/// Computes all three descriptors in one call.
pub fn compute_all(embeddings: &EmbeddingSet, labels: &LabeledSubset) -> Result<Descriptors> {
    let ned = compute_ned(embeddings, labels)?;
    let centroids = compute_centroids(embeddings, labels)?;
    let icd = compute_icd(embeddings, labels, &centroids)?;
    let cmd = compute_cmd(&centroids)?;
    Ok(Descriptors { ned, icd, cmd })
}

/// Writes the 3-field report consumed by later stages:
/// `ned=`, `icd=`, `cmd=`, one per line.
pub fn write_report(descriptors: &Descriptors, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "ned={}", descriptors.ned).map_err(|e| Error::io(path, e))?;
    writeln!(w, "icd={}", descriptors.icd).map_err(|e| Error::io(path, e))?;
    writeln!(w, "cmd={}", descriptors.cmd).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Parses a report written by [`write_report`].
pub fn read_report(path: &Path) -> Result<Descriptors> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut ned = None;
    let mut icd = None;
    let mut cmd = None;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(path, lineno + 1, "expected `key=value`"))?;
        let value: f64 = value
            .trim()
            .parse()
            .map_err(|e| Error::parse(path, lineno + 1, format!("bad value: {e}")))?;
        match key.trim() {
            "ned" => ned = Some(value),
            "icd" => icd = Some(value),
            "cmd" => cmd = Some(value),
            other => return Err(Error::parse(path, lineno + 1, format!("unknown key {other:?}"))),
        }
    }
    match (ned, icd, cmd) {
        (Some(ned), Some(icd), Some(cmd)) => Ok(Descriptors { ned, icd, cmd }),
        _ => Err(Error::parse(path, 0, "report must define ned, icd and cmd")),
    }
}
