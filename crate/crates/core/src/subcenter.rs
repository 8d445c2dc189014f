//! Sub-center angular-margin purification.
//!
//! A linear classifier with `S` unit-norm weight rows per class is trained
//! on the frozen embeddings under the current pseudo-labels. The class
//! logit is the maximum sub-center cosine, scaled, with an additive angular
//! margin on the target class. After convergence each class's members are
//! assigned to their argmax sub-center; a pure class concentrates on one
//! sub-center (dominance near 1) while a class that actually contains two
//! speakers spreads over several, and is purged when its dominance falls
//! below a threshold.
//!
//! Training is plain full-batch gradient descent on the weights only, with
//! hand-derived gradients. The max over sub-centers uses the subgradient
//! convention: only the selected sub-center receives gradient.

use std::fs;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::embed::{dot, EmbeddingSet};
use crate::error::{Error, Result};
use crate::partition::Partition;

/// Keeps `acos` and the margin derivative finite at the poles.
const COS_CLAMP: f64 = 1.0 - 1e-7;

/// Weight rows within this distance of unit norm are not rescaled, making
/// a zero-learning-rate step bit-exact.
const ROW_NORM_SKIP: f64 = 1e-9;

/// Training hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubcenterParams {
    pub subcenters: usize,
    pub margin: f64,
    pub scale: f64,
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Relative per-epoch loss improvement below which training stops.
    pub tol: f64,
}

impl Default for SubcenterParams {
    fn default() -> Self {
        SubcenterParams {
            subcenters: 3,
            margin: 0.2,
            scale: 32.0,
            learning_rate: 0.1,
            max_epochs: 200,
            tol: 1e-4,
        }
    }
}

/// Trained classifier: a `classes x subcenters x dim` tensor of unit rows.
#[derive(Debug, Clone)]
pub struct SubcenterModel {
    weights: Vec<f64>,
    classes: usize,
    subcenters: usize,
    dim: usize,
    margin: f64,
    scale: f64,
}

impl SubcenterModel {
    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn subcenters(&self) -> usize {
        self.subcenters
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn margin(&self) -> f64 {
        self.margin
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Overwrites the weight tensor; used by checkpoint loading and the
    /// finite-difference tests.
    pub fn set_weights(&mut self, weights: Vec<f64>) {
        assert_eq!(weights.len(), self.classes * self.subcenters * self.dim);
        self.weights = weights;
    }

    fn row(&self, class: usize, sub: usize) -> &[f64] {
        let start = (class * self.subcenters + sub) * self.dim;
        &self.weights[start..start + self.dim]
    }

    /// Argmax sub-center and its cosine for one class (ties to the lower
    /// sub-center index).
    fn select(&self, x: &[f64], class: usize) -> (usize, f64) {
        let mut best = (0usize, f64::NEG_INFINITY);
        for sub in 0..self.subcenters {
            let cos = dot(x, self.row(class, sub));
            if cos > best.1 {
                best = (sub, cos);
            }
        }
        best
    }

    /// Predicted class: argmax over classes of the max sub-center cosine.
    pub fn predict(&self, x: &[f64]) -> usize {
        (0..self.classes)
            .map(|c| (c, self.select(x, c).1))
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(b.0.cmp(&a.0)))
            .map(|(c, _)| c)
            .unwrap()
    }

    /// Mean cross-entropy over the labeled samples, margin applied to the
    /// target class angle. This is the exact function the training gradient
    /// differentiates.
    pub fn loss(&self, embeddings: &EmbeddingSet, samples: &[(usize, usize)]) -> f64 {
        let mut total = 0.0;
        let mut logits = vec![0.0; self.classes];
        for &(node, target) in samples {
            let x = embeddings.row(node);
            for (class, logit) in logits.iter_mut().enumerate() {
                let (_, cos) = self.select(x, class);
                *logit = if class == target {
                    self.scale * margin_cos(cos, self.margin).0
                } else {
                    self.scale * cos
                };
            }
            total += cross_entropy(&logits, target);
        }
        total / samples.len() as f64
    }

    /// Mean loss and its gradient with respect to the weight tensor.
    pub fn loss_grad(&self, embeddings: &EmbeddingSet, samples: &[(usize, usize)]) -> (f64, Vec<f64>) {
        let mut total = 0.0;
        let mut grad = vec![0.0; self.weights.len()];
        let mut logits = vec![0.0; self.classes];
        let mut selected = vec![0usize; self.classes];
        let inv = 1.0 / samples.len() as f64;
        for &(node, target) in samples {
            let x = embeddings.row(node);
            let mut target_chain = 0.0;
            for class in 0..self.classes {
                let (sub, cos) = self.select(x, class);
                selected[class] = sub;
                logits[class] = if class == target {
                    let (cos_with_margin, chain) = margin_cos(cos, self.margin);
                    target_chain = chain;
                    self.scale * cos_with_margin
                } else {
                    self.scale * cos
                };
            }
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for logit in &logits {
                denom += (logit - max).exp();
            }
            total += -(logits[target] - max - denom.ln());
            for class in 0..self.classes {
                let p = (logits[class] - max).exp() / denom;
                let dlogit = p - if class == target { 1.0 } else { 0.0 };
                let chain = if class == target { target_chain } else { 1.0 };
                let coeff = inv * dlogit * self.scale * chain;
                let start = (class * self.subcenters + selected[class]) * self.dim;
                for (g, &v) in grad[start..start + self.dim].iter_mut().zip(x) {
                    *g += coeff * v;
                }
            }
        }
        (total * inv, grad)
    }

    fn renormalize_rows(&mut self) {
        for row in self.weights.chunks_mut(self.dim) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 && (norm - 1.0).abs() > ROW_NORM_SKIP {
                for v in row {
                    *v /= norm;
                }
            }
        }
    }
}

/// `cos(theta + m)` as a function of `cos(theta)`, together with its
/// derivative (the chain factor). The cosine is clamped away from the
/// poles; inside the clamped region the derivative is zero, matching the
/// implemented function exactly.
fn margin_cos(cos: f64, margin: f64) -> (f64, f64) {
    let clamped = cos.clamp(-COS_CLAMP, COS_CLAMP);
    let sin = (1.0 - clamped * clamped).sqrt();
    let value = clamped * margin.cos() - sin * margin.sin();
    let chain = if cos == clamped {
        margin.cos() + margin.sin() * clamped / sin
    } else {
        0.0
    };
    (value, chain)
}

fn cross_entropy(logits: &[f64], target: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    -(logits[target] - max - denom.ln())
}

/// Non-removed `(node, cluster)` training pairs of a partition.
pub fn training_samples(partition: &Partition) -> Vec<(usize, usize)> {
    (0..partition.len())
        .filter_map(|node| partition.cluster_of(node).map(|c| (node, c)))
        .collect()
}

/// Training output: the model and the per-epoch loss curve.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: SubcenterModel,
    pub loss_curve: Vec<f64>,
}

/// Re-seeds dead sub-centers (ones that no member of their own class
/// selects) at secondary modes of the class, detected geometrically: a
/// candidate seed is the member least explained by the class centroid (and
/// by previously re-seeded rows), and it is accepted only when at least
/// two members sit closer to it than to that coverage. A unimodal class
/// never fires the test, so its dominance stays at 1; a class holding two
/// separated speakers always does. Without re-seeding, the sub-center that
/// captured the whole class during training would keep it forever, since
/// unselected sub-centers receive no attracting gradient. Deterministic;
/// returns whether anything was re-seeded.
fn reseed_dead_subcenters(
    model: &mut SubcenterModel,
    embeddings: &EmbeddingSet,
    members_by_class: &[Vec<usize>],
) -> bool {
    if model.subcenters < 2 {
        return false;
    }
    let dim = model.dim;
    let mut reseeded = false;
    for (class, members) in members_by_class.iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        let mut counts = vec![0usize; model.subcenters];
        for &node in members {
            let (sub, _) = model.select(embeddings.row(node), class);
            counts[sub] += 1;
        }

        let mut centroid = vec![0.0; dim];
        for &node in members {
            for (acc, v) in centroid.iter_mut().zip(embeddings.row(node)) {
                *acc += v;
            }
        }
        let norm = centroid.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        for v in centroid.iter_mut() {
            *v /= norm;
        }

        // Coverage per member: cosine to the centroid, raised by any row
        // already re-seeded for this class.
        let mut coverage: Vec<(usize, f64)> = members
            .iter()
            .map(|&node| (node, dot(embeddings.row(node), &centroid)))
            .collect();
        for (sub, &count) in counts.iter().enumerate() {
            if count > 0 {
                continue;
            }
            let &(candidate, _) = coverage
                .iter()
                .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)))
                .expect("class has members");
            let seed_row = embeddings.row(candidate).to_vec();
            let attracted = coverage
                .iter()
                .filter(|&&(node, covered)| dot(embeddings.row(node), &seed_row) > covered)
                .count();
            if attracted < 2 {
                break;
            }
            let start = (class * model.subcenters + sub) * dim;
            model.weights[start..start + dim].copy_from_slice(&seed_row);
            reseeded = true;
            for (node, covered) in coverage.iter_mut() {
                let cos = dot(embeddings.row(*node), &seed_row);
                if cos > *covered {
                    *covered = cos;
                }
            }
        }
    }
    reseeded
}

/// Initializes a model with seeded random unit rows, all distinct.
pub fn init_model(
    classes: usize,
    dim: usize,
    params: &SubcenterParams,
    seed: u64,
) -> SubcenterModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x5ce0);
    let mut weights = Vec::with_capacity(classes * params.subcenters * dim);
    for _ in 0..classes * params.subcenters {
        let mut row: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in &mut row {
            *v /= norm;
        }
        weights.extend(row);
    }
    SubcenterModel {
        weights,
        classes,
        subcenters: params.subcenters,
        dim,
        margin: params.margin,
        scale: params.scale,
    }
}

/// Training init for phase 1: a single random unit row per class.
fn init_single(classes: usize, dim: usize, params: &SubcenterParams, seed: u64) -> SubcenterModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x5ce0);
    let mut weights = Vec::with_capacity(classes * dim);
    for _ in 0..classes {
        let mut row: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in &mut row {
            *v /= norm;
        }
        weights.extend(row);
    }
    SubcenterModel {
        weights,
        classes,
        subcenters: 1,
        dim,
        margin: params.margin,
        scale: params.scale,
    }
}

/// Expands a single-sub-center model to `subcenters` rows per class by
/// exact duplication. A duplicate ties with the trained row on every
/// input and argmax ties resolve to the lowest index, so duplicates are
/// never selected and class logits are unchanged; a unimodal class keeps
/// dominance 1 until a re-seed deliberately plants a row at a second mode.
fn expand(model: SubcenterModel, subcenters: usize) -> SubcenterModel {
    let mut weights = Vec::with_capacity(model.classes * subcenters * model.dim);
    for class in 0..model.classes {
        let row = model.row(class, 0);
        for _ in 0..subcenters {
            weights.extend_from_slice(row);
        }
    }
    SubcenterModel {
        weights,
        classes: model.classes,
        subcenters,
        dim: model.dim,
        margin: model.margin,
        scale: model.scale,
    }
}

/// Gradient-descent epochs until the relative loss improvement falls under
/// `tol` or the global epoch budget runs out. The step halves whenever an
/// epoch fails to improve the loss by 0.1%; a zero learning rate is left
/// at zero.
fn descend(
    model: &mut SubcenterModel,
    embeddings: &EmbeddingSet,
    samples: &[(usize, usize)],
    params: &SubcenterParams,
    lr: &mut f64,
    curve: &mut Vec<f64>,
) -> Result<()> {
    while curve.len() < params.max_epochs {
        let (loss, grad) = model.loss_grad(embeddings, samples);
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch: curve.len() });
        }
        curve.push(loss);
        if curve.len() >= 2 {
            let prev = curve[curve.len() - 2];
            let rel = (prev - loss) / prev.abs().max(1e-12);
            if rel >= 0.0 && rel < params.tol {
                break;
            }
            if rel < 1e-3 {
                *lr = (*lr * 0.5).max(params.learning_rate.min(1e-4));
            }
        }
        for (w, g) in model.weights.iter_mut().zip(&grad) {
            *w -= *lr * g;
        }
        model.renormalize_rows();
    }
    Ok(())
}

/// Trains the classifier on the frozen embeddings under the partition's
/// pseudo-labels in three phases: capture (one sub-center per class,
/// full-batch gradient descent to convergence), expansion with a
/// dead-sub-center re-seed pass from the converged geometry, and a second
/// descent to settle the re-seeded rows. Stops on relative loss
/// improvement below `tol` or after `max_epochs` total epochs.
pub fn train(
    embeddings: &EmbeddingSet,
    partition: &Partition,
    params: &SubcenterParams,
    seed: u64,
) -> Result<TrainOutcome> {
    if partition.num_clusters() < 2 {
        return Err(Error::SingleCluster(partition.num_clusters()));
    }
    let samples = training_samples(partition);
    let members_by_class = partition.members();
    let mut curve = Vec::with_capacity(params.max_epochs);
    let mut lr = params.learning_rate;

    let mut captured = init_single(partition.num_clusters(), embeddings.dim(), params, seed);
    let capture_params = SubcenterParams {
        subcenters: 1,
        ..params.clone()
    };
    descend(&mut captured, embeddings, &samples, &capture_params, &mut lr, &mut curve)?;
    if params.subcenters == 1 {
        return Ok(TrainOutcome {
            model: captured,
            loss_curve: curve,
        });
    }

    let mut model = expand(captured, params.subcenters);
    if lr > 0.0 && reseed_dead_subcenters(&mut model, embeddings, &members_by_class) {
        descend(&mut model, embeddings, &samples, params, &mut lr, &mut curve)?;
    }
    Ok(TrainOutcome { model, loss_curve: curve })
}

/// Fraction of samples whose predicted class matches their pseudo-label.
pub fn accuracy(model: &SubcenterModel, embeddings: &EmbeddingSet, samples: &[(usize, usize)]) -> f64 {
    let correct = samples
        .iter()
        .filter(|&&(node, target)| model.predict(embeddings.row(node)) == target)
        .count();
    correct as f64 / samples.len() as f64
}

/// Per-class selection histogram over sub-centers and its dominance (the
/// largest histogram fraction).
#[derive(Debug, Clone, Serialize)]
pub struct PurityReport {
    histograms: Vec<Vec<usize>>,
    dominance: Vec<f64>,
}

impl PurityReport {
    pub fn histogram(&self, class: usize) -> &[usize] {
        &self.histograms[class]
    }

    pub fn dominance(&self, class: usize) -> f64 {
        self.dominance[class]
    }

    pub fn num_classes(&self) -> usize {
        self.dominance.len()
    }
}

/// Runs every non-removed member through its own class's sub-centers and
/// histograms the argmax selections.
pub fn purity_report(
    model: &SubcenterModel,
    embeddings: &EmbeddingSet,
    partition: &Partition,
) -> Result<PurityReport> {
    if model.classes != partition.num_clusters() {
        return Err(Error::ClassCountMismatch {
            model: model.classes,
            partition: partition.num_clusters(),
        });
    }
    let mut histograms = vec![vec![0usize; model.subcenters]; model.classes];
    for node in 0..partition.len() {
        if let Some(class) = partition.cluster_of(node) {
            let (sub, _) = model.select(embeddings.row(node), class);
            histograms[class][sub] += 1;
        }
    }
    let dominance = histograms
        .iter()
        .map(|h| {
            let size: usize = h.iter().sum();
            *h.iter().max().unwrap() as f64 / size as f64
        })
        .collect();
    Ok(PurityReport { histograms, dominance })
}

/// Removes every class with dominance below `tau` (ids re-densified in
/// ascending old-id order). `tau = 0` disables purging; values above 1 are
/// rejected. Returns the purged partition and the removed class ids.
pub fn purge_impure(
    partition: &Partition,
    report: &PurityReport,
    tau: f64,
) -> Result<(Partition, Vec<usize>)> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::InvalidTau(tau));
    }
    let purged: Vec<usize> = (0..report.num_classes())
        .filter(|&c| report.dominance(c) < tau)
        .collect();
    let labels: Vec<Option<usize>> = partition
        .assignment()
        .iter()
        .map(|a| a.filter(|c| !purged.contains(c)))
        .collect();
    Ok((Partition::from_labels(labels), purged))
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    classes: usize,
    subcenters: usize,
    dim: usize,
    margin: f64,
    scale: f64,
}

/// Writes the model checkpoint: magic `SCW1`, little-endian `u32` header
/// length, a JSON header with dims and hyperparameters, then the weight
/// tensor as little-endian `f32`.
pub fn save_model(model: &SubcenterModel, path: &Path) -> Result<()> {
    let header = serde_json::to_vec(&CheckpointHeader {
        classes: model.classes,
        subcenters: model.subcenters,
        dim: model.dim,
        margin: model.margin,
        scale: model.scale,
    })
    .expect("header serializes");
    let mut bytes = Vec::with_capacity(8 + header.len() + model.weights.len() * 4);
    bytes.extend_from_slice(b"SCW1");
    bytes.extend_from_slice(&(header.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&header);
    for &w in &model.weights {
        bytes.extend_from_slice(&(w as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint written by [`save_model`].
pub fn load_model(path: &Path) -> Result<SubcenterModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 || &bytes[..4] != b"SCW1" {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "SCW1",
        });
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[8..8 + header_len])
        .map_err(|e| Error::parse(path, 0, format!("bad checkpoint header: {e}")))?;
    let expected = header.classes * header.subcenters * header.dim;
    let payload = &bytes[8 + header_len..];
    if payload.len() != expected * 4 {
        return Err(Error::parse(
            path,
            0,
            format!("expected {expected} weights, found {} bytes", payload.len()),
        ));
    }
    let weights = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(SubcenterModel {
        weights,
        classes: header.classes,
        subcenters: header.subcenters,
        dim: header.dim,
        margin: header.margin,
        scale: header.scale,
    })
}
