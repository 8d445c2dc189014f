//! Pseudo-label quality assessment against ground truth.
//!
//! The two noise rates are normalized by the total number of non-removed
//! samples, so they move on a common scale:
//!
//! * NR1 (intra-class noise): the fraction of samples that disagree with
//!   their pseudo cluster's majority ground-truth class,
//!   `100 * sum_clusters(size - majority) / total`.
//! * NR2 (inter-class noise): the fraction of samples split away from
//!   their ground-truth class's dominant pseudo cluster,
//!   `100 * sum_gt_classes(size - largest single cluster) / total`.
//!
//! NMI uses arithmetic-mean normalization, `2 I(P;GT) / (H(P) + H(GT))`,
//! natural log internally. Removed samples are excluded from every metric
//! and reported separately as `removed_fraction`.

use std::fmt;

use serde::Serialize;

use crate::embed::{EmbeddingSet, LabeledSubset};
use crate::error::{Error, Result};
use crate::partition::Partition;

/// Ground-truth class per node, aligned with a partition's node indexing.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    class_of: Vec<usize>,
    num_classes: usize,
}

impl GroundTruth {
    /// Builds per-node classes for `embeddings` from a labels file that
    /// must cover every id.
    pub fn from_labels(labels: &LabeledSubset, embeddings: &EmbeddingSet) -> Result<GroundTruth> {
        let mut class_of = Vec::with_capacity(embeddings.len());
        for node in 0..embeddings.len() {
            let id = embeddings.id(node);
            let class = labels.label(id).ok_or_else(|| Error::MissingTruth {
                node,
                id: id.to_string(),
            })?;
            class_of.push(class);
        }
        Ok(GroundTruth {
            class_of,
            num_classes: labels.num_classes(),
        })
    }

    pub fn from_classes(class_of: Vec<usize>) -> GroundTruth {
        let num_classes = class_of.iter().copied().max().map_or(0, |c| c + 1);
        GroundTruth {
            class_of,
            num_classes,
        }
    }

    pub fn len(&self) -> usize {
        self.class_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_of.is_empty()
    }

    pub fn class_of(&self, node: usize) -> usize {
        self.class_of[node]
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }
}

/// All quality metrics for one partition snapshot.
#[derive(Debug, Clone, Serialize)]
pub struct QualityReport {
    pub nr1: f64,
    pub nr2: f64,
    pub pseudo_classes: usize,
    pub gt_classes_covered: usize,
    pub nmi: f64,
    pub removed_fraction: f64,
}

fn check_inputs(partition: &Partition, truth: &GroundTruth) -> Result<usize> {
    if partition.len() != truth.len() {
        return Err(Error::PartitionSizeMismatch {
            partition: partition.len(),
            graph: truth.len(),
        });
    }
    let total = partition.non_removed();
    if total == 0 {
        return Err(Error::EmptyPartition);
    }
    Ok(total)
}

/// Intra-class noise rate, percent.
pub fn nr1(partition: &Partition, truth: &GroundTruth) -> Result<f64> {
    let total = check_inputs(partition, truth)?;
    let mut noisy = 0usize;
    for members in partition.members() {
        let mut counts = vec![0usize; truth.num_classes()];
        for &node in &members {
            counts[truth.class_of(node)] += 1;
        }
        // Majority ties break toward the lower class id; the count is the
        // same either way.
        let majority = counts.iter().copied().max().unwrap_or(0);
        noisy += members.len() - majority;
    }
    Ok(100.0 * noisy as f64 / total as f64)
}

/// Inter-class noise rate, percent.
pub fn nr2(partition: &Partition, truth: &GroundTruth) -> Result<f64> {
    let total = check_inputs(partition, truth)?;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); truth.num_classes()];
    for node in 0..partition.len() {
        if let Some(cluster) = partition.cluster_of(node) {
            by_class[truth.class_of(node)].push(cluster);
        }
    }
    let mut split = 0usize;
    for clusters in by_class {
        if clusters.is_empty() {
            continue;
        }
        let mut counts = vec![0usize; partition.num_clusters()];
        for c in &clusters {
            counts[*c] += 1;
        }
        let largest = counts.iter().copied().max().unwrap_or(0);
        split += clusters.len() - largest;
    }
    Ok(100.0 * split as f64 / total as f64)
}

/// Normalized mutual information between two dense label vectors.
/// Symmetric; the degenerate case of two constant labelings is 1.
fn nmi_labels(a: &[usize], b: &[usize]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let ka = a.iter().copied().max().map_or(0, |x| x + 1);
    let kb = b.iter().copied().max().map_or(0, |x| x + 1);
    let mut contingency = vec![0usize; ka * kb];
    let mut row = vec![0usize; ka];
    let mut col = vec![0usize; kb];
    for (&x, &y) in a.iter().zip(b) {
        contingency[x * kb + y] += 1;
        row[x] += 1;
        col[y] += 1;
    }
    let entropy = |counts: &[usize]| -> f64 {
        counts
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / n;
                -p * p.ln()
            })
            .sum()
    };
    let ha = entropy(&row);
    let hb = entropy(&col);
    if ha + hb == 0.0 {
        return 1.0;
    }
    let mut mutual = 0.0;
    for x in 0..ka {
        for y in 0..kb {
            let c = contingency[x * kb + y];
            if c > 0 {
                let p = c as f64 / n;
                mutual += p * (p / (row[x] as f64 / n * col[y] as f64 / n)).ln();
            }
        }
    }
    (2.0 * mutual.max(0.0) / (ha + hb)).clamp(0.0, 1.0)
}

/// NMI between the partition and the ground truth over non-removed samples.
pub fn nmi(partition: &Partition, truth: &GroundTruth) -> Result<f64> {
    check_inputs(partition, truth)?;
    let mut clusters = Vec::with_capacity(partition.non_removed());
    let mut classes = Vec::with_capacity(partition.non_removed());
    for node in 0..partition.len() {
        if let Some(c) = partition.cluster_of(node) {
            clusters.push(c);
            classes.push(truth.class_of(node));
        }
    }
    Ok(nmi_labels(&clusters, &classes))
}

/// Assembles all metrics for one snapshot.
pub fn report(partition: &Partition, truth: &GroundTruth) -> Result<QualityReport> {
    let _ = check_inputs(partition, truth)?;
    let mut covered = vec![false; truth.num_classes()];
    for node in 0..partition.len() {
        if partition.cluster_of(node).is_some() {
            covered[truth.class_of(node)] = true;
        }
    }
    Ok(QualityReport {
        nr1: nr1(partition, truth)?,
        nr2: nr2(partition, truth)?,
        pseudo_classes: partition.num_clusters(),
        gt_classes_covered: covered.iter().filter(|&&c| c).count(),
        nmi: nmi(partition, truth)?,
        removed_fraction: 100.0 * (partition.len() - partition.non_removed()) as f64
            / partition.len() as f64,
    })
}

impl QualityReport {
    /// Tab-separated single line matching [`tsv_header`](Self::tsv_header).
    pub fn tsv_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.nr1,
            self.nr2,
            self.pseudo_classes,
            self.gt_classes_covered,
            self.nmi,
            self.removed_fraction
        )
    }

    pub fn tsv_header() -> &'static str {
        "nr1\tnr2\tpseudo_classes\tgt_classes_covered\tnmi\tremoved_fraction"
    }
}

impl fmt::Display for QualityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "pseudo-label quality (non-removed samples only)")?;
        writeln!(
            f,
            "  NR1 = {:.2}%   intra-class noise: 100 * sum_clusters(size - majority_gt) / total",
            self.nr1
        )?;
        writeln!(
            f,
            "  NR2 = {:.2}%   inter-class noise: 100 * sum_gt_classes(size - largest_single_cluster) / total",
            self.nr2
        )?;
        writeln!(f, "  pseudo classes     = {}", self.pseudo_classes)?;
        writeln!(f, "  gt classes covered = {}", self.gt_classes_covered)?;
        writeln!(
            f,
            "  NMI = {:.4}   2*I(P;GT) / (H(P) + H(GT)), natural log",
            self.nmi
        )?;
        write!(f, "  removed = {:.2}% of all samples", self.removed_fraction)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn partition_of(labels: &[usize]) -> Partition {
        Partition::from_labels(labels.iter().map(|&l| Some(l)).collect())
    }

    #[test]
    fn nr1_pinned_example() {
        // One cluster with GT labels {A, A, B}: 1 of 3 samples is noise.
        let p = partition_of(&[0, 0, 0]);
        let t = GroundTruth::from_classes(vec![0, 0, 1]);
        let v = nr1(&p, &t).unwrap();
        assert!((v - 100.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn nr1_zero_for_perfect_and_singletons() {
        let t = GroundTruth::from_classes(vec![0, 0, 1, 1]);
        assert_eq!(nr1(&partition_of(&[1, 1, 0, 0]), &t).unwrap(), 0.0);
        assert_eq!(nr1(&partition_of(&[0, 1, 2, 3]), &t).unwrap(), 0.0);
    }

    #[test]
    fn nr2_pinned_split_example() {
        // One speaker split evenly into two clusters of 5.
        let labels: Vec<usize> = (0..10).map(|i| i / 5).collect();
        let p = partition_of(&labels);
        let t = GroundTruth::from_classes(vec![0; 10]);
        assert!((nr2(&p, &t).unwrap() - 50.0).abs() < 1e-9);
    }

    #[test]
    fn nr2_zero_when_nothing_is_split() {
        let t = GroundTruth::from_classes(vec![0, 0, 1, 1]);
        assert_eq!(nr2(&partition_of(&[0, 0, 1, 1]), &t).unwrap(), 0.0);
        // A single mega-cluster splits nothing but is maximally impure.
        let mega = partition_of(&[0, 0, 0, 0]);
        assert_eq!(nr2(&mega, &t).unwrap(), 0.0);
        assert!(nr1(&mega, &t).unwrap() > 0.0);
    }

    #[test]
    fn nmi_identity_and_zero() {
        let t = GroundTruth::from_classes(vec![0, 0, 1, 1, 2, 2]);
        // Relabeled copy of the truth.
        let p = partition_of(&[2, 2, 0, 0, 1, 1]);
        assert!((nmi(&p, &t).unwrap() - 1.0).abs() < 1e-12);
        // One cluster against many classes carries no information.
        let one = partition_of(&[0; 6]);
        assert_eq!(nmi(&one, &t).unwrap(), 0.0);
    }

    #[test]
    fn nmi_degenerate_single_single_is_one() {
        let t = GroundTruth::from_classes(vec![0, 0, 0]);
        let p = partition_of(&[0, 0, 0]);
        assert_eq!(nmi(&p, &t).unwrap(), 1.0);
    }

    #[test]
    fn empty_partition_is_an_error() {
        let p = Partition::from_labels(vec![None, None]);
        let t = GroundTruth::from_classes(vec![0, 1]);
        assert!(matches!(nr1(&p, &t), Err(Error::EmptyPartition)));
        assert!(matches!(nr2(&p, &t), Err(Error::EmptyPartition)));
        assert!(matches!(nmi(&p, &t), Err(Error::EmptyPartition)));
    }

    #[test]
    fn report_for_perfect_partition() {
        let t = GroundTruth::from_classes(vec![0, 0, 1, 1, 2]);
        let p = partition_of(&[0, 0, 1, 1, 2]);
        let r = report(&p, &t).unwrap();
        assert_eq!(r.nr1, 0.0);
        assert_eq!(r.nr2, 0.0);
        assert_eq!(r.pseudo_classes, 3);
        assert_eq!(r.gt_classes_covered, 3);
        assert_eq!(r.nmi, 1.0);
        assert_eq!(r.removed_fraction, 0.0);
    }

    #[test]
    fn removed_samples_are_excluded() {
        let p = Partition::from_labels(vec![Some(0), Some(0), None, Some(1)]);
        let t = GroundTruth::from_classes(vec![0, 0, 0, 1]);
        let r = report(&p, &t).unwrap();
        assert_eq!(r.nr1, 0.0);
        assert_eq!(r.nr2, 0.0);
        assert_eq!(r.gt_classes_covered, 2);
        assert_eq!(r.removed_fraction, 25.0);
    }

    /// Independent contingency-table oracle using hash maps and a
    /// different accumulation path than the implementation.
    fn oracle_nmi(a: &[usize], b: &[usize]) -> f64 {
        use std::collections::HashMap;
        let n = a.len() as f64;
        let mut joint: HashMap<(usize, usize), f64> = HashMap::new();
        let mut pa: HashMap<usize, f64> = HashMap::new();
        let mut pb: HashMap<usize, f64> = HashMap::new();
        for (&x, &y) in a.iter().zip(b) {
            *joint.entry((x, y)).or_default() += 1.0 / n;
            *pa.entry(x).or_default() += 1.0 / n;
            *pb.entry(y).or_default() += 1.0 / n;
        }
        let h = |m: &HashMap<usize, f64>| -> f64 { -m.values().map(|&p| p * p.ln()).sum::<f64>() };
        let (ha, hb) = (h(&pa), h(&pb));
        if ha + hb == 0.0 {
            return 1.0;
        }
        let mut mi = 0.0;
        for (&(x, y), &pxy) in &joint {
            mi += pxy * (pxy / (pa[&x] * pb[&y])).ln();
        }
        2.0 * mi / (ha + hb)
    }

    proptest! {
        #[test]
        fn nmi_matches_contingency_oracle(
            a in proptest::collection::vec(0usize..5, 2..60),
            b_seed in 0u64..1000,
        ) {
            let b: Vec<usize> = a.iter().enumerate()
                .map(|(i, _)| ((b_seed as usize).wrapping_mul(31).wrapping_add(i * 7)) % 4)
                .collect();
            let got = nmi_labels(&a, &b);
            let want = oracle_nmi(&a, &b);
            prop_assert!((got - want).abs() < 1e-9, "{} vs {}", got, want);
            // Symmetry.
            prop_assert!((nmi_labels(&b, &a) - got).abs() < 1e-12);
        }

        // Metrics are invariant under relabeling of either side, and
        // NR1 = NR2 = 0 exactly when the partition matches the truth up to
        // relabeling.
        #[test]
        fn permutation_and_zero_equivalence(
            labels in proptest::collection::vec(0usize..4, 2..40),
            perm_seed in 0u64..100,
        ) {
            use rand::prelude::*;
            use rand::seq::SliceRandom;
            let t = GroundTruth::from_classes(labels.clone());
            let p = partition_of(&labels);
            prop_assert_eq!(nr1(&p, &t).unwrap(), 0.0);
            prop_assert_eq!(nr2(&p, &t).unwrap(), 0.0);

            // Relabel pseudo ids with a random permutation.
            let k = labels.iter().max().unwrap() + 1;
            let mut perm: Vec<usize> = (0..k).collect();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(perm_seed);
            perm.shuffle(&mut rng);
            let relabeled: Vec<usize> = labels.iter().map(|&l| perm[l]).collect();
            let rp = partition_of(&relabeled);
            prop_assert_eq!(nr1(&rp, &t).unwrap(), 0.0);
            prop_assert_eq!(nr2(&rp, &t).unwrap(), 0.0);
            prop_assert!((nmi(&rp, &t).unwrap() - 1.0).abs() < 1e-12);

            // And any partition with NR1 = NR2 = 0 is relabel-equivalent.
            if nr1(&rp, &t).unwrap() == 0.0 && nr2(&rp, &t).unwrap() == 0.0 {
                prop_assert!(rp.equivalent_to(&p));
            }
        }
    }
}
