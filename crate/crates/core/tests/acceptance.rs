//! Acceptance suite. Each criterion runs as one test, checks its stated
//! tolerance, and prints a single `criterion N PASS` line with the measured
//! numbers (visible with `--nocapture`).

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use mopc_core::descriptors;
use mopc_core::embed::{self, cosine, EmbeddingFormat, EmbeddingSet, LabeledSubset};
use mopc_core::graph::SimilarityGraph;
use mopc_core::infomap;
use mopc_core::metrics::{self, GroundTruth};
use mopc_core::partition::Partition;
use mopc_core::pipeline::{self, PipelineConfig, StageToggles};
use mopc_core::subcenter::{self, SubcenterParams};
use mopc_core::synth::{self, SynthSpec};

fn labeled_fixture(
    rng: &mut ChaCha8Rng,
    classes: usize,
    max_per_class: usize,
    dim: usize,
) -> (EmbeddingSet, LabeledSubset) {
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    let mut pairs = Vec::new();
    for class in 0..classes {
        let members = rng.random_range(1..=max_per_class);
        for member in 0..members {
            let id = format!("c{class:03}m{member:03}");
            let row: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            ids.push(id.clone());
            rows.push(row);
            pairs.push((id, format!("class{class:03}")));
        }
    }
    let mut embeddings = EmbeddingSet::from_rows(ids, rows).unwrap();
    embeddings.normalize().unwrap();
    (embeddings, LabeledSubset::from_pairs(pairs).unwrap())
}

// ---------------------------------------------------------------------
// Criterion 1: descriptor oracle equivalence.
// ---------------------------------------------------------------------

/// Exhaustive O(N^2) oracles: independent enumeration over all pairs and
/// classes, sharing only the cosine primitive.
mod descriptor_oracle {
    use super::*;

    pub fn ned(e: &EmbeddingSet, l: &LabeledSubset) -> f64 {
        let mut best = f64::NEG_INFINITY;
        for a in 0..e.len() {
            for b in 0..e.len() {
                if a != b && l.label(e.id(a)) != l.label(e.id(b)) {
                    best = best.max(e.cosine(a, b));
                }
            }
        }
        best
    }

    pub fn centroids(e: &EmbeddingSet, l: &LabeledSubset) -> Vec<Vec<f64>> {
        (0..l.num_classes())
            .map(|class| {
                let members: Vec<usize> = (0..e.len())
                    .filter(|&r| l.label(e.id(r)) == Some(class))
                    .collect();
                let mut mean = vec![0.0; e.dim()];
                for &r in &members {
                    for (m, v) in mean.iter_mut().zip(e.row(r)) {
                        *m += v;
                    }
                }
                for m in mean.iter_mut() {
                    *m *= 1.0 / members.len() as f64;
                }
                mean
            })
            .collect()
    }

    pub fn icd(e: &EmbeddingSet, l: &LabeledSubset) -> f64 {
        let centroids = centroids(e, l);
        (0..l.num_classes())
            .map(|class| {
                (0..e.len())
                    .filter(|&r| l.label(e.id(r)) == Some(class))
                    .map(|r| cosine(e.row(r), &centroids[class]))
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn cmd(e: &EmbeddingSet, l: &LabeledSubset) -> f64 {
        let centroids = centroids(e, l);
        let mut best = f64::NEG_INFINITY;
        for i in 0..centroids.len() {
            for j in 0..centroids.len() {
                if i != j {
                    best = best.max(cosine(&centroids[i], &centroids[j]));
                }
            }
        }
        best
    }
}

#[test]
fn criterion_1_descriptor_oracle_equivalence() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xc1);
    let dims = [2usize, 3, 8, 16, 32, 64];
    let mut fixtures = 0usize;
    let mut max_n = 0usize;
    for trial in 0..200 {
        let dim = dims[trial % dims.len()];
        let classes = 2 + (trial * 7) % 19;
        // Mostly small fixtures, some at the N = 500 scale.
        let max_per_class = if trial % 10 == 0 { 500 / classes } else { 8 };
        let (e, l) = labeled_fixture(&mut rng, classes, max_per_class.max(1), dim);
        assert!(e.len() <= 500);
        max_n = max_n.max(e.len());

        let got_ned = descriptors::compute_ned(&e, &l).unwrap();
        let centroids = descriptors::compute_centroids(&e, &l).unwrap();
        let got_icd = descriptors::compute_icd(&e, &l, &centroids).unwrap();
        let got_cmd = descriptors::compute_cmd(&centroids).unwrap();

        assert_eq!(got_ned, descriptor_oracle::ned(&e, &l), "NED trial {trial}");
        assert_eq!(got_icd, descriptor_oracle::icd(&e, &l), "ICD trial {trial}");
        assert_eq!(got_cmd, descriptor_oracle::cmd(&e, &l), "CMD trial {trial}");
        fixtures += 1;
    }
    let elapsed = start.elapsed();
    assert!(fixtures >= 200);
    assert!(
        elapsed.as_secs_f64() < 10.0,
        "criterion 1 runtime {elapsed:?} exceeds 10 s"
    );
    println!(
        "criterion 1 PASS: NED/ICD/CMD match exhaustive oracles exactly on {fixtures} fixtures (max N {max_n}) in {elapsed:?}"
    );
}

// ---------------------------------------------------------------------
// Criteria 2 and 3: map-equation optimization and identity.
// ---------------------------------------------------------------------

/// All set partitions of `n` elements, as restricted growth strings.
fn all_partitions(n: usize) -> Vec<Vec<usize>> {
    let mut result = Vec::new();
    let mut a = vec![0usize; n];
    loop {
        result.push(a.clone());
        let mut i = n - 1;
        loop {
            if i == 0 {
                return result;
            }
            let max_prefix = *a[..i].iter().max().unwrap();
            if a[i] <= max_prefix {
                a[i] += 1;
                for v in a[i + 1..].iter_mut() {
                    *v = 0;
                }
                break;
            }
            i -= 1;
        }
    }
}

fn random_connected_graph(rng: &mut ChaCha8Rng, n: usize) -> Vec<(usize, usize, f64)> {
    let mut edges: Vec<(usize, usize, f64)> = (1..n)
        .map(|v| (rng.random_range(0..v), v, rng.random_range(0.05..1.0)))
        .collect();
    let extra = rng.random_range(0..=n);
    for _ in 0..extra {
        let u = rng.random_range(0..n);
        let v = rng.random_range(0..n);
        if u != v {
            let key = (u.min(v), u.max(v));
            if !edges.iter().any(|&(a, b, _)| (a, b) == key) {
                edges.push((key.0, key.1, rng.random_range(0.05..1.0)));
            }
        }
    }
    edges
}

/// Two-level map equation computed from scratch on the entropy form
/// `L = q H(Q) + sum_m p_m H(P^m)`, a different algebraic route than the
/// implementation's plogp sum.
fn oracle_codelength(n: usize, edges: &[(usize, usize, f64)], assignment: &[usize]) -> f64 {
    let total: f64 = edges.iter().map(|(_, _, w)| w).sum();
    let mut strength = vec![0.0; n];
    for &(u, v, w) in edges {
        strength[u] += w;
        strength[v] += w;
    }
    let node_flow: Vec<f64> = strength.iter().map(|s| s / (2.0 * total)).collect();
    let modules = assignment.iter().copied().max().unwrap() + 1;
    let mut exit = vec![0.0; modules];
    for &(u, v, w) in edges {
        if assignment[u] != assignment[v] {
            exit[assignment[u]] += w / (2.0 * total);
            exit[assignment[v]] += w / (2.0 * total);
        }
    }
    let q: f64 = exit.iter().sum();
    let mut codelength = 0.0;
    if q > 0.0 {
        let index_entropy: f64 = exit
            .iter()
            .filter(|&&qm| qm > 0.0)
            .map(|&qm| {
                let p = qm / q;
                -p * p.log2()
            })
            .sum();
        codelength += q * index_entropy;
    }
    for m in 0..modules {
        let members: Vec<usize> = (0..n).filter(|&u| assignment[u] == m).collect();
        let circ = exit[m] + members.iter().map(|&u| node_flow[u]).sum::<f64>();
        if circ <= 0.0 {
            continue;
        }
        let mut entropy = 0.0;
        if exit[m] > 0.0 {
            let p = exit[m] / circ;
            entropy -= p * p.log2();
        }
        for &u in &members {
            if node_flow[u] > 0.0 {
                let p = node_flow[u] / circ;
                entropy -= p * p.log2();
            }
        }
        codelength += circ * entropy;
    }
    codelength
}

fn entropy_bits(probabilities: &[f64]) -> f64 {
    -probabilities
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.log2())
        .sum::<f64>()
}

#[test]
fn criterion_2_and_3_infomap_small_graph_optimality() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xc2);
    let graphs = 500usize;
    let mut exact_matches = 0usize;
    let mut worst_gap = 0.0f64;
    for trial in 0..graphs {
        let n = 3 + trial % 6; // 3..=8 nodes
        let edges = random_connected_graph(&mut rng, n);
        let graph = SimilarityGraph::from_edges(n, &edges);
        let flow = infomap::to_flow(&graph).unwrap();

        // Criterion 3: single-module codelength equals node-flow entropy.
        let single = Partition::from_labels(vec![Some(0); n]);
        let score = infomap::map_equation(&flow, &single).unwrap();
        let entropy = entropy_bits(flow.node_flows());
        assert!(
            (score.codelength - entropy).abs() < 1e-9,
            "trial {trial}: single-module codelength {} vs entropy {entropy}",
            score.codelength
        );

        // Exhaustive optimum over all partitions, scored both by the
        // implementation and by the independent entropy-form oracle.
        let mut best = f64::INFINITY;
        let mut best_assignment = Vec::new();
        for assignment in all_partitions(n) {
            let p = Partition::from_labels(assignment.iter().map(|&m| Some(m)).collect());
            let l = infomap::map_equation(&flow, &p).unwrap().codelength;
            let o = oracle_codelength(n, &edges, &assignment);
            assert!(
                (l - o).abs() < 1e-9,
                "trial {trial}: implementation {l} vs oracle {o}"
            );
            if l < best {
                best = l;
                best_assignment = assignment;
            }
        }

        let clustered = infomap::cluster(&flow, 42);
        let greedy = infomap::map_equation(&flow, &clustered).unwrap().codelength;
        let gap = (greedy - best) / best;
        worst_gap = worst_gap.max(gap);
        assert!(
            greedy <= best + 1e-9 || gap <= 0.02,
            "trial {trial}: greedy {greedy} vs optimum {best} (gap {gap:.4})"
        );
        let best_partition =
            Partition::from_labels(best_assignment.iter().map(|&m| Some(m)).collect());
        if clustered.equivalent_to(&best_partition) {
            exact_matches += 1;
        }
    }

    // Disconnected components always separate.
    for trial in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(0xd15c + trial);
        let sizes = [2 + trial as usize % 3, 3, 2];
        let mut edges = Vec::new();
        let mut offset = 0usize;
        let mut component_of = Vec::new();
        for (c, &size) in sizes.iter().enumerate() {
            for (u, v, w) in random_connected_graph(&mut rng, size) {
                edges.push((u + offset, v + offset, w));
            }
            component_of.extend(std::iter::repeat(c).take(size));
            offset += size;
        }
        let graph = SimilarityGraph::from_edges(offset, &edges);
        let flow = infomap::to_flow(&graph).unwrap();
        let p = infomap::cluster(&flow, 42);
        let mut cluster_component: Vec<Option<usize>> = vec![None; p.num_clusters()];
        for node in 0..offset {
            let c = p.cluster_of(node).expect("connected node is assigned");
            match cluster_component[c] {
                None => cluster_component[c] = Some(component_of[node]),
                Some(existing) => assert_eq!(
                    existing, component_of[node],
                    "trial {trial}: cluster {c} spans components"
                ),
            }
        }
    }

    let elapsed = start.elapsed();
    let match_rate = exact_matches as f64 / graphs as f64;
    assert!(
        match_rate >= 0.9,
        "only {exact_matches}/{graphs} exact optimum matches"
    );
    assert!(
        elapsed.as_secs_f64() < 60.0,
        "criterion 2 runtime {elapsed:?} exceeds 60 s"
    );
    println!(
        "criterion 2 PASS: greedy within 2% of optimum on {graphs} graphs (worst gap {worst_gap:.5}), {exact_matches} exact matches ({:.1}%), components always separate, in {elapsed:?}",
        100.0 * match_rate
    );
    println!(
        "criterion 3 PASS: single-module codelength equals node-flow entropy within 1e-9 on all {graphs} fixtures"
    );
}

// ---------------------------------------------------------------------
// Criterion 4: sub-center gradient check.
// ---------------------------------------------------------------------

fn finite_difference_gradient(
    model: &subcenter::SubcenterModel,
    e: &EmbeddingSet,
    samples: &[(usize, usize)],
    h: f64,
) -> Vec<f64> {
    let base = model.weights().to_vec();
    let mut probe = model.clone();
    let mut grad = vec![0.0; base.len()];
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += h;
        probe.set_weights(plus);
        let up = probe.loss(e, samples);
        let mut minus = base.clone();
        minus[i] -= h;
        probe.set_weights(minus);
        let down = probe.loss(e, samples);
        grad[i] = (up - down) / (2.0 * h);
    }
    grad
}

#[test]
fn criterion_4_gradient_check() {
    let start = Instant::now();
    let (e, truth) = synth::generate(&SynthSpec {
        speakers: 3,
        utterances_per_speaker: 4,
        dim: 8,
        concentration: 50.0,
        outlier_rate: 0.0,
        split_rate: 0.0,
        seed: 4,
    })
    .unwrap();
    let p = Partition::from_labels((0..e.len()).map(|n| truth.label(e.id(n))).collect());
    let samples = subcenter::training_samples(&p);
    let mut worst = 0.0f64;
    for (subcenters, margin) in [(1usize, 0.0f64), (1, 0.2), (3, 0.0), (3, 0.2)] {
        for point in 0..10u64 {
            let params = SubcenterParams {
                subcenters,
                margin,
                ..Default::default()
            };
            let model = subcenter::init_model(p.num_clusters(), e.dim(), &params, 1000 + point);
            let (_, analytic) = model.loss_grad(&e, &samples);
            let numeric = finite_difference_gradient(&model, &e, &samples, 1e-5);
            let diff: f64 = analytic
                .iter()
                .zip(&numeric)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let scale = analytic
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt()
                .max(numeric.iter().map(|v| v * v).sum::<f64>().sqrt())
                .max(1e-12);
            let relative = diff / scale;
            worst = worst.max(relative);
            assert!(
                relative < 1e-3,
                "S={subcenters} margin={margin} point={point}: relative error {relative}"
            );
        }
    }
    println!(
        "criterion 4 PASS: analytic vs central finite-difference gradients, worst relative error {worst:.2e} over S in {{1,3}}, margin in {{0, 0.2}}, 10 points each, in {:?}",
        start.elapsed()
    );
}

// ---------------------------------------------------------------------
// Criterion 5: purity discrimination on the planted fixture.
// ---------------------------------------------------------------------

/// Six tight speakers, ten members each; speakers 4 and 5 fused into one
/// pseudo class.
fn planted_impure_fixture(seed: u64) -> (EmbeddingSet, Partition, usize) {
    let (e, truth) = synth::generate(&SynthSpec {
        speakers: 6,
        utterances_per_speaker: 10,
        dim: 16,
        concentration: 400.0,
        outlier_rate: 0.0,
        split_rate: 0.0,
        seed,
    })
    .unwrap();
    let labels: Vec<Option<usize>> = (0..e.len())
        .map(|node| truth.label(e.id(node)).map(|c| c.min(4)))
        .collect();
    (e, Partition::from_labels(labels), 4)
}

#[test]
fn criterion_5_purity_discrimination() {
    let start = Instant::now();
    let seeds = 20u64;
    let tau = 0.7;
    let mut discriminated = 0usize;
    let mut exact_purges = 0usize;
    for seed in 0..seeds {
        let (e, p, impure) = planted_impure_fixture(seed);
        let outcome = subcenter::train(&e, &p, &SubcenterParams::default(), seed).unwrap();
        let report = subcenter::purity_report(&outcome.model, &e, &p).unwrap();
        let impure_dominance = report.dominance(impure);
        let pure_min = (0..report.num_classes())
            .filter(|&c| c != impure)
            .map(|c| report.dominance(c))
            .fold(f64::INFINITY, f64::min);
        if impure_dominance < pure_min {
            discriminated += 1;
        }
        let (_, purged) = subcenter::purge_impure(&p, &report, tau).unwrap();
        if purged == vec![impure] {
            exact_purges += 1;
        }
    }
    assert!(
        discriminated >= 19,
        "dominance discriminated in only {discriminated}/{seeds} seeds"
    );
    assert!(
        exact_purges >= 18,
        "exact purge in only {exact_purges}/{seeds} seeds"
    );
    println!(
        "criterion 5 PASS: dominance(impure) < dominance(pure) in {discriminated}/{seeds} seeds, exact purge at tau={tau} in {exact_purges}/{seeds}, in {:?}",
        start.elapsed()
    );
}

// ---------------------------------------------------------------------
// Criteria 6 and 9: directional quality trajectory on the desk-scale
// benchmark fixture, and the k-means comparison. One test because they
// share the expensive runs.
// ---------------------------------------------------------------------

fn write_benchmark_fixture(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let spec = SynthSpec::desk_benchmark(42);
    let (embeddings, truth) = synth::generate(&spec).unwrap();
    // Labeled subset: 1,000 utterances from 50 speakers.
    let labeled = synth::sample_labeled_subset(&truth, 50, 20, 42).unwrap();
    assert_eq!(labeled.len(), 1000);
    assert_eq!(labeled.num_classes(), 50);
    let embeddings_path = dir.join("bench.emb");
    embed::save_embeddings(&embeddings, &embeddings_path, EmbeddingFormat::Binary).unwrap();
    let labels_path = dir.join("bench.labeled.tsv");
    embed::save_labels(&labeled, &labels_path).unwrap();
    let truth_path = dir.join("bench.truth.tsv");
    embed::save_labels(&truth, &truth_path).unwrap();
    (embeddings_path, labels_path, truth_path)
}

fn benchmark_config(dir: &Path, out: &str, embeddings: &Path, labels: &Path, truth: &Path) -> PipelineConfig {
    let text = format!(
        r#"
[paths]
embeddings = "{}"
labels = "{}"
truth = "{}"
output_dir = "{}"

[graph]
k = 5
"#,
        embeddings.display(),
        labels.display(),
        truth.display(),
        dir.join(out).display()
    );
    let path = dir.join(format!("{out}.toml"));
    std::fs::write(&path, text).unwrap();
    PipelineConfig::from_file(&path).unwrap()
}

/// Seeded spherical k-means with k-means++ style init and empty-cluster
/// reseeding; assigns every sample.
fn spherical_kmeans(e: &EmbeddingSet, k: usize, seed: u64) -> Vec<usize> {
    let n = e.len();
    let dim = e.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    centers.push(e.row(rng.random_range(0..n)).to_vec());
    let mut best_sim = vec![f64::NEG_INFINITY; n];
    while centers.len() < k {
        let latest = centers.last().unwrap();
        for node in 0..n {
            best_sim[node] = best_sim[node].max(embed::dot(e.row(node), latest));
        }
        // D^2 sampling on cosine distance.
        let weights: Vec<f64> = best_sim.iter().map(|s| (1.0 - s).max(0.0).powi(2)).collect();
        let total: f64 = weights.iter().sum();
        let mut pick = rng.random_range(0.0..total.max(1e-12));
        let mut chosen = 0;
        for (node, w) in weights.iter().enumerate() {
            if pick < *w {
                chosen = node;
                break;
            }
            pick -= w;
        }
        centers.push(e.row(chosen).to_vec());
    }

    let mut assignment = vec![0usize; n];
    for _iter in 0..100 {
        let mut changed = false;
        for node in 0..n {
            let row = e.row(node);
            let best = (0..k)
                .map(|c| (c, embed::dot(row, &centers[c])))
                .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(b.0.cmp(&a.0)))
                .unwrap()
                .0;
            if assignment[node] != best {
                assignment[node] = best;
                changed = true;
            }
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for node in 0..n {
            counts[assignment[node]] += 1;
            for (acc, v) in sums[assignment[node]].iter_mut().zip(e.row(node)) {
                *acc += v;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // Reseed at the sample farthest from its center.
                let worst = (0..n)
                    .map(|node| (node, embed::dot(e.row(node), &centers[assignment[node]])))
                    .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                    .unwrap()
                    .0;
                centers[c] = e.row(worst).to_vec();
                continue;
            }
            let norm = sums[c].iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                for v in sums[c].iter_mut() {
                    *v /= norm;
                }
                centers[c] = sums[c].clone();
            }
        }
        if !changed {
            break;
        }
    }
    assignment
}

#[test]
fn criterion_6_and_9_desk_benchmark_directional_and_kmeans() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let (embeddings_path, labels_path, truth_path) = write_benchmark_fixture(dir.path());

    // Full pipeline: the post-cluster snapshot is the +NED row, and the
    // later snapshots are the cumulative ++ICD / +++subcenter / ++++CMD
    // rows (later stages never alter earlier snapshots).
    let full = benchmark_config(dir.path(), "out-full", &embeddings_path, &labels_path, &truth_path);
    let full_summary = pipeline::run(&full).unwrap();
    let row = |label: &str| {
        full_summary
            .snapshots
            .iter()
            .find(|s| s.label == label)
            .unwrap_or_else(|| panic!("missing snapshot {label}"))
            .report
            .clone()
            .expect("truth given")
    };

    // All toggles off: the Based (raw clustering) row.
    let mut based_config =
        benchmark_config(dir.path(), "out-based", &embeddings_path, &labels_path, &truth_path);
    based_config.stages = StageToggles {
        ned: false,
        icd: false,
        subcenter: false,
        cmd: false,
    };
    let based_summary = pipeline::run(&based_config).unwrap();
    let based = based_summary.snapshots[0].report.clone().unwrap();
    assert_eq!(based_summary.snapshots[0].label, "Based");

    let ned = row("+NED");
    let icd = row("++ICD");
    let pre_merge = row("+++subcenter");
    let merged = row("++++CMD");

    // (a) +NED reduces both noise rates against the baseline.
    assert!(
        ned.nr1 < based.nr1 && ned.nr2 < based.nr2,
        "(a) failed: NED ({}, {}) vs Based ({}, {})",
        ned.nr1,
        ned.nr2,
        based.nr1,
        based.nr2
    );
    // (b) ++ICD does not increase NR1.
    assert!(
        icd.nr1 <= ned.nr1,
        "(b) failed: ICD nr1 {} vs NED nr1 {}",
        icd.nr1,
        ned.nr1
    );
    // (c) ++++CMD cuts NR2 by at least 25% relative to the pre-merge stage
    // and the final NMI does not fall below the baseline's.
    assert!(
        merged.nr2 <= 0.75 * pre_merge.nr2,
        "(c) failed: merged nr2 {} vs pre-merge nr2 {}",
        merged.nr2,
        pre_merge.nr2
    );
    assert!(
        merged.nmi >= based.nmi,
        "(c) failed: final NMI {} below baseline {}",
        merged.nmi,
        based.nmi
    );

    // Criterion 9: spherical k-means with k = ground-truth speaker count
    // over the same pool, strictly worse NMI than the full pipeline.
    let embeddings = embed::load_embeddings(&embeddings_path, EmbeddingFormat::Binary).unwrap();
    let labeled = embed::load_labels(&labels_path).unwrap();
    let truth_labels = embed::load_labels(&truth_path).unwrap();
    let pool_rows: Vec<usize> = (0..embeddings.len())
        .filter(|&r| labeled.label(embeddings.id(r)).is_none())
        .collect();
    let pool = embeddings.subset(&pool_rows);
    let truth = GroundTruth::from_labels(&truth_labels, &pool).unwrap();

    let kmeans_assignment = spherical_kmeans(&pool, 200, 42);
    let kmeans_partition = Partition::from_labels(kmeans_assignment.into_iter().map(Some).collect());
    let kmeans_nmi = metrics::nmi(&kmeans_partition, &truth).unwrap();
    let pipeline_nmi = merged.nmi;
    assert!(
        kmeans_nmi < pipeline_nmi,
        "k-means NMI {kmeans_nmi} not strictly below pipeline NMI {pipeline_nmi}"
    );

    let elapsed = start.elapsed();
    assert!(
        elapsed.as_secs_f64() < 300.0,
        "criterion 6 runtime {elapsed:?} exceeds 5 min"
    );
    println!(
        "criterion 6 PASS: Based (nr1 {:.2}, nr2 {:.2}, nmi {:.4}) -> +NED ({:.2}, {:.2}) -> ++ICD nr1 {:.2} -> +++subcenter nr2 {:.2} -> ++++CMD (nr2 {:.2}, nmi {:.4}), in {elapsed:?}",
        based.nr1, based.nr2, based.nmi, ned.nr1, ned.nr2, icd.nr1, pre_merge.nr2, merged.nr2, merged.nmi
    );
    println!(
        "criterion 9 PASS: k-means (k=200) NMI {kmeans_nmi:.4} < full pipeline NMI {pipeline_nmi:.4}"
    );
}

// ---------------------------------------------------------------------
// Criterion 7: metric identities against contingency-table oracles.
// ---------------------------------------------------------------------

/// Contingency-table NMI oracle with hash maps, natural log.
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
    let entropy = |m: &HashMap<usize, f64>| -> f64 { -m.values().map(|&p| p * p.ln()).sum::<f64>() };
    let (ha, hb) = (entropy(&pa), entropy(&pb));
    if ha + hb == 0.0 {
        return 1.0;
    }
    let mut mi = 0.0;
    for (&(x, y), &pxy) in &joint {
        mi += pxy * (pxy / (pa[&x] * pb[&y])).ln();
    }
    2.0 * mi / (ha + hb)
}

#[test]
fn criterion_7_metric_identities() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xc7);
    for trial in 0..100 {
        let n = rng.random_range(4..80);
        let k_truth = rng.random_range(1..6);
        let k_pred = rng.random_range(1..6);
        let truth_labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k_truth)).collect();
        let pred_labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k_pred)).collect();

        let truth = GroundTruth::from_classes(truth_labels.clone());
        let pred = Partition::from_labels(pred_labels.iter().map(|&l| Some(l)).collect());

        // NMI(P, P) = 1 (up to the degenerate all-one-class case, defined
        // as 1 as well).
        let self_truth = GroundTruth::from_classes(pred_labels.clone());
        assert!((metrics::nmi(&pred, &self_truth).unwrap() - 1.0).abs() < 1e-12);

        // Symmetry: swap the roles of the two labelings.
        let forward = metrics::nmi(&pred, &truth).unwrap();
        let swapped = metrics::nmi(
            &Partition::from_labels(truth_labels.iter().map(|&l| Some(l)).collect()),
            &GroundTruth::from_classes(pred_labels.clone()),
        )
        .unwrap();
        assert!((forward - swapped).abs() < 1e-9, "trial {trial}: asymmetric NMI");

        // Contingency-table oracle.
        let oracle = oracle_nmi(&pred_labels, &truth_labels).clamp(0.0, 1.0);
        assert!(
            (forward - oracle).abs() < 1e-9,
            "trial {trial}: nmi {forward} vs oracle {oracle}"
        );

        // NR1 = NR2 = 0 if and only if the partition matches the truth up
        // to relabeling.
        let nr1 = metrics::nr1(&pred, &truth).unwrap();
        let nr2 = metrics::nr2(&pred, &truth).unwrap();
        let equivalent = pred.equivalent_to(&Partition::from_labels(
            truth_labels.iter().map(|&l| Some(l)).collect(),
        ));
        assert_eq!(
            nr1 == 0.0 && nr2 == 0.0,
            equivalent,
            "trial {trial}: nr1 {nr1} nr2 {nr2} equivalent {equivalent}"
        );
    }
    println!(
        "criterion 7 PASS: NMI identity/symmetry/oracle and NR1=NR2=0 relabel-equivalence on 100 random partitions, in {:?}",
        start.elapsed()
    );
}

// ---------------------------------------------------------------------
// Criterion 8: byte-identical reruns.
// ---------------------------------------------------------------------

/// FNV-1a over the sorted (name, bytes) tree.
fn tree_hash(dir: &Path) -> (u64, usize) {
    let mut names: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|entry| entry.unwrap().path())
        .collect();
    names.sort();
    let mut hash: u64 = 0xcbf29ce484222325;
    let mut update = |bytes: &[u8]| {
        for &b in bytes {
            hash ^= b as u64;
            hash = hash.wrapping_mul(0x100000001b3);
        }
    };
    for path in &names {
        update(path.file_name().unwrap().to_string_lossy().as_bytes());
        update(&std::fs::read(path).unwrap());
    }
    (hash, names.len())
}

#[test]
fn criterion_8_determinism() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        speakers: 30,
        utterances_per_speaker: 12,
        dim: 24,
        concentration: 200.0,
        outlier_rate: 0.05,
        split_rate: 0.15,
        seed: 11,
    };
    let (embeddings, truth) = synth::generate(&spec).unwrap();
    let labeled = synth::sample_labeled_subset(&truth, 10, 6, 11).unwrap();
    let embeddings_path = dir.path().join("d.emb");
    embed::save_embeddings(&embeddings, &embeddings_path, EmbeddingFormat::Binary).unwrap();
    let labels_path = dir.path().join("d.labeled.tsv");
    embed::save_labels(&labeled, &labels_path).unwrap();
    let truth_path = dir.path().join("d.truth.tsv");
    embed::save_labels(&truth, &truth_path).unwrap();

    let mut config = benchmark_config(dir.path(), "out-a", &embeddings_path, &labels_path, &truth_path);
    config.graph.k = Some(8);
    pipeline::run(&config).unwrap();
    let (hash_a, files_a) = tree_hash(&dir.path().join("out-a"));

    config.paths.output_dir = dir.path().join("out-b");
    pipeline::run(&config).unwrap();
    let (hash_b, files_b) = tree_hash(&dir.path().join("out-b"));

    assert_eq!(files_a, files_b);
    assert_eq!(
        hash_a, hash_b,
        "output trees differ between identical runs"
    );

    // Exhaustive byte comparison backs the hash.
    let mut names: Vec<String> = std::fs::read_dir(dir.path().join("out-a"))
        .unwrap()
        .map(|entry| entry.unwrap().file_name().to_string_lossy().into_owned())
        .collect::<BTreeSet<String>>()
        .into_iter()
        .collect();
    names.sort();
    for name in names {
        let a = std::fs::read(dir.path().join("out-a").join(&name)).unwrap();
        let b = std::fs::read(dir.path().join("out-b").join(&name)).unwrap();
        assert_eq!(a, b, "file {name} differs");
    }
    println!(
        "criterion 8 PASS: identical config and seed produce byte-identical output trees ({files_a} files, content hash {hash_a:016x}), in {:?}",
        start.elapsed()
    );
}
