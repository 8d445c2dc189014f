//! End-to-end orchestration: descriptors, graph construction with NED
//! pruning, map-equation clustering, ICD cleaning, sub-center purification
//! and progressive merging, with a partition snapshot and quality report
//! after every enabled stage.
//!
//! Stage toggles ablate the pipeline; snapshot labels follow the canonical
//! row names `Based`, `+NED`, `++ICD`, `+++subcenter`, `++++CMD`. All
//! randomness stems from one recorded master seed, and reruns with the
//! same config produce byte-identical output trees.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::descriptors::{self, Descriptors};
use crate::embed::{self, EmbeddingFormat, EmbeddingSet};
use crate::error::{Error, Result};
use crate::graph::{self, ElbowSelection};
use crate::infomap;
use crate::merge::{self, MergeConfig};
use crate::metrics::{self, GroundTruth, QualityReport};
use crate::partition::{self, Partition};
use crate::refine;
use crate::subcenter::{self, SubcenterParams};

/// Default elbow candidate ks, clipped to the pool size.
pub const DEFAULT_K_CANDIDATES: [usize; 5] = [5, 10, 20, 40, 80];

/// Pipeline stages, in execution order. Each maps to a distinct CLI exit
/// code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Load,
    Descriptors,
    Graph,
    Cluster,
    Refine,
    Subcenter,
    Merge,
    Emit,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Load => "load",
            Stage::Descriptors => "descriptors",
            Stage::Graph => "graph",
            Stage::Cluster => "cluster",
            Stage::Refine => "refine",
            Stage::Subcenter => "subcenter",
            Stage::Merge => "merge",
            Stage::Emit => "emit",
        }
    }

    pub fn exit_code(self) -> i32 {
        match self {
            Stage::Load => 3,
            Stage::Descriptors => 4,
            Stage::Graph => 5,
            Stage::Cluster => 6,
            Stage::Refine => 7,
            Stage::Subcenter => 8,
            Stage::Merge => 9,
            Stage::Emit => 10,
        }
    }
}

/// A pipeline failure, tagged with the stage that raised it.
#[derive(Debug)]
pub struct PipelineError {
    pub stage: Stage,
    pub source: Error,
}

impl fmt::Display for PipelineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage {} failed: {}", self.stage.name(), self.source)
    }
}

impl std::error::Error for PipelineError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.source)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub embeddings: PathBuf,
    #[serde(default = "default_format")]
    pub format: EmbeddingFormat,
    pub labels: PathBuf,
    #[serde(default)]
    pub truth: Option<PathBuf>,
    #[serde(default)]
    pub durations: Option<PathBuf>,
    #[serde(default = "default_min_duration")]
    pub min_duration: f64,
    pub output_dir: PathBuf,
}

fn default_format() -> EmbeddingFormat {
    EmbeddingFormat::Binary
}

fn default_min_duration() -> f64 {
    1.0
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoolConfig {
    /// When false (the default) the labeled-subset utterances are excluded
    /// from the unlabeled pool.
    pub include_labeled: bool,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphConfig {
    /// Fixed k; omit for elbow selection.
    pub k: Option<usize>,
    pub candidates: Vec<usize>,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig {
            k: None,
            candidates: DEFAULT_K_CANDIDATES.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterConfig {
    /// Master seed for the whole run.
    pub seed: u64,
    pub trials: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            seed: 42,
            trials: infomap::DEFAULT_TRIALS,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineConfig {
    pub min_size: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig { min_size: 4 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SubcenterStageConfig {
    pub subcenters: usize,
    pub margin: f64,
    pub scale: f64,
    pub tau: f64,
    pub learning_rate: f64,
    pub max_epochs: usize,
}

impl Default for SubcenterStageConfig {
    fn default() -> Self {
        let p = SubcenterParams::default();
        SubcenterStageConfig {
            subcenters: p.subcenters,
            margin: p.margin,
            scale: p.scale,
            tau: 0.7,
            learning_rate: p.learning_rate,
            max_epochs: p.max_epochs,
        }
    }
}

impl SubcenterStageConfig {
    fn params(&self) -> SubcenterParams {
        SubcenterParams {
            subcenters: self.subcenters,
            margin: self.margin,
            scale: self.scale,
            learning_rate: self.learning_rate,
            max_epochs: self.max_epochs,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MergeStageConfig {
    pub steps: usize,
    /// Explicit start threshold; omit for the maximum observed
    /// inter-centroid similarity.
    pub start: Option<f64>,
}

impl Default for MergeStageConfig {
    fn default() -> Self {
        MergeStageConfig {
            steps: 10,
            start: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageToggles {
    pub ned: bool,
    pub icd: bool,
    pub subcenter: bool,
    pub cmd: bool,
}

impl Default for StageToggles {
    fn default() -> Self {
        StageToggles {
            ned: true,
            icd: true,
            subcenter: true,
            cmd: true,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub rounds: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { rounds: 1 }
    }
}

/// Full pipeline configuration; see the README for the file grammar.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: PathsConfig,
    #[serde(default)]
    pub pool: PoolConfig,
    #[serde(default)]
    pub graph: GraphConfig,
    #[serde(default)]
    pub cluster: ClusterConfig,
    #[serde(default)]
    pub refine: RefineConfig,
    #[serde(default)]
    pub subcenter: SubcenterStageConfig,
    #[serde(default)]
    pub merge: MergeStageConfig,
    #[serde(default)]
    pub stages: StageToggles,
    #[serde(default)]
    pub run: RunConfig,
}

impl PipelineConfig {
    pub fn from_file(path: &Path) -> Result<PipelineConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// Canonical snapshot labels matching the ablation row names.
pub const LABEL_BASED: &str = "Based";
pub const LABEL_NED: &str = "+NED";
pub const LABEL_ICD: &str = "++ICD";
pub const LABEL_SUBCENTER: &str = "+++subcenter";
pub const LABEL_CMD: &str = "++++CMD";

fn slug(label: &str) -> &'static str {
    match label {
        LABEL_BASED => "based",
        LABEL_NED => "ned",
        LABEL_ICD => "icd",
        LABEL_SUBCENTER => "subcenter",
        LABEL_CMD => "cmd",
        _ => "stage",
    }
}

/// One per-stage snapshot: the partition file on disk and, when ground
/// truth is available, its quality report.
#[derive(Debug, Clone)]
pub struct StageSnapshot {
    pub label: String,
    pub partition_file: PathBuf,
    pub clusters: usize,
    pub non_removed: usize,
    pub report: Option<QualityReport>,
}

/// Everything a finished run reports back.
#[derive(Debug)]
pub struct RunSummary {
    pub seed: u64,
    pub descriptors: Descriptors,
    pub chosen_k: usize,
    pub elbow: Option<ElbowSelection>,
    pub pool_size: usize,
    pub snapshots: Vec<StageSnapshot>,
    pub labels_file: PathBuf,
    pub rejects_file: PathBuf,
    pub final_partition: Partition,
}

struct StageRunner<'a> {
    config: &'a PipelineConfig,
    pool: &'a EmbeddingSet,
    truth: Option<&'a GroundTruth>,
    out: &'a Path,
    round_prefix: String,
    snapshots: Vec<StageSnapshot>,
    stage_index: usize,
}

impl<'a> StageRunner<'a> {
    /// Writes the partition TSV and report files for one stage and fills
    /// in the removal-stage attribution for newly removed nodes.
    fn snapshot(
        &mut self,
        label: &str,
        partition: &Partition,
        removed_at: &mut [Option<&'static str>],
        stage_label: &'static str,
    ) -> Result<()> {
        for (node, slot) in removed_at.iter_mut().enumerate() {
            if partition.is_removed(node) && slot.is_none() {
                *slot = Some(stage_label);
            }
        }
        self.stage_index += 1;
        let base = format!("{}stage{}-{}", self.round_prefix, self.stage_index, slug(label));
        let partition_file = self.out.join(format!("{base}.partition.tsv"));
        partition::save_partition(partition, self.pool, &partition_file)?;

        let report = match self.truth {
            Some(truth) if partition.non_removed() > 0 => {
                Some(metrics::report(partition, truth)?)
            }
            _ => None,
        };
        if self.truth.is_some() {
            let report_file = self.out.join(format!("{base}.report.txt"));
            let mut text = format!("stage: {label}\n");
            match &report {
                Some(r) => {
                    text.push_str(&format!("{}\n{}\n{r}\n", QualityReport::tsv_header(), r.tsv_line()));
                }
                None => text.push_str("no non-removed samples; metrics undefined\n"),
            }
            fs::write(&report_file, text).map_err(|e| Error::io(&report_file, e))?;
        }
        self.snapshots.push(StageSnapshot {
            label: label.to_string(),
            partition_file,
            clusters: partition.num_clusters(),
            non_removed: partition.non_removed(),
            report,
        });
        let _ = self.config;
        Ok(())
    }
}

fn err_at(stage: Stage) -> impl FnOnce(Error) -> PipelineError {
    move |source| PipelineError { stage, source }
}

/// Runs the configured pipeline, writing every artifact under
/// `paths.output_dir`. Any stage error aborts with the stage name; files
/// already written (partial snapshots) are retained.
pub fn run(config: &PipelineConfig) -> std::result::Result<RunSummary, PipelineError> {
    let out = &config.paths.output_dir;
    fs::create_dir_all(out)
        .map_err(|e| Error::io(out, e))
        .map_err(err_at(Stage::Load))?;

    // Load everything.
    let embeddings = embed::load_embeddings_filtered(
        &config.paths.embeddings,
        config.paths.format,
        config.paths.durations.as_deref(),
        config.paths.min_duration,
    )
    .map_err(err_at(Stage::Load))?;
    let labels = embed::load_labels(&config.paths.labels).map_err(err_at(Stage::Load))?;
    labels
        .validate_against(&embeddings)
        .map_err(err_at(Stage::Load))?;

    let pool_rows: Vec<usize> = (0..embeddings.len())
        .filter(|&row| config.pool.include_labeled || labels.label(embeddings.id(row)).is_none())
        .collect();
    if pool_rows.is_empty() {
        return Err(err_at(Stage::Load)(Error::Config(
            "unlabeled pool is empty; set pool.include_labeled = true?".into(),
        )));
    }
    let pool = embeddings.subset(&pool_rows);

    let truth = match &config.paths.truth {
        Some(path) => {
            let truth_labels = embed::load_labels(path).map_err(err_at(Stage::Load))?;
            Some(GroundTruth::from_labels(&truth_labels, &pool).map_err(err_at(Stage::Load))?)
        }
        None => None,
    };

    // Descriptors from the labeled subset over the full embedding set.
    let descriptors = descriptors::compute_all(&embeddings, &labels)
        .map_err(err_at(Stage::Descriptors))?;
    descriptors::write_report(&descriptors, &out.join("descriptors.txt"))
        .map_err(err_at(Stage::Descriptors))?;

    let seed = config.cluster.seed;
    let rounds = config.run.rounds.max(1);
    let mut previous: Option<Partition> = None;
    let mut all_snapshots = Vec::new();
    let mut chosen_k = 0usize;
    let mut elbow: Option<ElbowSelection> = None;
    let mut final_partition = Partition::from_labels(vec![None; pool.len()]);
    let mut removed_at: Vec<Option<&'static str>> = vec![None; pool.len()];

    for round in 1..=rounds {
        removed_at.fill(None);
        let mut runner = StageRunner {
            config,
            pool: &pool,
            truth: truth.as_ref(),
            out,
            round_prefix: if rounds > 1 {
                format!("round{round}-")
            } else {
                String::new()
            },
            snapshots: Vec::new(),
            stage_index: 0,
        };

        // Graph construction and NED pruning.
        let k = match config.graph.k {
            Some(k) => k,
            None => {
                let mut candidates: Vec<usize> = config
                    .graph
                    .candidates
                    .iter()
                    .map(|&c| c.min(pool.len().saturating_sub(1)))
                    .collect();
                candidates.dedup();
                let selection =
                    graph::elbow_select_k(&pool, &candidates).map_err(err_at(Stage::Graph))?;
                let k = selection.k;
                elbow = Some(selection);
                k
            }
        };
        chosen_k = k;
        let mut similarity_graph = graph::build_knn(&pool, k).map_err(err_at(Stage::Graph))?;
        if config.stages.ned {
            let (pruned, _removed) = graph::prune_by_ned(&similarity_graph, descriptors.ned);
            similarity_graph = pruned;
        }
        let cluster_label: &'static str = if config.stages.ned { LABEL_NED } else { LABEL_BASED };

        // Map-equation clustering; a graph with no remaining weight leaves
        // every node isolated and removed.
        let mut current = if similarity_graph.total_weight() > 0.0 {
            let flow = infomap::to_flow(&similarity_graph).map_err(err_at(Stage::Cluster))?;
            infomap::cluster_with_init(&flow, seed, config.cluster.trials, previous.as_ref())
        } else {
            Partition::from_labels(vec![None; pool.len()])
        };
        runner
            .snapshot(cluster_label, &current, &mut removed_at, cluster_label)
            .map_err(err_at(Stage::Cluster))?;

        // ICD cleaning and small-cluster removal.
        if config.stages.icd {
            let (cleaned, _) = refine::clean_by_icd(&pool, &current, descriptors.icd);
            let (filtered, _) = refine::drop_small_clusters(&cleaned, config.refine.min_size);
            current = filtered;
            runner
                .snapshot(LABEL_ICD, &current, &mut removed_at, LABEL_ICD)
                .map_err(err_at(Stage::Refine))?;
        }

        // Sub-center purification.
        if config.stages.subcenter {
            let params = config.subcenter.params();
            let outcome = subcenter::train(&pool, &current, &params, seed ^ 0x5ce0_c4a5)
                .map_err(err_at(Stage::Subcenter))?;
            let purity = subcenter::purity_report(&outcome.model, &pool, &current)
                .map_err(err_at(Stage::Subcenter))?;
            write_purity_report(
                &purity,
                &out.join(format!("{}subcenter-purity.tsv", runner.round_prefix)),
            )
            .map_err(err_at(Stage::Subcenter))?;
            subcenter::save_model(
                &outcome.model,
                &out.join(format!("{}subcenter-model.scw1", runner.round_prefix)),
            )
            .map_err(err_at(Stage::Subcenter))?;
            let (purged, _) = subcenter::purge_impure(&current, &purity, config.subcenter.tau)
                .map_err(err_at(Stage::Subcenter))?;
            current = purged;
            runner
                .snapshot(LABEL_SUBCENTER, &current, &mut removed_at, LABEL_SUBCENTER)
                .map_err(err_at(Stage::Subcenter))?;
        }

        // Progressive merging down to CMD.
        if config.stages.cmd {
            let merge_config = MergeConfig {
                steps: config.merge.steps,
                start: config.merge.start,
            };
            let (merged, log) =
                merge::progressive_merge(&pool, &current, descriptors.cmd, &merge_config)
                    .map_err(err_at(Stage::Merge))?;
            current = merged;
            write_merge_log(
                &log,
                &out.join(format!("{}merge-log.tsv", runner.round_prefix)),
            )
            .map_err(err_at(Stage::Merge))?;
            runner
                .snapshot(LABEL_CMD, &current, &mut removed_at, LABEL_CMD)
                .map_err(err_at(Stage::Merge))?;
        }

        all_snapshots.extend(runner.snapshots);
        final_partition = current.clone();
        previous = Some(current);
    }

    // Final pseudo-label emission.
    let labels_file = out.join("labels.tsv");
    let rejects_file = out.join("rejects.tsv");
    emit_labels(
        &final_partition,
        &pool,
        &removed_at,
        &labels_file,
        &rejects_file,
    )
    .map_err(err_at(Stage::Emit))?;

    let summary = RunSummary {
        seed,
        descriptors,
        chosen_k,
        elbow,
        pool_size: pool.len(),
        snapshots: all_snapshots,
        labels_file,
        rejects_file,
        final_partition,
    };
    write_summary(&summary, &out.join("summary.txt")).map_err(err_at(Stage::Emit))?;
    Ok(summary)
}

/// Writes the final pseudo-labels plus a rejects file attributing each
/// removed node to the stage that removed it.
pub fn emit_labels(
    partition: &Partition,
    pool: &EmbeddingSet,
    removed_at: &[Option<&'static str>],
    labels_path: &Path,
    rejects_path: &Path,
) -> Result<()> {
    partition::save_partition(partition, pool, labels_path)?;
    let mut rejects: Vec<(String, &str)> = (0..partition.len())
        .filter(|&node| partition.is_removed(node))
        .map(|node| {
            (
                pool.id(node).to_string(),
                removed_at[node].unwrap_or("unknown"),
            )
        })
        .collect();
    rejects.sort();
    let file = fs::File::create(rejects_path).map_err(|e| Error::io(rejects_path, e))?;
    let mut w = BufWriter::new(file);
    for (id, stage) in rejects {
        writeln!(w, "{id}\t{stage}").map_err(|e| Error::io(rejects_path, e))?;
    }
    w.flush().map_err(|e| Error::io(rejects_path, e))
}

fn write_merge_log(log: &[merge::MergeEvent], path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "threshold\tkept\tabsorbed\tsimilarity").map_err(|e| Error::io(path, e))?;
    for event in log {
        writeln!(
            w,
            "{}\t{}\t{}\t{}",
            event.threshold, event.kept, event.absorbed, event.similarity
        )
        .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_purity_report(report: &subcenter::PurityReport, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "class\tdominance\thistogram").map_err(|e| Error::io(path, e))?;
    for class in 0..report.num_classes() {
        let histogram: Vec<String> = report
            .histogram(class)
            .iter()
            .map(|c| c.to_string())
            .collect();
        writeln!(
            w,
            "{class}\t{}\t{}",
            report.dominance(class),
            histogram.join(",")
        )
        .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_summary(summary: &RunSummary, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut emit = || -> std::io::Result<()> {
        writeln!(w, "seed={}", summary.seed)?;
        writeln!(w, "pool={}", summary.pool_size)?;
        writeln!(
            w,
            "ned={}\nicd={}\ncmd={}",
            summary.descriptors.ned, summary.descriptors.icd, summary.descriptors.cmd
        )?;
        writeln!(w, "k={}", summary.chosen_k)?;
        if let Some(elbow) = &summary.elbow {
            let curve: Vec<String> = elbow
                .curve
                .iter()
                .map(|(k, y)| format!("{k}:{y}"))
                .collect();
            writeln!(
                w,
                "elbow_curve={}{}",
                curve.join(","),
                if elbow.degenerate { " (degenerate)" } else { "" }
            )?;
        }
        for snapshot in &summary.snapshots {
            write!(
                w,
                "stage {}: clusters={} assigned={}",
                snapshot.label, snapshot.clusters, snapshot.non_removed
            )?;
            match &snapshot.report {
                Some(r) => writeln!(
                    w,
                    " nr1={} nr2={} nmi={} gt_covered={}",
                    r.nr1, r.nr2, r.nmi, r.gt_classes_covered
                )?,
                None => writeln!(w)?,
            }
        }
        Ok(())
    };
    emit().map_err(|e| Error::io(path, e))
}
