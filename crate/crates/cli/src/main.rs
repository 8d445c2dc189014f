//! `mopc`: multi-objective progressive clustering for pseudo-labels.
//!
//! `mopc run --config <file>` drives the whole pipeline; the other
//! subcommands run individual stages on intermediate files. Exit code 0 on
//! success, 2 on usage/config errors, and a distinct code per failed stage
//! (load 3, descriptors 4, graph 5, cluster 6, refine 7, subcenter 8,
//! merge 9, emit 10).

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use mopc_core::descriptors::{self, Descriptors};
use mopc_core::embed::{self, EmbeddingFormat, EmbeddingSet};
use mopc_core::error::Error;
use mopc_core::graph;
use mopc_core::infomap;
use mopc_core::merge::{self, MergeConfig};
use mopc_core::metrics::{self, GroundTruth, QualityReport};
use mopc_core::partition::{self, Partition};
use mopc_core::pipeline::{self, PipelineConfig, PipelineError, Stage};
use mopc_core::refine;
use mopc_core::subcenter::{self, SubcenterParams};
use mopc_core::synth::{self, SynthSpec};

#[derive(Parser)]
#[command(name = "mopc", version, about = "Pseudo-label assignment and denoising for embedding sets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// A threshold given literally or taken from a descriptor report.
#[derive(Clone, Copy)]
enum Threshold {
    Value(f64),
    FromDescriptors,
}

impl FromStr for Threshold {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "from-descriptors" {
            Ok(Threshold::FromDescriptors)
        } else {
            s.parse::<f64>()
                .map(Threshold::Value)
                .map_err(|e| format!("expected a float or `from-descriptors`: {e}"))
        }
    }
}

#[derive(Clone, Copy)]
enum KChoice {
    Auto,
    Fixed(usize),
}

impl FromStr for KChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "auto" {
            Ok(KChoice::Auto)
        } else {
            s.parse::<usize>()
                .map(KChoice::Fixed)
                .map_err(|e| format!("expected an integer or `auto`: {e}"))
        }
    }
}

#[derive(Clone, Copy)]
enum StartChoice {
    Auto,
    Value(f64),
}

impl FromStr for StartChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "auto" {
            Ok(StartChoice::Auto)
        } else {
            s.parse::<f64>()
                .map(StartChoice::Value)
                .map_err(|e| format!("expected a float or `auto`: {e}"))
        }
    }
}

#[derive(Args)]
struct EmbeddingArgs {
    /// Embedding file (EMB1 binary with `<path>.ids` sidecar, or CSV).
    #[arg(long)]
    embeddings: PathBuf,
    /// Embedding file format.
    #[arg(long, default_value = "binary")]
    format: String,
}

impl EmbeddingArgs {
    fn load(&self) -> Result<EmbeddingSet, PipelineError> {
        let format: EmbeddingFormat = self.format.parse().map_err(at(Stage::Load))?;
        embed::load_embeddings(&self.embeddings, format).map_err(at(Stage::Load))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline from a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's round count (re-enters clustering with a
        /// warm start on rounds after the first).
        #[arg(long)]
        rounds: Option<usize>,
    },
    /// Generate a synthetic labeled embedding set.
    Synth {
        /// TOML file with the generator parameters (speakers,
        /// utterances_per_speaker, dim, concentration, outlier_rate,
        /// split_rate, seed).
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        emit_embeddings: PathBuf,
        #[arg(long)]
        emit_truth: PathBuf,
        /// Also sample a labeled subset into this file.
        #[arg(long)]
        emit_labeled: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        labeled_speakers: usize,
        #[arg(long, default_value_t = 20)]
        labeled_per_speaker: usize,
    },
    /// Compute NED, ICD and CMD from a labeled subset.
    ExtractDescriptors {
        #[command(flatten)]
        embeddings: EmbeddingArgs,
        #[arg(long)]
        labels: PathBuf,
        /// Report file (`ned=`, `icd=`, `cmd=` lines).
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the cosine KNN graph, optionally pruning by NED.
    BuildGraph {
        #[command(flatten)]
        embeddings: EmbeddingArgs,
        /// Neighbor count, or `auto` for knee selection.
        #[arg(long)]
        k: KChoice,
        /// Candidate ks for `auto`.
        #[arg(long, value_delimiter = ',', default_values_t = vec![5usize, 10, 20, 40, 80])]
        candidates: Vec<usize>,
        /// NED threshold (float or `from-descriptors`).
        #[arg(long)]
        ned: Option<Threshold>,
        /// Descriptor report backing `from-descriptors`.
        #[arg(long)]
        descriptors: Option<PathBuf>,
        #[arg(long)]
        emit: PathBuf,
    },
    /// Cluster a graph file with the map-equation optimizer.
    Cluster {
        #[arg(long)]
        graph: PathBuf,
        #[command(flatten)]
        embeddings: EmbeddingArgs,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Deterministic restarts.
        #[arg(long, default_value_t = infomap::DEFAULT_TRIALS)]
        trials: usize,
        #[arg(long)]
        emit: PathBuf,
    },
    /// Remove low-similarity members and deficient clusters.
    Clean {
        #[command(flatten)]
        embeddings: EmbeddingArgs,
        #[arg(long)]
        partition: PathBuf,
        /// ICD threshold (float or `from-descriptors`).
        #[arg(long)]
        icd: Threshold,
        #[arg(long)]
        descriptors: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        min_size: usize,
        #[arg(long)]
        emit: PathBuf,
    },
    /// Train the sub-center classifier and purge impure classes.
    SubcenterPurify {
        #[command(flatten)]
        embeddings: EmbeddingArgs,
        #[arg(long)]
        partition: PathBuf,
        #[arg(long, default_value_t = 3)]
        subcenters: usize,
        #[arg(long, default_value_t = 0.2)]
        margin: f64,
        #[arg(long, default_value_t = 32.0)]
        scale: f64,
        #[arg(long, default_value_t = 0.7)]
        tau: f64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        max_epochs: usize,
        #[arg(long)]
        emit: PathBuf,
        /// Model checkpoint (SCW1 binary).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Per-class dominance histogram TSV.
        #[arg(long)]
        purity_report: Option<PathBuf>,
    },
    /// Progressively merge mutual-nearest-neighbor classes down to CMD.
    Merge {
        #[command(flatten)]
        embeddings: EmbeddingArgs,
        #[arg(long)]
        partition: PathBuf,
        /// CMD threshold (float or `from-descriptors`).
        #[arg(long)]
        cmd: Threshold,
        #[arg(long)]
        descriptors: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        steps: usize,
        /// First threshold of the schedule, or `auto` for the maximum
        /// observed inter-centroid similarity.
        #[arg(long, default_value = "auto")]
        start: StartChoice,
        /// Merge log TSV.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        emit: PathBuf,
    },
    /// Score a partition against ground-truth labels.
    Evaluate {
        #[arg(long)]
        partition: PathBuf,
        #[arg(long)]
        truth: PathBuf,
    },
    /// Write final pseudo-labels plus a rejects file.
    Label {
        #[command(flatten)]
        embeddings: EmbeddingArgs,
        #[arg(long)]
        partition: PathBuf,
        #[arg(long)]
        out_labels: PathBuf,
        #[arg(long)]
        out_rejects: PathBuf,
    },
}

fn at(stage: Stage) -> impl FnOnce(Error) -> PipelineError {
    move |source| PipelineError { stage, source }
}

fn resolve_threshold(
    value: Threshold,
    descriptors_path: Option<&std::path::Path>,
    pick: fn(&Descriptors) -> f64,
    stage: Stage,
) -> Result<f64, PipelineError> {
    match value {
        Threshold::Value(v) => Ok(v),
        Threshold::FromDescriptors => {
            let path = descriptors_path.ok_or_else(|| PipelineError {
                stage,
                source: Error::Config(
                    "`from-descriptors` needs --descriptors <report-file>".into(),
                ),
            })?;
            Ok(pick(&descriptors::read_report(path).map_err(at(stage))?))
        }
    }
}

fn load_partition_for(
    embeddings: &EmbeddingSet,
    path: &std::path::Path,
    stage: Stage,
) -> Result<Partition, PipelineError> {
    partition::load_partition(path, embeddings).map_err(at(stage))
}

fn print_report(report: &QualityReport) {
    println!("{}", QualityReport::tsv_header());
    println!("{}", report.tsv_line());
    println!("{report}");
}

fn run_command(command: Command) -> Result<(), PipelineError> {
    match command {
        Command::Run { config, rounds } => {
            let mut config = PipelineConfig::from_file(&config).map_err(at(Stage::Load))?;
            if let Some(rounds) = rounds {
                config.run.rounds = rounds;
            }
            let summary = pipeline::run(&config)?;
            println!("seed={}", summary.seed);
            println!(
                "descriptors: ned={} icd={} cmd={}",
                summary.descriptors.ned, summary.descriptors.icd, summary.descriptors.cmd
            );
            match &summary.elbow {
                Some(elbow) => println!(
                    "k={} (knee{})",
                    summary.chosen_k,
                    if elbow.degenerate { ", degenerate curve" } else { "" }
                ),
                None => println!("k={}", summary.chosen_k),
            }
            for snapshot in &summary.snapshots {
                print!(
                    "{:<14} clusters={:<6} assigned={:<6}",
                    snapshot.label, snapshot.clusters, snapshot.non_removed
                );
                match &snapshot.report {
                    Some(r) => println!(
                        " nr1={:.2} nr2={:.2} nmi={:.4} gt_covered={}",
                        r.nr1, r.nr2, r.nmi, r.gt_classes_covered
                    ),
                    None => println!(),
                }
            }
            println!("labels: {}", summary.labels_file.display());
            println!("rejects: {}", summary.rejects_file.display());
            Ok(())
        }

        Command::Synth {
            spec,
            emit_embeddings,
            emit_truth,
            emit_labeled,
            labeled_speakers,
            labeled_per_speaker,
        } => {
            let text = fs::read_to_string(&spec)
                .map_err(|e| Error::io(&spec, e))
                .map_err(at(Stage::Load))?;
            let spec: SynthSpec = toml::from_str(&text)
                .map_err(|e| Error::Config(format!("bad synth spec: {e}")))
                .map_err(at(Stage::Load))?;
            let (embeddings, truth) = synth::generate(&spec).map_err(at(Stage::Load))?;
            embed::save_embeddings(&embeddings, &emit_embeddings, EmbeddingFormat::Binary)
                .map_err(at(Stage::Emit))?;
            embed::save_labels(&truth, &emit_truth).map_err(at(Stage::Emit))?;
            println!(
                "generated {} embeddings ({} speakers, dim {})",
                embeddings.len(),
                spec.speakers,
                spec.dim
            );
            if let Some(path) = emit_labeled {
                let labeled =
                    synth::sample_labeled_subset(&truth, labeled_speakers, labeled_per_speaker, spec.seed)
                        .map_err(at(Stage::Load))?;
                embed::save_labels(&labeled, &path).map_err(at(Stage::Emit))?;
                println!(
                    "labeled subset: {} utterances from {} speakers",
                    labeled.len(),
                    labeled.num_classes()
                );
            }
            Ok(())
        }

        Command::ExtractDescriptors {
            embeddings,
            labels,
            out,
        } => {
            let embeddings = embeddings.load()?;
            let labels = embed::load_labels(&labels).map_err(at(Stage::Load))?;
            labels
                .validate_against(&embeddings)
                .map_err(at(Stage::Load))?;
            let descriptors =
                descriptors::compute_all(&embeddings, &labels).map_err(at(Stage::Descriptors))?;
            descriptors::write_report(&descriptors, &out).map_err(at(Stage::Descriptors))?;
            println!("ned={}", descriptors.ned);
            println!("icd={}", descriptors.icd);
            println!("cmd={}", descriptors.cmd);
            Ok(())
        }

        Command::BuildGraph {
            embeddings,
            k,
            candidates,
            ned,
            descriptors: descriptors_path,
            emit,
        } => {
            let embeddings = embeddings.load()?;
            let k = match k {
                KChoice::Fixed(k) => k,
                KChoice::Auto => {
                    let selection = graph::elbow_select_k(&embeddings, &candidates)
                        .map_err(at(Stage::Graph))?;
                    let curve: Vec<String> = selection
                        .curve
                        .iter()
                        .map(|(k, y)| format!("{k}:{y:.4}"))
                        .collect();
                    println!(
                        "knee k={}{} curve=[{}]",
                        selection.k,
                        if selection.degenerate { " (degenerate)" } else { "" },
                        curve.join(", ")
                    );
                    selection.k
                }
            };
            let mut similarity_graph =
                graph::build_knn(&embeddings, k).map_err(at(Stage::Graph))?;
            if let Some(threshold) = ned {
                let ned = resolve_threshold(
                    threshold,
                    descriptors_path.as_deref(),
                    |d| d.ned,
                    Stage::Graph,
                )?;
                let (pruned, removed) = graph::prune_by_ned(&similarity_graph, ned);
                println!(
                    "pruned {removed} edges at ned={ned}; {} nodes isolated",
                    pruned.isolated_nodes().len()
                );
                similarity_graph = pruned;
            }
            graph::save_graph(&similarity_graph, k, &emit).map_err(at(Stage::Graph))?;
            println!(
                "graph: n={} edges={} (k={k})",
                similarity_graph.node_count(),
                similarity_graph.edge_count()
            );
            Ok(())
        }

        Command::Cluster {
            graph: graph_path,
            embeddings,
            seed,
            trials,
            emit,
        } => {
            let embeddings = embeddings.load()?;
            let (similarity_graph, _) = graph::load_graph(&graph_path).map_err(at(Stage::Load))?;
            if similarity_graph.node_count() != embeddings.len() {
                return Err(PipelineError {
                    stage: Stage::Cluster,
                    source: Error::PartitionSizeMismatch {
                        partition: embeddings.len(),
                        graph: similarity_graph.node_count(),
                    },
                });
            }
            let flow = infomap::to_flow(&similarity_graph).map_err(at(Stage::Cluster))?;
            let partition = infomap::cluster_trials(&flow, seed, trials);
            partition::save_partition(&partition, &embeddings, &emit).map_err(at(Stage::Emit))?;
            println!(
                "clusters={} assigned={} removed={}",
                partition.num_clusters(),
                partition.non_removed(),
                partition.len() - partition.non_removed()
            );
            Ok(())
        }

        Command::Clean {
            embeddings,
            partition: partition_path,
            icd,
            descriptors: descriptors_path,
            min_size,
            emit,
        } => {
            let embeddings = embeddings.load()?;
            let partition = load_partition_for(&embeddings, &partition_path, Stage::Load)?;
            let icd = resolve_threshold(icd, descriptors_path.as_deref(), |d| d.icd, Stage::Refine)?;
            let (cleaned, removed) = refine::clean_by_icd(&embeddings, &partition, icd);
            let (filtered, dropped) = refine::drop_small_clusters(&cleaned, min_size);
            partition::save_partition(&filtered, &embeddings, &emit).map_err(at(Stage::Emit))?;
            println!(
                "removed {removed} members at icd={icd}; dropped {dropped} clusters under min_size={min_size}; clusters={} assigned={}",
                filtered.num_clusters(),
                filtered.non_removed()
            );
            Ok(())
        }

        Command::SubcenterPurify {
            embeddings,
            partition: partition_path,
            subcenters,
            margin,
            scale,
            tau,
            seed,
            max_epochs,
            emit,
            checkpoint,
            purity_report,
        } => {
            let embeddings = embeddings.load()?;
            let partition = load_partition_for(&embeddings, &partition_path, Stage::Load)?;
            let params = SubcenterParams {
                subcenters,
                margin,
                scale,
                max_epochs,
                ..Default::default()
            };
            let outcome =
                subcenter::train(&embeddings, &partition, &params, seed).map_err(at(Stage::Subcenter))?;
            let report = subcenter::purity_report(&outcome.model, &embeddings, &partition)
                .map_err(at(Stage::Subcenter))?;
            if let Some(path) = checkpoint {
                subcenter::save_model(&outcome.model, &path).map_err(at(Stage::Subcenter))?;
            }
            if let Some(path) = purity_report {
                let file = fs::File::create(&path)
                    .map_err(|e| Error::io(&path, e))
                    .map_err(at(Stage::Subcenter))?;
                let mut w = BufWriter::new(file);
                let write = |w: &mut BufWriter<fs::File>| -> std::io::Result<()> {
                    writeln!(w, "class\tdominance\thistogram")?;
                    for class in 0..report.num_classes() {
                        let histogram: Vec<String> = report
                            .histogram(class)
                            .iter()
                            .map(|c| c.to_string())
                            .collect();
                        writeln!(w, "{class}\t{}\t{}", report.dominance(class), histogram.join(","))?;
                    }
                    w.flush()
                };
                write(&mut w)
                    .map_err(|e| Error::io(&path, e))
                    .map_err(at(Stage::Subcenter))?;
            }
            let (purged_partition, purged) =
                subcenter::purge_impure(&partition, &report, tau).map_err(at(Stage::Subcenter))?;
            partition::save_partition(&purged_partition, &embeddings, &emit)
                .map_err(at(Stage::Emit))?;
            println!(
                "trained {} epochs (final loss {:.6}); purged {} classes at tau={tau}: {purged:?}",
                outcome.loss_curve.len(),
                outcome.loss_curve.last().copied().unwrap_or(f64::NAN),
                purged.len()
            );
            Ok(())
        }

        Command::Merge {
            embeddings,
            partition: partition_path,
            cmd,
            descriptors: descriptors_path,
            steps,
            start,
            log,
            emit,
        } => {
            let embeddings = embeddings.load()?;
            let partition = load_partition_for(&embeddings, &partition_path, Stage::Load)?;
            let cmd = resolve_threshold(cmd, descriptors_path.as_deref(), |d| d.cmd, Stage::Merge)?;
            let config = MergeConfig {
                steps,
                start: match start {
                    StartChoice::Auto => None,
                    StartChoice::Value(v) => Some(v),
                },
            };
            let (merged, events) = merge::progressive_merge(&embeddings, &partition, cmd, &config)
                .map_err(at(Stage::Merge))?;
            if let Some(path) = log {
                let file = fs::File::create(&path)
                    .map_err(|e| Error::io(&path, e))
                    .map_err(at(Stage::Merge))?;
                let mut w = BufWriter::new(file);
                let write = |w: &mut BufWriter<fs::File>| -> std::io::Result<()> {
                    writeln!(w, "threshold\tkept\tabsorbed\tsimilarity")?;
                    for event in &events {
                        writeln!(
                            w,
                            "{}\t{}\t{}\t{}",
                            event.threshold, event.kept, event.absorbed, event.similarity
                        )?;
                    }
                    w.flush()
                };
                write(&mut w)
                    .map_err(|e| Error::io(&path, e))
                    .map_err(at(Stage::Merge))?;
            }
            partition::save_partition(&merged, &embeddings, &emit).map_err(at(Stage::Emit))?;
            println!(
                "{} merges down to cmd={cmd}; clusters {} -> {}",
                events.len(),
                partition.num_clusters(),
                merged.num_clusters()
            );
            Ok(())
        }

        Command::Evaluate {
            partition: partition_path,
            truth,
        } => {
            let truth_labels = embed::load_labels(&truth).map_err(at(Stage::Load))?;
            // The truth file defines the sample universe; partition lines
            // must reference a subset of it, anything absent is removed.
            let mut ids: Vec<String> = Vec::with_capacity(truth_labels.len());
            for class in 0..truth_labels.num_classes() {
                ids.extend(truth_labels.class_members(class).iter().cloned());
            }
            ids.sort();
            let index: BTreeMap<&str, usize> =
                ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
            let text = fs::read_to_string(&partition_path)
                .map_err(|e| Error::io(&partition_path, e))
                .map_err(at(Stage::Load))?;
            let mut labels: Vec<Option<usize>> = vec![None; ids.len()];
            for (lineno, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let (id, label) = line
                    .split_once('\t')
                    .ok_or_else(|| Error::parse(&partition_path, lineno + 1, "expected `id<TAB>label`"))
                    .map_err(at(Stage::Load))?;
                let node = *index
                    .get(id)
                    .ok_or_else(|| Error::UnknownId { id: id.to_string() })
                    .map_err(at(Stage::Load))?;
                let label: usize = label
                    .trim()
                    .parse()
                    .map_err(|e| Error::parse(&partition_path, lineno + 1, format!("bad label: {e}")))
                    .map_err(at(Stage::Load))?;
                labels[node] = Some(label);
            }
            let partition = Partition::from_labels(labels);
            let classes: Vec<usize> = ids
                .iter()
                .map(|id| truth_labels.label(id).expect("id from truth"))
                .collect();
            let truth = GroundTruth::from_classes(classes);
            let report = metrics::report(&partition, &truth).map_err(at(Stage::Emit))?;
            print_report(&report);
            Ok(())
        }

        Command::Label {
            embeddings,
            partition: partition_path,
            out_labels,
            out_rejects,
        } => {
            let embeddings = embeddings.load()?;
            let partition = load_partition_for(&embeddings, &partition_path, Stage::Load)?;
            let removed_at = vec![None; partition.len()];
            pipeline::emit_labels(&partition, &embeddings, &removed_at, &out_labels, &out_rejects)
                .map_err(at(Stage::Emit))?;
            println!(
                "{} labels, {} rejects",
                partition.non_removed(),
                partition.len() - partition.non_removed()
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run_command(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(error) => {
            eprintln!("error: {error}");
            let code = match error.source {
                Error::Config(_) => 2,
                _ => error.stage.exit_code(),
            };
            ExitCode::from(code as u8)
        }
    }
}
