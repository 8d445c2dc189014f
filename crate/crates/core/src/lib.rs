//! Multi-objective progressive clustering for pseudo-label assignment.
//!
//! Given a large pool of unit-norm embeddings and a small labeled subset
//! from the same domain, this crate derives three cosine thresholds from
//! the labeled data (NED, ICD, CMD), clusters the pool over a pruned KNN
//! graph with a two-level map-equation optimizer, denoises the clusters
//! (intra-class cleaning, sub-center purification) and progressively merges
//! split classes, emitting pseudo-labels plus per-stage quality reports.
//!
//! The [`pipeline`] module orchestrates the whole flow from a single
//! config; every stage is also usable on its own.

pub mod descriptors;
pub mod embed;
pub mod error;
pub mod graph;
pub mod infomap;
pub mod merge;
pub mod metrics;
pub mod partition;
pub mod pipeline;
pub mod refine;
pub mod subcenter;
pub mod synth;

pub use descriptors::Descriptors;
pub use embed::{EmbeddingFormat, EmbeddingSet, LabeledSubset};
pub use error::{Error, Result};
pub use graph::SimilarityGraph;
pub use infomap::FlowGraph;
pub use metrics::{GroundTruth, QualityReport};
pub use partition::Partition;
pub use pipeline::{PipelineConfig, RunSummary};
