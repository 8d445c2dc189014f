//! Python bindings for the MoPC pipeline: embedding/label containers, the
//! per-stage operations and the config-driven runner.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use mopc_core::embed;
use mopc_core::error::Error;
use mopc_core::graph;
use mopc_core::infomap;
use mopc_core::merge::MergeConfig;
use mopc_core::metrics;
use mopc_core::partition;
use mopc_core::pipeline;
use mopc_core::refine;
use mopc_core::subcenter::{self, SubcenterParams};
use mopc_core::synth::{self, SynthSpec};

fn py_err(error: Error) -> PyErr {
    PyValueError::new_err(error.to_string())
}

fn parse_format(format: &str) -> PyResult<embed::EmbeddingFormat> {
    format.parse().map_err(py_err)
}

/// A set of unit-norm embeddings with stable utterance ids.
#[pyclass(frozen)]
struct EmbeddingSet {
    inner: embed::EmbeddingSet,
}

#[pymethods]
impl EmbeddingSet {
    /// Loads and L2-normalizes an embedding file (`binary` or `csv`).
    #[staticmethod]
    #[pyo3(signature = (path, format = "binary"))]
    fn load(path: PathBuf, format: &str) -> PyResult<Self> {
        let inner = embed::load_embeddings(&path, parse_format(format)?).map_err(py_err)?;
        Ok(EmbeddingSet { inner })
    }

    /// Builds a set from ids and rows, normalizing the rows.
    #[staticmethod]
    fn from_rows(ids: Vec<String>, rows: Vec<Vec<f64>>) -> PyResult<Self> {
        let mut inner = embed::EmbeddingSet::from_rows(ids, rows).map_err(py_err)?;
        inner.normalize().map_err(py_err)?;
        Ok(EmbeddingSet { inner })
    }

    #[pyo3(signature = (path, format = "binary"))]
    fn save(&self, path: PathBuf, format: &str) -> PyResult<()> {
        embed::save_embeddings(&self.inner, &path, parse_format(format)?).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn ids(&self) -> Vec<String> {
        self.inner.ids().to_vec()
    }

    fn row(&self, index: usize) -> PyResult<Vec<f64>> {
        if index >= self.inner.len() {
            return Err(PyValueError::new_err(format!("row {index} out of range")));
        }
        Ok(self.inner.row(index).to_vec())
    }

    fn cosine(&self, a: usize, b: usize) -> PyResult<f64> {
        if a >= self.inner.len() || b >= self.inner.len() {
            return Err(PyValueError::new_err("row index out of range"));
        }
        Ok(self.inner.cosine(a, b))
    }
}

/// Utterance-id to class mapping (labeled subset or ground truth).
#[pyclass(frozen)]
struct LabeledSubset {
    inner: embed::LabeledSubset,
}

#[pymethods]
impl LabeledSubset {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(LabeledSubset {
            inner: embed::load_labels(&path).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn from_pairs(pairs: Vec<(String, String)>) -> PyResult<Self> {
        Ok(LabeledSubset {
            inner: embed::LabeledSubset::from_pairs(pairs).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        embed::save_labels(&self.inner, &path).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    fn label(&self, id: &str) -> Option<usize> {
        self.inner.label(id)
    }

    fn class_name(&self, class: usize) -> PyResult<String> {
        if class >= self.inner.num_classes() {
            return Err(PyValueError::new_err(format!("class {class} out of range")));
        }
        Ok(self.inner.class_name(class).to_string())
    }
}

/// Cluster assignment with removed status per node.
#[pyclass(frozen)]
struct Partition {
    inner: partition::Partition,
}

#[pymethods]
impl Partition {
    /// Reads a partition TSV against the id universe of `embeddings`.
    #[staticmethod]
    fn load(path: PathBuf, embeddings: &EmbeddingSet) -> PyResult<Self> {
        Ok(Partition {
            inner: partition::load_partition(&path, &embeddings.inner).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf, embeddings: &EmbeddingSet) -> PyResult<()> {
        partition::save_partition(&self.inner, &embeddings.inner, &path).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn num_clusters(&self) -> usize {
        self.inner.num_clusters()
    }

    #[getter]
    fn assigned(&self) -> usize {
        self.inner.non_removed()
    }

    /// Cluster id per node index; None marks removed nodes.
    fn assignment(&self) -> Vec<Option<usize>> {
        self.inner.assignment().to_vec()
    }

    /// `{utterance-id: cluster}` over non-removed nodes.
    fn labels(&self, embeddings: &EmbeddingSet) -> PyResult<HashMap<String, usize>> {
        if embeddings.inner.len() != self.inner.len() {
            return Err(PyValueError::new_err("embedding set does not match partition"));
        }
        Ok((0..self.inner.len())
            .filter_map(|node| {
                self.inner
                    .cluster_of(node)
                    .map(|c| (embeddings.inner.id(node).to_string(), c))
            })
            .collect())
    }
}

/// The (NED, ICD, CMD) descriptor triple.
#[pyclass(frozen, get_all)]
struct Descriptors {
    ned: f64,
    icd: f64,
    cmd: f64,
}

/// Deterministic synthetic speaker-embedding fixture; returns the
/// embeddings and their full ground-truth labeling.
#[pyfunction]
#[pyo3(signature = (speakers, utterances_per_speaker, dim, concentration, outlier_rate = 0.0, split_rate = 0.0, seed = 42))]
#[allow(clippy::too_many_arguments)]
fn generate(
    speakers: usize,
    utterances_per_speaker: usize,
    dim: usize,
    concentration: f64,
    outlier_rate: f64,
    split_rate: f64,
    seed: u64,
) -> PyResult<(EmbeddingSet, LabeledSubset)> {
    let spec = SynthSpec {
        speakers,
        utterances_per_speaker,
        dim,
        concentration,
        outlier_rate,
        split_rate,
        seed,
    };
    let (embeddings, truth) = synth::generate(&spec).map_err(py_err)?;
    Ok((
        EmbeddingSet { inner: embeddings },
        LabeledSubset { inner: truth },
    ))
}

/// Uniform labeled subset without replacement, deterministic per seed.
#[pyfunction]
#[pyo3(signature = (truth, speakers, per_speaker, seed = 42))]
fn sample_labeled_subset(
    truth: &LabeledSubset,
    speakers: usize,
    per_speaker: usize,
    seed: u64,
) -> PyResult<LabeledSubset> {
    Ok(LabeledSubset {
        inner: synth::sample_labeled_subset(&truth.inner, speakers, per_speaker, seed)
            .map_err(py_err)?,
    })
}

/// NED, ICD and CMD from the labeled subset.
#[pyfunction]
fn compute_descriptors(
    embeddings: &EmbeddingSet,
    labels: &LabeledSubset,
) -> PyResult<Descriptors> {
    labels.inner.validate_against(&embeddings.inner).map_err(py_err)?;
    let d = mopc_core::descriptors::compute_all(&embeddings.inner, &labels.inner).map_err(py_err)?;
    Ok(Descriptors {
        ned: d.ned,
        icd: d.icd,
        cmd: d.cmd,
    })
}

/// KNN graph construction, optional NED pruning and map-equation
/// clustering in one call. `k=None` selects k by the knee method.
#[pyfunction]
#[pyo3(signature = (embeddings, k = None, ned = None, seed = 42, trials = infomap::DEFAULT_TRIALS))]
fn cluster_embeddings(
    embeddings: &EmbeddingSet,
    k: Option<usize>,
    ned: Option<f64>,
    seed: u64,
    trials: usize,
) -> PyResult<Partition> {
    let e = &embeddings.inner;
    let k = match k {
        Some(k) => k,
        None => {
            let mut candidates: Vec<usize> = pipeline::DEFAULT_K_CANDIDATES
                .iter()
                .map(|&c| c.min(e.len().saturating_sub(1)))
                .collect();
            candidates.dedup();
            graph::elbow_select_k(e, &candidates).map_err(py_err)?.k
        }
    };
    let mut similarity_graph = graph::build_knn(e, k).map_err(py_err)?;
    if let Some(ned) = ned {
        similarity_graph = graph::prune_by_ned(&similarity_graph, ned).0;
    }
    if similarity_graph.total_weight() <= 0.0 {
        return Ok(Partition {
            inner: partition::Partition::from_labels(vec![None; e.len()]),
        });
    }
    let flow = infomap::to_flow(&similarity_graph).map_err(py_err)?;
    Ok(Partition {
        inner: infomap::cluster_trials(&flow, seed, trials),
    })
}

/// ICD cleaning followed by small-cluster removal.
#[pyfunction]
#[pyo3(signature = (embeddings, part, icd, min_size = 4))]
fn clean_by_icd(
    embeddings: &EmbeddingSet,
    part: &Partition,
    icd: f64,
    min_size: usize,
) -> Partition {
    let (cleaned, _) = refine::clean_by_icd(&embeddings.inner, &part.inner, icd);
    let (filtered, _) = refine::drop_small_clusters(&cleaned, min_size);
    Partition { inner: filtered }
}

/// Sub-center training, purity report and purge. Returns the purged
/// partition and the per-class dominance list.
#[pyfunction]
#[pyo3(signature = (embeddings, part, subcenters = 3, margin = 0.2, scale = 32.0, tau = 0.7, seed = 42, max_epochs = 200))]
#[allow(clippy::too_many_arguments)]
fn subcenter_purify(
    embeddings: &EmbeddingSet,
    part: &Partition,
    subcenters: usize,
    margin: f64,
    scale: f64,
    tau: f64,
    seed: u64,
    max_epochs: usize,
) -> PyResult<(Partition, Vec<f64>)> {
    let params = SubcenterParams {
        subcenters,
        margin,
        scale,
        max_epochs,
        ..Default::default()
    };
    let outcome = subcenter::train(&embeddings.inner, &part.inner, &params, seed).map_err(py_err)?;
    let report = subcenter::purity_report(&outcome.model, &embeddings.inner, &part.inner)
        .map_err(py_err)?;
    let dominance: Vec<f64> = (0..report.num_classes()).map(|c| report.dominance(c)).collect();
    let (purged, _) = subcenter::purge_impure(&part.inner, &report, tau).map_err(py_err)?;
    Ok((Partition { inner: purged }, dominance))
}

/// Progressive mutual-nearest-neighbor merging down to CMD.
#[pyfunction]
#[pyo3(signature = (embeddings, part, cmd, steps = 10, start = None))]
fn progressive_merge(
    embeddings: &EmbeddingSet,
    part: &Partition,
    cmd: f64,
    steps: usize,
    start: Option<f64>,
) -> PyResult<Partition> {
    let config = MergeConfig { steps, start };
    let (merged, _) = mopc_core::merge::progressive_merge(&embeddings.inner, &part.inner, cmd, &config)
        .map_err(py_err)?;
    Ok(Partition { inner: merged })
}

fn report_dict(py: Python<'_>, report: &metrics::QualityReport) -> PyResult<Py<PyAny>> {
    let out = pyo3::types::PyDict::new(py);
    out.set_item("nr1", report.nr1)?;
    out.set_item("nr2", report.nr2)?;
    out.set_item("pseudo_classes", report.pseudo_classes)?;
    out.set_item("gt_classes_covered", report.gt_classes_covered)?;
    out.set_item("nmi", report.nmi)?;
    out.set_item("removed_fraction", report.removed_fraction)?;
    Ok(out.into())
}

/// Quality metrics of a partition against ground-truth labels covering
/// every embedding id.
#[pyfunction]
fn quality_report(
    py: Python<'_>,
    part: &Partition,
    truth: &LabeledSubset,
    embeddings: &EmbeddingSet,
) -> PyResult<Py<PyAny>> {
    let gt = metrics::GroundTruth::from_labels(&truth.inner, &embeddings.inner).map_err(py_err)?;
    let report = metrics::report(&part.inner, &gt).map_err(py_err)?;
    report_dict(py, &report)
}

/// Runs the config-driven pipeline; returns a summary dict with the
/// descriptor values, chosen k and per-stage metrics.
#[pyfunction]
fn run_pipeline(py: Python<'_>, config_path: PathBuf) -> PyResult<Py<PyAny>> {
    let config = pipeline::PipelineConfig::from_file(Path::new(&config_path)).map_err(py_err)?;
    let summary = pipeline::run(&config).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let out = pyo3::types::PyDict::new(py);
    out.set_item("seed", summary.seed)?;
    out.set_item("k", summary.chosen_k)?;
    out.set_item("ned", summary.descriptors.ned)?;
    out.set_item("icd", summary.descriptors.icd)?;
    out.set_item("cmd", summary.descriptors.cmd)?;
    out.set_item("pool", summary.pool_size)?;
    out.set_item("labels_file", summary.labels_file.as_os_str())?;
    out.set_item("rejects_file", summary.rejects_file.as_os_str())?;
    let stages = pyo3::types::PyList::empty(py);
    for snapshot in &summary.snapshots {
        let stage = pyo3::types::PyDict::new(py);
        stage.set_item("label", &snapshot.label)?;
        stage.set_item("clusters", snapshot.clusters)?;
        stage.set_item("assigned", snapshot.non_removed)?;
        stage.set_item("partition_file", snapshot.partition_file.as_os_str())?;
        if let Some(report) = &snapshot.report {
            stage.set_item("report", report_dict(py, report)?)?;
        }
        stages.append(stage)?;
    }
    out.set_item("stages", stages)?;
    Ok(out.into())
}

#[pymodule]
fn mopc_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<EmbeddingSet>()?;
    m.add_class::<LabeledSubset>()?;
    m.add_class::<Partition>()?;
    m.add_class::<Descriptors>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(sample_labeled_subset, m)?)?;
    m.add_function(wrap_pyfunction!(compute_descriptors, m)?)?;
    m.add_function(wrap_pyfunction!(cluster_embeddings, m)?)?;
    m.add_function(wrap_pyfunction!(clean_by_icd, m)?)?;
    m.add_function(wrap_pyfunction!(subcenter_purify, m)?)?;
    m.add_function(wrap_pyfunction!(progressive_merge, m)?)?;
    m.add_function(wrap_pyfunction!(quality_report, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    Ok(())
}
