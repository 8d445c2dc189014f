//! Embedding and label storage: loading, validation, normalization and the
//! on-disk formats shared by every pipeline stage.
//!
//! Two embedding formats are supported:
//!
//! * `EMB1` binary: 4-byte magic `EMB1`, little-endian `u32` row count,
//!   little-endian `u32` dimension, then `count * dim` little-endian `f32`
//!   values in row-major order. Utterance ids live in a sidecar manifest at
//!   `<path>.ids`, one id per line, in row order.
//! * CSV: one row per line, `id,v1,...,vd`.
//!
//! Labels are TSV (`id <TAB> class-name`); durations are TSV
//! (`id <TAB> seconds`).

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Rows whose L2 norm is already within this distance of 1 are left
/// untouched by [`EmbeddingSet::normalize`]. This makes normalization
/// bit-for-bit idempotent and keeps save/load round-trips exact.
const NORM_SKIP_TOL: f64 = 5e-7;

/// On-disk embedding encodings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingFormat {
    /// `EMB1` binary with an `<path>.ids` sidecar manifest.
    Binary,
    /// `id,v1,...,vd` text rows.
    Csv,
}

impl std::str::FromStr for EmbeddingFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binary" => Ok(EmbeddingFormat::Binary),
            "csv" => Ok(EmbeddingFormat::Csv),
            other => Err(Error::Config(format!("unknown embedding format {other:?}"))),
        }
    }
}

/// A set of `n` `dim`-dimensional embeddings with stable utterance ids.
#[derive(Debug, Clone)]
pub struct EmbeddingSet {
    ids: Vec<String>,
    data: Vec<f64>,
    dim: usize,
    normalized: bool,
    index: HashMap<String, usize>,
}

impl EmbeddingSet {
    /// Builds a set from id/row pairs, validating id uniqueness and a
    /// consistent dimension. Rows are taken as-is; call
    /// [`normalize`](Self::normalize) before computing cosines.
    pub fn from_rows(ids: Vec<String>, rows: Vec<Vec<f64>>) -> Result<Self> {
        assert_eq!(ids.len(), rows.len(), "ids and rows must pair up");
        let dim = rows.first().map(|r| r.len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (row, values) in rows.iter().enumerate() {
            if values.len() != dim {
                return Err(Error::DimensionMismatch {
                    row,
                    expected: dim,
                    got: values.len(),
                });
            }
            data.extend_from_slice(values);
        }
        Self::from_flat(ids, data, dim)
    }

    /// Builds a set from a row-major flat buffer.
    pub fn from_flat(ids: Vec<String>, data: Vec<f64>, dim: usize) -> Result<Self> {
        assert_eq!(ids.len() * dim, data.len(), "flat buffer size mismatch");
        let mut index = HashMap::with_capacity(ids.len());
        for (row, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), row).is_some() {
                return Err(Error::DuplicateId { id: id.clone() });
            }
        }
        Ok(EmbeddingSet {
            ids,
            data,
            dim,
            normalized: false,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn id(&self, row: usize) -> &str {
        &self.ids[row]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.dim..(row + 1) * self.dim]
    }

    /// Row index of an utterance id, if present.
    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// Scales every row to unit L2 norm. Rows already within
    /// [`NORM_SKIP_TOL`] of unit norm are left bit-identical, so a second
    /// call is a no-op. A zero-norm row is a hard error, reported with its
    /// row index.
    pub fn normalize(&mut self) -> Result<()> {
        for row in 0..self.len() {
            let start = row * self.dim;
            let norm = self.data[start..start + self.dim]
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            if norm == 0.0 {
                return Err(Error::ZeroNorm {
                    row,
                    id: self.ids[row].clone(),
                });
            }
            if (norm - 1.0).abs() > NORM_SKIP_TOL {
                for v in &mut self.data[start..start + self.dim] {
                    *v /= norm;
                }
            }
        }
        self.normalized = true;
        Ok(())
    }

    /// Cosine similarity between two rows. After [`normalize`](Self::normalize)
    /// this is a plain dot product.
    pub fn cosine(&self, a: usize, b: usize) -> f64 {
        if self.normalized {
            dot(self.row(a), self.row(b))
        } else {
            cosine(self.row(a), self.row(b))
        }
    }

    /// New set containing the given rows, in the given order.
    pub fn subset(&self, rows: &[usize]) -> EmbeddingSet {
        let ids = rows.iter().map(|&r| self.ids[r].clone()).collect();
        let mut data = Vec::with_capacity(rows.len() * self.dim);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        let mut sub = EmbeddingSet::from_flat(ids, data, self.dim).expect("rows are unique");
        sub.normalized = self.normalized;
        sub
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    dot(a, b) / (na * nb)
}

/// Mapping from a subset of utterance ids to dense class ids.
///
/// Class ids are assigned in first-appearance order, so loading the same
/// file always yields the same mapping.
#[derive(Debug, Clone)]
pub struct LabeledSubset {
    label_of: HashMap<String, usize>,
    class_names: Vec<String>,
    class_members: Vec<Vec<String>>,
}

impl LabeledSubset {
    /// Builds the subset from `(utterance-id, class-name)` pairs.
    pub fn from_pairs<I, S>(pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, S)>,
        S: Into<String>,
    {
        let mut label_of = HashMap::new();
        let mut class_names: Vec<String> = Vec::new();
        let mut class_members: Vec<Vec<String>> = Vec::new();
        let mut name_index: HashMap<String, usize> = HashMap::new();
        for (id, name) in pairs {
            let id = id.into();
            let name = name.into();
            let class = *name_index.entry(name.clone()).or_insert_with(|| {
                class_names.push(name);
                class_members.push(Vec::new());
                class_names.len() - 1
            });
            if label_of.insert(id.clone(), class).is_some() {
                return Err(Error::DuplicateId { id });
            }
            class_members[class].push(id);
        }
        Ok(LabeledSubset {
            label_of,
            class_names,
            class_members,
        })
    }

    /// Number of classes `K`.
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Member count `N_i` of class `i`.
    pub fn class_size(&self, class: usize) -> usize {
        self.class_members[class].len()
    }

    pub fn class_name(&self, class: usize) -> &str {
        &self.class_names[class]
    }

    pub fn class_members(&self, class: usize) -> &[String] {
        &self.class_members[class]
    }

    pub fn label(&self, id: &str) -> Option<usize> {
        self.label_of.get(id).copied()
    }

    /// Total number of labeled utterances.
    pub fn len(&self) -> usize {
        self.label_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.label_of.is_empty()
    }

    /// Checks that every labeled id exists in `embeddings`.
    pub fn validate_against(&self, embeddings: &EmbeddingSet) -> Result<()> {
        for members in &self.class_members {
            for id in members {
                if embeddings.position(id).is_none() {
                    return Err(Error::UnknownId { id: id.clone() });
                }
            }
        }
        Ok(())
    }

    /// Row indices of each class's members in `embeddings`.
    pub fn class_rows(&self, embeddings: &EmbeddingSet) -> Result<Vec<Vec<usize>>> {
        let mut rows = Vec::with_capacity(self.num_classes());
        for members in &self.class_members {
            let mut class_rows = Vec::with_capacity(members.len());
            for id in members {
                let row = embeddings
                    .position(id)
                    .ok_or_else(|| Error::UnknownId { id: id.clone() })?;
                class_rows.push(row);
            }
            rows.push(class_rows);
        }
        Ok(rows)
    }
}

/// Loads an embedding set, normalizing every row.
pub fn load_embeddings(path: &Path, format: EmbeddingFormat) -> Result<EmbeddingSet> {
    load_embeddings_filtered(path, format, None, 1.0)
}

/// Loads an embedding set, optionally dropping rows whose duration in the
/// manifest falls below `min_seconds`. Rows absent from the manifest are
/// kept. Rows are L2-normalized after filtering.
pub fn load_embeddings_filtered(
    path: &Path,
    format: EmbeddingFormat,
    durations: Option<&Path>,
    min_seconds: f64,
) -> Result<EmbeddingSet> {
    let mut set = match format {
        EmbeddingFormat::Binary => load_binary(path)?,
        EmbeddingFormat::Csv => load_csv(path)?,
    };
    if let Some(manifest) = durations {
        let seconds = load_durations(manifest)?;
        let keep: Vec<usize> = (0..set.len())
            .filter(|&r| seconds.get(set.id(r)).is_none_or(|&s| s >= min_seconds))
            .collect();
        if keep.len() != set.len() {
            set = set.subset(&keep);
        }
    }
    set.normalize()?;
    Ok(set)
}

fn load_binary(path: &Path) -> Result<EmbeddingSet> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || &bytes[..4] != b"EMB1" {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "EMB1",
        });
    }
    let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let expected = 12 + count * dim * 4;
    if bytes.len() != expected {
        return Err(Error::parse(
            path,
            0,
            format!("expected {expected} bytes for {count}x{dim}, got {}", bytes.len()),
        ));
    }
    let mut data = Vec::with_capacity(count * dim);
    for chunk in bytes[12..].chunks_exact(4) {
        data.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
    }
    let ids = load_id_manifest(&sidecar_path(path), count)?;
    EmbeddingSet::from_flat(ids, data, dim)
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".ids");
    PathBuf::from(os)
}

fn load_id_manifest(path: &Path, expected: usize) -> Result<Vec<String>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut ids = Vec::with_capacity(expected);
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.is_empty() {
            ids.push(line);
        }
    }
    if ids.len() != expected {
        return Err(Error::parse(
            path,
            0,
            format!("manifest lists {} ids, embedding file has {expected}", ids.len()),
        ));
    }
    Ok(ids)
}

fn load_csv(path: &Path) -> Result<EmbeddingSet> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let id = fields
            .next()
            .ok_or_else(|| Error::parse(path, lineno + 1, "missing id field"))?;
        let values: Vec<f64> = fields
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::parse(path, lineno + 1, format!("bad float {f:?}: {e}")))
            })
            .collect::<Result<_>>()?;
        if values.is_empty() {
            return Err(Error::parse(path, lineno + 1, "row has no values"));
        }
        ids.push(id.to_string());
        rows.push(values);
    }
    EmbeddingSet::from_rows(ids, rows)
}

/// Writes an embedding set in the named format. Binary output also writes
/// the `<path>.ids` sidecar manifest.
pub fn save_embeddings(set: &EmbeddingSet, path: &Path, format: EmbeddingFormat) -> Result<()> {
    match format {
        EmbeddingFormat::Binary => save_binary(set, path),
        EmbeddingFormat::Csv => save_csv(set, path),
    }
}

fn save_binary(set: &EmbeddingSet, path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(12 + set.len() * set.dim() * 4);
    bytes.extend_from_slice(b"EMB1");
    bytes.extend_from_slice(&(set.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&(set.dim() as u32).to_le_bytes());
    for row in 0..set.len() {
        for &v in set.row(row) {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let manifest = sidecar_path(path);
    let mut out = String::new();
    for id in set.ids() {
        out.push_str(id);
        out.push('\n');
    }
    fs::write(&manifest, out).map_err(|e| Error::io(&manifest, e))
}

fn save_csv(set: &EmbeddingSet, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for row in 0..set.len() {
        write!(w, "{}", set.id(row)).map_err(|e| Error::io(path, e))?;
        for &v in set.row(row) {
            write!(w, ",{v}").map_err(|e| Error::io(path, e))?;
        }
        writeln!(w).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Loads a labels TSV (`id <TAB> class-name`). Class names are mapped to
/// dense ids in first-appearance order. An empty file is an error.
pub fn load_labels(path: &Path) -> Result<LabeledSubset> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut pairs = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let (id, name) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(path, lineno + 1, "expected `id<TAB>class`"))?;
        pairs.push((id.to_string(), name.to_string()));
    }
    if pairs.is_empty() {
        return Err(Error::EmptyLabels {
            path: path.to_path_buf(),
        });
    }
    LabeledSubset::from_pairs(pairs)
}

/// Writes a labels TSV sorted by utterance id.
pub fn save_labels(labels: &LabeledSubset, path: &Path) -> Result<()> {
    let mut lines: Vec<(String, &str)> = Vec::with_capacity(labels.len());
    for class in 0..labels.num_classes() {
        for id in labels.class_members(class) {
            lines.push((id.clone(), labels.class_name(class)));
        }
    }
    lines.sort();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for (id, name) in lines {
        writeln!(w, "{id}\t{name}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Loads a duration manifest (`id <TAB> seconds`).
pub fn load_durations(path: &Path) -> Result<HashMap<String, f64>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut seconds = HashMap::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let (id, value) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(path, lineno + 1, "expected `id<TAB>seconds`"))?;
        let value: f64 = value
            .trim()
            .parse()
            .map_err(|e| Error::parse(path, lineno + 1, format!("bad duration: {e}")))?;
        seconds.insert(id.to_string(), value);
    }
    Ok(seconds)
}

/// Convenience for tests and tools: read a whole file as a string.
pub fn read_to_string(path: &Path) -> Result<String> {
    let mut s = String::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_string(&mut s))
        .map_err(|e| Error::io(path, e))?;
    Ok(s)
}
