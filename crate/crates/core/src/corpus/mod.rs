//! Datasets on disk, the synthetic word corpus, and pair construction.
//!
//! A dataset directory holds `index.tsv` (no header; columns `id`, `label`,
//! `T`, `D`, `path`) and one little-endian `f32` file per segment, row-major
//! `T × D`. Unlabelled segments are written with the label `UNK`. Frames are
//! widened to the working scalar type on load.

mod pairs;
mod synth;

use std::collections::HashSet;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::autodiff::Tensor;
use crate::rnn::{Segment, SegmentError};
use crate::scalar::Scalar;

pub use pairs::{make_balanced_pairs, make_random_pairs, simulate_utd_pairs, PairList, Provenance};
pub use synth::{generate_synthetic_corpus, split_per_type, SynthConfig};

pub const UNKNOWN_LABEL: &str = "UNK";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}, line {line}: {message}")]
    Format { path: PathBuf, line: usize, message: String },
    #[error("{path}: expected {expected} bytes for the indexed shape, found {actual}")]
    Length { path: PathBuf, expected: u64, actual: u64 },
    #[error("{path}: duplicate segment id {id}")]
    DuplicateId { path: PathBuf, id: String },
    #[error("{path}, line {line}: dimension {found} differs from the dataset's {expected}")]
    DimMismatch { path: PathBuf, line: usize, expected: usize, found: usize },
    #[error("{path}: unknown segment id {id}")]
    UnknownId { path: PathBuf, id: String },
    #[error("no label has two or more instances")]
    NoPairableLabel,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Segment(#[from] SegmentError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io { path: path.to_path_buf(), source }
}

/// One row of `index.tsv`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentRecord {
    pub id: String,
    pub label: Option<String>,
    pub frames: usize,
    pub dim: usize,
    /// Relative to the dataset directory.
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetIndex {
    pub records: Vec<SegmentRecord>,
    pub dim: usize,
}

impl DatasetIndex {
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            let label = r.label.as_deref().unwrap_or(UNKNOWN_LABEL);
            out.push_str(&format!("{}\t{}\t{}\t{}\t{}\n", r.id, label, r.frames, r.dim, r.path));
        }
        out
    }

    /// Parses and validates index text; `path` is only used in errors.
    pub fn parse(text: &str, path: &Path) -> Result<Self, CorpusError> {
        let mut records = Vec::new();
        let mut seen = HashSet::new();
        let mut dim = None;
        for (n, line) in text.lines().enumerate() {
            let line_no = n + 1;
            if line.is_empty() {
                continue;
            }
            let bad = |message: String| CorpusError::Format { path: path.to_path_buf(), line: line_no, message };
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 5 {
                return Err(bad(format!("expected 5 tab-separated columns, found {}", cols.len())));
            }
            let frames: usize = cols[2].parse().map_err(|_| bad(format!("bad frame count {:?}", cols[2])))?;
            let d: usize = cols[3].parse().map_err(|_| bad(format!("bad dimension {:?}", cols[3])))?;
            if frames == 0 || d == 0 {
                return Err(bad("frame count and dimension must be positive".into()));
            }
            match dim {
                None => dim = Some(d),
                Some(expected) if expected != d => {
                    return Err(CorpusError::DimMismatch { path: path.to_path_buf(), line: line_no, expected, found: d })
                }
                _ => {}
            }
            if !seen.insert(cols[0].to_string()) {
                return Err(CorpusError::DuplicateId { path: path.to_path_buf(), id: cols[0].to_string() });
            }
            let label = (cols[1] != UNKNOWN_LABEL).then(|| cols[1].to_string());
            records.push(SegmentRecord { id: cols[0].to_string(), label, frames, dim: d, path: cols[4].to_string() });
        }
        let dim = dim.ok_or_else(|| CorpusError::Format { path: path.to_path_buf(), line: 0, message: "empty index".into() })?;
        Ok(Self { records, dim })
    }
}

/// Segments plus their shared feature dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<S> {
    pub dim: usize,
    pub segments: Vec<Segment<S>>,
}

impl<S: Scalar> Dataset<S> {
    pub fn new(segments: Vec<Segment<S>>) -> Result<Self, CorpusError> {
        let dim = segments.first().map(|s| s.dim()).ok_or_else(|| CorpusError::InvalidConfig("empty dataset".into()))?;
        let mut seen = HashSet::new();
        for (i, s) in segments.iter().enumerate() {
            if s.dim() != dim {
                return Err(CorpusError::DimMismatch { path: PathBuf::new(), line: i + 1, expected: dim, found: s.dim() });
            }
            if !seen.insert(s.id.as_str()) {
                return Err(CorpusError::DuplicateId { path: PathBuf::new(), id: s.id.clone() });
            }
        }
        Ok(Self { dim, segments })
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn index(&self) -> DatasetIndex {
        let records = self
            .segments
            .iter()
            .map(|s| SegmentRecord {
                id: s.id.clone(),
                label: s.label.clone(),
                frames: s.len(),
                dim: s.dim(),
                path: format!("segments/{}.f32", s.id),
            })
            .collect();
        DatasetIndex { records, dim: self.dim }
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.segments.iter().position(|s| s.id == id)
    }
}

pub fn save_dataset<S: Scalar>(dataset: &Dataset<S>, dir: &Path) -> Result<(), CorpusError> {
    let index = dataset.index();
    fs::create_dir_all(dir.join("segments")).map_err(io_err(dir))?;
    for (rec, seg) in index.records.iter().zip(&dataset.segments) {
        let path = dir.join(&rec.path);
        let mut bytes = Vec::with_capacity(seg.frames().len() * 4);
        for &v in seg.frames().data() {
            bytes.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        fs::write(&path, bytes).map_err(io_err(&path))?;
    }
    let index_path = dir.join("index.tsv");
    fs::write(&index_path, index.to_tsv()).map_err(io_err(&index_path))
}

pub fn load_dataset<S: Scalar>(dir: &Path) -> Result<Dataset<S>, CorpusError> {
    let index_path = dir.join("index.tsv");
    let text = fs::read_to_string(&index_path).map_err(io_err(&index_path))?;
    let index = DatasetIndex::parse(&text, &index_path)?;
    let mut segments = Vec::with_capacity(index.records.len());
    for rec in &index.records {
        let path = dir.join(&rec.path);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        let expected = (rec.frames * rec.dim * 4) as u64;
        if bytes.len() as u64 != expected {
            return Err(CorpusError::Length { path, expected, actual: bytes.len() as u64 });
        }
        let data: Vec<S> = bytes.chunks_exact(4).map(|c| S::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)).collect();
        let frames = Tensor::new(vec![rec.frames, rec.dim], data).expect("length checked above");
        segments.push(Segment::new(rec.id.clone(), rec.label.clone(), frames)?);
    }
    Ok(Dataset { dim: index.dim, segments })
}
