// SPDX-License-Identifier: Apache-2.0

//! Corpus directories: one `UQTR` file per trace plus a JSON-lines index.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::{self, ContainerError, ReadOptions};
use crate::trace::GenerationTrace;

pub const INDEX_FILE: &str = "index.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HalluType {
    Extrinsic,
    Intrinsic,
    Other,
}

impl HalluType {
    pub fn as_str(&self) -> &'static str {
        match self {
            HalluType::Extrinsic => "extrinsic",
            HalluType::Intrinsic => "intrinsic",
            HalluType::Other => "other",
        }
    }
}

/// Ground truth for one trace. `quality` is in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub trace_id: String,
    pub quality: f64,
    pub dataset_id: String,
    pub hallu_type: HalluType,
}

/// One line of `index.jsonl`. `quality` stays `null` until labeled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexRow {
    pub trace_id: String,
    pub quality: Option<f64>,
    pub dataset_id: String,
    pub hallu_type: HalluType,
    /// Relative to the corpus directory.
    pub path: String,
}

impl IndexRow {
    pub fn labeled(&self) -> Option<LabeledExample> {
        self.quality.map(|quality| LabeledExample {
            trace_id: self.trace_id.clone(),
            quality,
            dataset_id: self.dataset_id.clone(),
            hallu_type: self.hallu_type,
        })
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {source}")]
    Parse {
        path: String,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("duplicate trace_id `{0}` in index")]
    DuplicateId(String),
    #[error("quality {quality} for `{trace_id}` is outside [0, 1]")]
    QualityRange { trace_id: String, quality: f64 },
    #[error("trace `{trace_id}`: {source}")]
    Trace {
        trace_id: String,
        #[source]
        source: ContainerError,
    },
    #[error("index row `{row}` points at a trace whose id is `{file}`")]
    IdMismatch { row: String, file: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn read_index(path: impl AsRef<Path>) -> Result<Vec<IndexRow>, CorpusError> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut rows = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: IndexRow = serde_json::from_str(&line).map_err(|source| CorpusError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            source,
        })?;
        if let Some(q) = row.quality {
            if !(0.0..=1.0).contains(&q) {
                return Err(CorpusError::QualityRange {
                    trace_id: row.trace_id,
                    quality: q,
                });
            }
        }
        if !seen.insert(row.trace_id.clone()) {
            return Err(CorpusError::DuplicateId(row.trace_id));
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_index(path: impl AsRef<Path>, rows: &[IndexRow]) -> Result<(), CorpusError> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for row in rows {
        serde_json::to_writer(&mut out, row).expect("index row serializes");
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&out).map_err(io_err(path))
}

/// An opened corpus directory. Traces load lazily.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub root: PathBuf,
    pub rows: Vec<IndexRow>,
}

impl Corpus {
    pub fn open(root: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let root = root.as_ref().to_path_buf();
        let rows = read_index(root.join(INDEX_FILE))?;
        Ok(Self { root, rows })
    }

    pub fn trace_path(&self, row: &IndexRow) -> PathBuf {
        self.root.join(&row.path)
    }

    pub fn load(&self, row: &IndexRow, opts: ReadOptions) -> Result<GenerationTrace, CorpusError> {
        let trace = container::read_trace_with(self.trace_path(row), opts).map_err(|source| {
            CorpusError::Trace {
                trace_id: row.trace_id.clone(),
                source,
            }
        })?;
        if trace.meta.trace_id != row.trace_id {
            return Err(CorpusError::IdMismatch {
                row: row.trace_id.clone(),
                file: trace.meta.trace_id,
            });
        }
        Ok(trace)
    }

    /// Loads every trace in parallel; per-trace results keep index order.
    pub fn load_all(&self, opts: ReadOptions) -> Vec<Result<GenerationTrace, CorpusError>> {
        self.rows.par_iter().map(|row| self.load(row, opts)).collect()
    }

    pub fn labeled(&self) -> Vec<LabeledExample> {
        self.rows.iter().filter_map(IndexRow::labeled).collect()
    }
}
