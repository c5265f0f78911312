//! Linear probes and the probing suites built on them.

mod perceptron;
mod suite;
mod table;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coco::CocoError;
use crate::select::{SelectError, Strategy};
use crate::store::{LayerEmbedding, LayerFileHeader, LayerReader, LayerReaderSet, StoreError};

pub use perceptron::{train_perceptron, LinearProbe, ProbeConfig};
pub use suite::{run_global_suite, run_paired_suite, LayerInput, SuiteConfig};
pub use table::{AccuracyRow, AccuracyTable, GlobalRow, GlobalTable, SubsetAccuracy};

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("training labels contain a single class")]
    SingleClass,
    #[error("feature dimension {actual}, expected {expected}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("row {0} has a non-finite feature")]
    NonFinite(usize),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("empty split: {0}")]
    EmptySplit(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("mask of {category:?} in image {image_id}: {source}")]
    Mask {
        image_id: u64,
        category: String,
        source: CocoError,
    },
    #[error("image {image_id}: {source}")]
    Select { image_id: u64, source: SelectError },
    #[error("table parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Which tokens a feature vector was read from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TokenSource {
    Cls,
    AvgObjP,
    AvgObjS,
    RandomObjP,
    RandomObjS,
    Random,
}

impl TokenSource {
    pub const ALL: [TokenSource; 6] = [
        TokenSource::Cls,
        TokenSource::AvgObjP,
        TokenSource::AvgObjS,
        TokenSource::RandomObjP,
        TokenSource::RandomObjS,
        TokenSource::Random,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TokenSource::Cls => "CLS",
            TokenSource::AvgObjP => "AVG_OBJ_P",
            TokenSource::AvgObjS => "AVG_OBJ_S",
            TokenSource::RandomObjP => "RANDOM_OBJ_P",
            TokenSource::RandomObjS => "RANDOM_OBJ_S",
            TokenSource::Random => "RANDOM",
        }
    }

    pub fn strategy(self) -> Strategy {
        match self {
            TokenSource::Cls => Strategy::Cls,
            TokenSource::AvgObjP | TokenSource::AvgObjS => Strategy::AvgObj,
            TokenSource::RandomObjP | TokenSource::RandomObjS => Strategy::RandomObj,
            TokenSource::Random => Strategy::Random,
        }
    }

    /// `Some(true)` for the primary object's tokens, `Some(false)` for the
    /// secondary's, `None` when no object mask is involved.
    pub fn object(self) -> Option<bool> {
        match self {
            TokenSource::AvgObjP | TokenSource::RandomObjP => Some(true),
            TokenSource::AvgObjS | TokenSource::RandomObjS => Some(false),
            TokenSource::Cls | TokenSource::Random => None,
        }
    }

    /// Sources produced by a token strategy in the paired task.
    pub fn for_strategy(strategy: Strategy) -> &'static [TokenSource] {
        match strategy {
            Strategy::Cls => &[TokenSource::Cls],
            Strategy::AvgObj => &[TokenSource::AvgObjP, TokenSource::AvgObjS],
            Strategy::RandomObj => &[TokenSource::RandomObjP, TokenSource::RandomObjS],
            Strategy::Random => &[TokenSource::Random],
        }
    }
}

impl fmt::Display for TokenSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TokenSource {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        TokenSource::ALL
            .into_iter()
            .find(|t| t.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown token source {s:?}"))
    }
}

/// What a paired-task probe decodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Target {
    Primary,
    Secondary,
    Combination,
}

impl Target {
    pub const ALL: [Target; 3] = [Target::Primary, Target::Secondary, Target::Combination];

    pub fn as_str(self) -> &'static str {
        match self {
            Target::Primary => "PRIMARY",
            Target::Secondary => "SECONDARY",
            Target::Combination => "COMBINATION",
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Target {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Target::ALL
            .into_iter()
            .find(|t| t.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown target {s:?}"))
    }
}

/// Read access to one layer's embeddings.
pub trait EmbeddingSource: Sync {
    fn header(&self) -> &LayerFileHeader;
    fn fetch(&self, image_id: u64) -> Result<LayerEmbedding, StoreError>;
}

impl EmbeddingSource for LayerReader {
    fn header(&self) -> &LayerFileHeader {
        LayerReader::header(self)
    }
    fn fetch(&self, image_id: u64) -> Result<LayerEmbedding, StoreError> {
        LayerReader::fetch(self, image_id)
    }
}

impl EmbeddingSource for LayerReaderSet {
    fn header(&self) -> &LayerFileHeader {
        LayerReaderSet::header(self)
    }
    fn fetch(&self, image_id: u64) -> Result<LayerEmbedding, StoreError> {
        LayerReaderSet::fetch(self, image_id)
    }
}

/// Embeddings held in memory, mostly for tests and small experiments.
#[derive(Debug, Clone)]
pub struct MemoryLayer {
    pub header: LayerFileHeader,
    pub records: BTreeMap<u64, LayerEmbedding>,
}

impl EmbeddingSource for MemoryLayer {
    fn header(&self) -> &LayerFileHeader {
        &self.header
    }
    fn fetch(&self, image_id: u64) -> Result<LayerEmbedding, StoreError> {
        self.records.get(&image_id).cloned().ok_or(StoreError::NotFound(image_id))
    }
}

#[cfg(test)]
mod tests;
