//! Point clouds in ambient embedding space and their corpus labels.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use nalgebra::DMatrix;

use crate::corpus::{CorpusRecord, SLOT_COUNT};
use crate::error::{Error, Result};
use crate::math::check_finite;

/// An N x d matrix of points with one identifier per row.
///
/// Clouds are validated at construction and immutable afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingCloud {
    points: DMatrix<f64>,
    ids: Vec<String>,
    source: String,
}

impl EmbeddingCloud {
    pub fn new(points: DMatrix<f64>, ids: Vec<String>, source: impl Into<String>) -> Result<Self> {
        if points.nrows() == 0 {
            return Err(Error::Empty("cloud has no rows"));
        }
        if points.ncols() == 0 {
            return Err(Error::Empty("cloud has zero dimension"));
        }
        if ids.len() != points.nrows() {
            return Err(Error::DimensionMismatch {
                expected: points.nrows(),
                found: ids.len(),
            });
        }
        check_finite(&points)?;
        let mut seen = BTreeSet::new();
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::DuplicateId(id.clone()));
            }
        }
        Ok(EmbeddingCloud {
            points,
            ids,
            source: source.into(),
        })
    }

    /// Builds a cloud with ids `"0"`, `"1"`, ...
    pub fn with_index_ids(points: DMatrix<f64>, source: impl Into<String>) -> Result<Self> {
        let ids = (0..points.nrows()).map(|i| alloc::format!("{i}")).collect();
        Self::new(points, ids, source)
    }

    pub fn points(&self) -> &DMatrix<f64> {
        &self.points
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn into_parts(self) -> (DMatrix<f64>, Vec<String>, String) {
        (self.points, self.ids, self.source)
    }
}

/// Points joined with their corpus slot assignments, in corpus order.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledCloud {
    pub points: DMatrix<f64>,
    pub ids: Vec<String>,
    /// Per-point slot variant indices (s1..s4).
    pub slots: Vec<[usize; SLOT_COUNT]>,
}

impl LabeledCloud {
    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }
}

/// Attaches slot labels to embedding rows by id. Output order follows the
/// corpus; the id sets of both sides must be identical.
pub fn join_corpus_embeddings(corpus: &[CorpusRecord], cloud: &EmbeddingCloud) -> Result<LabeledCloud> {
    let by_id: BTreeMap<&str, usize> = cloud.ids().iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let mut rows = Vec::with_capacity(corpus.len());
    let mut seen = BTreeSet::new();
    for rec in corpus {
        let row = *by_id
            .get(rec.id.as_str())
            .ok_or_else(|| Error::UnmatchedId(rec.id.clone()))?;
        if !seen.insert(rec.id.as_str()) {
            return Err(Error::DuplicateId(rec.id.clone()));
        }
        rows.push(row);
    }
    if rows.len() != cloud.len() {
        let missing = cloud
            .ids()
            .iter()
            .find(|id| !seen.contains(id.as_str()))
            .cloned()
            .unwrap_or_default();
        return Err(Error::UnmatchedId(missing));
    }
    let d = cloud.dim();
    let src = cloud.points();
    let points = DMatrix::from_fn(rows.len(), d, |i, j| src[(rows[i], j)]);
    Ok(LabeledCloud {
        points,
        ids: corpus.iter().map(|r| r.id.clone()).collect(),
        slots: corpus.iter().map(|r| r.indices).collect(),
    })
}
