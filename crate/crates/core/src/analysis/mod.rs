//! Layerwise representation analysis: projection-weighted CCA between
//! encoder layers and reference views, plus linear probes over frozen
//! embeddings.

mod probe;
mod pwcca;
mod report;

pub use probe::{linear_probe, probe_report, ProbeConfig, ProbeReport, ProbeRow};
pub use pwcca::{pwcca, pwcca_detailed, pwcca_with, PwccaDetail, PwccaOptions};
pub use report::{
    layerwise_report, pool_words, reference_matrix, AlignedItems, CheckpointTag, PooledWords,
    ReferenceKind, ReportConfig, SimilarityCell, SimilarityReport, GLOVE_DIM,
};

use ndarray::Array2;

use crate::error::{Error, Result};

/// What one row of a representation matrix stands for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ItemKind {
    Frame,
    WordToken,
    Utterance,
}

/// n items × d dims, all finite. Compared views must agree on `items` —
/// rows correspond 1:1 across the two sides of a CCA.
#[derive(Debug, Clone, PartialEq)]
pub struct RepresentationMatrix {
    pub rows: Array2<f64>,
    pub items: ItemKind,
}

impl RepresentationMatrix {
    pub fn n(&self) -> usize {
        self.rows.nrows()
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows.ncols() == 0 {
            return Err(Error::config("representation matrix has zero dims"));
        }
        if !self.rows.iter().all(|v| v.is_finite()) {
            return Err(Error::config("representation matrix has non-finite entries"));
        }
        Ok(())
    }
}
