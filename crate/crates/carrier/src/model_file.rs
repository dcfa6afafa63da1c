//! Persisted fits: the reduced frame, the carrier coefficients and the
//! fingerprint of the cloud they came from.

use std::path::Path;

use carrier_core::reduce::ReducedSpace;
use carrier_core::surface::{FitDiagnostics, ImplicitPolyModel, MonomialBasis};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{AppError, Result};
use crate::io;

pub const MODEL_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PcaRecord {
    pub ambient_dim: usize,
    pub reduced_dim: usize,
    pub mean: Vec<f64>,
    /// Column-major d x r.
    pub components: Vec<f64>,
    pub explained: f64,
    pub spectrum: Vec<f64>,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolyRecord {
    pub degree: u32,
    pub vars: usize,
    pub theta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub schema_version: u32,
    pub label: String,
    pub pca: PcaRecord,
    pub model: PolyRecord,
    pub cloud_fingerprint: String,
    /// Rows the model was fitted on (after any holdout split).
    pub train_rows: Vec<usize>,
    pub config: serde_json::Value,
    pub diagnostics: FitDiagnostics,
}

impl ModelFile {
    pub fn new(
        label: impl Into<String>,
        space: &ReducedSpace,
        model: &ImplicitPolyModel,
        cloud_fingerprint: String,
        train_rows: Vec<usize>,
        config: serde_json::Value,
        diagnostics: FitDiagnostics,
    ) -> Self {
        ModelFile {
            schema_version: MODEL_SCHEMA_VERSION,
            label: label.into(),
            pca: PcaRecord {
                ambient_dim: space.ambient_dim(),
                reduced_dim: space.reduced_dim(),
                mean: space.mean.as_slice().to_vec(),
                components: space.components.as_slice().to_vec(),
                explained: space.explained,
                spectrum: space.spectrum.clone(),
                threshold: space.threshold,
            },
            model: PolyRecord {
                degree: model.degree(),
                vars: model.vars(),
                theta: model.theta().as_slice().to_vec(),
            },
            cloud_fingerprint,
            train_rows,
            config,
            diagnostics,
        }
    }

    pub fn space(&self) -> Result<ReducedSpace> {
        let p = &self.pca;
        if p.components.len() != p.ambient_dim * p.reduced_dim || p.mean.len() != p.ambient_dim {
            return Err(AppError::Config("model file: PCA shapes disagree".into()));
        }
        Ok(ReducedSpace::from_parts(
            DVector::from_column_slice(&p.mean),
            DMatrix::from_column_slice(p.ambient_dim, p.reduced_dim, &p.components),
            p.explained,
            p.spectrum.clone(),
            p.threshold,
        )?)
    }

    pub fn model(&self) -> Result<ImplicitPolyModel> {
        if self.model.vars != self.pca.reduced_dim {
            return Err(AppError::Config("model file: carrier and PCA dimensions disagree".into()));
        }
        let basis = MonomialBasis::new(self.model.vars, self.model.degree)?;
        Ok(ImplicitPolyModel::from_canonical(basis, DVector::from_column_slice(&self.model.theta))?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: ModelFile = io::read_json(path)?;
        if file.schema_version != MODEL_SCHEMA_VERSION {
            return Err(AppError::format(path, format!("unsupported schema version {}", file.schema_version)));
        }
        // surface any inconsistency at load time
        file.space().map_err(|e| AppError::format(path, e.to_string()))?;
        file.model().map_err(|e| AppError::format(path, e.to_string()))?;
        Ok(file)
    }
}
