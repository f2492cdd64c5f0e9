//! Versioned JSON model files.
//!
//! Every real is written with enough digits to round-trip exactly, so a
//! loaded model evaluates bit-identically to the one that was saved.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Standardization;
use crate::error::{contract, Result};
use crate::estimator::DensityEstimator;
use crate::train::{TrainConfig, TrainReport};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub best_epoch: usize,
    pub best_validation_nll: f64,
    pub test_nll: f64,
    pub test_bpd: f64,
    pub prior_params: usize,
    pub flow_params: usize,
}

impl From<&TrainReport> for TrainSummary {
    fn from(r: &TrainReport) -> Self {
        Self {
            best_epoch: r.best_epoch,
            best_validation_nll: r.best_validation_nll,
            test_nll: r.test_nll,
            test_bpd: r.test_bpd,
            prior_params: r.prior_params,
            flow_params: r.flow_params,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub config: TrainConfig,
    pub seed: u64,
    /// Maps raw data columns to the space the model was trained in.
    pub standardization: Standardization,
    pub model: DensityEstimator,
    pub summary: Option<TrainSummary>,
}

impl Checkpoint {
    pub fn new(
        config: TrainConfig,
        model: DensityEstimator,
        standardization: Standardization,
        report: Option<&TrainReport>,
    ) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: config.seed,
            config,
            standardization,
            model,
            summary: report.map(TrainSummary::from),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Version {
            schema_version: u32,
        }
        let v: Version = serde_json::from_str(text)?;
        if v.schema_version != SCHEMA_VERSION {
            return contract(format!(
                "checkpoint schema version {} is not supported (expected {SCHEMA_VERSION})",
                v.schema_version
            ));
        }
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
