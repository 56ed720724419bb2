//! Configuration documents and input hashing.

use std::path::Path;

use bdctm::model::{ResponseSpec, TermSpec};
use bdctm::sampler::NutsConfig;
use bdctm::simstudy::ExperimentConfig;
use bdctm::ModelSpec;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

/// The `fit` / `score` configuration: model specification plus sampler
/// settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub response: ResponseSpec,
    pub terms: Vec<TermSpec>,
    #[serde(default)]
    pub sampler: NutsConfig,
}

impl RunConfig {
    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            response: self.response.clone(),
            terms: self.terms.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_spec().validate()?;
        self.sampler.validate()?;
        Ok(())
    }
}

/// Parses a JSON document, reporting the failing path on error.
pub fn parse_document<T: DeserializeOwned>(text: &[u8]) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_slice(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        CliError::Config(format!("at {path}: {}", e.into_inner()))
    })
}

pub fn read_config_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))
}

pub fn read_data_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))
}

pub fn load_run_config(path: &Path) -> Result<(RunConfig, Vec<u8>)> {
    let bytes = read_config_bytes(path)?;
    let config: RunConfig = parse_document(&bytes)?;
    config.validate()?;
    Ok((config, bytes))
}

pub fn load_experiment_config(path: &Path) -> Result<(ExperimentConfig, Vec<u8>)> {
    let bytes = read_config_bytes(path)?;
    let config: ExperimentConfig = parse_document(&bytes)?;
    config.sampler.validate()?;
    Ok((config, bytes))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
