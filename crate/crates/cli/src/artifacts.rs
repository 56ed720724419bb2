//! On-disk artifacts: draws table, posterior summary and run manifest.

use std::io::Write;
use std::path::{Path, PathBuf};

use bdctm::diagnostics::Waic;
use bdctm::model::{Model, ModelArtifact};
use bdctm::sampler::PosteriorDraws;
use serde::{Deserialize, Serialize};

use crate::config::sha256_hex;
use crate::error::{CliError, Result};

pub const DRAWS_FILE: &str = "draws.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const MODEL_FILE: &str = "model.json";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Seventeen significant digits.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Column names of the draws table after `chain` and `draw`.
pub fn draw_columns(model: &Model) -> Vec<String> {
    let layout = &model.layout;
    layout
        .coefficient_names()
        .into_iter()
        .chain(layout.variance_labels.iter().map(|l| format!("tau2:{l}")))
        .chain(layout.anisotropy_labels.iter().map(|l| format!("omega:{l}")))
        .collect()
}

/// Retained draws in chain order, one row per draw.
#[derive(Debug, Clone, PartialEq)]
pub struct DrawTable {
    pub columns: Vec<String>,
    pub chain: Vec<usize>,
    pub rows: Vec<Vec<f64>>,
}

impl DrawTable {
    pub fn from_chains(model: &Model, chains: &[PosteriorDraws]) -> DrawTable {
        let mut chain = Vec::new();
        let mut rows = Vec::new();
        for c in chains {
            for k in 0..c.len() {
                chain.push(c.chain);
                let mut row = c.beta[k].clone();
                row.extend_from_slice(&c.variances[k]);
                row.extend_from_slice(&c.omega[k]);
                rows.push(row);
            }
        }
        DrawTable {
            columns: draw_columns(model),
            chain,
            rows,
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r[j]).collect()
    }

    /// Coefficient vectors of the model, located by column name.
    pub fn betas(&self, model: &Model) -> Result<Vec<Vec<f64>>> {
        let idx: Vec<usize> = model
            .layout
            .coefficient_names()
            .iter()
            .map(|name| {
                self.columns
                    .iter()
                    .position(|c| c == name)
                    .ok_or_else(|| CliError::Stale(format!("draws file lacks column {name:?}")))
            })
            .collect::<Result<_>>()?;
        Ok(self.rows.iter().map(|r| idx.iter().map(|&j| r[j]).collect()).collect())
    }

    pub fn write<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let header = ["chain", "draw"].into_iter().map(String::from).chain(self.columns.iter().cloned());
        w.write_record(header)?;
        let mut draw_in_chain = 0;
        for (k, row) in self.rows.iter().enumerate() {
            if k > 0 && self.chain[k] != self.chain[k - 1] {
                draw_in_chain = 0;
            }
            let record = [self.chain[k].to_string(), draw_in_chain.to_string()]
                .into_iter()
                .chain(row.iter().map(|&v| format_f64(v)));
            w.write_record(record)?;
            draw_in_chain += 1;
        }
        w.flush().map_err(|e| CliError::io("writing draws", e))?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<DrawTable> {
        let mut rdr = csv::Reader::from_path(path)?;
        let header = rdr.headers()?.clone();
        if header.get(0) != Some("chain") || header.get(1) != Some("draw") {
            return Err(CliError::Stale(format!("{} is not a draws table", path.display())));
        }
        let columns: Vec<String> = header.iter().skip(2).map(String::from).collect();
        let mut chain = Vec::new();
        let mut rows = Vec::new();
        for (line, record) in rdr.records().enumerate() {
            let record = record?;
            let bad = |what: &str| CliError::Stale(format!("{} row {}: bad {what}", path.display(), line + 1));
            chain.push(record[0].parse().map_err(|_| bad("chain"))?);
            let row = record
                .iter()
                .skip(2)
                .map(|v| v.parse::<f64>().map_err(|_| bad("value")))
                .collect::<Result<Vec<f64>>>()?;
            rows.push(row);
        }
        Ok(DrawTable { columns, chain, rows })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub q2_5: f64,
    pub q97_5: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub draws: usize,
    pub chains: usize,
    pub divergences: usize,
    pub parameters: Vec<ParameterSummary>,
    pub waic: Option<Waic>,
}

/// Linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn summarize_column(name: &str, values: &[f64]) -> ParameterSummary {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = if values.len() > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        f64::NAN
    };
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    ParameterSummary {
        name: name.to_string(),
        mean,
        sd,
        q2_5: quantile(&sorted, 0.025),
        q97_5: quantile(&sorted, 0.975),
    }
}

pub fn summarize(table: &DrawTable) -> Vec<ParameterSummary> {
    table
        .columns
        .iter()
        .enumerate()
        .map(|(j, name)| summarize_column(name, &table.column(j)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub started_unix_s: f64,
    pub elapsed_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputFile {
    pub role: String,
    /// Relative to the manifest's directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config_sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_sha256: Option<String>,
    pub seed: u64,
    pub chains: usize,
    pub timing: Timing,
    pub outputs: Vec<OutputFile>,
}

impl RunManifest {
    pub fn output(&self, role: &str) -> Option<&OutputFile> {
        self.outputs.iter().find(|o| o.role == role)
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_vec_pretty(value)?;
    text.push(b'\n');
    std::fs::write(path, text).map_err(|e| CliError::io(format!("writing {}", path.display()), e))
}

/// Writes `bytes` under `dir` and returns its manifest entry.
pub fn write_output(dir: &Path, role: &str, name: &str, bytes: &[u8]) -> Result<OutputFile> {
    let path = dir.join(name);
    std::fs::write(&path, bytes).map_err(|e| CliError::io(format!("writing {}", path.display()), e))?;
    Ok(OutputFile {
        role: role.into(),
        path: name.into(),
        sha256: sha256_hex(bytes),
    })
}

pub fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(format!("creating {}", dir.display()), e))
}

/// A fitted model loaded back from a `fit` manifest.
#[derive(Debug)]
pub struct FitArtifacts {
    pub manifest: RunManifest,
    pub dir: PathBuf,
    pub model: Model,
    pub draws: DrawTable,
}

impl FitArtifacts {
    /// Loads and verifies a `fit` manifest: the software version must match
    /// and every recorded output must still hash to its recorded digest.
    pub fn load(manifest_path: &Path) -> Result<FitArtifacts> {
        let text = std::fs::read(manifest_path)
            .map_err(|e| CliError::Stale(format!("cannot read manifest {}: {e}", manifest_path.display())))?;
        let manifest: RunManifest = serde_json::from_slice(&text)
            .map_err(|e| CliError::Stale(format!("{}: {e}", manifest_path.display())))?;
        if manifest.command != "fit" {
            return Err(CliError::Stale(format!("manifest records a {:?} run, not a fit", manifest.command)));
        }
        if manifest.version != env!("CARGO_PKG_VERSION") {
            return Err(CliError::Stale(format!(
                "written by version {}, this is {}",
                manifest.version,
                env!("CARGO_PKG_VERSION")
            )));
        }
        let dir = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
        for out in &manifest.outputs {
            let path = dir.join(&out.path);
            let bytes = std::fs::read(&path)
                .map_err(|e| CliError::Stale(format!("{} is missing: {e}", path.display())))?;
            if sha256_hex(&bytes) != out.sha256 {
                return Err(CliError::Stale(format!("{} changed after the fit", path.display())));
            }
        }
        let model_entry = manifest
            .output("model")
            .ok_or_else(|| CliError::Stale("manifest lists no model".into()))?;
        let artifact: ModelArtifact = serde_json::from_slice(
            &std::fs::read(dir.join(&model_entry.path)).map_err(|e| CliError::io("reading model", e))?,
        )?;
        let model = Model::from_artifact(artifact)?;
        let draws_entry = manifest
            .output("draws")
            .ok_or_else(|| CliError::Stale("manifest lists no draws".into()))?;
        let draws = DrawTable::read(&dir.join(&draws_entry.path))?;
        if draws.columns != draw_columns(&model) {
            return Err(CliError::Stale("draws columns do not match the model".into()));
        }
        Ok(FitArtifacts {
            manifest,
            dir,
            model,
            draws,
        })
    }
}
