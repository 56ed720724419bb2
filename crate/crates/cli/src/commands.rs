//! Subcommand implementations.

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use bdctm::data::{read_csv, Schema};
use bdctm::diagnostics::{
    kfold_cv, ks_pvalue, ks_statistic, predictive_pmf, quantile_residuals, rootogram, score_predictions, waic,
    ScoreReport,
};
use bdctm::likelihood::loglik_pointwise;
use bdctm::model::{build_design, Model, Predictor, UnknownLevels};
use bdctm::refdist::{raw, ReferenceDistribution};
use bdctm::sampler::{run_chains, PosteriorDraws};
use bdctm::simstudy::{run_experiment, write_results};
use bdctm::Dataset;
use clap::Args;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::artifacts::{
    create_dir, format_f64, summarize, write_json, write_output, DrawTable, FitArtifacts, RunManifest, Summary, Timing,
    DRAWS_FILE, MANIFEST_FILE, MODEL_FILE, SUMMARY_FILE,
};
use crate::config::{load_experiment_config, load_run_config, read_data_bytes, sha256_hex};
use crate::error::{CliError, Result};

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    /// Model and sampler configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Training data (CSV with header).
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the configured master seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the configured number of chains.
    #[arg(long)]
    pub chains: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct PredictArgs {
    /// Manifest written by `fit`.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Covariate rows to predict for (CSV with header).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Response values to evaluate; defaults to every category, or to the
    /// count support carrying all but 1e-8 of each row's mass.
    #[arg(long, value_delimiter = ',')]
    pub ys: Option<Vec<i64>>,
}

#[derive(Debug, Clone, Args)]
pub struct ScoreArgs {
    /// Score a fitted model on `--data`.
    #[arg(long, conflicts_with = "config", required_unless_present = "config")]
    pub manifest: Option<PathBuf>,
    /// Cross-validate this configuration on `--data`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Number of cross-validation folds.
    #[arg(long, default_value_t = 10)]
    pub folds: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub chains: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Largest count in the rootogram; defaults to the largest observed.
    #[arg(long)]
    pub r_max: Option<i64>,
    /// Seed for residual randomization; defaults to the fit's seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    /// Experiment configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub replications: Option<usize>,
    #[arg(long)]
    pub chains: Option<usize>,
}

fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

fn read_dataset(bytes: &[u8], schema: &Schema) -> Result<Dataset> {
    Ok(read_csv(bytes, schema)?)
}

/// Schema without the response column, for prediction on new rows.
fn covariate_schema(model: &Model) -> Result<Schema> {
    let mut schema = model.spec.schema()?;
    schema.columns.retain(|(name, _)| *name != model.spec.response.column);
    Ok(schema)
}

pub fn fit(args: &FitArgs) -> Result<RunManifest> {
    let started = unix_now();
    let clock = Instant::now();
    let (config, config_bytes) = load_run_config(&args.config)?;
    let mut sampler = config.sampler.clone();
    if let Some(seed) = args.seed {
        sampler.seed = seed;
    }
    if let Some(chains) = args.chains {
        sampler.chains = chains;
    }
    sampler.validate()?;
    let spec = config.model_spec();
    let data_bytes = read_data_bytes(&args.data)?;
    let data = read_dataset(&data_bytes, &spec.schema()?)?;
    let md = build_design(&spec, &data)?;
    for w in &md.design.warnings {
        log::warn!("{w}");
    }
    let chains = run_chains(&md, &sampler)?;
    let pooled = PosteriorDraws::pool(&chains);
    let table = DrawTable::from_chains(&md.model, &chains);

    create_dir(&args.out)?;
    let mut outputs = Vec::new();
    let mut model_json = serde_json::to_vec_pretty(&md.model.artifact())?;
    model_json.push(b'\n');
    outputs.push(write_output(&args.out, "model", MODEL_FILE, &model_json)?);
    let mut draws_csv = Vec::new();
    table.write(&mut draws_csv)?;
    outputs.push(write_output(&args.out, "draws", DRAWS_FILE, &draws_csv)?);
    let summary = Summary {
        draws: table.len(),
        chains: chains.len(),
        divergences: chains.iter().map(PosteriorDraws::divergences).sum(),
        parameters: summarize(&table),
        waic: if pooled.len() >= 2 && data.n() > 0 {
            Some(waic(&pooled.pointwise)?)
        } else {
            None
        },
    };
    if summary.divergences > 0 {
        log::warn!("{} divergent transitions after warm-up", summary.divergences);
    }
    let mut summary_json = serde_json::to_vec_pretty(&summary)?;
    summary_json.push(b'\n');
    outputs.push(write_output(&args.out, "summary", SUMMARY_FILE, &summary_json)?);

    let manifest = RunManifest {
        command: "fit".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config_sha256: sha256_hex(&config_bytes),
        data_sha256: Some(sha256_hex(&data_bytes)),
        seed: sampler.seed,
        chains: sampler.chains,
        timing: Timing {
            started_unix_s: started,
            elapsed_s: clock.elapsed().as_secs_f64(),
        },
        outputs,
    };
    write_json(&args.out.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

fn write_csv_file(path: &Path, header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| CliError::io(format!("creating {}", path.display()), e))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.flush().map_err(|e| CliError::io(format!("writing {}", path.display()), e))?;
    Ok(())
}

pub fn predict(args: &PredictArgs) -> Result<PathBuf> {
    let fitted = FitArtifacts::load(&args.manifest)?;
    let model = &fitted.model;
    let data = read_dataset(&read_data_bytes(&args.data)?, &covariate_schema(model)?)?;
    let betas = fitted.draws.betas(model)?;
    let predictor = Predictor::from_draws(model, &data, &betas, UnknownLevels::Error)?;
    let mut rows = Vec::new();
    for i in 0..predictor.n() {
        let ys: Vec<i64> = match (&args.ys, model.categories()) {
            (Some(ys), _) => ys.clone(),
            (None, Some(k)) => (1..=k as i64).collect(),
            (None, None) => {
                let (pmf, _) = predictive_pmf(&predictor, model, i, 0, 0);
                (0..pmf.len() as i64).collect()
            }
        };
        for y in ys {
            rows.push(vec![
                i.to_string(),
                y.to_string(),
                format_f64(predictor.cdf(i, y as f64)),
                format_f64(predictor.pmf(i, y)),
            ]);
        }
    }
    create_dir(&args.out)?;
    let path = args.out.join("predictions.csv");
    write_csv_file(&path, &["row", "y", "cdf", "pmf"], rows.into_iter())?;
    Ok(path)
}

/// Scores of a fitted model on a dataset, with WAIC over its draws.
pub fn score_fitted(fitted: &FitArtifacts, data: &Dataset) -> Result<ScoreReport> {
    let model = &fitted.model;
    let betas = fitted.draws.betas(model)?;
    let predictor = Predictor::from_draws(model, data, &betas, UnknownLevels::Error)?;
    let y = model.response_values(data)?;
    let mut report = score_predictions(&predictor, model, &y)?;
    if betas.len() >= 2 {
        let design = model.design(data, UnknownLevels::Error)?;
        let pointwise: Vec<Vec<f64>> = betas.iter().map(|b| loglik_pointwise(model, &design, b)).collect();
        report.waic = Some(waic(&pointwise)?);
    }
    Ok(report)
}

pub fn score(args: &ScoreArgs) -> Result<PathBuf> {
    create_dir(&args.out)?;
    match (&args.manifest, &args.config) {
        (Some(manifest), None) => {
            let fitted = FitArtifacts::load(manifest)?;
            let data = read_dataset(&read_data_bytes(&args.data)?, &fitted.model.spec.schema()?)?;
            let report = score_fitted(&fitted, &data)?;
            let path = args.out.join("scores.json");
            write_json(&path, &report)?;
            Ok(path)
        }
        (None, Some(config)) => {
            let (config, _) = load_run_config(config)?;
            let mut sampler = config.sampler.clone();
            if let Some(chains) = args.chains {
                sampler.chains = chains;
            }
            let seed = args.seed.unwrap_or(sampler.seed);
            sampler.seed = seed;
            let spec = config.model_spec();
            let data = read_dataset(&read_data_bytes(&args.data)?, &spec.schema()?)?;
            let report = kfold_cv(&spec, &data, args.folds, &sampler, seed)?;
            let path = args.out.join("cv_scores.json");
            write_json(&path, &report)?;
            Ok(path)
        }
        _ => Err(CliError::Config("exactly one of --manifest and --config is required".into())),
    }
}

#[derive(Debug, Clone, Serialize)]
struct DiagnosticsReport {
    n: usize,
    residual_ks_statistic: f64,
    residual_ks_pvalue: f64,
    rootogram: bool,
}

pub fn diagnose(args: &DiagnoseArgs) -> Result<PathBuf> {
    let fitted = FitArtifacts::load(&args.manifest)?;
    let model = &fitted.model;
    let data = read_dataset(&read_data_bytes(&args.data)?, &model.spec.schema()?)?;
    let betas = fitted.draws.betas(model)?;
    let predictor = Predictor::from_draws(model, &data, &betas, UnknownLevels::Error)?;
    let y = model.response_values(&data)?;
    create_dir(&args.out)?;

    let has_rootogram = model.is_count();
    if has_rootogram {
        let r_max = args.r_max.unwrap_or_else(|| y.iter().copied().max().unwrap_or(0));
        let root = rootogram(&predictor, model, &y, r_max)?;
        let rows = (0..root.r.len()).map(|k| {
            vec![
                root.r[k].to_string(),
                format_f64(root.observed[k]),
                format_f64(root.expected[k]),
            ]
        });
        write_csv_file(&args.out.join("rootogram.csv"), &["r", "obs", "exp"], rows)?;
    }

    let seed = args.seed.unwrap_or(fitted.manifest.seed);
    let residuals = quantile_residuals(&predictor, &y, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let rows = residuals
        .iter()
        .enumerate()
        .map(|(i, r)| vec![i.to_string(), format_f64(*r)]);
    write_csv_file(&args.out.join("residuals.csv"), &["row", "residual"], rows)?;
    let d = ks_statistic(&residuals, |v| raw::cdf(ReferenceDistribution::StandardNormal, v));
    let report = DiagnosticsReport {
        n: residuals.len(),
        residual_ks_statistic: d,
        residual_ks_pvalue: ks_pvalue(d, residuals.len()),
        rootogram: has_rootogram,
    };
    let path = args.out.join("diagnostics.json");
    write_json(&path, &report)?;
    Ok(path)
}

pub fn simulate(args: &SimulateArgs) -> Result<RunManifest> {
    let started = unix_now();
    let clock = Instant::now();
    let (mut config, config_bytes) = load_experiment_config(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(r) = args.replications {
        config.replications = r;
    }
    if let Some(c) = args.chains {
        config.sampler.chains = c;
    }
    let rows = run_experiment(&config)?;
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    if failed > 0 {
        log::warn!("{failed} of {} cells failed", rows.len());
    }
    create_dir(&args.out)?;
    let mut csv = Vec::new();
    write_results(&rows, &mut csv)?;
    let outputs = vec![write_output(&args.out, "results", "results.csv", &csv)?];
    let manifest = RunManifest {
        command: "simulate".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config_sha256: sha256_hex(&config_bytes),
        data_sha256: None,
        seed: config.seed,
        chains: config.sampler.chains,
        timing: Timing {
            started_unix_s: started,
            elapsed_s: clock.elapsed().as_secs_f64(),
        },
        outputs,
    };
    write_json(&args.out.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}
