//! Count simulation experiment: five data generating processes, Poisson and
//! negative binomial GLM baselines, and centered out-of-sample
//! log-likelihoods.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::basis::{knots_on_domain, KnotVector, ResponseTransform};
use crate::data::{Column, Dataset};
use crate::error::{Error, Result};
use crate::model::{build_design, Hyperparameters, ModelSpec, Predictor, ResponseKind, ResponseSpec, TermSpec, UnknownLevels};
use crate::refdist::{raw, ReferenceDistribution};
use crate::sampler::{run_chains, NutsConfig, PosteriorDraws};

pub const MEAN_INTERCEPT: f64 = 1.2;
pub const MEAN_SLOPE: f64 = 0.8;
pub const NEGBIN_SIZE: f64 = 3.0;
pub const TRAFO_SHIFT: f64 = 0.8;
/// Upper end of the response-basis domain on the `log(y + 1)` scale.
pub const TRAFO_DOMAIN_UPPER_COUNT: f64 = 25.0;
pub const MAX_COUNT: u64 = 1_000_000;
pub const GLM_MAX_ITER: usize = 200;
/// Negative binomial sizes beyond this are reported as the Poisson limit.
pub const NEGBIN_POISSON_LIMIT: f64 = 1e6;
const NEGBIN_SIZE_CAP: f64 = 1e8;

/// True transformation coefficients of the trafo processes. They map an
/// underdispersed reference shape (Binomial(14, 1/2) at z = 1/2) through each
/// link and are fixed so every implementation simulates the same data.
pub const TRAFO_GAMMA_LOGIT: [f64; 8] = [-9.31, -8.48, -7.01, -3.48, -0.21, 4.02, 25.48, 46.98];
pub const TRAFO_GAMMA_PROBIT: [f64; 8] = [-3.44, -3.28, -2.83, -1.8, -0.07, 3.05, 8.51, 13.97];
pub const TRAFO_GAMMA_CLOGLOG: [f64; 8] = [-9.31, -8.61, -6.89, -3.63, -0.07, 2.46, 4.44, 6.42];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DgpKind {
    Poisson,
    Negbin,
    TrafoLogit,
    TrafoProbit,
    TrafoCloglog,
}

impl DgpKind {
    pub const ALL: [DgpKind; 5] = [
        DgpKind::Poisson,
        DgpKind::Negbin,
        DgpKind::TrafoLogit,
        DgpKind::TrafoProbit,
        DgpKind::TrafoCloglog,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DgpKind::Poisson => "poisson",
            DgpKind::Negbin => "negbin",
            DgpKind::TrafoLogit => "trafo_logit",
            DgpKind::TrafoProbit => "trafo_probit",
            DgpKind::TrafoCloglog => "trafo_cloglog",
        }
    }

    pub fn reference(self) -> Option<ReferenceDistribution> {
        match self {
            DgpKind::TrafoLogit => Some(ReferenceDistribution::StandardLogistic),
            DgpKind::TrafoProbit => Some(ReferenceDistribution::StandardNormal),
            DgpKind::TrafoCloglog => Some(ReferenceDistribution::MinimumExtremeValue),
            _ => None,
        }
    }
}

/// Conditional count distribution given a uniform covariate `z`.
#[derive(Debug, Clone, PartialEq)]
pub enum DgpSpec {
    Poisson {
        intercept: f64,
        slope: f64,
    },
    NegBin {
        intercept: f64,
        slope: f64,
        size: f64,
    },
    /// `F(y | z) = F_Z(a(log(y + 1))^T gamma - shift * z)`.
    Trafo {
        reference: ReferenceDistribution,
        gamma: Vec<f64>,
        shift: f64,
        knots: KnotVector,
    },
}

impl DgpSpec {
    pub fn new(kind: DgpKind) -> DgpSpec {
        match kind {
            DgpKind::Poisson => DgpSpec::Poisson {
                intercept: MEAN_INTERCEPT,
                slope: MEAN_SLOPE,
            },
            DgpKind::Negbin => DgpSpec::NegBin {
                intercept: MEAN_INTERCEPT,
                slope: MEAN_SLOPE,
                size: NEGBIN_SIZE,
            },
            _ => {
                let gamma = match kind {
                    DgpKind::TrafoLogit => TRAFO_GAMMA_LOGIT,
                    DgpKind::TrafoProbit => TRAFO_GAMMA_PROBIT,
                    _ => TRAFO_GAMMA_CLOGLOG,
                };
                DgpSpec::Trafo {
                    reference: kind.reference().expect("trafo kinds have a reference"),
                    gamma: gamma.to_vec(),
                    shift: TRAFO_SHIFT,
                    knots: knots_on_domain(0.0, TRAFO_DOMAIN_UPPER_COUNT.ln_1p(), 8, 3),
                }
            }
        }
    }

    /// Checks monotonicity and that the CDF reaches `1 - 1e-12` by
    /// [`MAX_COUNT`] for every `z` in `[0, 1]`.
    pub fn validate(&self) -> Result<()> {
        match self {
            DgpSpec::Poisson { .. } => Ok(()),
            DgpSpec::NegBin { size, .. } => {
                if *size > 0.0 {
                    Ok(())
                } else {
                    Err(Error::config("dgp.size", "must be positive"))
                }
            }
            DgpSpec::Trafo {
                gamma, knots, reference, shift,
            } => {
                if gamma.len() != knots.dim() || gamma.windows(2).any(|w| !(w[1] > w[0])) {
                    return Err(Error::config("dgp.gamma", "must be strictly increasing with one entry per basis function"));
                }
                let worst = shift.max(0.0);
                let h = self.transformation(MAX_COUNT, 0.0) - worst;
                if raw::sf(*reference, h) > 1e-12 {
                    return Err(Error::config(
                        "dgp.gamma",
                        format!("CDF does not reach 1 - 1e-12 within {MAX_COUNT} counts"),
                    ));
                }
                Ok(())
            }
        }
    }

    pub fn mean(&self, z: f64) -> Option<f64> {
        match self {
            DgpSpec::Poisson { intercept, slope } | DgpSpec::NegBin { intercept, slope, .. } => {
                Some((intercept + slope * z).exp())
            }
            DgpSpec::Trafo { .. } => None,
        }
    }

    pub fn variance(&self, z: f64) -> Option<f64> {
        match self {
            DgpSpec::Poisson { .. } => self.mean(z),
            DgpSpec::NegBin { size, .. } => self.mean(z).map(|m| m + m * m / size),
            DgpSpec::Trafo { .. } => None,
        }
    }

    /// `a(log(y + 1))^T gamma - shift * z` for trafo processes.
    fn transformation(&self, y: u64, z: f64) -> f64 {
        match self {
            DgpSpec::Trafo {
                gamma, shift, knots, ..
            } => {
                let v = ResponseTransform::Log1p.apply(y as f64);
                let row = knots.eval_linear_extrapolated(v);
                row.iter().zip(gamma).map(|(a, g)| a * g).sum::<f64>() - shift * z
            }
            _ => f64::NAN,
        }
    }

    pub fn cdf(&self, y: i64, z: f64) -> f64 {
        if y < 0 {
            return 0.0;
        }
        match self {
            DgpSpec::Trafo { reference, .. } => raw::cdf(*reference, self.transformation(y as u64, z)),
            _ => (0..=y).map(|k| self.log_pmf(k as u64, z).exp()).sum::<f64>().min(1.0),
        }
    }

    pub fn log_pmf(&self, y: u64, z: f64) -> f64 {
        let yf = y as f64;
        match self {
            DgpSpec::Poisson { .. } => {
                let mu = self.mean(z).unwrap_or(f64::NAN);
                poisson_log_pmf(yf, mu)
            }
            DgpSpec::NegBin { size, .. } => negbin_log_pmf(yf, self.mean(z).unwrap_or(f64::NAN), *size),
            DgpSpec::Trafo { reference, .. } => {
                let upper = self.transformation(y, z);
                let lower = if y == 0 {
                    f64::NEG_INFINITY
                } else {
                    self.transformation(y - 1, z)
                };
                raw::log_diff_cdf(*reference, upper, lower)
            }
        }
    }

    pub fn sample<R: Rng>(&self, z: f64, rng: &mut R) -> Result<u64> {
        match self {
            DgpSpec::Poisson { .. } => Ok(draw_poisson(self.mean(z).unwrap_or(f64::NAN), rng)),
            DgpSpec::NegBin { size, .. } => {
                let mu = self.mean(z).unwrap_or(f64::NAN);
                let lambda = Gamma::new(*size, mu / size)
                    .map_err(|e| Error::Domain(e.to_string()))?
                    .sample(rng);
                Ok(draw_poisson(lambda, rng))
            }
            DgpSpec::Trafo { reference, .. } => {
                let u: f64 = rng.random();
                let mut y = 0;
                while raw::cdf(*reference, self.transformation(y, z)) < u {
                    y += 1;
                    if y > MAX_COUNT {
                        return Err(Error::config("dgp.gamma", "inverse-CDF search exceeded the count cap"));
                    }
                }
                Ok(y)
            }
        }
    }
}

fn draw_poisson<R: Rng>(mean: f64, rng: &mut R) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).map(|p| p.sample(rng) as u64).unwrap_or(0)
}

pub fn poisson_log_pmf(y: f64, mu: f64) -> f64 {
    y * mu.ln() - mu - ln_gamma(y + 1.0)
}

pub fn negbin_log_pmf(y: f64, mu: f64, size: f64) -> f64 {
    ln_gamma(y + size) - ln_gamma(size) - ln_gamma(y + 1.0) + size * (size / (size + mu)).ln()
        + y * (mu / (size + mu)).ln()
}

pub fn gen_covariate<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| rng.random::<f64>()).collect()
}

pub fn gen_response<R: Rng>(dgp: &DgpSpec, z: &[f64], rng: &mut R) -> Result<Vec<u64>> {
    dgp.validate()?;
    z.iter().map(|&v| dgp.sample(v, rng)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GlmFamily {
    Poisson,
    NegBin,
}

/// Log-link count GLM fitted by maximum likelihood.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlmFit {
    pub family: GlmFamily,
    pub coefficients: Vec<f64>,
    pub standard_errors: Vec<f64>,
    /// Negative binomial size; `None` for Poisson.
    pub size: Option<f64>,
    /// The size estimate diverged toward the Poisson limit.
    pub poisson_limit: bool,
    pub loglik: f64,
    pub iterations: usize,
}

impl GlmFit {
    pub fn mean(&self, x: &[f64]) -> f64 {
        x.iter().zip(&self.coefficients).map(|(a, b)| a * b).sum::<f64>().exp()
    }

    pub fn log_pmf(&self, x: &[f64], y: u64) -> f64 {
        let mu = self.mean(x);
        match self.size {
            None => poisson_log_pmf(y as f64, mu),
            Some(size) => negbin_log_pmf(y as f64, mu, size),
        }
    }
}

/// Model matrix `[1, z]`.
pub fn intercept_and(z: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(z.len(), 2, |i, j| if j == 0 { 1.0 } else { z[i] })
}

/// One weighted least-squares step; returns coefficients and `(X^T W X)^-1`.
fn wls(x: &DMatrix<f64>, w: &[f64], work: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let p = x.ncols();
    let mut xtwx = DMatrix::zeros(p, p);
    let mut xtwz = DVector::zeros(p);
    for i in 0..x.nrows() {
        for a in 0..p {
            xtwz[a] += x[(i, a)] * w[i] * work[i];
            for b in 0..p {
                xtwx[(a, b)] += x[(i, a)] * w[i] * x[(i, b)];
            }
        }
    }
    let inv = xtwx
        .try_inverse()
        .ok_or_else(|| Error::Domain("singular weighted cross-product in IRLS".into()))?;
    Ok((&inv * xtwz, inv))
}

/// IRLS for the coefficients at a fixed size (`None` = Poisson), starting
/// from `beta`.
fn irls(x: &DMatrix<f64>, y: &[f64], size: Option<f64>, beta: Option<DVector<f64>>) -> Result<(DVector<f64>, DMatrix<f64>, usize)> {
    let n = y.len();
    let mut eta: Vec<f64> = match &beta {
        Some(b) => (x * b).iter().copied().collect(),
        None => y.iter().map(|&v| (v + 0.1).ln()).collect(),
    };
    let loglik = |eta: &[f64]| -> f64 {
        eta.iter()
            .zip(y)
            .map(|(&e, &v)| match size {
                None => poisson_log_pmf(v, e.exp()),
                Some(s) => negbin_log_pmf(v, e.exp(), s),
            })
            .sum()
    };
    let mut old = f64::NEG_INFINITY;
    for iter in 1..=GLM_MAX_ITER {
        let mu: Vec<f64> = eta.iter().map(|e| e.exp()).collect();
        let w: Vec<f64> = mu
            .iter()
            .map(|&m| match size {
                None => m,
                Some(s) => m / (1.0 + m / s),
            })
            .collect();
        let work: Vec<f64> = (0..n).map(|i| eta[i] + (y[i] - mu[i]) / mu[i]).collect();
        let (b, inv) = wls(x, &w, &work)?;
        eta = (x * &b).iter().copied().collect();
        let ll = loglik(&eta);
        if (ll - old).abs() <= 1e-10 * (ll.abs() + 0.1) {
            return Ok((b, inv, iter));
        }
        old = ll;
    }
    Err(Error::Convergence {
        iterations: GLM_MAX_ITER,
        message: format!("IRLS did not converge; last log-likelihood {old}"),
    })
}

fn check_glm_input(x: &DMatrix<f64>, y: &[u64]) -> Result<Vec<f64>> {
    if x.nrows() != y.len() || y.is_empty() {
        return Err(Error::Dimension(format!("{} rows for {} responses", x.nrows(), y.len())));
    }
    Ok(y.iter().map(|&v| v as f64).collect())
}

pub fn fit_poisson(x: &DMatrix<f64>, y: &[u64]) -> Result<GlmFit> {
    let yf = check_glm_input(x, y)?;
    let (b, inv, iterations) = irls(x, &yf, None, None)?;
    let eta = x * &b;
    let loglik = eta.iter().zip(&yf).map(|(e, &v)| poisson_log_pmf(v, e.exp())).sum();
    Ok(GlmFit {
        family: GlmFamily::Poisson,
        coefficients: b.iter().copied().collect(),
        standard_errors: (0..b.len()).map(|j| inv[(j, j)].sqrt()).collect(),
        size: None,
        poisson_limit: false,
        loglik,
        iterations,
    })
}

fn size_loglik(y: &[f64], mu: &[f64], size: f64) -> f64 {
    y.iter().zip(mu).map(|(&v, &m)| negbin_log_pmf(v, m, size)).sum()
}

/// d loglik / d log(size).
fn size_score(y: &[f64], mu: &[f64], size: f64) -> f64 {
    let s: f64 = y
        .iter()
        .zip(mu)
        .map(|(&v, &m)| digamma(v + size) - digamma(size) + (size / (size + m)).ln() + 1.0 - (v + size) / (size + m))
        .sum();
    size * s
}

/// Newton-Raphson on `log(size)` with step halving.
fn update_size(y: &[f64], mu: &[f64], start: f64) -> f64 {
    let mut eta = start.ln();
    for _ in 0..50 {
        let size = eta.exp();
        let g = size_score(y, mu, size);
        let h = 1e-5;
        let curv = (size_score(y, mu, (eta + h).exp()) - size_score(y, mu, (eta - h).exp())) / (2.0 * h);
        let mut step = if curv < 0.0 { -g / curv } else { g.signum() };
        step = step.clamp(-5.0, 5.0);
        let base = size_loglik(y, mu, size);
        let mut accepted = false;
        for _ in 0..30 {
            let cand = (eta + step).min(NEGBIN_SIZE_CAP.ln());
            if size_loglik(y, mu, cand.exp()) >= base {
                eta = cand;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted || step.abs() < 1e-10 || eta >= NEGBIN_SIZE_CAP.ln() {
            break;
        }
    }
    eta.exp()
}

/// Alternates IRLS for the coefficients with Newton updates for the size.
pub fn fit_negbin(x: &DMatrix<f64>, y: &[u64]) -> Result<GlmFit> {
    let yf = check_glm_input(x, y)?;
    let (mut b, _, _) = irls(x, &yf, None, None)?;
    let mu: Vec<f64> = (x * &b).iter().map(|e| e.exp()).collect();
    let excess: f64 = yf.iter().zip(&mu).map(|(&v, &m)| (v - m).powi(2) - v).sum::<f64>();
    let mu2: f64 = mu.iter().map(|m| m * m).sum();
    let mut size = if excess > 0.0 { (mu2 / excess).min(NEGBIN_SIZE_CAP) } else { 1e3 };
    let mut old = f64::NEG_INFINITY;
    for iter in 1..=GLM_MAX_ITER {
        let mu: Vec<f64> = (x * &b).iter().map(|e| e.exp()).collect();
        size = update_size(&yf, &mu, size);
        let (nb, inv, _) = irls(x, &yf, Some(size), Some(b))?;
        b = nb;
        let mu: Vec<f64> = (x * &b).iter().map(|e| e.exp()).collect();
        let ll = size_loglik(&yf, &mu, size);
        if (ll - old).abs() <= 1e-10 * (ll.abs() + 0.1) {
            return Ok(GlmFit {
                family: GlmFamily::NegBin,
                coefficients: b.iter().copied().collect(),
                standard_errors: (0..b.len()).map(|j| inv[(j, j)].sqrt()).collect(),
                size: Some(size),
                poisson_limit: size >= NEGBIN_POISSON_LIMIT,
                loglik: ll,
                iterations: iter,
            });
        }
        old = ll;
    }
    Err(Error::Convergence {
        iterations: GLM_MAX_ITER,
        message: format!("negative binomial fit did not converge; size {size}, log-likelihood {old}"),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    BdctmLogit,
    BdctmProbit,
    BdctmCloglog,
    PoissonGlm,
    NegbinGlm,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::BdctmLogit,
        ModelKind::BdctmProbit,
        ModelKind::BdctmCloglog,
        ModelKind::PoissonGlm,
        ModelKind::NegbinGlm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::BdctmLogit => "bdctm_logit",
            ModelKind::BdctmProbit => "bdctm_probit",
            ModelKind::BdctmCloglog => "bdctm_cloglog",
            ModelKind::PoissonGlm => "poisson_glm",
            ModelKind::NegbinGlm => "negbin_glm",
        }
    }

    pub fn reference(self) -> Option<ReferenceDistribution> {
        match self {
            ModelKind::BdctmLogit => Some(ReferenceDistribution::StandardLogistic),
            ModelKind::BdctmProbit => Some(ReferenceDistribution::StandardNormal),
            ModelKind::BdctmCloglog => Some(ReferenceDistribution::MinimumExtremeValue),
            _ => None,
        }
    }
}

/// Count transformation model with a monotone response spline and a linear
/// shift in `z`.
pub fn bdctm_spec(reference: ReferenceDistribution) -> ModelSpec {
    ModelSpec {
        response: ResponseSpec {
            kind: ResponseKind::Count,
            column: "y".into(),
            reference,
            levels: None,
            categories: None,
        },
        terms: vec![
            TermSpec::BaselineCount {
                dimension: 8,
                transform: ResponseTransform::Log1p,
                hyperparameters: Hyperparameters::default(),
            },
            TermSpec::Linear {
                columns: vec!["z".into()],
            },
        ],
    }
}

pub fn simulation_dataset(y: Vec<u64>, z: Vec<f64>) -> Result<Dataset> {
    Dataset::new().with("y", Column::Count(y))?.with("z", Column::Continuous(z))
}

/// Held-out log-likelihood of the true process.
pub fn oracle_loglik(dgp: &DgpSpec, y: &[u64], z: &[f64]) -> f64 {
    y.iter().zip(z).map(|(&v, &w)| dgp.log_pmf(v, w)).sum()
}

/// Fitted minus oracle held-out log-likelihood.
pub fn centered_loglik(model: f64, oracle: f64) -> f64 {
    model - oracle
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub train_y: Vec<u64>,
    pub train_z: Vec<f64>,
    pub test_y: Vec<u64>,
    pub test_z: Vec<f64>,
}

pub fn draw_sample(dgp: &DgpSpec, n_train: usize, n_test: usize, seed: u64) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train_z = gen_covariate(n_train, &mut rng);
    let train_y = gen_response(dgp, &train_z, &mut rng)?;
    let test_z = gen_covariate(n_test, &mut rng);
    let test_y = gen_response(dgp, &test_z, &mut rng)?;
    Ok(Sample {
        train_y,
        train_z,
        test_y,
        test_z,
    })
}

/// Held-out log-likelihood of a fitted model and its retained divergences.
pub fn fit_and_score(model: ModelKind, sample: &Sample, sampler: &NutsConfig) -> Result<(f64, usize)> {
    match model {
        ModelKind::PoissonGlm | ModelKind::NegbinGlm => {
            let x = intercept_and(&sample.train_z);
            let fit = if model == ModelKind::PoissonGlm {
                fit_poisson(&x, &sample.train_y)?
            } else {
                fit_negbin(&x, &sample.train_y)?
            };
            let ll = sample
                .test_y
                .iter()
                .zip(&sample.test_z)
                .map(|(&y, &z)| fit.log_pmf(&[1.0, z], y))
                .sum();
            Ok((ll, 0))
        }
        _ => {
            let spec = bdctm_spec(model.reference().expect("bdctm kinds have a reference"));
            let train = simulation_dataset(sample.train_y.clone(), sample.train_z.clone())?;
            let test = simulation_dataset(sample.test_y.clone(), sample.test_z.clone())?;
            let md = build_design(&spec, &train)?;
            let chains = run_chains(&md, sampler)?;
            let pooled = PosteriorDraws::pool(&chains);
            let predictor = Predictor::from_draws(&md.model, &test, &pooled.beta, UnknownLevels::Error)?;
            let ll = sample
                .test_y
                .iter()
                .enumerate()
                .map(|(i, &y)| predictor.log_pmf(i, y as i64))
                .sum();
            Ok((ll, pooled.divergences()))
        }
    }
}

fn default_replications() -> usize {
    10
}
fn default_n_train() -> usize {
    250
}
fn default_n_test() -> usize {
    750
}
fn default_seed() -> u64 {
    1
}
fn default_dgps() -> Vec<DgpKind> {
    DgpKind::ALL.to_vec()
}
fn default_models() -> Vec<ModelKind> {
    ModelKind::ALL.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default = "default_n_train")]
    pub n_train: usize,
    #[serde(default = "default_n_test")]
    pub n_test: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub sampler: NutsConfig,
    #[serde(default = "default_dgps")]
    pub dgps: Vec<DgpKind>,
    #[serde(default = "default_models")]
    pub models: Vec<ModelKind>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            replications: default_replications(),
            n_train: default_n_train(),
            n_test: default_n_test(),
            seed: default_seed(),
            sampler: NutsConfig::default(),
            dgps: default_dgps(),
            models: default_models(),
        }
    }
}

/// Seed for one cell: the master seed's generator on stream
/// `(replication, dgp, model)`.
pub fn cell_seed(master: u64, replication: usize, dgp: usize, model: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(((replication as u64) << 16) | ((dgp as u64) << 8) | model as u64);
    rng.next_u64()
}

/// Data seeds use a model slot no model occupies.
const DATA_SLOT: usize = 0xff;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRow {
    pub replication: usize,
    pub dgp: String,
    pub model: String,
    pub centered_oos_loglik: f64,
    pub runtime_s: f64,
    pub divergences: usize,
    /// Failure message when the cell could not be fitted.
    pub error: Option<String>,
}

/// Runs every replication x process x model cell; failures are recorded
/// per cell.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<ExperimentRow>> {
    config.sampler.validate()?;
    if config.n_train < 2 || config.n_test == 0 {
        return Err(Error::config("n_train", "need at least two training and one test observation"));
    }
    let mut samples = Vec::new();
    for rep in 0..config.replications {
        for (d, &kind) in config.dgps.iter().enumerate() {
            let dgp = DgpSpec::new(kind);
            let sample = draw_sample(&dgp, config.n_train, config.n_test, cell_seed(config.seed, rep, d, DATA_SLOT))?;
            let oracle = oracle_loglik(&dgp, &sample.test_y, &sample.test_z);
            samples.push((rep, d, kind, sample, oracle));
        }
    }
    let cells: Vec<(usize, usize)> = (0..samples.len())
        .flat_map(|s| (0..config.models.len()).map(move |m| (s, m)))
        .collect();
    let rows = cells
        .par_iter()
        .map(|&(s, m)| {
            let (rep, d, kind, sample, oracle) = &samples[s];
            let model = config.models[m];
            let sampler = NutsConfig {
                seed: cell_seed(config.seed, *rep, *d, m),
                ..config.sampler.clone()
            };
            let start = Instant::now();
            let result = fit_and_score(model, sample, &sampler);
            let runtime_s = start.elapsed().as_secs_f64();
            let (centered, divergences, error) = match result {
                Ok((ll, div)) => (centered_loglik(ll, *oracle), div, None),
                Err(e) => {
                    log::warn!("replication {rep}, {}, {}: {e}", kind.name(), model.name());
                    (f64::NAN, 0, Some(e.to_string()))
                }
            };
            ExperimentRow {
                replication: *rep,
                dgp: kind.name().into(),
                model: model.name().into(),
                centered_oos_loglik: centered,
                runtime_s,
                divergences,
                error,
            }
        })
        .collect();
    Ok(rows)
}

pub fn write_results<W: std::io::Write>(rows: &[ExperimentRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["replication", "dgp", "model", "centered_oos_loglik", "runtime_s", "divergences", "error"])?;
    for r in rows {
        w.write_record([
            r.replication.to_string(),
            r.dgp.clone(),
            r.model.clone(),
            format!("{:.17e}", r.centered_oos_loglik),
            format!("{:.6}", r.runtime_s),
            r.divergences.to_string(),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn covariate_generation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = gen_covariate(10_000, &mut rng);
        assert!(z.iter().all(|v| (0.0..=1.0).contains(v)));
        let mean = z.iter().sum::<f64>() / 1e4;
        let sd = (1.0f64 / 12.0 / 1e4).sqrt();
        assert!((mean - 0.5).abs() < 3.0 * sd);
        assert_eq!(z, gen_covariate(10_000, &mut ChaCha8Rng::seed_from_u64(3)));
    }

    #[test]
    fn moment_formulas() {
        let p = DgpSpec::new(DgpKind::Poisson);
        assert_abs_diff_eq!(p.mean(0.0).unwrap(), 3.3201, epsilon = 1e-4);
        let nb = DgpSpec::new(DgpKind::Negbin);
        let v = nb.variance(0.0).unwrap();
        assert_abs_diff_eq!(v, 1.2f64.exp() + 2.4f64.exp() / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v, 6.9944, epsilon = 2e-4);
        for k in DgpKind::ALL {
            DgpSpec::new(k).validate().unwrap();
        }
    }

    #[test]
    fn negbin_dispersion_ratio() {
        let nb = DgpSpec::new(DgpKind::Negbin);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let z = 0.4;
        let y: Vec<f64> = (0..100_000).map(|_| nb.sample(z, &mut rng).unwrap() as f64).collect();
        let m = y.iter().sum::<f64>() / y.len() as f64;
        let v = y.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (y.len() - 1) as f64;
        let mu = nb.mean(z).unwrap();
        assert!(((v / m) - (1.0 + mu / 3.0)).abs() < 0.05, "{} vs {}", v / m, 1.0 + mu / 3.0);
    }

    #[test]
    fn trafo_empirical_cdf() {
        let dgp = DgpSpec::new(DgpKind::TrafoLogit);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let z = 0.3;
        let n = 20_000;
        let y: Vec<u64> = (0..n).map(|_| dgp.sample(z, &mut rng).unwrap()).collect();
        for k in 0..20u64 {
            let emp = y.iter().filter(|&&v| v <= k).count() as f64 / n as f64;
            let f = raw::cdf(ReferenceDistribution::StandardLogistic, dgp.transformation(k, z));
            let se = (f * (1.0 - f) / n as f64).sqrt().max(1e-4);
            assert!((emp - f).abs() < 3.0 * se, "y = {k}: {emp} vs {f}");
        }
        // log-PMF and CDF agree
        let s: f64 = (0..=12).map(|k| dgp.log_pmf(k, z).exp()).sum();
        assert_abs_diff_eq!(s, dgp.cdf(12, z), epsilon = 1e-12);
    }

    #[test]
    fn trafo_cap_is_enforced() {
        let mut dgp = DgpSpec::new(DgpKind::TrafoLogit);
        if let DgpSpec::Trafo { gamma, .. } = &mut dgp {
            *gamma = vec![-9.0, -8.9, -8.8, -8.7, -8.6, -8.5, -8.4, -8.3];
        }
        assert!(matches!(dgp.validate(), Err(Error::Config { .. })));
        let mut dgp = DgpSpec::new(DgpKind::TrafoProbit);
        if let DgpSpec::Trafo { gamma, .. } = &mut dgp {
            gamma.swap(2, 3);
        }
        assert!(dgp.validate().is_err());
    }

    #[test]
    fn poisson_glm_consistency() {
        let dgp = DgpSpec::new(DgpKind::Poisson);
        let s = draw_sample(&dgp, 5000, 1, 21).unwrap();
        let fit = fit_poisson(&intercept_and(&s.train_z), &s.train_y).unwrap();
        for (b, (se, truth)) in fit.coefficients.iter().zip(fit.standard_errors.iter().zip([1.2, 0.8])) {
            assert!((b - truth).abs() < 3.0 * se, "{b} vs {truth} (se {se})");
        }
    }

    #[test]
    fn intercept_only_poisson_is_log_mean() {
        let y = vec![0, 3, 1, 4, 2, 2, 5];
        let x = DMatrix::from_element(7, 1, 1.0);
        let fit = fit_poisson(&x, &y).unwrap();
        let mean = 17.0f64 / 7.0;
        assert_abs_diff_eq!(fit.coefficients[0], mean.ln(), epsilon = 1e-10);
    }

    #[test]
    fn negbin_glm_recovers_size_and_flags_poisson_limit() {
        let dgp = DgpSpec::new(DgpKind::Negbin);
        let s = draw_sample(&dgp, 4000, 1, 5).unwrap();
        let fit = fit_negbin(&intercept_and(&s.train_z), &s.train_y).unwrap();
        let size = fit.size.unwrap();
        assert!((size - 3.0).abs() < 0.6, "size {size}");
        assert!(!fit.poisson_limit);

        // underdispersed data push the size to the Poisson boundary
        let y: Vec<u64> = (0..400).map(|i| 3 + (i % 3) as u64).collect();
        let z: Vec<f64> = (0..400).map(|i| (i % 7) as f64 / 7.0).collect();
        let fit = fit_negbin(&intercept_and(&z), &y).unwrap();
        assert!(fit.poisson_limit, "size {:?}", fit.size);

        // Poisson data give a large size
        let p = draw_sample(&DgpSpec::new(DgpKind::Poisson), 5000, 1, 2).unwrap();
        let fit = fit_negbin(&intercept_and(&p.train_z), &p.train_y).unwrap();
        assert!(fit.size.unwrap() > 30.0, "size {:?}", fit.size);
    }

    #[test]
    fn oracle_centering() {
        let dgp = DgpSpec::new(DgpKind::TrafoProbit);
        let s = draw_sample(&dgp, 10, 50, 1).unwrap();
        let o = oracle_loglik(&dgp, &s.test_y, &s.test_z);
        assert!(o.is_finite());
        assert_eq!(centered_loglik(o, o), 0.0);
    }

    #[test]
    fn experiment_cardinality() {
        let config = ExperimentConfig {
            replications: 1,
            n_train: 60,
            n_test: 40,
            seed: 4,
            sampler: NutsConfig {
                iterations: 80,
                burnin: 40,
                warmup: 40,
                ..NutsConfig::default()
            },
            ..ExperimentConfig::default()
        };
        let rows = run_experiment(&config).unwrap();
        assert_eq!(rows.len(), 25);
        assert!(rows.iter().all(|r| r.error.is_none() && r.centered_oos_loglik.is_finite()), "{rows:?}");
        let again = run_experiment(&config).unwrap();
        for (a, b) in rows.iter().zip(&again) {
            assert_eq!(a.centered_oos_loglik, b.centered_oos_loglik);
        }
        let mut buf = Vec::new();
        write_results(&rows, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 26);
    }

    #[test]
    fn gap_shrinks_with_training_size() {
        let dgp = DgpSpec::new(DgpKind::TrafoLogit);
        let sampler = NutsConfig {
            iterations: 400,
            burnin: 200,
            warmup: 200,
            ..NutsConfig::default()
        };
        let mut gaps = [0.0; 2];
        for (k, n_train) in [250usize, 1000].into_iter().enumerate() {
            for seed in 0..10 {
                let s = draw_sample(&dgp, n_train, 750, 100 + seed).unwrap();
                let oracle = oracle_loglik(&dgp, &s.test_y, &s.test_z);
                let (ll, _) = fit_and_score(ModelKind::BdctmLogit, &s, &NutsConfig { seed, ..sampler.clone() }).unwrap();
                gaps[k] += centered_loglik(ll, oracle) / 10.0;
            }
        }
        assert!(gaps[0] < 0.0 && gaps[1] < 0.0, "{gaps:?}");
        assert!(gaps[1] > gaps[0], "{gaps:?}");
    }
}
