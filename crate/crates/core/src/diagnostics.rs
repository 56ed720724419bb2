//! Model assessment: rootograms, randomized quantile residuals, proper
//! scoring rules, WAIC and k-fold cross-validation.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Open01};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{build_design, log_mean_exp, Model, ModelSpec, Predictor, UnknownLevels};
use crate::refdist::{raw, ReferenceDistribution};
use crate::sampler::{run_chains, NutsConfig, PosteriorDraws};

/// Tail mass below which the count support is truncated for scoring.
pub const SCORE_TAIL_MASS: f64 = 1e-8;
/// Minimum headroom above the largest observed count.
pub const SCORE_HEADROOM: i64 = 10;
const MAX_SUPPORT: i64 = 1_000_000;
/// Smallest interval width for randomized quantile residuals.
pub const RESIDUAL_MIN_WIDTH: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rootogram {
    pub r: Vec<i64>,
    pub observed: Vec<f64>,
    pub expected: Vec<f64>,
}

impl Rootogram {
    pub fn sqrt_observed(&self) -> Vec<f64> {
        self.observed.iter().map(|v| v.sqrt()).collect()
    }

    pub fn sqrt_expected(&self) -> Vec<f64> {
        self.expected.iter().map(|v| v.sqrt()).collect()
    }
}

/// Observed and expected frequencies of `0..=r_max`.
pub fn rootogram(predictor: &Predictor<'_>, model: &Model, y: &[i64], r_max: i64) -> Result<Rootogram> {
    if !model.is_count() {
        return Err(Error::Unsupported("rootograms need a count response".into()));
    }
    check_rows(predictor, y)?;
    let r: Vec<i64> = (0..=r_max).collect();
    let mut observed = vec![0.0; r.len()];
    for &v in y {
        if (0..=r_max).contains(&v) {
            observed[v as usize] += 1.0;
        }
    }
    let mut expected = vec![0.0; r.len()];
    for i in 0..y.len() {
        for (e, p) in expected.iter_mut().zip(predictor.pmf_range(i, 0, r_max)) {
            *e += p;
        }
    }
    Ok(Rootogram { r, observed, expected })
}

fn check_rows(predictor: &Predictor<'_>, y: &[i64]) -> Result<()> {
    if predictor.n() != y.len() {
        return Err(Error::Dimension(format!(
            "{} responses for {} prediction rows",
            y.len(),
            predictor.n()
        )));
    }
    Ok(())
}

/// `Phi^{-1}(u_i)` with `u_i ~ U(F(y_i - 1), F(y_i))`.
pub fn quantile_residuals<R: Rng>(predictor: &Predictor<'_>, y: &[i64], rng: &mut R) -> Result<Vec<f64>> {
    check_rows(predictor, y)?;
    Ok((0..y.len())
        .map(|i| {
            let mut lo = predictor.cdf(i, (y[i] - 1) as f64);
            let mut hi = predictor.cdf(i, y[i] as f64);
            if hi - lo < RESIDUAL_MIN_WIDTH {
                hi = (lo + RESIDUAL_MIN_WIDTH).min(1.0);
                lo = hi - RESIDUAL_MIN_WIDTH;
            }
            let v: f64 = Open01.sample(rng);
            let u = (lo + (hi - lo) * v).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0);
            raw::quantile(ReferenceDistribution::StandardNormal, u)
        })
        .collect())
}

/// Kolmogorov-Smirnov distance between a sample and a continuous CDF.
pub fn ks_statistic(sample: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut x = sample.to_vec();
    x.sort_by(f64::total_cmp);
    let n = x.len() as f64;
    x.iter()
        .enumerate()
        .map(|(i, &v)| {
            let f = cdf(v);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max)
}

/// Asymptotic p-value of the one-sample KS statistic with Stephens'
/// small-sample correction.
pub fn ks_pvalue(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut p = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        let term = 2.0 * (-1f64).powf(k - 1.0) * (-2.0 * k * k * lambda * lambda).exp();
        p += term;
        if term.abs() < 1e-16 {
            break;
        }
    }
    p.clamp(0.0, 1.0)
}

/// The three proper scores of one forecast.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObservationScore {
    pub logarithmic: f64,
    pub brier: f64,
    pub spherical: f64,
}

/// Scores of a PMF over a finite support at the observed index.
pub fn score_pmf(pmf: &[f64], observed: usize) -> ObservationScore {
    let p_obs = pmf.get(observed).copied().unwrap_or(0.0);
    let mut brier = 0.0;
    let mut norm = 0.0;
    for (k, &p) in pmf.iter().enumerate() {
        let hit = if k == observed { 1.0 } else { 0.0 };
        brier -= (hit - p) * (hit - p);
        norm += p * p;
    }
    if observed >= pmf.len() {
        brier -= 1.0;
    }
    ObservationScore {
        logarithmic: p_obs.ln(),
        brier,
        spherical: if norm > 0.0 { p_obs / norm.sqrt() } else { 0.0 },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waic {
    pub waic: f64,
    pub lppd: f64,
    pub p_waic: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldScore {
    pub fold: usize,
    pub n: usize,
    pub logarithmic: f64,
    pub brier: f64,
    pub spherical: f64,
    /// Held-out rows with a group level unseen in training.
    pub unknown_levels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub n: usize,
    pub logarithmic: f64,
    pub brier: f64,
    pub spherical: f64,
    pub folds: Vec<FoldScore>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub waic: Option<Waic>,
}

impl ScoreReport {
    pub fn from_observations(scores: &[ObservationScore]) -> ScoreReport {
        ScoreReport {
            n: scores.len(),
            logarithmic: scores.iter().map(|s| s.logarithmic).sum(),
            brier: scores.iter().map(|s| s.brier).sum(),
            spherical: scores.iter().map(|s| s.spherical).sum(),
            folds: Vec::new(),
            waic: None,
        }
    }
}

/// Sums the scores of forecasts `pmfs[i]` at observed indices `observed[i]`.
pub fn scores(pmfs: &[Vec<f64>], observed: &[usize]) -> Result<ScoreReport> {
    if pmfs.len() != observed.len() {
        return Err(Error::Dimension(format!(
            "{} forecasts for {} observations",
            pmfs.len(),
            observed.len()
        )));
    }
    if pmfs.iter().flatten().any(|p| !(*p >= 0.0)) {
        return Err(Error::Domain("forecast probabilities must be nonnegative".into()));
    }
    let per: Vec<ObservationScore> = pmfs.iter().zip(observed).map(|(p, &y)| score_pmf(p, y)).collect();
    Ok(ScoreReport::from_observations(&per))
}

/// Predictive PMF of row `i` over the scoring support, and the index of
/// response value `y` within it.
pub fn predictive_pmf(predictor: &Predictor<'_>, model: &Model, i: usize, y: i64, max_observed: i64) -> (Vec<f64>, usize) {
    match model.categories() {
        Some(k) => (predictor.pmf_range(i, 1, k as i64), (y - 1) as usize),
        None => {
            let mut cap = max_observed.max(y) + SCORE_HEADROOM;
            while predictor.tail(i, cap) >= SCORE_TAIL_MASS && cap < MAX_SUPPORT {
                cap = (2 * cap).min(MAX_SUPPORT);
            }
            (predictor.pmf_range(i, 0, cap), y as usize)
        }
    }
}

/// Scores every row of a prediction set.
pub fn score_predictions(predictor: &Predictor<'_>, model: &Model, y: &[i64]) -> Result<ScoreReport> {
    check_rows(predictor, y)?;
    let max_observed = y.iter().copied().max().unwrap_or(0);
    let per: Vec<ObservationScore> = (0..y.len())
        .map(|i| {
            let (pmf, idx) = predictive_pmf(predictor, model, i, y[i], max_observed);
            score_pmf(&pmf, idx)
        })
        .collect();
    Ok(ScoreReport::from_observations(&per))
}

/// WAIC from a draws-by-observations matrix of log-PMF values.
pub fn waic(pointwise: &[Vec<f64>]) -> Result<Waic> {
    let s = pointwise.len();
    if s < 2 {
        return Err(Error::Dimension("WAIC needs at least two draws".into()));
    }
    let n = pointwise[0].len();
    if pointwise.iter().any(|row| row.len() != n) {
        return Err(Error::Dimension("ragged log-PMF matrix".into()));
    }
    let mut lppd = 0.0;
    let mut p_waic = 0.0;
    let mut column = vec![0.0; s];
    for i in 0..n {
        for (c, row) in column.iter_mut().zip(pointwise) {
            *c = row[i];
        }
        lppd += log_mean_exp(&column);
        let mean = column.iter().sum::<f64>() / s as f64;
        p_waic += column.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (s - 1) as f64;
    }
    Ok(Waic {
        waic: -2.0 * (lppd - p_waic),
        lppd,
        p_waic,
    })
}

/// How posterior draws are turned into a predictive distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Predictive {
    /// Mean over draws of the per-draw PMF.
    #[default]
    DrawAveraged,
    /// PMF at the posterior mean of the reparameterized coefficients.
    PlugIn,
}

pub fn predictor_for<'a>(
    model: &'a Model,
    data: &Dataset,
    draws: &PosteriorDraws,
    kind: Predictive,
    policy: UnknownLevels,
) -> Result<Predictor<'a>> {
    match kind {
        Predictive::DrawAveraged => Predictor::from_draws(model, data, &draws.beta, policy),
        Predictive::PlugIn => {
            let mut mean = vec![0.0; model.dim()];
            for b in &draws.beta {
                for (m, g) in mean.iter_mut().zip(model.layout.gamma_from_beta(b)) {
                    *m += g;
                }
            }
            let s = draws.len().max(1) as f64;
            mean.iter_mut().for_each(|m| *m /= s);
            Predictor::from_gammas(model, data, vec![mean], policy)
        }
    }
}

/// Seeded partition of `0..n` into `k` folds of near-equal size.
pub fn fold_assignment(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        fold[i] = pos % k;
    }
    fold
}

/// k-fold cross-validated scores with draw-averaged predictive PMFs.
pub fn kfold_cv(spec: &ModelSpec, data: &Dataset, k: usize, config: &NutsConfig, seed: u64) -> Result<ScoreReport> {
    let n = data.n();
    if k < 2 || n < k {
        return Err(Error::Config {
            path: "k".into(),
            message: format!("need 2 <= k <= n, got k = {k}, n = {n}"),
        });
    }
    let fold = fold_assignment(n, k, seed);
    let folds: Vec<FoldScore> = (0..k)
        .into_par_iter()
        .map(|f| -> Result<FoldScore> {
            let train: Vec<usize> = (0..n).filter(|&i| fold[i] != f).collect();
            let test: Vec<usize> = (0..n).filter(|&i| fold[i] == f).collect();
            let train_data = data.subset(&train);
            let test_data = data.subset(&test);
            let md = build_design(spec, &train_data)?;
            let chains = run_chains(&md, config)?;
            let pooled = PosteriorDraws::pool(&chains);
            let predictor = predictor_for(&md.model, &test_data, &pooled, Predictive::DrawAveraged, UnknownLevels::Zero)?;
            let y = md.model.response_values(&test_data)?;
            let report = score_predictions(&predictor, &md.model, &y)?;
            let unknown = predictor.covariates().unknown_levels.iter().map(|u| u.0).collect::<std::collections::BTreeSet<_>>().len();
            Ok(FoldScore {
                fold: f,
                n: test.len(),
                logarithmic: report.logarithmic,
                brier: report.brier,
                spherical: report.spherical,
                unknown_levels: unknown,
            })
        })
        .collect::<Result<_>>()?;
    Ok(ScoreReport {
        n,
        logarithmic: folds.iter().map(|f| f.logarithmic).sum(),
        brier: folds.iter().map(|f| f.brier).sum(),
        spherical: folds.iter().map(|f| f.spherical).sum(),
        folds,
        waic: None,
    })
}
