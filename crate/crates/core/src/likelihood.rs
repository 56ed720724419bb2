//! Transformation log-likelihood, log-posterior kernel and their gradients
//! with respect to the unconstrained coefficients.

use crate::error::{Error, Result};
use crate::model::{assemble_block_precisions, dot, Design, Model, ModelState, PriorPrecision};
use crate::refdist::{raw, ReferenceDistribution};

#[derive(Debug, Clone, PartialEq)]
pub struct LogPosteriorEvaluation {
    /// Possibly `-inf`.
    pub value: f64,
    pub gradient: Vec<f64>,
    /// Per-observation log-PMF; empty unless requested.
    pub pointwise: Vec<f64>,
}

/// `log(F(upper) - F(lower))` for transformation values, `+inf`/`-inf`
/// standing for the sentinel sides.
#[inline]
pub fn log_pmf_bounds(dist: ReferenceDistribution, upper: f64, lower: f64) -> f64 {
    raw::log_diff_cdf(dist, upper, lower)
}

#[inline]
fn bounds(design: &Design, i: usize, gamma: &[f64]) -> (f64, f64) {
    let u = if design.upper[i] {
        f64::INFINITY
    } else {
        dot(design.current_row(i), gamma)
    };
    let l = if design.lower[i] {
        f64::NEG_INFINITY
    } else {
        dot(design.lagged_row(i), gamma)
    };
    (u, l)
}

/// Log-PMF of observation `i` given reparameterized coefficients.
pub fn log_pmf_obs(design: &Design, i: usize, gamma: &[f64], dist: ReferenceDistribution) -> f64 {
    let (u, l) = bounds(design, i, gamma);
    log_pmf_bounds(dist, u, l)
}

/// Sums the log-likelihood, optionally accumulating the gradient with
/// respect to `gamma` and the per-observation values.
fn accumulate(
    design: &Design,
    gamma: &[f64],
    dist: ReferenceDistribution,
    mut grad_gamma: Option<&mut [f64]>,
    mut pointwise: Option<&mut Vec<f64>>,
) -> f64 {
    let mut total = 0.0;
    for i in 0..design.n {
        let (u, l) = bounds(design, i, gamma);
        let lp = log_pmf_bounds(dist, u, l);
        if let Some(p) = pointwise.as_deref_mut() {
            p.push(lp);
        }
        total += lp;
        if lp == f64::NEG_INFINITY {
            if pointwise.is_none() {
                return f64::NEG_INFINITY;
            }
            continue;
        }
        if let Some(g) = grad_gamma.as_deref_mut() {
            if !design.upper[i] {
                let w = (raw::log_pdf(dist, u) - lp).exp();
                for (gj, cj) in g.iter_mut().zip(design.current_row(i)) {
                    *gj += w * cj;
                }
            }
            if !design.lower[i] {
                let w = (raw::log_pdf(dist, l) - lp).exp();
                for (gj, cj) in g.iter_mut().zip(design.lagged_row(i)) {
                    *gj -= w * cj;
                }
            }
        }
    }
    total
}

pub fn loglik(model: &Model, design: &Design, beta: &[f64]) -> f64 {
    if model.layout.overflows(beta) {
        return f64::NEG_INFINITY;
    }
    let gamma = model.layout.gamma_from_beta(beta);
    accumulate(design, &gamma, model.reference(), None, None)
}

pub fn loglik_pointwise(model: &Model, design: &Design, beta: &[f64]) -> Vec<f64> {
    if model.layout.overflows(beta) {
        return vec![f64::NEG_INFINITY; design.n];
    }
    let gamma = model.layout.gamma_from_beta(beta);
    let mut out = Vec::with_capacity(design.n);
    accumulate(design, &gamma, model.reference(), None, Some(&mut out));
    out
}

/// Score vector; the log-likelihood must be finite at `beta`.
pub fn grad_loglik(model: &Model, design: &Design, beta: &[f64]) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; model.dim()];
    let value = loglik_and_grad(model, design, beta, &mut grad);
    if value == f64::NEG_INFINITY || !value.is_finite() {
        return Err(Error::Domain("gradient requested where the log-likelihood is -inf".into()));
    }
    Ok(grad)
}

/// Writes the score into `grad` and returns the log-likelihood.
pub fn loglik_and_grad(model: &Model, design: &Design, beta: &[f64], grad: &mut [f64]) -> f64 {
    let layout = &model.layout;
    grad.iter_mut().for_each(|g| *g = 0.0);
    if layout.overflows(beta) {
        return f64::NEG_INFINITY;
    }
    let gamma = layout.gamma_from_beta(beta);
    let mut grad_gamma = vec![0.0; layout.dim];
    let value = accumulate(design, &gamma, model.reference(), Some(&mut grad_gamma), None);
    if value.is_finite() {
        layout.pullback_into(beta, &grad_gamma, grad);
    }
    value
}

/// Log-posterior kernel of the coefficients given smoothing variances and
/// anisotropy indices.
pub fn log_posterior(model: &Model, design: &Design, state: &ModelState, pointwise: bool) -> Result<LogPosteriorEvaluation> {
    let precision = assemble_block_precisions(&model.layout, state)?;
    let target = ConditionalPosterior {
        model,
        design,
        precision: &precision,
    };
    let mut gradient = vec![0.0; model.dim()];
    let value = target.log_density_and_grad(&state.beta, &mut gradient);
    let pointwise = if pointwise {
        loglik_pointwise(model, design, &state.beta)
    } else {
        Vec::new()
    };
    Ok(LogPosteriorEvaluation {
        value,
        gradient,
        pointwise,
    })
}

/// A differentiable log-density over a flat parameter vector.
pub trait LogDensity {
    fn dim(&self) -> usize;

    /// Writes the gradient into `grad` and returns the log-density, which
    /// may be `-inf` (the gradient is then unspecified).
    fn log_density_and_grad(&self, x: &[f64], grad: &mut [f64]) -> f64;
}

/// `l(beta) - beta^T K beta / 2` for a fixed prior precision.
#[derive(Debug, Clone, Copy)]
pub struct ConditionalPosterior<'a> {
    pub model: &'a Model,
    pub design: &'a Design,
    pub precision: &'a PriorPrecision,
}

impl LogDensity for ConditionalPosterior<'_> {
    fn dim(&self) -> usize {
        self.model.dim()
    }

    fn log_density_and_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let ll = loglik_and_grad(self.model, self.design, x, grad);
        if !ll.is_finite() {
            return f64::NEG_INFINITY;
        }
        ll + self.precision.log_kernel_and_grad(x, grad)
    }
}

/// Central finite-difference gradient of `f`.
pub fn finite_difference_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut work = x.to_vec();
    (0..x.len())
        .map(|j| {
            work[j] = x[j] + h;
            let up = f(&work);
            work[j] = x[j] - h;
            let dn = f(&work);
            work[j] = x[j];
            (up - dn) / (2.0 * h)
        })
        .collect()
}

/// Largest componentwise `|a - b| / max(1, |b|)`.
pub fn max_relative_error(analytic: &[f64], reference: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(reference)
        .map(|(a, b)| (a - b).abs() / b.abs().max(1.0))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Column, Dataset};
    use crate::model::{build_design, Hyperparameters, ResponseKind, ResponseSpec, TermSpec, UnknownLevels};
    use crate::synthetic::{self, Archetype};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn ordinal_spec(k: usize) -> crate::ModelSpec {
        crate::ModelSpec {
            response: ResponseSpec {
                kind: ResponseKind::Ordinal,
                column: "y".into(),
                reference: ReferenceDistribution::StandardLogistic,
                levels: None,
                categories: Some(k),
            },
            terms: vec![TermSpec::BaselineOrdinal],
        }
    }

    fn count_spec() -> crate::ModelSpec {
        crate::ModelSpec {
            response: ResponseSpec {
                kind: ResponseKind::Count,
                column: "y".into(),
                reference: ReferenceDistribution::StandardLogistic,
                levels: None,
                categories: None,
            },
            terms: vec![TermSpec::BaselineCount {
                dimension: 8,
                transform: Default::default(),
                hyperparameters: Hyperparameters::default(),
            }],
        }
    }

    /// `beta` giving ordinal thresholds `theta`.
    fn thresholds_to_beta(theta: &[f64]) -> Vec<f64> {
        let mut beta = vec![theta[0]];
        for w in theta.windows(2) {
            beta.push((w[1] - w[0]).ln());
        }
        beta
    }

    #[test]
    fn log_pmf_examples() {
        let dist = ReferenceDistribution::StandardLogistic;
        // count y = 0 with h(0) = 0
        let data = Dataset::new().with("y", Column::Count(vec![0, 4])).unwrap();
        let md = build_design(&count_spec(), &data).unwrap();
        let gamma = vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0];
        assert_abs_diff_eq!(log_pmf_obs(&md.design, 0, &gamma, dist), 0.5f64.ln(), epsilon = 1e-15);

        // uniform ordinal thresholds
        let data = Dataset::new().with("y", Column::Ordinal(vec![1, 2, 3])).unwrap();
        let md = build_design(&ordinal_spec(3), &data).unwrap();
        let theta = [dist.quantile(1.0 / 3.0).unwrap(), dist.quantile(2.0 / 3.0).unwrap()];
        for i in 0..3 {
            assert_abs_diff_eq!(log_pmf_obs(&md.design, i, &theta, dist), (1.0f64 / 3.0).ln(), epsilon = 1e-14);
        }
        // reference category against a zero threshold
        assert_abs_diff_eq!(log_pmf_obs(&md.design, 2, &[-1.0, 0.0], dist), 0.5f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn additivity_and_saturated_oracle() {
        let y = vec![1, 1, 2, 3, 3, 3, 2, 1, 3, 3];
        let n = y.len() as f64;
        let data = Dataset::new().with("y", Column::Ordinal(y.clone())).unwrap();
        let md = build_design(&ordinal_spec(3), &data).unwrap();
        let freq: Vec<f64> = (1..=3).map(|r| y.iter().filter(|&&v| v == r).count() as f64 / n).collect();
        let dist = ReferenceDistribution::StandardLogistic;
        let theta = [dist.quantile(freq[0]).unwrap(), dist.quantile(freq[0] + freq[1]).unwrap()];
        let beta = thresholds_to_beta(&theta);
        let oracle: f64 = n * freq.iter().map(|p| p * p.ln()).sum::<f64>();
        assert_abs_diff_eq!(loglik(&md.model, &md.design, &beta), oracle, epsilon = 1e-10);

        // saturated maximum: gradient vanishes
        let g = grad_loglik(&md.model, &md.design, &beta).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-9), "{g:?}");

        // identical rows
        let rows = Dataset::new().with("y", Column::Ordinal(vec![2; 7])).unwrap();
        let one = Dataset::new().with("y", Column::Ordinal(vec![2])).unwrap();
        let m = md.model.clone();
        let d7 = m.design(&rows, UnknownLevels::Error).unwrap();
        let d1 = m.design(&one, UnknownLevels::Error).unwrap();
        assert_abs_diff_eq!(loglik(&m, &d7, &beta), 7.0 * loglik(&m, &d1, &beta), epsilon = 1e-12);
    }

    #[test]
    fn symmetric_two_category_location() {
        // equal counts in two categories: threshold score vanishes at 0
        let data = Dataset::new().with("y", Column::Ordinal(vec![1, 2, 2, 1, 1, 2])).unwrap();
        let md = build_design(&ordinal_spec(2), &data).unwrap();
        for dist in ReferenceDistribution::ALL {
            let mut model = md.model.clone();
            model.spec.response.reference = dist;
            let median = dist.quantile(0.5).unwrap();
            let g = grad_loglik(&model, &md.design, &[median]).unwrap();
            assert_abs_diff_eq!(g[0], 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn empty_data_and_prior_only() {
        let data = Dataset::new().with("y", Column::Count(vec![0, 2, 5])).unwrap();
        let md = build_design(&count_spec(), &data).unwrap();
        let empty = md.design.subset(&[]);
        let beta: Vec<f64> = (0..8).map(|j| 0.1 * j as f64 - 0.3).collect();
        assert_eq!(loglik(&md.model, &empty, &beta), 0.0);
        assert_eq!(grad_loglik(&md.model, &empty, &beta).unwrap(), vec![0.0; 8]);

        // with no data the gradient is -K beta
        let mut state = md.model.layout.initial_state();
        state.beta = beta.clone();
        state.variances = vec![0.5];
        let eval = log_posterior(&md.model, &empty, &state, false).unwrap();
        let k = crate::model::assemble_precision(&md.model.layout, &state).unwrap();
        let kb = &k * nalgebra::DVector::from_vec(beta.clone());
        for j in 0..8 {
            assert_abs_diff_eq!(eval.gradient[j], -kb[j], epsilon = 1e-12);
        }
        assert_abs_diff_eq!(eval.value, -0.5 * beta.iter().zip(kb.iter()).map(|(a, b)| a * b).sum::<f64>(), epsilon = 1e-12);

        // beta = 0: prior contributes nothing
        state.beta = vec![0.0; 8];
        let eval = log_posterior(&md.model, &md.design, &state, true).unwrap();
        assert_abs_diff_eq!(eval.value, loglik(&md.model, &md.design, &state.beta), epsilon = 1e-14);
        assert_eq!(eval.gradient, grad_loglik(&md.model, &md.design, &state.beta).unwrap());
        assert_eq!(eval.pointwise.len(), 3);
    }

    #[test]
    fn flat_prior_equals_loglik() {
        let (spec, data) = synthetic::archetype(Archetype::ProportionalOrdinal, 40, 3);
        let md = build_design(&spec, &data).unwrap();
        let mut state = md.model.layout.initial_state();
        state.beta = vec![-0.4, 0.1, 0.3];
        let eval = log_posterior(&md.model, &md.design, &state, false).unwrap();
        assert_eq!(eval.value, loglik(&md.model, &md.design, &state.beta));
        assert_eq!(eval.gradient, grad_loglik(&md.model, &md.design, &state.beta).unwrap());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let jitter = Normal::new(0.0, 0.5).unwrap();
        for arch in Archetype::ALL {
            let (spec, data) = synthetic::archetype(arch, 60, 5);
            let md = build_design(&spec, &data).unwrap();
            let mut checked = 0;
            while checked < 10 {
                let mut state = md.model.layout.initial_state();
                state.beta = (0..md.model.dim()).map(|_| jitter.sample(&mut rng)).collect();
                state.variances.iter_mut().for_each(|t| *t = 0.5 + jitter.sample(&mut rng).abs());
                let eval = log_posterior(&md.model, &md.design, &state, false).unwrap();
                if !eval.value.is_finite() {
                    continue;
                }
                let precision = assemble_block_precisions(&md.model.layout, &state).unwrap();
                let f = |b: &[f64]| loglik(&md.model, &md.design, b) + precision.log_kernel(b);
                let fd = finite_difference_gradient(f, &state.beta, 1e-6);
                let err = max_relative_error(&eval.gradient, &fd);
                assert!(err < 1e-6, "{arch:?}: relative error {err}");
                checked += 1;
            }
        }
    }

    #[test]
    fn count_pmf_plus_tail_is_one() {
        let (spec, data) = synthetic::archetype(Archetype::HurdleCount, 50, 2);
        let md = build_design(&spec, &data).unwrap();
        let beta: Vec<f64> = (0..md.model.dim()).map(|j| 0.05 * j as f64 - 0.2).collect();
        let p = crate::model::Predictor::from_draws(&md.model, &data, &[beta], UnknownLevels::Error).unwrap();
        for i in 0..5 {
            let s: f64 = p.pmf_range(i, 0, 60).iter().sum::<f64>() + p.tail(i, 60);
            assert_abs_diff_eq!(s, 1.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn stable_in_far_tails() {
        for dist in ReferenceDistribution::ALL {
            for &(u, l) in &[(-30.0, -31.0), (31.0, 30.0), (-29.0, -30.0), (-30.0, f64::NEG_INFINITY), (f64::INFINITY, 30.0)] {
                let v = log_pmf_bounds(dist, u, l);
                // true probability, evaluated directly where it is representable
                let direct = (raw::cdf(dist, u) - raw::cdf(dist, l)).ln();
                if direct.is_finite() && direct > -700.0 {
                    assert!(v.is_finite(), "{dist:?} ({u}, {l}) -> {v}");
                    if direct > -30.0 {
                        assert_abs_diff_eq!(v, direct, epsilon = 1e-6 * direct.abs().max(1.0));
                    }
                } else {
                    let lsf = raw::log_sf(dist, l);
                    let lcdf = raw::log_cdf(dist, u);
                    if lsf > -690.0 && lcdf > -690.0 {
                        assert!(v.is_finite(), "{dist:?} ({u}, {l}) -> {v}");
                    }
                }
            }
        }
    }

    #[test]
    fn non_positive_cell_is_neg_infinity() {
        for dist in ReferenceDistribution::ALL {
            assert_eq!(log_pmf_bounds(dist, 0.3, 0.3), f64::NEG_INFINITY);
            assert_eq!(log_pmf_bounds(dist, -1.0, 0.5), f64::NEG_INFINITY);
        }
    }

    proptest! {
        #[test]
        fn permutation_invariance(seed in 0u64..1000, shift in 0usize..40) {
            let (spec, data) = synthetic::archetype(Archetype::ShiftCount, 40, seed);
            let md = build_design(&spec, &data).unwrap();
            let rows: Vec<usize> = (0..40).map(|i| (i * 7 + shift) % 40).collect();
            let perm = md.design.subset(&rows);
            let beta: Vec<f64> = (0..md.model.dim()).map(|j| ((j as u64 * 31 + seed) % 13) as f64 / 13.0 - 0.5).collect();
            let a = loglik(&md.model, &md.design, &beta);
            let b = loglik(&md.model, &perm, &beta);
            prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0));
        }
    }
}
